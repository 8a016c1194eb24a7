//! Vocabulary files and greedy longest-match segmentation with byte fallback.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

/// Word-boundary marker prefixed to word-initial pieces.
pub const BOUNDARY: char = '▁';

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Number of reserved entries every vocabulary carries (5 specials + 256 bytes).
pub const RESERVED: usize = 5 + 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub mask: u32,
    pub bos: u32,
    pub eos: u32,
}

impl SpecialIds {
    pub fn all(&self) -> [u32; 5] {
        [self.pad, self.unk, self.mask, self.bos, self.eos]
    }
}

/// What a vocabulary entry is, as far as masking and feature extraction care.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Special,
    Byte(u8),
    Normal,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    kinds: Vec<EntryKind>,
    index: HashMap<String, u32>,
    /// Normal entries only; reserved spellings never match text.
    pieces: HashMap<String, u32>,
    specials: SpecialIds,
    byte_ids: [u32; 256],
    max_piece_bytes: usize,
}

pub fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Vocabulary {
    /// Builds a vocabulary from entries in id order.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries: Vec<String> = entries.into_iter().map(Into::into).collect();
        let mut seen: HashMap<&str, usize> = HashMap::with_capacity(entries.len());
        for (line, e) in entries.iter().enumerate() {
            if let Some(&first) = seen.get(e.as_str()) {
                return Err(Error::DuplicateToken {
                    token: e.clone(),
                    first: first + 1,
                    second: line + 1,
                });
            }
            seen.insert(e, line);
        }

        let find = |name: &str| -> Result<u32> {
            seen.get(name)
                .map(|&i| i as u32)
                .ok_or_else(|| Error::MissingSpecial(name.to_string()))
        };
        let specials = SpecialIds {
            pad: find(PAD)?,
            unk: find(UNK)?,
            mask: find(MASK)?,
            bos: find(BOS)?,
            eos: find(EOS)?,
        };
        let mut byte_ids = [0u32; 256];
        for (b, slot) in byte_ids.iter_mut().enumerate() {
            *slot = find(&byte_token(b as u8))?;
        }

        let mut kinds = vec![EntryKind::Normal; entries.len()];
        for id in specials.all() {
            kinds[id as usize] = EntryKind::Special;
        }
        for (b, &id) in byte_ids.iter().enumerate() {
            kinds[id as usize] = EntryKind::Byte(b as u8);
        }

        let index: HashMap<String, u32> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i as u32))
            .collect();
        let mut pieces = HashMap::new();
        let mut max_piece_bytes = 0;
        for (id, e) in entries.iter().enumerate() {
            if kinds[id] != EntryKind::Normal {
                continue;
            }
            if e.is_empty() {
                return Err(Error::InvalidVocab(format!(
                    "empty entry on line {}",
                    id + 1
                )));
            }
            max_piece_bytes = max_piece_bytes.max(e.len());
            pieces.insert(e.clone(), id as u32);
        }

        Ok(Vocabulary {
            entries,
            kinds,
            index,
            pieces,
            specials,
            byte_ids,
            max_piece_bytes,
        })
    }

    /// Loads a vocabulary file: one entry per line, id = zero-based line index.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
        // A trailing newline does not introduce an empty entry.
        let mut entries: Vec<&str> = entries.collect();
        if entries.last() == Some(&"") {
            entries.pop();
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.entries[id as usize]
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn kind(&self, id: u32) -> EntryKind {
        self.kinds[id as usize]
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn byte_id(&self, b: u8) -> u32 {
        self.byte_ids[b as usize]
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.kinds[id as usize] == EntryKind::Special
    }

    /// Special-token flags indexed by id.
    pub fn special_mask(&self) -> Vec<bool> {
        self.kinds
            .iter()
            .map(|k| *k == EntryKind::Special)
            .collect()
    }

    /// Ids eligible for masking and random replacement.
    pub fn non_special_ids(&self) -> Vec<u32> {
        (0..self.size() as u32)
            .filter(|&i| !self.is_special(i))
            .collect()
    }

    pub fn non_special_count(&self) -> usize {
        self.size() - 5
    }

    /// Segments `text` into ids.
    ///
    /// Non-empty input gets a leading boundary marker and every space becomes
    /// [`BOUNDARY`]. At each position the longest matching normal entry wins;
    /// when none matches, the character is emitted as byte-fallback ids. A
    /// boundary marker that must fall back is emitted as the space byte, and a
    /// literal `▁` in the input always falls back to its UTF-8 bytes, so
    /// [`Vocabulary::detokenize`] is an exact inverse.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        if text.is_empty() {
            return ids;
        }
        let mut norm = String::with_capacity(text.len() + 3);
        // Byte offsets (into `norm`) of literal boundary characters.
        let mut literal = Vec::new();
        norm.push(BOUNDARY);
        for ch in text.chars() {
            match ch {
                ' ' => norm.push(BOUNDARY),
                BOUNDARY => {
                    literal.push(norm.len());
                    norm.push(BOUNDARY);
                }
                c => norm.push(c),
            }
        }

        let bytes = norm.as_bytes();
        let mut next_literal = literal.iter().copied().peekable();
        let mut i = 0;
        while i < norm.len() {
            while next_literal.peek().is_some_and(|&p| p < i) {
                next_literal.next();
            }
            let ch = norm[i..].chars().next().unwrap();
            let ch_len = ch.len_utf8();
            if next_literal.peek() == Some(&i) {
                for &b in &bytes[i..i + ch_len] {
                    ids.push(self.byte_ids[b as usize]);
                }
                i += ch_len;
                continue;
            }
            let limit = next_literal
                .peek()
                .copied()
                .unwrap_or(norm.len())
                .min(i + self.max_piece_bytes);
            let mut matched = None;
            let mut end = limit;
            while end > i {
                if norm.is_char_boundary(end) {
                    if let Some(&id) = self.pieces.get(&norm[i..end]) {
                        matched = Some((id, end));
                        break;
                    }
                }
                end -= 1;
            }
            match matched {
                Some((id, end)) => {
                    ids.push(id);
                    i = end;
                }
                None => {
                    if ch == BOUNDARY {
                        ids.push(self.byte_ids[b' ' as usize]);
                    } else {
                        for &b in &bytes[i..i + ch_len] {
                            ids.push(self.byte_ids[b as usize]);
                        }
                    }
                    i += ch_len;
                }
            }
        }
        ids
    }

    pub fn tokenize_sequence(&self, text: &str, doc_id: u32) -> TokenSequence {
        TokenSequence {
            ids: self.tokenize(text),
            doc_id,
        }
    }

    /// Inverse of [`Vocabulary::tokenize`]. Special tokens are skipped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut buf: Vec<u8> = Vec::new();
        for &id in ids {
            match self.kinds[id as usize] {
                EntryKind::Special => {}
                EntryKind::Byte(b) => buf.push(b),
                EntryKind::Normal => {
                    for ch in self.entries[id as usize].chars() {
                        if ch == BOUNDARY {
                            buf.push(b' ');
                        } else {
                            let mut tmp = [0u8; 4];
                            buf.extend_from_slice(ch.encode_utf8(&mut tmp).as_bytes());
                        }
                    }
                }
            }
        }
        if buf.first() == Some(&b' ') {
            buf.remove(0);
        }
        match String::from_utf8(buf) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        }
    }
}

/// Reserved entries in canonical order: the five specials, then `<0x00>`..`<0xFF>`.
pub fn reserved_entries() -> Vec<String> {
    let mut v: Vec<String> = [PAD, UNK, MASK, BOS, EOS]
        .iter()
        .map(|s| s.to_string())
        .collect();
    v.extend((0..=255u8).map(byte_token));
    v
}
