//! Sub-token membership features.
//!
//! For every vocabulary entry we record which other entries occur as proper
//! contiguous substrings of its surface form (boundary marker included). The
//! result is a fixed sparse binary matrix, built once and looked up per
//! token during training.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::binio::*;
use crate::error::{Error, Result};
use crate::vocab::{EntryKind, Vocabulary};

pub const NHOT_MAGIC: [u8; 8] = *b"AMLMNHOT";
pub const NHOT_VERSION: u32 = 1;

const WHAT: &str = "n-hot table";

/// Compressed-row sparse binary table: row `i` is the sorted feature id list of
/// token `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NHotTable {
    offsets: Vec<usize>,
    features: Vec<u32>,
}

impl NHotTable {
    pub fn build(vocab: &Vocabulary) -> Self {
        let eligible = |id: u32| vocab.kind(id) == EntryKind::Normal;
        let lookup: HashMap<&str, u32> = (0..vocab.size() as u32)
            .filter(|&i| eligible(i))
            .map(|i| (vocab.token(i), i))
            .collect();
        let max_len = lookup.keys().map(|s| s.len()).max().unwrap_or(0);

        let rows: Vec<Vec<u32>> = (0..vocab.size() as u32)
            .into_par_iter()
            .map(|id| {
                if !eligible(id) {
                    return Vec::new();
                }
                proper_substring_ids(vocab.token(id), &lookup, max_len)
            })
            .collect();
        Self::from_rows(rows)
    }

    pub fn from_rows(rows: Vec<Vec<u32>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut features = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        for r in rows {
            features.extend_from_slice(&r);
            offsets.push(features.len());
        }
        NHotTable { offsets, features }
    }

    pub fn vocab_size(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_features(&self) -> usize {
        self.features.len()
    }

    /// Sorted feature ids of `id`.
    pub fn encode(&self, id: u32) -> Result<&[u32]> {
        let i = id as usize;
        if i >= self.vocab_size() {
            return Err(Error::IdOutOfRange {
                id,
                size: self.vocab_size(),
            });
        }
        Ok(self.row(i))
    }

    /// Unchecked row access for hot loops; panics when out of range.
    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.features[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn check_compatible(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab_size() != vocab.size() {
            return Err(Error::Incompatible {
                what: "n-hot table vocabulary size",
                expected: vocab.size().to_string(),
                found: self.vocab_size().to_string(),
            });
        }
        Ok(())
    }

    /// Writes the table:
    ///
    /// ```text
    /// magic "AMLMNHOT" | version u32 | vocab_size u64 | total u64
    /// offsets (vocab_size + 1) × u64 | features total × u32
    /// ```
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write(&mut w).map_err(|e| Error::io(path, e))
    }

    fn write<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&NHOT_MAGIC)?;
        write_u32(w, NHOT_VERSION)?;
        write_u64(w, self.vocab_size() as u64)?;
        write_u64(w, self.features.len() as u64)?;
        for &o in &self.offsets {
            write_u64(w, o as u64)?;
        }
        for &f in &self.features {
            write_u32(w, f)?;
        }
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let t = Self::read(&mut r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(WHAT, "trailing bytes"));
        }
        Ok(t)
    }

    /// Loads and checks the table against `vocab`.
    pub fn load_for(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Self> {
        let t = Self::load(path)?;
        t.check_compatible(vocab)?;
        Ok(t)
    }

    fn read<R: Read>(r: &mut R) -> Result<Self> {
        let e = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::format(WHAT, "truncated file")
            } else {
                Error::format(WHAT, e.to_string())
            }
        };
        let magic = read_magic(r).map_err(e)?;
        if magic != NHOT_MAGIC {
            return Err(Error::format(WHAT, format!("bad magic {magic:?}")));
        }
        let version = read_u32(r).map_err(e)?;
        if version != NHOT_VERSION {
            return Err(Error::Incompatible {
                what: "n-hot table version",
                expected: NHOT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let n = read_u64(r).map_err(e)? as usize;
        let total = read_u64(r).map_err(e)? as usize;
        if n > (1 << 28) || total > (1 << 34) {
            return Err(Error::format(WHAT, "implausible header sizes"));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            offsets.push(read_u64(r).map_err(e)? as usize);
        }
        if offsets[0] != 0 || offsets[n] != total || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::format(WHAT, "inconsistent offset index"));
        }
        let mut features = Vec::with_capacity(total);
        for _ in 0..total {
            features.push(read_u32(r).map_err(e)?);
        }
        let t = NHotTable { offsets, features };
        for i in 0..n {
            let row = t.row(i);
            if row.iter().any(|&f| f as usize >= n || f as usize == i)
                || row.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(Error::format(
                    WHAT,
                    format!("invalid feature list for token {i}"),
                ));
            }
        }
        Ok(t)
    }
}

/// Ids of `lookup` entries that occur as proper substrings of `s`, sorted and
/// deduplicated. Substrings are taken on character boundaries and are at most
/// `max_len` bytes long.
fn proper_substring_ids(s: &str, lookup: &HashMap<&str, u32>, max_len: usize) -> Vec<u32> {
    let bounds: Vec<usize> = s
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(s.len()))
        .collect();
    let mut out = Vec::new();
    for (a, &start) in bounds.iter().enumerate() {
        for &end in &bounds[a + 1..] {
            if end - start > max_len {
                break;
            }
            if start == 0 && end == s.len() {
                continue;
            }
            if let Some(&id) = lookup.get(&s[start..end]) {
                out.push(id);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}
