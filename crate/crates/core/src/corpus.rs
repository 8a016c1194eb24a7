//! Corpus ingestion, fixed-length chunking and frequency ranks.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Index of the source document (line number in the corpus file).
    pub doc_id: u32,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, doc_id: u32) -> Self {
        TokenSequence { ids, doc_id }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tokenizes a corpus file, one document per line.
///
/// Returns one unchunked sequence per line; empty lines yield empty sequences
/// so that `doc_id` always equals the line index.
pub fn ingest_corpus(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(ingest_text(&text, vocab))
}

pub fn ingest_text(text: &str, vocab: &Vocabulary) -> Vec<TokenSequence> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| vocab.tokenize_sequence(l.strip_suffix('\r').unwrap_or(l), i as u32))
        .collect()
}

/// Splits each document into contiguous chunks of at most `len` ids.
///
/// The last partial chunk of a document is kept; empty documents produce
/// nothing. Chunks never straddle documents.
pub fn chunk(documents: &[TokenSequence], len: usize) -> Vec<TokenSequence> {
    assert!(len > 0, "chunk length must be positive");
    documents
        .iter()
        .flat_map(|d| {
            d.ids
                .chunks(len)
                .map(move |c| TokenSequence::new(c.to_vec(), d.doc_id))
        })
        .collect()
}

/// Writes sequences as whitespace-separated decimal ids, one per line.
pub fn write_pretokenized(path: impl AsRef<Path>, seqs: &[TokenSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for s in seqs {
            let mut first = true;
            for id in &s.ids {
                if !first {
                    w.write_all(b" ")?;
                }
                write!(w, "{id}")?;
                first = false;
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads a pre-tokenized corpus, validating every id against `vocab`.
///
/// PAD and MASK ids are rejected since raw sequences never contain them.
pub fn read_pretokenized(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let sp = vocab.specials();
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut ids = Vec::new();
        for tok in line.split_whitespace() {
            let id: u32 = tok.parse().map_err(|_| {
                Error::format(
                    "pre-tokenized corpus",
                    format!("line {}: bad id {tok:?}", lineno + 1),
                )
            })?;
            if id as usize >= vocab.size() {
                return Err(Error::IdOutOfRange {
                    id,
                    size: vocab.size(),
                });
            }
            if id == sp.pad || id == sp.mask {
                return Err(Error::format(
                    "pre-tokenized corpus",
                    format!("line {}: reserved id {id} in raw sequence", lineno + 1),
                ));
            }
            ids.push(id);
        }
        out.push(TokenSequence::new(ids, lineno as u32));
    }
    Ok(out)
}

/// Corpus frequency counts and the induced rank order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyRanking {
    /// `rank_of[id]`, 0 = most frequent.
    pub rank_of: Vec<u32>,
    /// `counts[id]`, corpus occurrences.
    pub counts: Vec<u64>,
}

impl FrequencyRanking {
    /// Ranks ids by descending count, ties broken by ascending id. Unseen ids
    /// rank after all observed ones (they tie at zero, so the same rule covers
    /// them).
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let mut order: Vec<u32> = (0..counts.len() as u32).collect();
        order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
        let mut rank_of = vec![0u32; counts.len()];
        for (rank, &id) in order.iter().enumerate() {
            rank_of[id as usize] = rank as u32;
        }
        FrequencyRanking { rank_of, counts }
    }

    pub fn compute(corpus: &[TokenSequence], vocab_size: usize) -> Self {
        let mut counts = vec![0u64; vocab_size];
        for s in corpus {
            for &id in &s.ids {
                counts[id as usize] += 1;
            }
        }
        Self::from_counts(counts)
    }

    pub fn len(&self) -> usize {
        self.rank_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank_of.is_empty()
    }

    /// Ids in rank order.
    pub fn ids_by_rank(&self) -> Vec<u32> {
        let mut ids = vec![0u32; self.rank_of.len()];
        for (id, &r) in self.rank_of.iter().enumerate() {
            ids[r as usize] = id as u32;
        }
        ids
    }

    /// TSV with columns `token_id`, `rank`, `count`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("token_id\trank\tcount\n");
        for (id, (&r, &c)) in self.rank_of.iter().zip(&self.counts).enumerate() {
            out.push_str(&format!("{id}\t{r}\t{c}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::format("frequency table", format!("line {}", i + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let id: usize = cols[0].parse().map_err(|_| bad())?;
            let c: u64 = cols[2].parse().map_err(|_| bad())?;
            if id != counts.len() {
                return Err(bad());
            }
            counts.push(c);
        }
        let ranking = Self::from_counts(counts);
        // Stored ranks must agree with the tie rule.
        for (i, line) in text.lines().enumerate().skip(1) {
            let r: u32 = line
                .split('\t')
                .nth(1)
                .unwrap()
                .parse()
                .map_err(|_| Error::format("frequency table", format!("line {}", i + 1)))?;
            if ranking.rank_of[i - 1] != r {
                return Err(Error::format(
                    "frequency table",
                    format!("line {}: rank {r} inconsistent with counts", i + 1),
                ));
            }
        }
        Ok(ranking)
    }
}
