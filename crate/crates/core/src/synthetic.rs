//! Zipf-distributed class-bigram corpora with a matching vocabulary.
//!
//! Words are distinct consonant-vowel strings of equal length, each stored in
//! the vocabulary as `"▁" + word`, so every word tokenizes to exactly one id.
//! Every word belongs to a word class named after a UPOS tag. A few small
//! closed classes (function words) hold the first words; the remaining words
//! are dealt round-robin to the open classes. Text is a class-level bigram
//! chain: each class has a small fixed set of successor classes, and within a
//! class words are drawn with Zipf weights by their position in the class.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::vocab::{reserved_entries, Vocabulary, BOUNDARY, RESERVED};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

pub const CLOSED_TAGS: [&str; 8] = ["DET", "ADP", "PRON", "CCONJ", "AUX", "PART", "SCONJ", "NUM"];
pub const OPEN_TAGS: [&str; 8] = [
    "NOUN", "VERB", "ADJ", "ADV", "PROPN", "INTJ", "SYM", "PUNCT",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_words: usize,
    pub n_tokens: usize,
    /// Words per document (one line of text).
    pub doc_len: usize,
    /// At most 8.
    pub closed_classes: usize,
    /// Words per closed class.
    pub closed_size: usize,
    /// At most 8.
    pub open_classes: usize,
    /// Successor classes per class.
    pub class_successors: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_words: 2000 - RESERVED,
            n_tokens: 100_000,
            doc_len: 64,
            closed_classes: 4,
            closed_size: 6,
            open_classes: 4,
            class_successors: 2,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    /// One document per line, words separated by single spaces.
    pub documents: Vec<String>,
    pub sequences: Vec<TokenSequence>,
    /// Class of each word, indexed by token id minus the reserved block.
    /// Closed classes come first.
    pub word_class: Vec<usize>,
    pub class_tags: Vec<&'static str>,
}

impl SyntheticCorpus {
    /// `(token id, tag)` for every word, for building a POS map.
    pub fn pos_pairs(&self) -> Vec<(u32, &'static str)> {
        self.word_class
            .iter()
            .enumerate()
            .map(|(i, &c)| ((RESERVED + i) as u32, self.class_tags[c]))
            .collect()
    }
}

/// Word `i`, spelled with a fixed number of syllables so no word is a prefix
/// of another.
fn word(i: usize, syllables: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut n = i;
    let mut s = String::with_capacity(2 * syllables);
    for _ in 0..syllables {
        let d = n % base;
        n /= base;
        s.push(CONSONANTS[d / VOWELS.len()] as char);
        s.push(VOWELS[d % VOWELS.len()] as char);
    }
    s
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    let c = config;
    let n_classes = c.closed_classes + c.open_classes;
    let n_closed_words = c.closed_classes * c.closed_size;
    if c.open_classes == 0
        || c.closed_classes > CLOSED_TAGS.len()
        || c.open_classes > OPEN_TAGS.len()
        || c.n_words < n_closed_words + c.open_classes
        || c.doc_len == 0
        || c.class_successors == 0
        || c.class_successors > n_classes
    {
        return Err(Error::config("invalid synthetic corpus settings"));
    }
    let base = CONSONANTS.len() * VOWELS.len();
    let mut syllables = 1;
    while base.pow(syllables as u32) < c.n_words {
        syllables += 1;
    }
    let words: Vec<String> = (0..c.n_words).map(|i| word(i, syllables)).collect();
    let mut entries = reserved_entries();
    entries.extend(words.iter().map(|w| format!("{BOUNDARY}{w}")));
    let vocab = Vocabulary::from_entries(entries)?;

    let mut rng = stream_rng(c.seed, Stream::Synthetic);
    let word_class: Vec<usize> = (0..c.n_words)
        .map(|i| {
            if i < n_closed_words {
                i / c.closed_size
            } else {
                c.closed_classes + (i - n_closed_words) % c.open_classes
            }
        })
        .collect();
    let class_tags: Vec<&'static str> = CLOSED_TAGS[..c.closed_classes]
        .iter()
        .chain(&OPEN_TAGS[..c.open_classes])
        .copied()
        .collect();
    let mut members = vec![Vec::new(); n_classes];
    for (w, &k) in word_class.iter().enumerate() {
        members[k].push(w);
    }
    let within: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            WeightedIndex::new((0..m.len()).map(|r| 1.0 / ((r + 1) as f64).powf(c.zipf_exponent)))
                .expect("non-empty class")
        })
        .collect();
    let next_classes: Vec<Vec<usize>> = (0..n_classes)
        .map(|_| {
            let mut all: Vec<usize> = (0..n_classes).collect();
            for i in 0..c.class_successors {
                let j = rng.random_range(i..n_classes);
                all.swap(i, j);
            }
            all.truncate(c.class_successors);
            all
        })
        .collect();

    let mut documents = Vec::new();
    let mut sequences = Vec::new();
    let mut produced = 0;
    while produced < c.n_tokens {
        let len = c.doc_len.min(c.n_tokens - produced);
        let mut ids = Vec::with_capacity(len);
        let mut class = rng.random_range(0..n_classes);
        for _ in 0..len {
            let w = members[class][within[class].sample(&mut rng)];
            ids.push((RESERVED + w) as u32);
            class = next_classes[class][rng.random_range(0..c.class_successors)];
        }
        let text = ids
            .iter()
            .map(|&id| words[id as usize - RESERVED].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        documents.push(text);
        sequences.push(TokenSequence::new(ids, sequences.len() as u32));
        produced += len;
    }
    Ok(SyntheticCorpus {
        vocab,
        documents,
        sequences,
        word_class,
        class_tags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_tokenizes_back_to_ids() {
        let s = generate(&SyntheticConfig {
            n_words: 300,
            n_tokens: 2000,
            doc_len: 50,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_eq!(s.vocab.size(), RESERVED + 300);
        assert_eq!(s.sequences.iter().map(|q| q.len()).sum::<usize>(), 2000);
        for (doc, seq) in s.documents.iter().zip(&s.sequences) {
            assert_eq!(s.vocab.tokenize(doc), seq.ids);
        }
    }

    #[test]
    fn deterministic_and_zipfian() {
        let c = SyntheticConfig {
            n_words: 200,
            n_tokens: 20_000,
            ..SyntheticConfig::default()
        };
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a.documents, b.documents);
        let mut counts = vec![0usize; 200];
        for s in &a.sequences {
            for &id in &s.ids {
                counts[id as usize - RESERVED] += 1;
            }
        }
        // function words dominate the open-class tail
        let head: usize = counts[..24].iter().sum();
        let tail: usize = counts[176..].iter().sum();
        assert!(head > 10 * tail, "head {head} tail {tail}");
    }

    #[test]
    fn class_successions_are_sparse() {
        let c = SyntheticConfig {
            n_words: 100,
            n_tokens: 5000,
            ..SyntheticConfig::default()
        };
        let s = generate(&c).unwrap();
        let n = c.closed_classes + c.open_classes;
        let mut seen = vec![vec![false; n]; n];
        for q in &s.sequences {
            for w in q.ids.windows(2) {
                let a = s.word_class[w[0] as usize - RESERVED];
                let b = s.word_class[w[1] as usize - RESERVED];
                seen[a][b] = true;
            }
        }
        for row in &seen {
            assert!(row.iter().filter(|&&x| x).count() <= c.class_successors);
        }
    }
}
