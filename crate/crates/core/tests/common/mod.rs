#![allow(dead_code)]

use amlm_core::vocab::{reserved_entries, EntryKind};
use amlm_core::Vocabulary;
use rand::Rng;

/// Alphabet for random vocabularies: short enough that substrings collide
/// often, with the boundary marker and one non-ASCII letter.
pub const ALPHABET: &[char] = &['a', 'b', 'c', 'd', '▁', 'é'];

/// Reserved block plus `n` distinct random entries of 1..=12 characters.
pub fn random_vocab<R: Rng>(rng: &mut R, n: usize) -> Vocabulary {
    let mut entries = reserved_entries();
    let mut seen = std::collections::HashSet::new();
    while seen.len() < n {
        let len = rng.random_range(1..=12);
        let s: String = (0..len)
            .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())])
            .collect();
        if seen.insert(s.clone()) {
            entries.push(s);
        }
    }
    Vocabulary::from_entries(entries).unwrap()
}

/// Features by pairwise containment: `j` is a feature of `i` iff both are
/// ordinary entries, `j != i` and entry `i` contains entry `j`.
pub fn nhot_by_containment(v: &Vocabulary) -> Vec<Vec<u32>> {
    let normal: Vec<u32> = (0..v.size() as u32)
        .filter(|&i| v.kind(i) == EntryKind::Normal)
        .collect();
    (0..v.size() as u32)
        .map(|i| {
            if v.kind(i) != EntryKind::Normal {
                return Vec::new();
            }
            let s = v.token(i);
            normal
                .iter()
                .copied()
                .filter(|&j| j != i && s.contains(v.token(j)))
                .collect()
        })
        .collect()
}

/// A small synthetic corpus and a config for a tiny model on it.
pub fn tiny_setup(
    steps: u64,
    timestep_batches: u64,
) -> (
    amlm_core::TrainConfig,
    amlm_core::synthetic::SyntheticCorpus,
) {
    use amlm_core::synthetic::{generate, SyntheticConfig};
    let corpus = generate(&SyntheticConfig {
        n_words: 300,
        n_tokens: 640,
        doc_len: 32,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut c = amlm_core::TrainConfig::default();
    for (k, v) in [
        ("d_model", "16"),
        ("n_layers", "1"),
        ("n_heads", "2"),
        ("d_ff", "32"),
        ("max_len", "32"),
        ("seq_len", "16"),
        ("batch_size", "4"),
        ("bin_size", "50"),
        ("lr", "0.005"),
    ] {
        c.set(k, v).unwrap();
    }
    c.set("steps", &steps.to_string()).unwrap();
    c.set("timestep_batches", &timestep_batches.to_string())
        .unwrap();
    (c, corpus)
}
