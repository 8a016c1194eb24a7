mod common;

use amlm_core::rng::{stream_rng, Stream};
use amlm_core::vocab::reserved_entries;
use amlm_core::{NHotTable, Vocabulary};
use proptest::prelude::*;

use common::{nhot_by_containment, random_vocab};

fn table_rows(t: &NHotTable) -> Vec<Vec<u32>> {
    (0..t.vocab_size()).map(|i| t.row(i).to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn build_matches_pairwise_containment(seed in any::<u64>(), n in 50usize..=500) {
        let v = random_vocab(&mut stream_rng(seed, Stream::Synthetic), n);
        let t = NHotTable::build(&v);
        prop_assert_eq!(table_rows(&t), nhot_by_containment(&v));
    }

    #[test]
    fn features_are_transitive(seed in any::<u64>(), n in 50usize..=300) {
        let v = random_vocab(&mut stream_rng(seed, Stream::Synthetic), n);
        let t = NHotTable::build(&v);
        for i in 0..v.size() {
            for &j in t.row(i) {
                for &k in t.row(j as usize) {
                    prop_assert!(t.row(i).binary_search(&k).is_ok(), "{} -> {} -> {}", i, j, k);
                }
            }
        }
    }

    #[test]
    fn rows_are_sorted_and_never_self(seed in any::<u64>(), n in 50usize..=200) {
        let v = random_vocab(&mut stream_rng(seed, Stream::Synthetic), n);
        let t = NHotTable::build(&v);
        for i in 0..v.size() {
            let r = t.row(i);
            prop_assert!(r.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(!r.contains(&(i as u32)));
        }
    }
}

#[test]
fn doing_contains_its_listed_pieces() {
    let mut e = reserved_entries();
    e.extend(["▁doing", "▁doin", "g", "▁do", "ing"].map(String::from));
    let v = Vocabulary::from_entries(e).unwrap();
    let t = NHotTable::build(&v);
    let got = t.encode(v.id_of("▁doing").unwrap()).unwrap();
    for piece in ["▁doin", "g", "▁do", "ing"] {
        assert!(got.contains(&v.id_of(piece).unwrap()), "{piece} missing");
    }
    assert_eq!(got.len(), 4);
}

#[test]
fn file_round_trip_on_random_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_vocab(&mut stream_rng(3, Stream::Synthetic), 400);
    let t = NHotTable::build(&v);
    let p = dir.path().join("v.nhot");
    t.save(&p).unwrap();
    assert_eq!(NHotTable::load_for(&p, &v).unwrap(), t);
}
