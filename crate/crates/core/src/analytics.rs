//! Mask-weight trajectories grouped by frequency rank and part of speech.
//!
//! Group means are over token types by default; [`Weighting::Occurrences`]
//! weights each type by its corpus count instead.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::FrequencyRanking;
use crate::error::{Error, Result};
use crate::scheduler::MaskWeightTable;

/// Universal POS tags.
pub const UPOS_TAGS: [&str; 17] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN",
    "PUNCT", "SCONJ", "SYM", "VERB", "X",
];

const X_TAG: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    FreqBin,
    Pos,
    Token,
}

impl GroupKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GroupKind::FreqBin => "freq_bin",
            GroupKind::Pos => "pos",
            GroupKind::Token => "token",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freq_bin" => Ok(GroupKind::FreqBin),
            "pos" => Ok(GroupKind::Pos),
            "token" => Ok(GroupKind::Token),
            _ => Err(Error::config(format!("unknown group kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Weighting {
    #[default]
    Types,
    Occurrences,
}

/// Mean weight of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMean {
    pub key: String,
    pub mean_weight: f64,
    /// Number of token types in the group.
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub timestep: u64,
    pub kind: GroupKind,
    pub key: String,
    pub mean_weight: f64,
    pub count: u64,
}

/// Numbers compare numerically, anything else as text; numbers first.
fn cmp_keys(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

impl TrajectoryRecord {
    fn order(&self, other: &Self) -> Ordering {
        self.timestep
            .cmp(&other.timestep)
            .then(self.kind.cmp(&other.kind))
            .then_with(|| cmp_keys(&self.key, &other.key))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<TrajectoryRecord>,
}

pub const CSV_HEADER: [&str; 5] = ["timestep", "kind", "key", "mean_weight", "count"];

impl TrajectoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push_groups(&mut self, timestep: u64, kind: GroupKind, groups: Vec<GroupMean>) {
        self.records
            .extend(groups.into_iter().map(|g| TrajectoryRecord {
                timestep,
                kind,
                key: g.key,
                mean_weight: g.mean_weight,
                count: g.count,
            }));
    }

    /// Sorts by timestep, kind, then key (numeric keys numerically).
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| a.order(b));
    }

    pub fn filter_kind(&self, kind: GroupKind) -> TrajectoryLog {
        TrajectoryLog {
            records: self
                .records
                .iter()
                .filter(|r| r.kind == kind)
                .cloned()
                .collect(),
        }
    }

    /// Distinct timesteps in ascending order.
    pub fn timesteps(&self) -> Vec<u64> {
        let mut t: Vec<u64> = self.records.iter().map(|r| r.timestep).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// Records with the given timestep and kind.
    pub fn at(&self, timestep: u64, kind: GroupKind) -> Vec<&TrajectoryRecord> {
        self.records
            .iter()
            .filter(|r| r.timestep == timestep && r.kind == kind)
            .collect()
    }

    /// Writes CSV in sorted order. Weights use the shortest representation
    /// that parses back to the same `f64`.
    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(BufWriter::new(file))
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::result::Result<(), csv::Error> {
        let mut sorted = self.clone();
        sorted.sort();
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_HEADER)?;
        for r in &sorted.records {
            wr.write_record([
                r.timestep.to_string(),
                r.kind.to_string(),
                r.key.clone(),
                r.mean_weight.to_string(),
                r.count.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn import_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rd = csv::Reader::from_reader(BufReader::new(file));
        let bad = |detail: String| Error::format("trajectory csv", detail);
        let header = rd.headers().map_err(|e| bad(e.to_string()))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut records = Vec::new();
        for (i, row) in rd.records().enumerate() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            let line = i + 2;
            let field = |k: usize| {
                row.get(k)
                    .ok_or_else(|| bad(format!("line {line}: missing field")))
            };
            let num_err = |_| bad(format!("line {line}: bad number"));
            records.push(TrajectoryRecord {
                timestep: field(0)?.parse().map_err(num_err)?,
                kind: field(1)?
                    .parse()
                    .map_err(|_| bad(format!("line {line}: bad kind")))?,
                key: field(2)?.to_string(),
                mean_weight: field(3)?
                    .parse()
                    .map_err(|_| bad(format!("line {line}: bad weight")))?,
                count: field(4)?.parse().map_err(num_err)?,
            });
        }
        Ok(TrajectoryLog { records })
    }

    pub fn export_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut sorted = self.clone();
        sorted.sort();
        for r in &sorted.records {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn import_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| {
                Error::format("trajectory json-lines", format!("line {}: {e}", i + 1))
            })?);
        }
        Ok(TrajectoryLog { records })
    }
}

/// Token id to UPOS tag; ids not listed are `X`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosMap {
    tags: Vec<u8>,
}

impl PosMap {
    pub fn all_x(vocab_size: usize) -> Self {
        PosMap {
            tags: vec![X_TAG; vocab_size],
        }
    }

    pub fn from_pairs<'a>(
        vocab_size: usize,
        pairs: impl IntoIterator<Item = (u32, &'a str)>,
    ) -> Result<Self> {
        let mut m = Self::all_x(vocab_size);
        for (id, tag) in pairs {
            m.set(id, tag)?;
        }
        Ok(m)
    }

    fn set(&mut self, id: u32, tag: &str) -> Result<()> {
        let t = tag_index(tag)
            .ok_or_else(|| Error::format("pos map", format!("unknown tag {tag:?} for id {id}")))?;
        let n = self.tags.len();
        *self
            .tags
            .get_mut(id as usize)
            .ok_or(Error::IdOutOfRange { id, size: n })? = t;
        Ok(())
    }

    /// TSV `token_id<TAB>TAG`, one pair per line. Blank lines are skipped.
    pub fn load(path: impl AsRef<Path>, vocab_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::all_x(vocab_size);
        let mut seen = vec![false; vocab_size];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let bad = |d: &str| Error::format("pos map", format!("line {}: {d}", i + 1));
            let (id, tag) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected id<TAB>tag"))?;
            let id: u32 = id.trim().parse().map_err(|_| bad("bad token id"))?;
            m.set(id, tag.trim()).map_err(|e| bad(&e.to_string()))?;
            if std::mem::replace(&mut seen[id as usize], true) {
                return Err(bad(&format!("token {id} listed twice")));
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag_of(&self, id: u32) -> &'static str {
        self.tags
            .get(id as usize)
            .map_or("X", |&t| UPOS_TAGS[t as usize])
    }
}

fn tag_index(tag: &str) -> Option<u8> {
    UPOS_TAGS.iter().position(|&t| t == tag).map(|i| i as u8)
}

fn group_means(
    table: &MaskWeightTable,
    counts: Option<&[u64]>,
    n_groups: usize,
    group_of: impl Fn(u32) -> usize,
    key_of: impl Fn(usize) -> String,
) -> Vec<GroupMean> {
    let mut types = vec![0u64; n_groups];
    let mut sum = vec![0.0f64; n_groups];
    let mut occ = vec![0u64; n_groups];
    let mut occ_sum = vec![0.0f64; n_groups];
    for &id in table.replacement_ids() {
        let g = group_of(id);
        let w = table.w[id as usize];
        types[g] += 1;
        sum[g] += w;
        if let Some(c) = counts {
            let c = c[id as usize];
            occ[g] += c;
            occ_sum[g] += w * c as f64;
        }
    }
    (0..n_groups)
        .filter(|&g| types[g] > 0)
        .map(|g| {
            let mean_weight = if counts.is_some() && occ[g] > 0 {
                occ_sum[g] / occ[g] as f64
            } else {
                sum[g] / types[g] as f64
            };
            GroupMean {
                key: key_of(g),
                mean_weight,
                count: types[g],
            }
        })
        .collect()
}

/// Bin `k` holds ranks `[k·bin_size, (k+1)·bin_size)`. Special tokens are left
/// out; bins with no remaining members are omitted.
pub fn bin_by_frequency(
    table: &MaskWeightTable,
    ranking: &FrequencyRanking,
    bin_size: usize,
    weighting: Weighting,
) -> Vec<GroupMean> {
    assert!(bin_size > 0, "bin_size must be positive");
    assert_eq!(ranking.len(), table.len(), "ranking / table size mismatch");
    let n_bins = table.len().div_ceil(bin_size);
    let counts = (weighting == Weighting::Occurrences).then_some(ranking.counts.as_slice());
    group_means(
        table,
        counts,
        n_bins,
        |id| ranking.rank_of[id as usize] as usize / bin_size,
        |g| g.to_string(),
    )
}

/// Per-tag means in UPOS order; tags with no member tokens are omitted.
pub fn group_by_pos(
    table: &MaskWeightTable,
    pos: &PosMap,
    counts: Option<&FrequencyRanking>,
    weighting: Weighting,
) -> Vec<GroupMean> {
    let counts = match weighting {
        Weighting::Occurrences => counts.map(|r| r.counts.as_slice()),
        Weighting::Types => None,
    };
    group_means(
        table,
        counts,
        UPOS_TAGS.len(),
        |id| pos.tags.get(id as usize).map_or(X_TAG, |&t| t) as usize,
        |g| UPOS_TAGS[g].to_string(),
    )
}

/// Per-token weights of the non-special vocabulary.
pub fn per_token(table: &MaskWeightTable) -> Vec<GroupMean> {
    table
        .replacement_ids()
        .iter()
        .map(|&id| GroupMean {
            key: id.to_string(),
            mean_weight: table.w[id as usize],
            count: 1,
        })
        .collect()
}

/// Builds trajectory records from table snapshots.
#[derive(Debug, Clone)]
pub struct TrajectoryRecorder {
    pub ranking: FrequencyRanking,
    pub bin_size: usize,
    pub pos: Option<PosMap>,
    pub log_tokens: bool,
    pub weighting: Weighting,
    pub log: TrajectoryLog,
}

impl TrajectoryRecorder {
    pub fn new(ranking: FrequencyRanking, bin_size: usize) -> Self {
        TrajectoryRecorder {
            ranking,
            bin_size,
            pos: None,
            log_tokens: false,
            weighting: Weighting::Types,
            log: TrajectoryLog::new(),
        }
    }

    pub fn observe(&mut self, timestep: u64, table: &MaskWeightTable) {
        let bins = bin_by_frequency(table, &self.ranking, self.bin_size, self.weighting);
        self.log.push_groups(timestep, GroupKind::FreqBin, bins);
        if let Some(pos) = &self.pos {
            let g = group_by_pos(table, pos, Some(&self.ranking), self.weighting);
            self.log.push_groups(timestep, GroupKind::Pos, g);
        }
        if self.log_tokens {
            self.log
                .push_groups(timestep, GroupKind::Token, per_token(table));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(w: Vec<f64>, special: Vec<bool>) -> MaskWeightTable {
        let cfg = crate::scheduler::MaskScheduleConfig::default();
        let mut t = MaskWeightTable::with_special_mask(&cfg, special);
        t.w = w;
        t
    }

    #[test]
    fn key_order_is_numeric() {
        let mut ks = vec!["10", "2", "NOUN", "1", "ADJ"];
        ks.sort_by(|a, b| cmp_keys(a, b));
        assert_eq!(ks, vec!["1", "2", "10", "ADJ", "NOUN"]);
    }

    #[test]
    fn occurrence_weighting() {
        let t = table(vec![0.1, 0.3, 0.0], vec![false, false, true]);
        let r = FrequencyRanking::from_counts(vec![3, 1, 100]);
        let types = bin_by_frequency(&t, &r, 10, Weighting::Types);
        assert!((types[0].mean_weight - 0.2).abs() < 1e-15);
        assert_eq!(types[0].count, 2);
        let occ = bin_by_frequency(&t, &r, 10, Weighting::Occurrences);
        assert!((occ[0].mean_weight - 0.15).abs() < 1e-15);
    }

    #[test]
    fn unmapped_ids_are_x() {
        let m = PosMap::from_pairs(4, [(1, "NOUN")]).unwrap();
        assert_eq!(m.tag_of(0), "X");
        assert_eq!(m.tag_of(1), "NOUN");
        assert_eq!(m.tag_of(99), "X");
        assert!(PosMap::from_pairs(4, [(1, "NOUNS")]).is_err());
        assert!(matches!(
            PosMap::from_pairs(4, [(4, "NOUN")]),
            Err(Error::IdOutOfRange { .. })
        ));
    }
}
