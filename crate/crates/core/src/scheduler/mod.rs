//! Adaptive masking: per-token mask weights that follow how well the model
//! predicts each token type.
//!
//! Every token type starts at the scheduled masking rate. During a timestep
//! (a fixed number of batches) the trainer records, for each predicted
//! position, whether the argmax was right and the cross-entropy. At the
//! timestep boundary each observed type's weight moves towards
//! `p · (1 − score)` with an exponential moving average:
//!
//! ```text
//! w_t = λ · w_{t−1} + (1 − λ) · p · (1 − score_{t−1})
//! ```
//!
//! The score is either a smoothed accuracy (`hard`) or one minus the min-max
//! normalized mean loss (`soft`). When a sequence is masked the weights of its
//! tokens are rescaled so their mean equals the current scheduled rate.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Plain MLM: every weight equals the scheduled rate.
    Regular,
    /// Smoothed accuracy `(correct + 0.5) / (total + 1)`.
    Hard,
    /// One minus min-max normalized mean loss.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Rate fixed at `p_end`.
    Constant,
    /// Linear decay from `p_start` to `p_end` over `total_steps`.
    Decay,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::config(format!(
                        concat!("invalid ", stringify!($ty), " {:?}"), s
                    ))),
                }
            }
        }
    };
}

str_enum!(Metric { Regular => "regular", Hard => "hard", Soft => "soft" });
str_enum!(ScheduleKind { Constant => "constant", Decay => "decay" });

#[derive(Debug, Clone, PartialEq)]
pub struct MaskScheduleConfig {
    pub p_start: f64,
    pub p_end: f64,
    pub total_steps: u64,
    pub lambda: f64,
    pub timestep_batches: u64,
    pub metric: Metric,
    pub schedule: ScheduleKind,
    /// Use the current scheduled rate as the EMA target scale; when off the
    /// target is always scaled by `p_end`.
    pub track_schedule: bool,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
    pub seed: u64,
}

impl Default for MaskScheduleConfig {
    fn default() -> Self {
        MaskScheduleConfig {
            p_start: 0.40,
            p_end: 0.15,
            total_steps: 8325,
            lambda: 0.2,
            timestep_batches: 200,
            metric: Metric::Hard,
            schedule: ScheduleKind::Decay,
            track_schedule: true,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
            seed: 0,
        }
    }
}

impl MaskScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {v} is not a probability")))
            }
        };
        prob("mask_frac", self.mask_frac)?;
        prob("random_frac", self.random_frac)?;
        prob("keep_frac", self.keep_frac)?;
        prob("lambda", self.lambda)?;
        let sum = self.mask_frac + self.random_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "mask_frac + random_frac + keep_frac = {sum}, expected 1"
            )));
        }
        if !(self.p_end > 0.0 && self.p_end <= self.p_start && self.p_start <= 1.0) {
            return Err(Error::config(format!(
                "need 0 < p_end <= p_start <= 1, got p_start = {}, p_end = {}",
                self.p_start, self.p_end
            )));
        }
        if self.timestep_batches == 0 {
            return Err(Error::config("timestep_batches must be at least 1"));
        }
        Ok(())
    }

    /// Scheduled masking rate at batch `step`; steps past `total_steps` clamp
    /// to `p_end`.
    pub fn scheduled_p(&self, step: u64) -> f64 {
        match self.schedule {
            ScheduleKind::Constant => self.p_end,
            ScheduleKind::Decay => {
                if self.total_steps == 0 || step >= self.total_steps {
                    return self.p_end;
                }
                let f = step as f64 / self.total_steps as f64;
                self.p_start * (1.0 - f) + self.p_end * f
            }
        }
    }

    /// Rate that scales the EMA target at a timestep boundary.
    pub fn target_p(&self, step: u64) -> f64 {
        if self.track_schedule {
            self.scheduled_p(step)
        } else {
            self.p_end
        }
    }
}

/// Smoothed accuracy `(correct + 0.5) / (total + 1)`, strictly inside (0, 1).
pub fn hard_score(correct: u64, total: u64) -> Result<f64> {
    if correct > total {
        return Err(Error::InvalidCounts { correct, total });
    }
    Ok((correct as f64 + 0.5) / (total as f64 + 1.0))
}

/// Per-type weights and the schedule position they were last set at.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskWeightTable {
    pub w: Vec<f64>,
    /// Number of completed updates.
    pub t: u64,
    pub p_current: f64,
    /// Largest scheduled rate seen so far; upper bound on every weight.
    pub p_max: f64,
    special: Vec<bool>,
    replacement_ids: Vec<u32>,
}

impl MaskWeightTable {
    pub fn new(config: &MaskScheduleConfig, vocab: &Vocabulary) -> Self {
        Self::with_special_mask(config, vocab.special_mask())
    }

    /// Uniform start: every non-special type at `scheduled_p(0)`, specials at 0.
    pub fn with_special_mask(config: &MaskScheduleConfig, special: Vec<bool>) -> Self {
        let p0 = config.scheduled_p(0);
        let w = special.iter().map(|&s| if s { 0.0 } else { p0 }).collect();
        let replacement_ids = special
            .iter()
            .enumerate()
            .filter(|(_, &s)| !s)
            .map(|(i, _)| i as u32)
            .collect();
        MaskWeightTable {
            w,
            t: 0,
            p_current: p0,
            p_max: p0,
            special,
            replacement_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.special[id as usize]
    }

    pub fn special_mask(&self) -> &[bool] {
        &self.special
    }

    /// Non-special ids, the pool for random replacement.
    pub fn replacement_ids(&self) -> &[u32] {
        &self.replacement_ids
    }

    pub fn set_step(&mut self, config: &MaskScheduleConfig, step: u64) {
        self.p_current = config.scheduled_p(step);
        self.p_max = self.p_max.max(self.p_current);
    }

    /// Mean weight over non-special types.
    pub fn mean_weight(&self) -> f64 {
        let n = self.replacement_ids.len();
        if n == 0 {
            return 0.0;
        }
        self.replacement_ids
            .iter()
            .map(|&i| self.w[i as usize])
            .sum::<f64>()
            / n as f64
    }

    /// Applies one timestep boundary: blends each observed type's weight
    /// towards `p · (1 − score)`, leaves unobserved types alone, advances `t`
    /// and resets `acc`.
    ///
    /// `step` is the number of batches consumed so far; `p` is taken from the
    /// schedule at that step.
    pub fn update(
        &mut self,
        acc: &mut TokenStatsAccumulator,
        config: &MaskScheduleConfig,
        step: u64,
    ) -> Result<()> {
        assert_eq!(acc.len(), self.w.len(), "accumulator / table size mismatch");
        self.set_step(config, step);
        let p = config.target_p(step);
        self.p_max = self.p_max.max(p);
        let lambda = config.lambda;
        match config.metric {
            Metric::Regular => {
                for &i in &self.replacement_ids {
                    self.w[i as usize] = p;
                }
            }
            Metric::Hard => {
                for &i in &self.replacement_ids {
                    let i = i as usize;
                    if acc.total[i] == 0 {
                        continue;
                    }
                    let s = hard_score(acc.correct[i], acc.total[i]).map_err(|_| {
                        Error::CorruptedStats {
                            id: i as u32,
                            correct: acc.correct[i],
                            total: acc.total[i],
                        }
                    })?;
                    self.w[i] = ema(lambda, self.w[i], p, s);
                }
            }
            Metric::Soft => {
                let scores = soft_scores(acc);
                for &i in &self.replacement_ids {
                    let i = i as usize;
                    if let Some(s) = scores[i] {
                        self.w[i] = ema(lambda, self.w[i], p, s);
                    }
                }
            }
        }
        self.t += 1;
        acc.reset();
        Ok(())
    }

    /// Per-position selection probabilities for `ids`.
    ///
    /// `q_j = min(1, c · w[id_j])` with `c = p · L / Σ w[id_j]`, where `L`
    /// counts non-special positions only, so uniform weights give exactly `p`
    /// on every maskable position. If the weights sum to zero every
    /// non-special position gets `p`.
    pub fn selection_probs(&self, ids: &[u32]) -> Vec<f64> {
        let p = self.p_current;
        let total: f64 = ids.iter().map(|&i| self.w[i as usize]).sum();
        if total <= 0.0 {
            return ids
                .iter()
                .map(|&i| if self.special[i as usize] { 0.0 } else { p })
                .collect();
        }
        let maskable = ids.iter().filter(|&&i| !self.special[i as usize]).count();
        let c = p * maskable as f64 / total;
        ids.iter()
            .map(|&i| {
                if self.special[i as usize] {
                    0.0
                } else {
                    (c * self.w[i as usize]).min(1.0)
                }
            })
            .collect()
    }

    /// Draws a mask decision for one sequence.
    ///
    /// One selection draw per position, then one action draw (and a
    /// replacement draw for random actions) per selected position.
    pub fn sample(
        &self,
        seq: &TokenSequence,
        config: &MaskScheduleConfig,
        rng: &mut MaskRng,
    ) -> MaskDecision {
        let q = self.selection_probs(&seq.ids);
        let mut positions = Vec::new();
        for (j, &qj) in q.iter().enumerate() {
            let u: f64 = rng.select.random();
            if u < qj {
                positions.push(j);
            }
        }
        let random_cut = config.mask_frac + config.random_frac;
        let actions = positions
            .iter()
            .map(|_| {
                let r: f64 = rng.corrupt.random();
                if r < config.mask_frac {
                    MaskAction::Mask
                } else if r < random_cut && !self.replacement_ids.is_empty() {
                    let k = rng.corrupt.random_range(0..self.replacement_ids.len());
                    MaskAction::Random(self.replacement_ids[k])
                } else {
                    MaskAction::Keep
                }
            })
            .collect();
        MaskDecision { positions, actions }
    }
}

#[inline]
fn ema(lambda: f64, prev: f64, p: f64, score: f64) -> f64 {
    lambda * prev + (1.0 - lambda) * p * (1.0 - score)
}

/// Per-type prediction statistics within the current timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStatsAccumulator {
    pub correct: Vec<u64>,
    pub total: Vec<u64>,
    pub loss_sum: Vec<f64>,
    pub loss_count: Vec<u64>,
}

/// One predicted position as reported by the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenOutcome {
    pub id: u32,
    pub correct: bool,
    pub loss: f64,
}

impl TokenStatsAccumulator {
    pub fn new(vocab_size: usize) -> Self {
        TokenStatsAccumulator {
            correct: vec![0; vocab_size],
            total: vec![0; vocab_size],
            loss_sum: vec![0.0; vocab_size],
            loss_count: vec![0; vocab_size],
        }
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    /// Records one outcome. Non-finite or negative losses are dropped with a
    /// warning and `false` is returned.
    pub fn record(&mut self, outcome: TokenOutcome) -> bool {
        if !outcome.loss.is_finite() || outcome.loss < 0.0 {
            warn!(
                "dropping outcome for token {} with loss {} (training may be diverging)",
                outcome.id, outcome.loss
            );
            return false;
        }
        let i = outcome.id as usize;
        self.total[i] += 1;
        if outcome.correct {
            self.correct[i] += 1;
        }
        self.loss_sum[i] += outcome.loss;
        self.loss_count[i] += 1;
        true
    }

    /// Records a batch; returns the number of outcomes accepted.
    pub fn record_batch(&mut self, outcomes: &[TokenOutcome]) -> usize {
        outcomes.iter().filter(|&&o| self.record(o)).count()
    }

    pub fn merge(&mut self, other: &TokenStatsAccumulator) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.correct[i] += other.correct[i];
            self.total[i] += other.total[i];
            self.loss_sum[i] += other.loss_sum[i];
            self.loss_count[i] += other.loss_count[i];
        }
    }

    pub fn reset(&mut self) {
        self.correct.fill(0);
        self.total.fill(0);
        self.loss_sum.fill(0.0);
        self.loss_count.fill(0);
    }

    pub fn mean_loss(&self, id: u32) -> Option<f64> {
        let i = id as usize;
        (self.loss_count[i] > 0).then(|| self.loss_sum[i] / self.loss_count[i] as f64)
    }
}

/// Soft scores `1 − (ℓ − min) / (max − min)` over ids with at least one
/// recorded loss; `None` elsewhere. When every observed mean loss is equal all
/// observed scores are 0.5.
pub fn soft_scores(acc: &TokenStatsAccumulator) -> Vec<Option<f64>> {
    let means: Vec<Option<f64>> = (0..acc.len() as u32).map(|i| acc.mean_loss(i)).collect();
    let (lo, hi) = means
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| {
            (lo.min(l), hi.max(l))
        });
    let span = hi - lo;
    means
        .into_iter()
        .map(|m| {
            m.map(|l| {
                if span > 0.0 {
                    1.0 - (l - lo) / span
                } else {
                    0.5
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random(u32),
    Keep,
}

/// Positions chosen for prediction and what to feed the model there.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskDecision {
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
}

impl MaskDecision {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The corrupted model input.
    pub fn apply(&self, ids: &[u32], mask_id: u32) -> Vec<u32> {
        let mut out = ids.to_vec();
        for (&j, a) in self.positions.iter().zip(&self.actions) {
            match *a {
                MaskAction::Mask => out[j] = mask_id,
                MaskAction::Random(r) => out[j] = r,
                MaskAction::Keep => {}
            }
        }
        out
    }
}

/// Random streams owned by one masking worker.
#[derive(Debug, Clone)]
pub struct MaskRng {
    pub select: ChaCha8Rng,
    pub corrupt: ChaCha8Rng,
}

impl MaskRng {
    pub fn from_seed(seed: u64) -> Self {
        MaskRng {
            select: stream_rng(seed, Stream::MaskSelect),
            corrupt: stream_rng(seed, Stream::MaskCorrupt),
        }
    }
}

/// Called with the table after every timestep update.
pub trait UpdateHook {
    fn on_update(&mut self, table: &MaskWeightTable);
}

impl<F: FnMut(&MaskWeightTable)> UpdateHook for F {
    fn on_update(&mut self, table: &MaskWeightTable) {
        self(table)
    }
}

/// Table, statistics and random state driven batch by batch.
#[derive(Debug, Clone)]
pub struct AmlmScheduler {
    pub config: MaskScheduleConfig,
    pub table: MaskWeightTable,
    pub acc: TokenStatsAccumulator,
    pub rng: MaskRng,
    /// Batches consumed so far.
    pub step: u64,
}

impl AmlmScheduler {
    pub fn new(config: MaskScheduleConfig, vocab: &Vocabulary) -> Result<Self> {
        Self::with_special_mask(config, vocab.special_mask())
    }

    pub fn with_special_mask(config: MaskScheduleConfig, special: Vec<bool>) -> Result<Self> {
        config.validate()?;
        let n = special.len();
        Ok(AmlmScheduler {
            table: MaskWeightTable::with_special_mask(&config, special),
            acc: TokenStatsAccumulator::new(n),
            rng: MaskRng::from_seed(config.seed),
            step: 0,
            config,
        })
    }

    /// Sets the sampling rate for the batch about to start.
    pub fn begin_batch(&mut self) {
        self.table.set_step(&self.config, self.step);
    }

    pub fn sample(&mut self, seq: &TokenSequence) -> MaskDecision {
        self.table.sample(seq, &self.config, &mut self.rng)
    }

    pub fn record(&mut self, outcomes: &[TokenOutcome]) -> usize {
        self.acc.record_batch(outcomes)
    }

    /// Closes a batch. At a timestep boundary updates the weights, calls
    /// `hook` and returns the new timestep index.
    pub fn end_batch(&mut self, hook: &mut dyn UpdateHook) -> Result<Option<u64>> {
        self.step += 1;
        if !self.step.is_multiple_of(self.config.timestep_batches) {
            return Ok(None);
        }
        self.table.update(&mut self.acc, &self.config, self.step)?;
        hook.on_update(&self.table);
        Ok(Some(self.table.t))
    }
}
