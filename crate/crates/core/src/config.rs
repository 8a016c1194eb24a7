//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every key of [`TrainConfig`] can also be set programmatically with
//! [`TrainConfig::set`], which is how command-line overrides are applied.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analytics::Weighting;
use crate::error::{Error, Result};
use crate::model::{OptimizerConfig, ToyModelConfig};
use crate::scheduler::{MaskScheduleConfig, Metric, ScheduleKind};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Optimizer steps (batches) to train for.
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Second-stage sequence length; documents are re-chunked when the stage
    /// starts.
    pub stage2_seq_len: Option<usize>,
    /// Completed epochs before the second stage starts.
    pub stage2_after_epochs: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub bin_size: usize,
    pub log_tokens: bool,
    pub weighting: Weighting,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 2000,
            batch_size: 16,
            seq_len: 64,
            stage2_seq_len: None,
            stage2_after_epochs: 5,
            checkpoint_every: 0,
            bin_size: 1000,
            log_tokens: false,
            weighting: Weighting::Types,
        }
    }
}

/// Input files referenced by a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPaths {
    pub vocab: Option<PathBuf>,
    /// Raw text, one document per line.
    pub corpus: Option<PathBuf>,
    /// Whitespace-separated ids, one sequence per line. Used instead of
    /// `corpus` when set.
    pub pretokenized: Option<PathBuf>,
    pub nhot: Option<PathBuf>,
    pub pos_map: Option<PathBuf>,
}

impl DataPaths {
    /// Resolves relative paths against `base`.
    pub fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.vocab,
            &mut self.corpus,
            &mut self.pretokenized,
            &mut self.nhot,
            &mut self.pos_map,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// `vocab_size` is filled in from the vocabulary.
    pub model: ToyModelConfig,
    /// `seed` and `total_steps` follow the run.
    pub schedule: MaskScheduleConfig,
    /// `total_steps` follows the run.
    pub optim: OptimizerConfig,
    pub run: RunConfig,
    pub paths: DataPaths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            model: ToyModelConfig::new(0),
            schedule: MaskScheduleConfig::default(),
            optim: OptimizerConfig::default(),
            run: RunConfig::default(),
            paths: DataPaths::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    // model
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "max_len",
    "dropout",
    "use_nhot",
    "nhot_normalize",
    "tie_embeddings",
    "init_std",
    // masking
    "p_start",
    "p_end",
    "lambda",
    "timestep_batches",
    "metric",
    "schedule",
    "track_schedule",
    "mask_frac",
    "random_frac",
    "keep_frac",
    // optimizer
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "warmup_ratio",
    "clip_norm",
    // run
    "steps",
    "batch_size",
    "seq_len",
    "stage2_seq_len",
    "stage2_after_epochs",
    "checkpoint_every",
    "bin_size",
    "log_tokens",
    "weighting",
    // inputs
    "vocab",
    "corpus",
    "pretokenized",
    "nhot",
    "pos_map",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected a boolean, got {v:?}"
        ))),
    }
}

/// `0`, `none` and `off` disable an optional setting.
fn is_off(v: &str) -> bool {
    matches!(v.to_ascii_lowercase().as_str(), "0" | "none" | "off")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::UnknownKey(k.to_string()));
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("line {}: {k} set twice", i + 1)));
            }
            c.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(c)
    }

    /// Reads a config file; relative input paths are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::parse_str(&text)?;
        if let Some(dir) = path.parent() {
            c.paths.resolve(dir);
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, s, o, r, p) = (
            &mut self.model,
            &mut self.schedule,
            &mut self.optim,
            &mut self.run,
            &mut self.paths,
        );
        match key {
            "seed" => self.seed = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "n_layers" => m.n_layers = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "d_ff" => m.d_ff = parse(key, v)?,
            "max_len" => m.max_len = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "use_nhot" => m.use_nhot = parse_bool(key, v)?,
            "nhot_normalize" => m.nhot_normalize = parse_bool(key, v)?,
            "tie_embeddings" => m.tie_embeddings = parse_bool(key, v)?,
            "init_std" => m.init_std = parse(key, v)?,
            "p_start" => s.p_start = parse(key, v)?,
            "p_end" => s.p_end = parse(key, v)?,
            "lambda" => s.lambda = parse(key, v)?,
            "timestep_batches" => s.timestep_batches = parse(key, v)?,
            "metric" => s.metric = v.parse::<Metric>()?,
            "schedule" => s.schedule = v.parse::<ScheduleKind>()?,
            "track_schedule" => s.track_schedule = parse_bool(key, v)?,
            "mask_frac" => s.mask_frac = parse(key, v)?,
            "random_frac" => s.random_frac = parse(key, v)?,
            "keep_frac" => s.keep_frac = parse(key, v)?,
            "lr" => o.peak_lr = parse(key, v)?,
            "beta1" => o.beta1 = parse(key, v)?,
            "beta2" => o.beta2 = parse(key, v)?,
            "eps" => o.eps = parse(key, v)?,
            "weight_decay" => o.weight_decay = parse(key, v)?,
            "warmup_ratio" => o.warmup_ratio = parse(key, v)?,
            "clip_norm" => {
                o.clip_norm = if is_off(v) {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "steps" => r.steps = parse(key, v)?,
            "batch_size" => r.batch_size = parse(key, v)?,
            "seq_len" => r.seq_len = parse(key, v)?,
            "stage2_seq_len" => {
                r.stage2_seq_len = if is_off(v) {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "stage2_after_epochs" => r.stage2_after_epochs = parse(key, v)?,
            "checkpoint_every" => r.checkpoint_every = parse(key, v)?,
            "bin_size" => r.bin_size = parse(key, v)?,
            "log_tokens" => r.log_tokens = parse_bool(key, v)?,
            "weighting" => {
                r.weighting = match v {
                    "types" => Weighting::Types,
                    "occurrences" => Weighting::Occurrences,
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: expected types or occurrences"
                        )))
                    }
                }
            }
            "vocab" => p.vocab = opt_path(v),
            "corpus" => p.corpus = opt_path(v),
            "pretokenized" => p.pretokenized = opt_path(v),
            "nhot" => p.nhot = opt_path(v),
            "pos_map" => p.pos_map = opt_path(v),
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Copies run-level settings into the component configs.
    pub fn sync(&mut self) {
        self.schedule.seed = self.seed;
        self.schedule.total_steps = self.run.steps;
        self.optim.total_steps = self.run.steps;
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let r = &self.run;
        if r.steps == 0 || r.batch_size == 0 || r.seq_len == 0 || r.bin_size == 0 {
            return Err(Error::config(
                "steps, batch_size, seq_len and bin_size must be positive",
            ));
        }
        let longest = r.seq_len.max(r.stage2_seq_len.unwrap_or(0));
        if longest > self.model.max_len {
            return Err(Error::config(format!(
                "sequence length {longest} exceeds max_len {}",
                self.model.max_len
            )));
        }
        let o = &self.optim;
        if !(o.peak_lr >= 0.0 && (0.0..=1.0).contains(&o.warmup_ratio)) {
            return Err(Error::config(
                "lr must be non-negative and warmup_ratio in [0, 1]",
            ));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::config(
                "beta1, beta2 must be in [0, 1) and eps positive",
            ));
        }
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(1);
        m.validate()
    }

    /// Canonical text form: every key, fixed order, parseable by
    /// [`Self::parse_str`].
    pub fn to_kv_string(&self) -> String {
        let (m, s, o, r, p) = (
            &self.model,
            &self.schedule,
            &self.optim,
            &self.run,
            &self.paths,
        );
        let opt = |x: Option<usize>| x.map_or("none".to_string(), |v| v.to_string());
        let path = |x: &Option<PathBuf>| {
            x.as_ref()
                .map_or(String::new(), |v| v.display().to_string())
        };
        let values: Vec<String> = vec![
            self.seed.to_string(),
            m.d_model.to_string(),
            m.n_layers.to_string(),
            m.n_heads.to_string(),
            m.d_ff.to_string(),
            m.max_len.to_string(),
            m.dropout.to_string(),
            m.use_nhot.to_string(),
            m.nhot_normalize.to_string(),
            m.tie_embeddings.to_string(),
            m.init_std.to_string(),
            s.p_start.to_string(),
            s.p_end.to_string(),
            s.lambda.to_string(),
            s.timestep_batches.to_string(),
            s.metric.to_string(),
            s.schedule.to_string(),
            s.track_schedule.to_string(),
            s.mask_frac.to_string(),
            s.random_frac.to_string(),
            s.keep_frac.to_string(),
            o.peak_lr.to_string(),
            o.beta1.to_string(),
            o.beta2.to_string(),
            o.eps.to_string(),
            o.weight_decay.to_string(),
            o.warmup_ratio.to_string(),
            o.clip_norm.map_or("none".to_string(), |v| v.to_string()),
            r.steps.to_string(),
            r.batch_size.to_string(),
            r.seq_len.to_string(),
            opt(r.stage2_seq_len),
            r.stage2_after_epochs.to_string(),
            r.checkpoint_every.to_string(),
            r.bin_size.to_string(),
            r.log_tokens.to_string(),
            match r.weighting {
                Weighting::Types => "types".into(),
                Weighting::Occurrences => "occurrences".into(),
            },
            path(&p.vocab),
            path(&p.corpus),
            path(&p.pretokenized),
            path(&p.nhot),
            path(&p.pos_map),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let c = TrainConfig::parse_str(
            "# run\nmetric = soft\nschedule=constant # trailing\n\nsteps = 40\nclip_norm = none\n",
        )
        .unwrap();
        assert_eq!(c.schedule.metric, Metric::Soft);
        assert_eq!(c.schedule.schedule, ScheduleKind::Constant);
        assert_eq!(c.run.steps, 40);
        assert_eq!(c.optim.clip_norm, None);
    }

    #[test]
    fn unknown_key_is_named() {
        match TrainConfig::parse_str("steps = 3\nlearning_rate = 1\n") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_and_duplicates() {
        assert!(TrainConfig::parse_str("steps = many").is_err());
        assert!(TrainConfig::parse_str("metric = fuzzy").is_err());
        assert!(TrainConfig::parse_str("steps = 1\nsteps = 2").is_err());
        assert!(TrainConfig::parse_str("steps 1").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = TrainConfig::default();
        c.set("metric", "regular").unwrap();
        c.set("stage2_seq_len", "256").unwrap();
        c.set("vocab", "data/v.txt").unwrap();
        c.set("dropout", "0.05").unwrap();
        let text = c.to_kv_string();
        assert_eq!(TrainConfig::parse_str(&text).unwrap(), c);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "vocab = v.txt\ncorpus = /abs/c.txt\n").unwrap();
        let c = TrainConfig::load(&path).unwrap();
        assert_eq!(c.paths.vocab.unwrap(), dir.path().join("v.txt"));
        assert_eq!(c.paths.corpus.unwrap(), PathBuf::from("/abs/c.txt"));
    }
}
