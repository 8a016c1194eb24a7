//! The training loop: batch assembly, adaptive masking, model update and
//! weight-table maintenance, with checkpoint and resume.
//!
//! Per batch: sample a mask for every sequence, run forward and backward,
//! take an optimizer step, feed the per-position outcomes to the scheduler.
//! Every `timestep_batches` batches the scheduler updates its weights and the
//! trajectory recorder takes a snapshot. A snapshot of the initial table is
//! recorded as timestep 0.
//!
//! A checkpoint directory holds:
//!
//! ```text
//! config.txt       canonical run config; must match on resume
//! model.bin        parameters and optimizer moments
//! scheduler.ckpt   weight table, statistics, masking rng
//! trainer.state    data order, cursor, epoch, rng states, loss history
//! trajectory.csv   trajectory records so far
//! ```

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::analytics::{PosMap, TrajectoryLog, TrajectoryRecorder};
use crate::binio::*;
use crate::config::TrainConfig;
use crate::corpus::{chunk, FrequencyRanking, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{load_model, save_model, AdamW, MaskedSequence, ToyModel};
use crate::nhot::NHotTable;
use crate::rng::{stream_rng, RngState, Stream};
use crate::scalar::Scalar;
use crate::scheduler::{load_checkpoint, save_checkpoint, AmlmScheduler, MaskWeightTable};
use crate::vocab::Vocabulary;

pub const STATE_MAGIC: [u8; 8] = *b"AMLMTRN\0";
pub const STATE_VERSION: u32 = 1;

const WHAT: &str = "trainer state";

/// Per-step training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub n_selected: u64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Scheduled masking rate used for this batch.
    pub p: f64,
}

#[derive(Debug)]
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub model: ToyModel<T>,
    pub optimizer: AdamW<T>,
    pub scheduler: AmlmScheduler,
    pub recorder: TrajectoryRecorder,
    pub history: Vec<StepStats>,
    documents: Vec<TokenSequence>,
    chunks: Vec<TokenSequence>,
    seq_len: usize,
    order: Vec<u32>,
    cursor: usize,
    epoch: u64,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    mask_id: u32,
    last_checkpoint: Option<u64>,
}

fn non_empty_chunks(documents: &[TokenSequence], len: usize) -> Vec<TokenSequence> {
    chunk(documents, len)
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect()
}

impl<T: Scalar> Trainer<T> {
    /// Sets up a fresh run. `config` is synced and validated here; the model
    /// vocabulary size is taken from `vocab`.
    pub fn new(
        mut config: TrainConfig,
        vocab: &Vocabulary,
        documents: Vec<TokenSequence>,
        nhot: Option<Arc<NHotTable>>,
        pos: Option<PosMap>,
    ) -> Result<Self> {
        config.model.vocab_size = vocab.size();
        config.sync();
        config.validate()?;
        if let Some(t) = &nhot {
            t.check_compatible(vocab)?;
        }
        if let Some(p) = &pos {
            if p.len() != vocab.size() {
                return Err(Error::Incompatible {
                    what: "POS map vocabulary size",
                    expected: vocab.size().to_string(),
                    found: p.len().to_string(),
                });
            }
        }
        let seed = config.seed;
        let nhot = if config.model.use_nhot {
            Some(nhot.ok_or_else(|| Error::config("use_nhot is set but no n-hot table was given"))?)
        } else {
            None
        };
        let model = ToyModel::new(
            config.model.clone(),
            nhot,
            &mut stream_rng(seed, Stream::Init),
        )?;
        let optimizer = AdamW::new(config.optim.clone(), &model.params);
        let scheduler = AmlmScheduler::new(config.schedule.clone(), vocab)?;

        let ranking = FrequencyRanking::compute(&documents, vocab.size());
        let mut recorder = TrajectoryRecorder::new(ranking, config.run.bin_size);
        recorder.pos = pos;
        recorder.log_tokens = config.run.log_tokens;
        recorder.weighting = config.run.weighting;
        recorder.observe(0, &scheduler.table);

        let seq_len = config.run.seq_len;
        let chunks = non_empty_chunks(&documents, seq_len);
        if chunks.is_empty() {
            return Err(Error::config("the training corpus contains no tokens"));
        }
        let mut shuffle_rng = stream_rng(seed, Stream::Shuffle);
        let mut order: Vec<u32> = (0..chunks.len() as u32).collect();
        order.shuffle(&mut shuffle_rng);

        Ok(Trainer {
            model,
            optimizer,
            scheduler,
            recorder,
            history: Vec::new(),
            documents,
            chunks,
            seq_len,
            order,
            cursor: 0,
            epoch: 0,
            shuffle_rng,
            dropout_rng: stream_rng(seed, Stream::Dropout),
            mask_id: vocab.specials().mask,
            last_checkpoint: None,
            config,
        })
    }

    /// Batches consumed so far.
    pub fn step_count(&self) -> u64 {
        self.scheduler.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn trajectory(&self) -> &TrajectoryLog {
        &self.recorder.log
    }

    pub fn ranking(&self) -> &FrequencyRanking {
        &self.recorder.ranking
    }

    pub fn is_done(&self) -> bool {
        self.step_count() >= self.config.run.steps
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.config.run.batch_size);
        for _ in 0..self.config.run.batch_size {
            if self.cursor == self.order.len() {
                self.start_epoch();
            }
            ids.push(self.order[self.cursor] as usize);
            self.cursor += 1;
        }
        ids
    }

    fn start_epoch(&mut self) {
        self.epoch += 1;
        let r = &self.config.run;
        if let Some(len2) = r.stage2_seq_len {
            if self.epoch >= r.stage2_after_epochs && self.seq_len != len2 {
                log::info!(
                    "epoch {}: re-chunking documents to length {len2}",
                    self.epoch
                );
                self.seq_len = len2;
                self.chunks = non_empty_chunks(&self.documents, len2);
                self.order = (0..self.chunks.len() as u32).collect();
            }
        }
        self.order.shuffle(&mut self.shuffle_rng);
        self.cursor = 0;
    }

    /// Trains on one batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.scheduler.step;
        let diverged = |detail: String| Error::Diverged { step, detail };

        let picks = self.next_batch();
        self.scheduler.begin_batch();
        let p = self.scheduler.table.p_current;
        let batch: Vec<MaskedSequence> = picks
            .iter()
            .map(|&i| {
                let seq = &self.chunks[i];
                let decision = self.scheduler.sample(seq);
                MaskedSequence::new(seq, &decision, self.mask_id)
            })
            .collect();

        let (out, cache) = match self.model.forward(&batch, Some(&mut self.dropout_rng)) {
            Ok(r) => r,
            Err(Error::Diverged { detail, .. }) => return Err(diverged(detail)),
            Err(e) => return Err(e),
        };
        let mut grads = self.model.backward(&batch, &cache);
        if !grads.all_finite() {
            return Err(diverged("non-finite gradient".into()));
        }
        let (lr, grad_norm) = self.optimizer.step(&mut self.model.params, &mut grads);
        if !self.model.params.all_finite() {
            return Err(diverged("non-finite parameters after update".into()));
        }

        self.scheduler.record(&out.outcome.outcomes);
        let recorder = &mut self.recorder;
        let mut hook = |table: &MaskWeightTable| recorder.observe(table.t, table);
        if let Some(t) = self.scheduler.end_batch(&mut hook)? {
            log::debug!(
                "step {}: timestep {t}, mean weight {:.5}",
                step + 1,
                self.scheduler.table.mean_weight()
            );
        }

        let stats = StepStats {
            step,
            loss: out.outcome.mean_loss,
            n_selected: out.outcome.outcomes.len() as u64,
            lr,
            grad_norm,
            p,
        };
        self.history.push(stats);
        Ok(stats)
    }

    /// Trains until `stop` batches have been consumed (capped at the
    /// configured total), saving checkpoints under `out_dir` every
    /// `checkpoint_every` steps.
    pub fn run_until(&mut self, stop: u64, out_dir: Option<&Path>) -> Result<()> {
        let stop = stop.min(self.config.run.steps);
        let every = self.config.run.checkpoint_every;
        while self.step_count() < stop {
            if let Err(e) = self.step() {
                if let (Error::Diverged { step, detail }, Some(last)) = (&e, self.last_checkpoint) {
                    return Err(Error::Diverged {
                        step: *step,
                        detail: format!("{detail}; last good checkpoint at step {last}"),
                    });
                }
                return Err(e);
            }
            let s = self.step_count();
            if s.is_multiple_of(100) {
                let l = self.history.last().map_or(0.0, |h| h.loss);
                log::info!(
                    "step {s}: loss {l:.4}, mean weight {:.5}",
                    self.scheduler.table.mean_weight()
                );
            }
            if let Some(dir) = out_dir {
                if every > 0 && s.is_multiple_of(every) {
                    self.save_checkpoint(checkpoint_dir(dir, s))?;
                }
            }
        }
        Ok(())
    }

    /// Trains to the configured number of steps.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        self.run_until(self.config.run.steps, out_dir)
    }

    /// Writes a complete checkpoint directory. The files are written to a
    /// sibling temporary directory first and then moved into place.
    pub fn save_checkpoint(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let cfg_path = tmp.join("config.txt");
        fs::write(&cfg_path, self.config.to_kv_string()).map_err(|e| Error::io(&cfg_path, e))?;
        save_model(tmp.join("model.bin"), &self.model, Some(&self.optimizer))?;
        save_checkpoint(tmp.join("scheduler.ckpt"), &self.scheduler)?;
        self.write_state(tmp.join("trainer.state"))?;
        self.recorder.log.export_csv(tmp.join("trajectory.csv"))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        self.last_checkpoint = Some(self.step_count());
        Ok(())
    }

    /// Restores a run saved by [`Self::save_checkpoint`]. The inputs must be
    /// the ones the run was started with; the config must match exactly.
    pub fn resume(
        dir: impl AsRef<Path>,
        config: TrainConfig,
        vocab: &Vocabulary,
        documents: Vec<TokenSequence>,
        nhot: Option<Arc<NHotTable>>,
        pos: Option<PosMap>,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        let mut t = Self::new(config, vocab, documents, nhot.clone(), pos)?;
        let cfg_path = dir.join("config.txt");
        let stored = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        if stored != t.config.to_kv_string() {
            return Err(Error::Incompatible {
                what: "run config",
                expected: "the config stored with the checkpoint".into(),
                found: "a different config".into(),
            });
        }
        let (model, optimizer) = load_model::<T>(dir.join("model.bin"), t.model.nhot.clone())?;
        let optimizer = optimizer.ok_or_else(|| {
            Error::format("model checkpoint", "no optimizer state; cannot resume")
        })?;
        let scheduler = load_checkpoint(dir.join("scheduler.ckpt"))?;
        if scheduler.table.len() != vocab.size() || scheduler.config != t.config.schedule {
            return Err(Error::Incompatible {
                what: "scheduler checkpoint",
                expected: format!("{} entries, run schedule", vocab.size()),
                found: format!("{} entries", scheduler.table.len()),
            });
        }
        t.model = model;
        t.optimizer = optimizer;
        t.scheduler = scheduler;
        t.read_state(dir.join("trainer.state"))?;
        let log = TrajectoryLog::import_csv(dir.join("trajectory.csv"))?;
        t.recorder.log = log;
        t.last_checkpoint = Some(t.step_count());
        Ok(t)
    }

    fn write_state(&self, path: PathBuf) -> Result<()> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        self.write_state_to(&mut w).map_err(|e| Error::io(&path, e))
    }

    /// ```text
    /// magic "AMLMTRN\0" | version u32 | step u64 | epoch u64 | cursor u64
    /// seq_len u64 | n_order u64 | order n_order × u32
    /// shuffle rng | dropout rng            (32-byte key, u64, u128)
    /// n_history u64 | per step: step u64, loss f64, n_selected u64,
    ///                           lr f64, grad_norm f64, p f64
    /// ```
    fn write_state_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&STATE_MAGIC)?;
        write_u32(w, STATE_VERSION)?;
        write_u64(w, self.step_count())?;
        write_u64(w, self.epoch)?;
        write_u64(w, self.cursor as u64)?;
        write_u64(w, self.seq_len as u64)?;
        write_u64(w, self.order.len() as u64)?;
        for &i in &self.order {
            write_u32(w, i)?;
        }
        RngState::capture(&self.shuffle_rng).write(w)?;
        RngState::capture(&self.dropout_rng).write(w)?;
        write_u64(w, self.history.len() as u64)?;
        for h in &self.history {
            write_u64(w, h.step)?;
            write_f64(w, h.loss)?;
            write_u64(w, h.n_selected)?;
            write_f64(w, h.lr)?;
            write_f64(w, h.grad_norm)?;
            write_f64(w, h.p)?;
        }
        w.flush()
    }

    fn read_state(&mut self, path: PathBuf) -> Result<()> {
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut r = BufReader::new(file);
        self.read_state_from(&mut r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io(&path, e))? != 0 {
            return Err(Error::format(WHAT, "trailing bytes"));
        }
        Ok(())
    }

    fn read_state_from<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let e = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::format(WHAT, "truncated file")
            } else {
                Error::format(WHAT, e.to_string())
            }
        };
        let magic = read_magic(r).map_err(e)?;
        if magic != STATE_MAGIC {
            return Err(Error::format(WHAT, format!("bad magic {magic:?}")));
        }
        let version = read_u32(r).map_err(e)?;
        if version != STATE_VERSION {
            return Err(Error::Incompatible {
                what: "trainer state version",
                expected: STATE_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let step = read_u64(r).map_err(e)?;
        if step != self.scheduler.step {
            return Err(Error::Incompatible {
                what: "trainer state step",
                expected: self.scheduler.step.to_string(),
                found: step.to_string(),
            });
        }
        self.epoch = read_u64(r).map_err(e)?;
        let cursor = read_u64(r).map_err(e)? as usize;
        let seq_len = read_u64(r).map_err(e)? as usize;
        if seq_len != self.seq_len {
            let r2 = &self.config.run;
            if Some(seq_len) != r2.stage2_seq_len {
                return Err(Error::format(
                    WHAT,
                    format!("unexpected sequence length {seq_len}"),
                ));
            }
            self.seq_len = seq_len;
            self.chunks = non_empty_chunks(&self.documents, seq_len);
        }
        let n = read_u64(r).map_err(e)? as usize;
        if n != self.chunks.len() || cursor > n {
            return Err(Error::Incompatible {
                what: "training data",
                expected: format!("{n} sequences"),
                found: format!("{} sequences", self.chunks.len()),
            });
        }
        let mut order = Vec::with_capacity(n);
        for _ in 0..n {
            let i = read_u32(r).map_err(e)?;
            if i as usize >= n {
                return Err(Error::format(
                    WHAT,
                    format!("sequence index {i} out of range"),
                ));
            }
            order.push(i);
        }
        self.order = order;
        self.cursor = cursor;
        self.shuffle_rng = RngState::read(r).map_err(e)?.restore();
        self.dropout_rng = RngState::read(r).map_err(e)?.restore();
        let nh = read_u64(r).map_err(e)? as usize;
        if nh as u64 != step {
            return Err(Error::format(WHAT, "history length does not match step"));
        }
        self.history.clear();
        for _ in 0..nh {
            self.history.push(StepStats {
                step: read_u64(r).map_err(e)?,
                loss: read_f64(r).map_err(e)?,
                n_selected: read_u64(r).map_err(e)?,
                lr: read_f64(r).map_err(e)?,
                grad_norm: read_f64(r).map_err(e)?,
                p: read_f64(r).map_err(e)?,
            });
        }
        Ok(())
    }

    /// Writes `step,loss,n_selected,lr,grad_norm,p` for every step so far.
    pub fn export_history(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("step,loss,n_selected,lr,grad_norm,p\n");
        for h in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                h.step, h.loss, h.n_selected, h.lr, h.grad_norm, h.p
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Mean of the per-batch losses over steps `[from, to)`, weighted by the
    /// number of predicted positions.
    pub fn mean_loss(&self, from: u64, to: u64) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0u64);
        for h in self
            .history
            .iter()
            .filter(|h| h.step >= from && h.step < to)
        {
            sum += h.loss * h.n_selected as f64;
            n += h.n_selected;
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// `<out>/checkpoints/step-<n>`
pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:08}"))
}
