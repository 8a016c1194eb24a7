use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use amlm_core::analytics::{group_by_pos, Weighting};
use amlm_core::config::KEYS;
use amlm_core::corpus::{ingest_corpus, read_pretokenized, write_pretokenized};
use amlm_core::scheduler::{MaskScheduleConfig, MaskWeightTable, Metric, ScheduleKind};
use amlm_core::train::checkpoint_dir;
use amlm_core::{
    Error, FrequencyRanking, GroupKind, NHotTable, PosMap, TokenSequence, TrainConfig, TrainerF32,
    TrajectoryLog, Vocabulary,
};
use log::{info, warn};

use crate::manifest::{config_map, digest, now_unix, Artifacts, RunManifest, VERSION};
use crate::{
    Failure, GroupArg, MetricArg, NhotArgs, ScheduleArg, StatsArgs, TokenizeArgs, TrainArgs,
    EXIT_IO,
};

type CmdResult = Result<(), Failure>;

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

pub fn tokenize(a: TokenizeArgs) -> CmdResult {
    let vocab = Vocabulary::load(&a.vocab)?;
    let seqs = ingest_corpus(&a.corpus, &vocab)?;
    let tokens: usize = seqs.iter().map(TokenSequence::len).sum();
    if tokens == 0 {
        warn!("corpus {} contains no tokens", a.corpus.display());
    }
    write_pretokenized(&a.out, &seqs)?;
    let types = seqs
        .iter()
        .flat_map(|s| &s.ids)
        .collect::<HashSet<_>>()
        .len();
    println!("{tokens} tokens, {types} types, {} sequences", seqs.len());
    Ok(())
}

pub fn nhot(a: NhotArgs) -> CmdResult {
    let vocab = Vocabulary::load(&a.vocab)?;
    let table = NHotTable::build(&vocab);
    table.save(&a.out)?;
    println!(
        "{} entries, {} features",
        table.vocab_size(),
        table.total_features()
    );
    Ok(())
}

fn apply_overrides(config: &mut TrainConfig, a: &TrainArgs) -> CmdResult {
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::invalid(format!("--set expects KEY=VALUE, got {o:?}")))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::UnknownKey(k.to_string()).into());
        }
        config.set(k, v.trim())?;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(m) = a.metric {
        config.schedule.metric = match m {
            MetricArg::Regular => Metric::Regular,
            MetricArg::Hard => Metric::Hard,
            MetricArg::Soft => Metric::Soft,
        };
    }
    if let Some(s) = a.schedule {
        config.schedule.schedule = match s {
            ScheduleArg::Constant => ScheduleKind::Constant,
            ScheduleArg::Decay => ScheduleKind::Decay,
        };
    }
    if a.nhot {
        config.model.use_nhot = true;
    }
    if a.no_nhot {
        config.model.use_nhot = false;
    }
    Ok(())
}

struct Inputs {
    vocab: Vocabulary,
    documents: Vec<TokenSequence>,
    nhot: Option<Arc<NHotTable>>,
    pos: Option<PosMap>,
    files: Vec<(&'static str, PathBuf)>,
}

fn load_inputs(config: &TrainConfig) -> Result<Inputs, Failure> {
    let p = &config.paths;
    let vocab_path = p
        .vocab
        .clone()
        .ok_or_else(|| Failure::invalid("the config does not set vocab"))?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let mut files = vec![("vocab", vocab_path)];
    let documents = match (&p.pretokenized, &p.corpus) {
        (Some(path), _) => {
            files.push(("pretokenized", path.clone()));
            read_pretokenized(path, &vocab)?
        }
        (None, Some(path)) => {
            files.push(("corpus", path.clone()));
            ingest_corpus(path, &vocab)?
        }
        (None, None) => {
            return Err(Failure::invalid(
                "the config sets neither corpus nor pretokenized",
            ))
        }
    };
    let nhot = if config.model.use_nhot {
        let table = match &p.nhot {
            Some(path) => {
                files.push(("nhot", path.clone()));
                NHotTable::load_for(path, &vocab)?
            }
            None => {
                info!("no n-hot table given; building one from the vocabulary");
                NHotTable::build(&vocab)
            }
        };
        Some(Arc::new(table))
    } else {
        None
    };
    let pos = match &p.pos_map {
        Some(path) => {
            files.push(("pos_map", path.clone()));
            Some(PosMap::load(path, vocab.size())?)
        }
        None => None,
    };
    Ok(Inputs {
        vocab,
        documents,
        nhot,
        pos,
        files,
    })
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut config = TrainConfig::load(&a.config)?;
    apply_overrides(&mut config, &a)?;
    let inputs = load_inputs(&config)?;
    config.model.vocab_size = inputs.vocab.size();
    config.sync();
    config.validate()?;

    let out = &a.out_dir;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let kv = config.to_kv_string();
    fs::write(out.join("config.txt"), &kv).map_err(|e| io_failure(out, e))?;
    let final_dir = checkpoint_dir(Path::new(""), config.run.steps);
    let mut manifest = RunManifest {
        version: VERSION.to_string(),
        seed: config.seed,
        vocab_size: inputs.vocab.size(),
        config: config_map(&kv),
        inputs: inputs
            .files
            .iter()
            .map(|(role, path)| digest(role, path))
            .collect::<Result<_, _>>()?,
        artifacts: Artifacts {
            config: "config.txt".into(),
            trajectory: "trajectory.csv".into(),
            history: "history.csv".into(),
            ranking: "ranking.tsv".into(),
            checkpoints: "checkpoints".into(),
            final_checkpoint: final_dir.display().to_string(),
        },
        status: "running".into(),
        started_unix: now_unix(),
        finished_unix: None,
        wall_clock_secs: None,
    };
    manifest.write(out)?;

    let start = Instant::now();
    let Inputs {
        vocab,
        documents,
        nhot,
        pos,
        ..
    } = inputs;
    let mut trainer = match &a.resume {
        Some(dir) => {
            let t = TrainerF32::resume(dir, config, &vocab, documents, nhot, pos)?;
            info!("resumed at step {}", t.step_count());
            t
        }
        None => TrainerF32::new(config, &vocab, documents, nhot, pos)?,
    };
    trainer
        .ranking()
        .save(out.join(&manifest.artifacts.ranking))?;
    info!(
        "training {} parameters for {} steps",
        trainer.model.params.num_params(),
        trainer.config.run.steps
    );

    let result = trainer.run(Some(out));
    let write_logs = |t: &TrainerF32| -> CmdResult {
        t.trajectory()
            .export_csv(out.join(&manifest.artifacts.trajectory))?;
        if a.jsonl {
            t.trajectory().export_jsonl(out.join("trajectory.jsonl"))?;
        }
        t.export_history(out.join(&manifest.artifacts.history))?;
        Ok(())
    };
    write_logs(&trainer)?;
    manifest.finished_unix = Some(now_unix());
    manifest.wall_clock_secs = Some(start.elapsed().as_secs_f64());
    if let Err(e) = result {
        manifest.status = if e.is_divergence() {
            "diverged"
        } else {
            "failed"
        }
        .into();
        manifest.write(out)?;
        return Err(e.into());
    }
    let final_path = out.join(&manifest.artifacts.final_checkpoint);
    if !final_path.exists() {
        trainer.save_checkpoint(&final_path)?;
    }
    manifest.status = "finished".into();
    manifest.write(out)?;
    let last = trainer.history.last().map_or(f64::NAN, |h| h.loss);
    println!(
        "{} steps, {} timesteps, final batch loss {last:.4}, mean weight {:.5}",
        trainer.step_count(),
        trainer.scheduler.table.t,
        trainer.scheduler.table.mean_weight()
    );
    Ok(())
}

/// Regroups per-token records by POS tag, one table per timestep.
fn regroup_by_pos(
    tokens: &TrajectoryLog,
    vocab_size: usize,
    pos: &PosMap,
    ranking: Option<&FrequencyRanking>,
    weighting: Weighting,
) -> Result<TrajectoryLog, Failure> {
    let mut out = TrajectoryLog::new();
    for ts in tokens.timesteps() {
        let mut special = vec![true; vocab_size];
        let mut w = vec![0.0; vocab_size];
        for r in tokens.at(ts, GroupKind::Token) {
            let id: usize = r
                .key
                .parse()
                .ok()
                .filter(|&i: &usize| i < vocab_size)
                .ok_or_else(|| {
                    Failure::invalid(format!("bad token key {:?} in trajectory", r.key))
                })?;
            special[id] = false;
            w[id] = r.mean_weight;
        }
        let mut table = MaskWeightTable::with_special_mask(&MaskScheduleConfig::default(), special);
        table.w = w;
        out.push_groups(
            ts,
            GroupKind::Pos,
            group_by_pos(&table, pos, ranking, weighting),
        );
    }
    Ok(out)
}

pub fn stats(a: StatsArgs) -> CmdResult {
    if a.group == GroupArg::Pos && a.pos_map.is_none() {
        return Err(Failure::invalid("--group pos requires --pos-map"));
    }
    let log = TrajectoryLog::import_csv(a.run_dir.join("trajectory.csv"))?;
    let grouped = match a.group {
        GroupArg::Freq => log.filter_kind(GroupKind::FreqBin),
        GroupArg::Pos => {
            let manifest = RunManifest::read(&a.run_dir)?;
            let pos = PosMap::load(a.pos_map.as_ref().unwrap(), manifest.vocab_size)?;
            let tokens = log.filter_kind(GroupKind::Token);
            if tokens.is_empty() {
                return Err(Failure::invalid(
                    "the run has no per-token records; train with log_tokens = true",
                ));
            }
            let (ranking, weighting) = if a.occurrences {
                let r = FrequencyRanking::load(a.run_dir.join(&manifest.artifacts.ranking))?;
                (Some(r), Weighting::Occurrences)
            } else {
                (None, Weighting::Types)
            };
            regroup_by_pos(
                &tokens,
                manifest.vocab_size,
                &pos,
                ranking.as_ref(),
                weighting,
            )?
        }
    };
    if grouped.is_empty() {
        warn!("no records for the requested grouping");
    }
    match &a.out {
        Some(path) => grouped.export_csv(path)?,
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            grouped
                .write_csv(&mut lock)
                .map_err(|e| io_failure(Path::new("<stdout>"), io::Error::other(e)))?;
            lock.flush()
                .map_err(|e| io_failure(Path::new("<stdout>"), e))?;
        }
    }
    Ok(())
}
