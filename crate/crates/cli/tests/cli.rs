use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use amlm_core::corpus::read_pretokenized;
use amlm_core::synthetic::{generate, SyntheticConfig};
use amlm_core::vocab::{reserved_entries, EntryKind};
use amlm_core::{NHotTable, TrajectoryLog, Vocabulary};
use sha2::{Digest, Sha256};

fn amlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amlm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_vocab(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut e = reserved_entries();
    e.extend(extra.iter().map(|s| s.to_string()));
    let path = dir.join("vocab.txt");
    fs::write(&path, e.join("\n") + "\n").unwrap();
    path
}

#[test]
fn tokenize_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path(), &["▁the", "▁cat", "▁do", "ing", "▁sat"]);
    let corpus = dir.path().join("corpus.txt");
    let text = "the cat sat\nthe Ω doing  cat\n\ncat\n";
    fs::write(&corpus, text).unwrap();
    let out = dir.path().join("ids.txt");
    let o = amlm(&[
        "tokenize",
        "--vocab",
        p(&vocab),
        "--corpus",
        p(&corpus),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = Vocabulary::load(&vocab).unwrap();
    let ids: Vec<u32> = text.lines().flat_map(|l| v.tokenize(l)).collect();
    let types = ids.iter().collect::<std::collections::HashSet<_>>().len();
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(
        stdout.trim(),
        format!("{} tokens, {types} types, 4 sequences", ids.len())
    );

    let seqs = read_pretokenized(&out, &v).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(seqs.len(), lines.len());
    for (s, line) in seqs.iter().zip(lines) {
        assert_eq!(v.detokenize(&s.ids), line);
    }
}

#[test]
fn tokenize_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, "a\n").unwrap();
    let out = dir.path().join("ids.txt");
    let missing = dir.path().join("missing.txt");
    let o = amlm(&[
        "tokenize",
        "--vocab",
        p(&missing),
        "--corpus",
        p(&corpus),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.txt"), "{}", stderr(&o));

    let vocab = write_vocab(dir.path(), &["▁a", "▁b", "▁a"]);
    let o = amlm(&[
        "tokenize",
        "--vocab",
        p(&vocab),
        "--corpus",
        p(&corpus),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("duplicate"), "{}", stderr(&o));

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "<pad>\n<unk>\n▁a\n").unwrap();
    let o = amlm(&[
        "tokenize",
        "--vocab",
        p(&bad),
        "--corpus",
        p(&corpus),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("<mask>"), "{}", stderr(&o));
}

#[test]
fn tokenize_empty_corpus_warns() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path(), &["▁a"]);
    let corpus = dir.path().join("empty.txt");
    fs::write(&corpus, "").unwrap();
    let out = dir.path().join("ids.txt");
    let o = amlm(&[
        "tokenize",
        "--vocab",
        p(&vocab),
        "--corpus",
        p(&corpus),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("no tokens"), "{}", stderr(&o));
    assert_eq!(fs::read(&out).unwrap(), b"");
}

#[test]
fn nhot_matches_containment_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let words = [
        "▁doing", "▁doin", "g", "▁do", "ing", "in", "o", "▁", "abc", "ab", "bc",
    ];
    let vocab = write_vocab(dir.path(), &words);
    let (a, b) = (dir.path().join("a.nhot"), dir.path().join("b.nhot"));
    for out in [&a, &b] {
        let o = amlm(&["nhot", "--vocab", p(&vocab), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let v = Vocabulary::load(&vocab).unwrap();
    let t = NHotTable::load_for(&a, &v).unwrap();
    for i in 0..v.size() as u32 {
        let expect: Vec<u32> = if v.kind(i) == EntryKind::Normal {
            (0..v.size() as u32)
                .filter(|&j| {
                    j != i && v.kind(j) == EntryKind::Normal && v.token(i).contains(v.token(j))
                })
                .collect()
        } else {
            Vec::new()
        };
        assert_eq!(t.encode(i).unwrap(), expect.as_slice(), "{}", v.token(i));
    }
}

#[test]
fn nhot_of_reserved_only_vocab_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path(), &[]);
    let out = dir.path().join("t.nhot");
    let o = amlm(&["nhot", "--vocab", p(&vocab), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = Vocabulary::load(&vocab).unwrap();
    let t = NHotTable::load_for(&out, &v).unwrap();
    assert_eq!(t.total_features(), 0);
    assert_eq!(t.vocab_size(), v.size());
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    vocab: Vocabulary,
}

/// Synthetic vocabulary, corpus and POS map on disk, plus a config for a tiny
/// model that refers to them by relative path.
fn fixture(extra_config: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let s = generate(&SyntheticConfig {
        n_words: 200,
        n_tokens: 1600,
        doc_len: 40,
        ..SyntheticConfig::default()
    })
    .unwrap();
    s.vocab.save(dir.path().join("vocab.txt")).unwrap();
    fs::write(dir.path().join("corpus.txt"), s.documents.join("\n") + "\n").unwrap();
    let pos: String = s
        .pos_pairs()
        .iter()
        .map(|(id, tag)| format!("{id}\t{tag}\n"))
        .collect();
    fs::write(dir.path().join("pos.tsv"), pos).unwrap();
    let config = dir.path().join("run.conf");
    let text = format!(
        "# tiny run\nvocab = vocab.txt\ncorpus = corpus.txt\npos_map = pos.tsv\n\
         d_model = 16\nn_layers = 1\nn_heads = 2\nd_ff = 32\nmax_len = 32\nseq_len = 16\n\
         batch_size = 4\nsteps = 20\ntimestep_batches = 5\nbin_size = 50\nlog_tokens = true\n{extra_config}"
    );
    fs::write(&config, text).unwrap();
    Fixture {
        config,
        vocab: s.vocab,
        dir,
    }
}

fn train(f: &Fixture, out: &str, extra: &[&str]) -> Output {
    let out = f.dir.path().join(out);
    let mut args = vec!["train", "--config", p(&f.config), "--out-dir", p(&out)];
    args.extend_from_slice(extra);
    amlm(&args)
}

fn trajectory(f: &Fixture, run: &str) -> TrajectoryLog {
    TrajectoryLog::import_csv(f.dir.path().join(run).join("trajectory.csv")).unwrap()
}

#[test]
fn regular_constant_run_is_flat() {
    let f = fixture("");
    let o = train(
        &f,
        "run",
        &["--metric", "regular", "--schedule", "constant", "--no-nhot"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = trajectory(&f, "run");
    assert_eq!(log.timesteps(), vec![0, 1, 2, 3, 4]);
    assert!(log
        .records
        .iter()
        .all(|r| (r.mean_weight - 0.15).abs() < 1e-12));
    let run = f.dir.path().join("run");
    for file in ["manifest.json", "config.txt", "history.csv", "ranking.tsv"] {
        assert!(run.join(file).exists(), "{file}");
    }
    assert!(run.join("checkpoints/step-00000020/model.bin").exists());
}

fn manifest(f: &Fixture, run: &str) -> serde_json::Value {
    let text = fs::read_to_string(f.dir.path().join(run).join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn same_seed_twice_gives_same_outputs() {
    let f = fixture("");
    for run in ["a", "b"] {
        let o = train(&f, run, &["--seed", "0", "--nhot"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let strip = |mut m: serde_json::Value| {
        for k in ["started_unix", "finished_unix", "wall_clock_secs"] {
            m.as_object_mut().unwrap().remove(k);
        }
        m
    };
    let (ma, mb) = (manifest(&f, "a"), manifest(&f, "b"));
    assert!(ma["wall_clock_secs"].as_f64().unwrap() >= 0.0);
    assert_eq!(strip(ma.clone()), strip(mb));
    assert_eq!(ma["status"], "finished");
    assert_eq!(ma["config"]["use_nhot"], "true");
    assert_eq!(ma["config"]["seed"], "0");
    for file in [
        "trajectory.csv",
        "history.csv",
        "checkpoints/step-00000020/model.bin",
    ] {
        let a = fs::read(f.dir.path().join("a").join(file)).unwrap();
        let b = fs::read(f.dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }

    // digests describe the inputs
    let inputs = ma["inputs"].as_array().unwrap();
    let roles: Vec<&str> = inputs.iter().map(|i| i["role"].as_str().unwrap()).collect();
    assert_eq!(roles, vec!["vocab", "corpus", "pos_map"]);
    for i in inputs {
        let bytes = fs::read(i["path"].as_str().unwrap()).unwrap();
        assert_eq!(
            i["sha256"].as_str().unwrap(),
            hex::encode(Sha256::digest(&bytes))
        );
        assert_eq!(i["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    assert_eq!(ma["artifacts"]["trajectory"], "trajectory.csv");
}

#[test]
fn flags_beat_the_config_file() {
    let f = fixture("seed = 5\nmetric = soft\n");
    let o = train(
        &f,
        "run",
        &["--seed", "9", "--metric", "hard", "--set", "lr=0.002"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&f, "run");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["metric"], "hard");
    assert_eq!(m["config"]["lr"], "0.002");
}

#[test]
fn unknown_config_key_exits_3() {
    let f = fixture("learning_rate = 0.1\n");
    let o = train(&f, "run", &[]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let f = fixture("");
    let o = train(&f, "run", &["--set", "bogus_key=1"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));

    let o = train(&f, "run", &["--set", "seq_len=64"]);
    assert_eq!(code(&o), 3, "seq_len above max_len must be rejected");
}

#[test]
fn missing_corpus_exits_2() {
    let f = fixture("");
    fs::remove_file(f.dir.path().join("corpus.txt")).unwrap();
    let o = train(&f, "run", &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn divergence_exits_4_and_keeps_checkpoints() {
    let f = fixture("lr = 1e30\nwarmup_ratio = 0\nclip_norm = none\ncheckpoint_every = 1\n");
    let o = train(&f, "run", &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    let run = f.dir.path().join("run");
    assert!(run.join("checkpoints/step-00000001/model.bin").exists());
    assert_eq!(manifest(&f, "run")["status"], "diverged");
}

#[test]
fn resume_continues_a_run() {
    let f = fixture("checkpoint_every = 10\n");
    let o = train(&f, "full", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = f.dir.path().join("full/checkpoints/step-00000010");
    let o = train(&f, "resumed", &["--resume", p(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(trajectory(&f, "full"), trajectory(&f, "resumed"));
}

fn stats(f: &Fixture, args: &[&str]) -> Output {
    let run = f.dir.path().join("run");
    let mut all = vec!["stats", "--run-dir", p(&run)];
    all.extend_from_slice(args);
    amlm(&all)
}

#[test]
fn stats_exports() {
    let f = fixture("");
    let o = train(&f, "run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let non_special = f.vocab.non_special_count() as u64;

    let o = stats(&f, &["--group", "freq"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("timestep,kind,key,mean_weight,count\n"));
    let out = f.dir.path().join("freq.csv");
    let o = stats(&f, &["--group", "freq", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&out).unwrap(), text);
    let freq = TrajectoryLog::import_csv(&out).unwrap();
    for ts in freq.timesteps() {
        let n: u64 = freq
            .at(ts, amlm_core::GroupKind::FreqBin)
            .iter()
            .map(|r| r.count)
            .sum();
        assert_eq!(n, non_special);
    }

    // every non-special id tagged NOUN or VERB by parity
    let two = f.dir.path().join("two.tsv");
    let pairs: String = (0..f.vocab.size() as u32)
        .filter(|&i| !f.vocab.is_special(i))
        .map(|i| format!("{i}\t{}\n", if i % 2 == 0 { "NOUN" } else { "VERB" }))
        .collect();
    fs::write(&two, pairs).unwrap();
    for extra in [&[][..], &["--occurrences"][..]] {
        let out = f.dir.path().join("pos.csv");
        let mut args = vec!["--group", "pos", "--pos-map", p(&two), "--out", p(&out)];
        args.extend_from_slice(extra);
        let o = stats(&f, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let pos = TrajectoryLog::import_csv(&out).unwrap();
        for ts in pos.timesteps() {
            let rows = pos.at(ts, amlm_core::GroupKind::Pos);
            let keys: Vec<&str> = rows.iter().map(|r| r.key.as_str()).collect();
            assert_eq!(keys, vec!["NOUN", "VERB"]);
            assert_eq!(rows.iter().map(|r| r.count).sum::<u64>(), non_special);
        }
    }
}

#[test]
fn stats_pos_needs_a_map() {
    let f = fixture("");
    let o = train(&f, "run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = stats(&f, &["--group", "pos"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("--pos-map"), "{}", stderr(&o));
}

#[test]
fn usage_errors_and_help() {
    let o = amlm(&["train", "--config"]);
    assert_eq!(code(&o), 3);
    let o = amlm(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let help = String::from_utf8(o.stdout).unwrap();
    for flag in [
        "--config",
        "--seed",
        "--out-dir",
        "--metric",
        "--schedule",
        "--nhot",
        "--no-nhot",
        "--set",
        "--resume",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    let o = amlm(&["--version"]);
    assert_eq!(code(&o), 0);
}
