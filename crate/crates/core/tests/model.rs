use std::sync::Arc;

use amlm_core::model::{
    clip_global_norm, load_model, save_model, AdamW, MaskedSequence, OptimizerConfig, Tensor,
    ToyModel, ToyModelConfig, ToyModelParams,
};
use amlm_core::rng::{stream_rng, Stream};
use amlm_core::{Error, NHotTable};
use nalgebra::{DMatrix, RowDVector};

fn tiny_config(vocab: usize, d: usize, heads: usize) -> ToyModelConfig {
    ToyModelConfig {
        d_model: d,
        n_layers: 1,
        n_heads: heads,
        d_ff: 2 * d,
        max_len: 16,
        dropout: 0.0,
        ..ToyModelConfig::new(vocab)
    }
}

fn batch() -> Vec<MaskedSequence> {
    vec![
        MaskedSequence {
            input: vec![3, 1, 4, 1, 5],
            target: vec![3, 7, 4, 9, 5],
            selected: vec![1, 3, 4],
        },
        MaskedSequence {
            input: vec![2, 6, 2],
            target: vec![2, 6, 8],
            selected: vec![0, 2],
        },
    ]
}

fn random_rows(vocab: usize, seed: u64) -> NHotTable {
    use rand::Rng;
    let mut rng = stream_rng(seed, Stream::Synthetic);
    let rows = (0..vocab)
        .map(|i| {
            let mut r: Vec<u32> = (0..vocab as u32)
                .filter(|&f| f as usize != i && rng.random::<f64>() < 0.1)
                .collect();
            r.dedup();
            r
        })
        .collect();
    NHotTable::from_rows(rows)
}

#[test]
fn zero_parameters_give_log_vocab_loss() {
    let cfg = tiny_config(20, 4, 2);
    let mut m = ToyModel::<f64>::new(cfg, None, &mut stream_rng(1, Stream::Init)).unwrap();
    m.params = m.params.zeros_like();
    let (out, _) = m.forward(&batch(), None).unwrap();
    for o in &out.outcome.outcomes {
        assert!((o.loss - 20f64.ln()).abs() < 1e-12);
        // all logits tie, so the lowest id wins
        assert_eq!(o.correct, o.id == 0);
    }
    assert!(out.logits.iter().all(|&l| l == 0.0));
}

#[test]
fn zero_projection_matches_plain_embedding_exactly() {
    let vocab = 30;
    let base = tiny_config(vocab, 8, 2);
    let plain = ToyModel::<f32>::new(base.clone(), None, &mut stream_rng(2, Stream::Init)).unwrap();

    let cfg = ToyModelConfig {
        use_nhot: true,
        ..base
    };
    let mut params = plain.params.clone();
    params.nhot_projection = Some(Tensor::zeros(&[vocab, 8]));
    let with = ToyModel::from_params(cfg, params, Some(Arc::new(random_rows(vocab, 3)))).unwrap();

    let a = plain.forward(&batch(), None).unwrap().0;
    let b = with.forward(&batch(), None).unwrap().0;
    assert_eq!(a.logits, b.logits);
}

#[test]
fn softmax_rows_sum_to_one() {
    let cfg = ToyModelConfig {
        init_std: 0.5,
        ..tiny_config(40, 8, 2)
    };
    let m = ToyModel::<f32>::new(cfg, None, &mut stream_rng(4, Stream::Init)).unwrap();
    let (out, _) = m.forward(&batch(), None).unwrap();
    for row in out.logits.chunks(40) {
        let max = row
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
        let z: f64 = row.iter().map(|&l| (l as f64 - max).exp()).sum();
        let s: f64 = row.iter().map(|&l| (l as f64 - max).exp() / z).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn unselected_targets_do_not_affect_loss() {
    let cfg = ToyModelConfig {
        init_std: 0.3,
        ..tiny_config(12, 8, 2)
    };
    let m = ToyModel::<f64>::new(cfg, None, &mut stream_rng(5, Stream::Init)).unwrap();
    let mut b = batch();
    let before = m.loss(&b).unwrap();
    b[0].target[0] = 11;
    b[0].target[2] = 10;
    b[1].target[1] = 0;
    assert_eq!(m.loss(&b).unwrap(), before);
}

#[test]
fn empty_selection_has_zero_loss_and_gradient() {
    let m = ToyModel::<f64>::new(
        tiny_config(12, 8, 2),
        None,
        &mut stream_rng(6, Stream::Init),
    )
    .unwrap();
    let b = vec![MaskedSequence {
        input: vec![1, 2, 3],
        target: vec![1, 2, 3],
        selected: vec![],
    }];
    let (out, cache) = m.forward(&b, None).unwrap();
    assert_eq!(out.outcome.mean_loss, 0.0);
    let g = m.backward(&b, &cache);
    assert!(g
        .named_blocks()
        .iter()
        .all(|(_, t)| t.data.iter().all(|&x| x == 0.0)));
}

#[test]
fn unused_embedding_row_has_zero_gradient() {
    let cfg = ToyModelConfig {
        tie_embeddings: false,
        ..tiny_config(12, 8, 2)
    };
    let m = ToyModel::<f64>::new(cfg, None, &mut stream_rng(7, Stream::Init)).unwrap();
    let b = batch();
    let (_, cache) = m.forward(&b, None).unwrap();
    let g = m.backward(&b, &cache);
    // id 11 never appears as an input
    assert!(g.token_embedding.data[11 * 8..12 * 8]
        .iter()
        .all(|&x| x == 0.0));
    assert!(g.token_embedding.data[3 * 8..4 * 8]
        .iter()
        .any(|&x| x != 0.0));
}

// Independent forward pass with dense matrices.

fn mat(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape[0], t.shape[1], &t.data)
}

fn row(t: &Tensor<f64>) -> RowDVector<f64> {
    RowDVector::from_row_slice(&t.data)
}

fn ln(x: &DMatrix<f64>, g: &Tensor<f64>, b: &Tensor<f64>) -> DMatrix<f64> {
    let mut y = x.clone();
    for i in 0..x.nrows() {
        let r = x.row(i);
        let mean = r.mean();
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64;
        for c in 0..x.ncols() {
            y[(i, c)] = (x[(i, c)] - mean) / (var + 1e-5).sqrt() * g.data[c] + b.data[c];
        }
    }
    y
}

fn affine(x: &DMatrix<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> DMatrix<f64> {
    let mut y = x * mat(w);
    let bias = row(b);
    for mut r in y.row_iter_mut() {
        r += &bias;
    }
    y
}

fn oracle_logits(p: &ToyModelParams<f64>, input: &[u32], d: usize) -> DMatrix<f64> {
    let n = input.len();
    let mut x = DMatrix::zeros(n, d);
    for (j, &id) in input.iter().enumerate() {
        for c in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
            let pe = if c % 2 == 0 {
                (j as f64 * freq).sin()
            } else {
                (j as f64 * freq).cos()
            };
            x[(j, c)] = (d as f64).sqrt() * p.token_embedding.data[id as usize * d + c] + pe;
        }
    }
    let l = &p.layers[0];
    let a = ln(&x, &l.ln1_gamma, &l.ln1_beta);
    let q = affine(&a, &l.wq, &l.bq);
    let k = affine(&a, &l.wk, &l.bk);
    let v = affine(&a, &l.wv, &l.bv);
    let mut s = &q * k.transpose() / (d as f64).sqrt();
    for mut r in s.row_iter_mut() {
        let m = r.max();
        r.apply(|e| *e = (*e - m).exp());
        let z = r.sum();
        r /= z;
    }
    let x = &x + affine(&(&s * &v), &l.wo, &l.bo);
    let b = ln(&x, &l.ln2_gamma, &l.ln2_beta);
    let u = affine(&b, &l.w1, &l.b1);
    let g = u.map(|t| {
        0.5 * t * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (t + 0.044715 * t.powi(3))).tanh())
    });
    let x = &x + affine(&g, &l.w2, &l.b2);
    let h = ln(&x, &p.lnf_gamma, &p.lnf_beta);
    let mut logits = &h * mat(&p.token_embedding).transpose();
    let bias = row(&p.output_bias);
    for mut r in logits.row_iter_mut() {
        r += &bias;
    }
    logits
}

#[test]
fn single_head_forward_matches_dense_oracle() {
    let cfg = ToyModelConfig {
        init_std: 0.7,
        ..tiny_config(9, 4, 1)
    };
    let mut m = ToyModel::<f64>::new(cfg, None, &mut stream_rng(8, Stream::Init)).unwrap();
    // non-trivial gains and biases
    let mut rng = stream_rng(9, Stream::Synthetic);
    for (name, t) in m.params.named_blocks_mut() {
        if t.shape.len() == 1 {
            *t = Tensor::normal(&t.shape, 0.5, &mut rng);
            if name.contains("gamma") {
                t.data.iter_mut().for_each(|x| *x += 1.0);
            }
        }
    }
    let input = vec![4u32, 0, 8, 2, 2, 7];
    let seq = MaskedSequence::all_positions(&input);
    let (out, _) = m.forward(std::slice::from_ref(&seq), None).unwrap();
    let expected = oracle_logits(&m.params, &input, 4);
    for j in 0..input.len() {
        for k in 0..9 {
            let got = out.logits[j * 9 + k];
            assert!(
                (got - expected[(j, k)]).abs() < 1e-12,
                "position {j} id {k}: {got} vs {}",
                expected[(j, k)]
            );
        }
    }
}

/// Max over blocks of `max|a − n| / max(max|n|, 1e-8)`, each block measured
/// against its own largest finite-difference entry.
fn gradient_check(cfg: ToyModelConfig, nhot: Option<Arc<NHotTable>>) -> Vec<(String, f64)> {
    let mut m = ToyModel::<f64>::new(cfg, nhot, &mut stream_rng(10, Stream::Init)).unwrap();
    let b = batch();
    let (_, cache) = m.forward(&b, None).unwrap();
    let analytic = m.backward(&b, &cache);
    let h = 1e-4;

    let names: Vec<String> = analytic
        .named_blocks()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut report = Vec::new();
    for (bi, name) in names.iter().enumerate() {
        let len = analytic.named_blocks()[bi].1.len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = m.params.named_blocks()[bi].1.data[i];
            m.params.named_blocks_mut()[bi].1.data[i] = orig + h;
            let up = m.loss(&b).unwrap();
            m.params.named_blocks_mut()[bi].1.data[i] = orig - h;
            let down = m.loss(&b).unwrap();
            m.params.named_blocks_mut()[bi].1.data[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = &analytic.named_blocks()[bi].1.data;
        let scale = numeric.iter().fold(0.0f64, |s, x| s.max(x.abs())).max(1e-8);
        let err = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |s, (x, y)| s.max((x - y).abs()));
        report.push((name.clone(), err / scale));
    }
    report
}

#[test]
fn gradients_match_central_differences() {
    let vocab = 50;
    for (tie, nhot) in [(true, false), (false, true)] {
        let cfg = ToyModelConfig {
            init_std: 0.4,
            tie_embeddings: tie,
            use_nhot: nhot,
            ..tiny_config(vocab, 8, 2)
        };
        let table = nhot.then(|| Arc::new(random_rows(vocab, 11)));
        for (name, err) in gradient_check(cfg, table) {
            assert!(err < 1e-3, "{name}: relative error {err}");
        }
    }
}

#[test]
fn dropout_gradients_match_fixed_mask_differences() {
    // With a fixed dropout stream the loss is a deterministic function of the
    // parameters, so the same check applies.
    let cfg = ToyModelConfig {
        init_std: 0.4,
        dropout: 0.2,
        ..tiny_config(20, 8, 2)
    };
    let mut m = ToyModel::<f64>::new(cfg, None, &mut stream_rng(12, Stream::Init)).unwrap();
    let b = batch();
    let loss = |m: &ToyModel<f64>| {
        let mut rng = stream_rng(13, Stream::Dropout);
        m.forward(&b, Some(&mut rng)).unwrap().0.outcome.mean_loss
    };
    let mut rng = stream_rng(13, Stream::Dropout);
    let (_, cache) = m.forward(&b, Some(&mut rng)).unwrap();
    let g = m.backward(&b, &cache);
    let h = 1e-5;
    for bi in [0usize, 3, 14] {
        for i in 0..4 {
            let orig = m.params.named_blocks()[bi].1.data[i];
            m.params.named_blocks_mut()[bi].1.data[i] = orig + h;
            let up = loss(&m);
            m.params.named_blocks_mut()[bi].1.data[i] = orig - h;
            let down = loss(&m);
            m.params.named_blocks_mut()[bi].1.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = g.named_blocks()[bi].1.data[i];
            assert!(
                (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "block {bi}[{i}]: {a} vs {fd}"
            );
        }
    }
}

#[test]
fn lr_schedule_endpoints() {
    let c = OptimizerConfig {
        warmup_ratio: 0.1,
        total_steps: 100,
        ..OptimizerConfig::default()
    };
    assert_eq!(c.warmup_steps(), 10);
    assert_eq!(c.lr_at(0), 0.0);
    assert_eq!(c.lr_at(10), c.peak_lr);
    assert!((c.lr_at(55) - c.peak_lr / 2.0).abs() < 1e-15);
    assert!(c.lr_at(100).abs() < 1e-18);
    // ceil on the warmup length
    let c = OptimizerConfig {
        warmup_ratio: 0.01,
        total_steps: 8325,
        ..c
    };
    assert_eq!(c.warmup_steps(), 84);
}

#[test]
fn clipping_scales_to_unit_norm() {
    let m = ToyModel::<f64>::new(
        tiny_config(10, 4, 1),
        None,
        &mut stream_rng(0, Stream::Init),
    )
    .unwrap();
    let mut g = m.params.zeros_like();
    g.token_embedding.data[0] = 6.0;
    g.output_bias.data[3] = 8.0;
    let norm = clip_global_norm(&mut g, 1.0);
    assert_eq!(norm, 10.0);
    assert!((g.token_embedding.data[0] - 0.6).abs() < 1e-15);
    assert!((g.output_bias.data[3] - 0.8).abs() < 1e-15);
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut m = ToyModel::<f32>::new(
        tiny_config(10, 4, 1),
        None,
        &mut stream_rng(0, Stream::Init),
    )
    .unwrap();
    let before = m.params.clone();
    let mut opt = AdamW::new(
        OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        },
        &m.params,
    );
    for _ in 0..5 {
        let mut g = m.params.zeros_like();
        opt.step(&mut m.params, &mut g);
    }
    assert_eq!(m.params, before);
    assert_eq!(opt.t, 5);
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut m = ToyModel::<f64>::new(
        tiny_config(10, 4, 1),
        None,
        &mut stream_rng(0, Stream::Init),
    )
    .unwrap();
    let c = OptimizerConfig {
        weight_decay: 0.0,
        warmup_ratio: 0.0,
        clip_norm: None,
        peak_lr: 0.01,
        ..OptimizerConfig::default()
    };
    let mut opt = AdamW::new(c, &m.params);
    let before = m.params.output_bias.data.clone();
    let mut g = m.params.zeros_like();
    g.output_bias.data[2] = 0.3;
    g.output_bias.data[5] = -2.0;
    let (lr, _) = opt.step(&mut m.params, &mut g);
    assert_eq!(lr, 0.01);
    let moved: Vec<f64> = m
        .params
        .output_bias
        .data
        .iter()
        .zip(&before)
        .map(|(a, b)| a - b)
        .collect();
    assert!((moved[2] + 0.01).abs() < 1e-9);
    assert!((moved[5] - 0.01).abs() < 1e-9);
    assert_eq!(moved[0], 0.0);
}

#[test]
fn weight_decay_skips_embeddings_and_vectors() {
    let mut m = ToyModel::<f64>::new(
        tiny_config(10, 4, 1),
        None,
        &mut stream_rng(0, Stream::Init),
    )
    .unwrap();
    let before = m.params.clone();
    let mut opt = AdamW::new(
        OptimizerConfig {
            weight_decay: 0.5,
            warmup_ratio: 0.0,
            ..OptimizerConfig::default()
        },
        &m.params,
    );
    let mut g = m.params.zeros_like();
    opt.step(&mut m.params, &mut g);
    assert_eq!(m.params.token_embedding, before.token_embedding);
    assert_eq!(m.params.layers[0].ln1_gamma, before.layers[0].ln1_gamma);
    assert_ne!(m.params.layers[0].wq, before.layers[0].wq);
}

#[test]
fn checkpoint_round_trip_with_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let vocab = 25;
    let table = Arc::new(random_rows(vocab, 1));
    let cfg = ToyModelConfig {
        use_nhot: true,
        tie_embeddings: false,
        ..tiny_config(vocab, 8, 2)
    };
    let mut m =
        ToyModel::<f32>::new(cfg, Some(table.clone()), &mut stream_rng(3, Stream::Init)).unwrap();
    let mut opt = AdamW::new(OptimizerConfig::default(), &m.params);
    let b = batch();
    for _ in 0..3 {
        let (_, cache) = m.forward(&b, None).unwrap();
        let mut g = m.backward(&b, &cache);
        opt.step(&mut m.params, &mut g);
    }
    save_model(&path, &m, Some(&opt)).unwrap();
    let (m2, opt2) = load_model::<f32>(&path, Some(table.clone())).unwrap();
    assert_eq!(m2.params, m.params);
    assert_eq!(m2.config, m.config);
    assert_eq!(opt2.unwrap(), opt);

    assert!(matches!(
        load_model::<f64>(&path, Some(table.clone())),
        Err(Error::Incompatible { .. })
    ));
    assert!(matches!(
        load_model::<f32>(&path, None),
        Err(Error::Config(_))
    ));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(
        load_model::<f32>(&path, Some(table.clone())),
        Err(Error::Format { .. })
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        load_model::<f32>(&path, Some(table)),
        Err(Error::Format { .. })
    ));
}
