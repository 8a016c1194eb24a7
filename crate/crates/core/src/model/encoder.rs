use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LayerParams, ToyModel, ToyModelParams};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scheduler::{MaskDecision, TokenOutcome};

const LN_EPS: f64 = 1e-5;

/// One training example: corrupted input, original ids, positions to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub selected: Vec<usize>,
}

impl MaskedSequence {
    pub fn new(seq: &TokenSequence, decision: &MaskDecision, mask_id: u32) -> Self {
        MaskedSequence {
            input: decision.apply(&seq.ids, mask_id),
            target: seq.ids.clone(),
            selected: decision.positions.clone(),
        }
    }

    /// Predict every position from the uncorrupted input.
    pub fn all_positions(ids: &[u32]) -> Self {
        MaskedSequence {
            input: ids.to_vec(),
            target: ids.to_vec(),
            selected: (0..ids.len()).collect(),
        }
    }
}

/// Per-position outcomes of the selected positions, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub outcomes: Vec<TokenOutcome>,
    /// Mean cross-entropy over selected positions; 0 when none were selected.
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[n_selected, vocab]` logits, sequences in order, selected positions in
    /// the order given.
    pub logits: Vec<T>,
    pub outcome: BatchOutcome,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn n_selected(&self) -> usize {
        self.outcome.outcomes.len()
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[heads, len, len]`
    probs: Vec<T>,
    o: Vec<T>,
    drop1: Option<Vec<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    b: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
    drop2: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
struct SeqCache<T> {
    len: usize,
    drop0: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    xhatf: Vec<T>,
    rstdf: Vec<T>,
    h: Vec<T>,
    /// Softmax rows of the selected positions.
    probs_out: Vec<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    seqs: Vec<SeqCache<T>>,
    n_selected: usize,
}

impl<T: Scalar> ToyModel<T> {
    /// Runs the batch. With `dropout_rng = None` dropout is disabled.
    pub fn forward(
        &self,
        batch: &[MaskedSequence],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        let (d, vsz) = (cfg.d_model, cfg.vocab_size);
        let n_selected: usize = batch.iter().map(|s| s.selected.len()).sum();
        let mut logits_all = Vec::with_capacity(n_selected * vsz);
        let mut outcomes = Vec::with_capacity(n_selected);
        let mut seqs = Vec::with_capacity(batch.len());
        let out_w = self.output_matrix();
        let p_drop = cfg.dropout;

        for seq in batch {
            let len = seq.input.len();
            if len > cfg.max_len {
                return Err(Error::config(format!(
                    "sequence of length {len} exceeds max_len {}",
                    cfg.max_len
                )));
            }
            if seq.target.len() != len {
                return Err(Error::config("input and target lengths differ"));
            }
            for &id in seq.input.iter().chain(&seq.target) {
                if id as usize >= vsz {
                    return Err(Error::IdOutOfRange { id, size: vsz });
                }
            }

            let mut x = self.embed(&seq.input);
            let drop0 = apply_dropout(&mut x, p_drop, dropout_rng.as_deref_mut());

            let mut layers = Vec::with_capacity(self.params.layers.len());
            for lp in &self.params.layers {
                let (x_next, cache) = self.layer_forward(lp, x, len, dropout_rng.as_deref_mut());
                layers.push(cache);
                x = x_next;
            }
            let (h, xhatf, rstdf) = layer_norm(
                &x,
                &self.params.lnf_gamma.data,
                &self.params.lnf_beta.data,
                len,
                d,
            );

            let mut probs_out = Vec::with_capacity(seq.selected.len() * vsz);
            for &j in &seq.selected {
                if j >= len {
                    return Err(Error::config(format!("selected position {j} out of range")));
                }
                let hj = &h[j * d..(j + 1) * d];
                let row: Vec<T> = (0..vsz)
                    .map(|k| dot(hj, &out_w[k * d..(k + 1) * d]) + self.params.output_bias.data[k])
                    .collect();
                let (probs, lse) = softmax_with_lse(&row);
                let target = seq.target[j];
                let loss = (lse - row[target as usize]).as_f64();
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        step: 0,
                        detail: format!("non-finite loss at position {j} (target {target})"),
                    });
                }
                let mut best = 0;
                for k in 1..vsz {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                outcomes.push(TokenOutcome {
                    id: target,
                    correct: best == target as usize,
                    loss,
                });
                logits_all.extend_from_slice(&row);
                probs_out.extend_from_slice(&probs);
            }
            seqs.push(SeqCache {
                len,
                drop0,
                layers,
                xhatf,
                rstdf,
                h,
                probs_out,
            });
        }

        let mean_loss = if outcomes.is_empty() {
            0.0
        } else {
            outcomes.iter().map(|o| o.loss).sum::<f64>() / outcomes.len() as f64
        };
        Ok((
            ForwardOutput {
                logits: logits_all,
                outcome: BatchOutcome {
                    outcomes,
                    mean_loss,
                },
            },
            ForwardCache { seqs, n_selected },
        ))
    }

    /// Gradients of the mean masked cross-entropy.
    pub fn backward(&self, batch: &[MaskedSequence], cache: &ForwardCache<T>) -> ToyModelParams<T> {
        let mut grads = self.params.zeros_like();
        if cache.n_selected == 0 {
            return grads;
        }
        let cfg = &self.config;
        let (d, vsz) = (cfg.d_model, cfg.vocab_size);
        let inv_n = T::one() / T::from_count(cache.n_selected);
        let out_w = self.output_matrix();

        for (seq, sc) in batch.iter().zip(&cache.seqs) {
            if seq.selected.is_empty() {
                continue;
            }
            let len = sc.len;
            let mut dh = vec![T::zero(); len * d];
            for (s, &j) in seq.selected.iter().enumerate() {
                let probs = &sc.probs_out[s * vsz..(s + 1) * vsz];
                let target = seq.target[j] as usize;
                let hj = &sc.h[j * d..(j + 1) * d];
                let dhj = &mut dh[j * d..(j + 1) * d];
                let dw = match &mut grads.output_weight {
                    Some(w) => &mut w.data,
                    None => &mut grads.token_embedding.data,
                };
                for k in 0..vsz {
                    let mut g = probs[k];
                    if k == target {
                        g -= T::one();
                    }
                    g *= inv_n;
                    grads.output_bias.data[k] += g;
                    let wk = &out_w[k * d..(k + 1) * d];
                    let dwk = &mut dw[k * d..(k + 1) * d];
                    for c in 0..d {
                        dhj[c] += g * wk[c];
                        dwk[c] += g * hj[c];
                    }
                }
            }

            let mut dx = layer_norm_back(
                &dh,
                &sc.xhatf,
                &sc.rstdf,
                &self.params.lnf_gamma.data,
                len,
                d,
                &mut grads.lnf_gamma.data,
                &mut grads.lnf_beta.data,
            );
            for (li, lc) in sc.layers.iter().enumerate().rev() {
                dx = self.layer_backward(
                    &self.params.layers[li],
                    &mut grads.layers[li],
                    lc,
                    dx,
                    len,
                );
            }
            if let Some(m) = &sc.drop0 {
                for (g, &mk) in dx.iter_mut().zip(m) {
                    *g *= mk;
                }
            }
            let es = self.embed_scale();
            for g in dx.iter_mut() {
                *g *= es;
            }
            for (j, &id) in seq.input.iter().enumerate() {
                let row = &dx[j * d..(j + 1) * d];
                let id = id as usize;
                let e = &mut grads.token_embedding.data[id * d..(id + 1) * d];
                for c in 0..d {
                    e[c] += row[c];
                }
                if let (Some(gp), Some(table)) = (&mut grads.nhot_projection, &self.nhot) {
                    let feats = table.row(id);
                    let scale = self.nhot_scale(feats.len());
                    for &f in feats {
                        let pf = &mut gp.data[f as usize * d..(f as usize + 1) * d];
                        for c in 0..d {
                            pf[c] += scale * row[c];
                        }
                    }
                }
            }
        }
        grads
    }

    /// Mean masked loss without dropout; used by gradient checks.
    pub fn loss(&self, batch: &[MaskedSequence]) -> Result<f64> {
        Ok(self.forward(batch, None)?.0.outcome.mean_loss)
    }

    fn output_matrix(&self) -> &[T] {
        match &self.params.output_weight {
            Some(w) => &w.data,
            None => &self.params.token_embedding.data,
        }
    }

    fn nhot_scale(&self, n_features: usize) -> T {
        if self.config.nhot_normalize && n_features > 0 {
            T::one() / T::from_count(n_features)
        } else {
            T::one()
        }
    }

    /// `√d · (E[id] + Pᵀ·nhot(id)) + pos`
    fn embed(&self, ids: &[u32]) -> Vec<T> {
        let d = self.config.d_model;
        let scale = self.embed_scale();
        let mut x = vec![T::zero(); ids.len() * d];
        for (j, &id) in ids.iter().enumerate() {
            let id = id as usize;
            let row = &mut x[j * d..(j + 1) * d];
            row.copy_from_slice(&self.params.token_embedding.data[id * d..(id + 1) * d]);
            if let (Some(p), Some(table)) = (&self.params.nhot_projection, &self.nhot) {
                let feats = table.row(id);
                let fs = self.nhot_scale(feats.len());
                for &f in feats {
                    let pf = &p.data[f as usize * d..(f as usize + 1) * d];
                    for c in 0..d {
                        row[c] += fs * pf[c];
                    }
                }
            }
            let pos = &self.positional[j * d..(j + 1) * d];
            for c in 0..d {
                row[c] = scale * row[c] + pos[c];
            }
        }
        x
    }

    fn embed_scale(&self) -> T {
        T::from_count(self.config.d_model).sqrt()
    }

    fn layer_forward(
        &self,
        lp: &LayerParams<T>,
        x_in: Vec<T>,
        len: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<T>, LayerCache<T>) {
        let cfg = &self.config;
        let (d, ff, nh) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = cfg.head_dim();
        let scale = T::one() / T::from_count(dh).sqrt();

        let (a, xhat1, rstd1) = layer_norm(&x_in, &lp.ln1_gamma.data, &lp.ln1_beta.data, len, d);
        let q = linear(&a, &lp.wq.data, &lp.bq.data, len, d, d);
        let k = linear(&a, &lp.wk.data, &lp.bk.data, len, d, d);
        let v = linear(&a, &lp.wv.data, &lp.bv.data, len, d, d);

        let mut probs = vec![T::zero(); nh * len * len];
        let mut o = vec![T::zero(); len * d];
        for h in 0..nh {
            let off = h * dh;
            for i in 0..len {
                let qi = &q[i * d + off..i * d + off + dh];
                let row = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                for j in 0..len {
                    row[j] = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                }
                softmax_in_place(row);
                let oi = &mut o[i * d + off..i * d + off + dh];
                for j in 0..len {
                    let pij = row[j];
                    let vj = &v[j * d + off..j * d + off + dh];
                    for c in 0..dh {
                        oi[c] += pij * vj[c];
                    }
                }
            }
        }
        let mut y = linear(&o, &lp.wo.data, &lp.bo.data, len, d, d);
        let drop1 = apply_dropout(&mut y, cfg.dropout, rng.as_deref_mut());
        let mut x_mid = x_in;
        for (xm, yv) in x_mid.iter_mut().zip(&y) {
            *xm += *yv;
        }

        let (b, xhat2, rstd2) = layer_norm(&x_mid, &lp.ln2_gamma.data, &lp.ln2_beta.data, len, d);
        let u = linear(&b, &lp.w1.data, &lp.b1.data, len, d, ff);
        let g: Vec<T> = u.iter().map(|&x| gelu(x)).collect();
        let mut z = linear(&g, &lp.w2.data, &lp.b2.data, len, ff, d);
        let drop2 = apply_dropout(&mut z, cfg.dropout, rng);
        let mut x_out = x_mid;
        for (xo, zv) in x_out.iter_mut().zip(&z) {
            *xo += *zv;
        }

        (
            x_out,
            LayerCache {
                xhat1,
                rstd1,
                a,
                q,
                k,
                v,
                probs,
                o,
                drop1,
                xhat2,
                rstd2,
                b,
                u,
                g,
                drop2,
            },
        )
    }

    /// Backpropagates `dx` (gradient w.r.t. the layer output) and returns the
    /// gradient w.r.t. the layer input.
    fn layer_backward(
        &self,
        lp: &LayerParams<T>,
        gp: &mut LayerParams<T>,
        c: &LayerCache<T>,
        dx: Vec<T>,
        len: usize,
    ) -> Vec<T> {
        let cfg = &self.config;
        let (d, ff, nh) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = cfg.head_dim();
        let scale = T::one() / T::from_count(dh).sqrt();

        // feed-forward branch
        let mut dz = dx.clone();
        if let Some(m) = &c.drop2 {
            for (g, &mk) in dz.iter_mut().zip(m) {
                *g *= mk;
            }
        }
        let dg = linear_back(
            &c.g,
            &dz,
            &lp.w2.data,
            len,
            ff,
            d,
            &mut gp.w2.data,
            &mut gp.b2.data,
        );
        let du: Vec<T> = dg
            .iter()
            .zip(&c.u)
            .map(|(&g, &u)| g * gelu_grad(u))
            .collect();
        let db = linear_back(
            &c.b,
            &du,
            &lp.w1.data,
            len,
            d,
            ff,
            &mut gp.w1.data,
            &mut gp.b1.data,
        );
        let dmid = layer_norm_back(
            &db,
            &c.xhat2,
            &c.rstd2,
            &lp.ln2_gamma.data,
            len,
            d,
            &mut gp.ln2_gamma.data,
            &mut gp.ln2_beta.data,
        );
        let mut dx_mid = dx;
        for (a, b) in dx_mid.iter_mut().zip(&dmid) {
            *a += *b;
        }

        // attention branch
        let mut dy = dx_mid.clone();
        if let Some(m) = &c.drop1 {
            for (g, &mk) in dy.iter_mut().zip(m) {
                *g *= mk;
            }
        }
        let d_o = linear_back(
            &c.o,
            &dy,
            &lp.wo.data,
            len,
            d,
            d,
            &mut gp.wo.data,
            &mut gp.bo.data,
        );
        let mut dq = vec![T::zero(); len * d];
        let mut dk = vec![T::zero(); len * d];
        let mut dv = vec![T::zero(); len * d];
        let mut ds = vec![T::zero(); len];
        for h in 0..nh {
            let off = h * dh;
            for i in 0..len {
                let p = &c.probs[(h * len + i) * len..(h * len + i + 1) * len];
                let doi = &d_o[i * d + off..i * d + off + dh];
                let mut weighted = T::zero();
                for j in 0..len {
                    let vj = &c.v[j * d + off..j * d + off + dh];
                    let da = dot(doi, vj);
                    ds[j] = da;
                    weighted += p[j] * da;
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for cc in 0..dh {
                        dvj[cc] += p[j] * doi[cc];
                    }
                }
                let qi = &c.q[i * d + off..i * d + off + dh];
                for j in 0..len {
                    let s = p[j] * (ds[j] - weighted) * scale;
                    if s == T::zero() {
                        continue;
                    }
                    let kj = &c.k[j * d + off..j * d + off + dh];
                    for cc in 0..dh {
                        dq[i * d + off + cc] += s * kj[cc];
                        dk[j * d + off + cc] += s * qi[cc];
                    }
                }
            }
        }
        let mut da = linear_back(
            &c.a,
            &dq,
            &lp.wq.data,
            len,
            d,
            d,
            &mut gp.wq.data,
            &mut gp.bq.data,
        );
        let da_k = linear_back(
            &c.a,
            &dk,
            &lp.wk.data,
            len,
            d,
            d,
            &mut gp.wk.data,
            &mut gp.bk.data,
        );
        let da_v = linear_back(
            &c.a,
            &dv,
            &lp.wv.data,
            len,
            d,
            d,
            &mut gp.wv.data,
            &mut gp.bv.data,
        );
        for ((a, b), c2) in da.iter_mut().zip(&da_k).zip(&da_v) {
            *a += *b + *c2;
        }
        let din = layer_norm_back(
            &da,
            &c.xhat1,
            &c.rstd1,
            &lp.ln1_gamma.data,
            len,
            d,
            &mut gp.ln1_gamma.data,
            &mut gp.ln1_beta.data,
        );
        for (a, b) in dx_mid.iter_mut().zip(&din) {
            *a += *b;
        }
        dx_mid
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

/// `x [n, k] · w [k, m] + b`
fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * m);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    for i in 0..n {
        let yi = &mut y[i * m..(i + 1) * m];
        for kk in 0..k {
            let a = x[i * k + kk];
            let wr = &w[kk * m..(kk + 1) * m];
            for j in 0..m {
                yi[j] += a * wr[j];
            }
        }
    }
    y
}

/// Accumulates `dw += xᵀ dy`, `db += Σ dy` and returns `dx = dy · wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_back<T: Scalar>(
    x: &[T],
    dy: &[T],
    w: &[T],
    n: usize,
    k: usize,
    m: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * k];
    for i in 0..n {
        let dyi = &dy[i * m..(i + 1) * m];
        for j in 0..m {
            db[j] += dyi[j];
        }
        for kk in 0..k {
            let a = x[i * k + kk];
            let wr = &w[kk * m..(kk + 1) * m];
            let dwr = &mut dw[kk * m..(kk + 1) * m];
            let mut acc = T::zero();
            for j in 0..m {
                dwr[j] += a * dyi[j];
                acc += dyi[j] * wr[j];
            }
            dx[i * k + kk] = acc;
        }
    }
    dx
}

/// Row-wise layer norm; returns output, normalized input and reciprocal std.
fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); n * d];
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let dn = T::from_count(d);
    let eps = T::c(LN_EPS);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
        let var = row
            .iter()
            .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
            / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for c in 0..d {
            let xh = (row[c] - mean) * r;
            xhat[i * d + c] = xh;
            y[i * d + c] = gamma[c] * xh + beta[c];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_back<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    n: usize,
    d: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * d];
    let dn = T::from_count(d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dgamma[c] += dyi[c] * xh[c];
            dbeta[c] += dyi[c];
            dxhat[c] = dyi[c] * gamma[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= dn;
        mean_dxhat_xhat /= dn;
        for c in 0..d {
            dx[i * d + c] = rstd[i] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of `row` and its log-sum-exp.
fn softmax_with_lse<T: Scalar>(row: &[T]) -> (Vec<T>, T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut probs: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum = probs.iter().fold(T::zero(), |s, &v| s + v);
    for p in probs.iter_mut() {
        *p /= sum;
    }
    (probs, max + sum.ln())
}

const GELU_K: f64 = 0.044715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let t = (c * (x + T::c(GELU_K) * x * x * x)).tanh();
    T::c(0.5) * x * (T::one() + t)
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let k = T::c(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::c(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * k * x * x)
}

/// Inverted dropout in place. Returns the applied mask (0 or 1/(1−p)).
fn apply_dropout<T: Scalar>(x: &mut [T], p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::c(1.0 / (1.0 - p));
    let mask: Vec<T> = x
        .iter()
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}
