//! A small transformer encoder for masked-token prediction, with an optional
//! additive n-hot sub-token embedding.
//!
//! Input embedding at position `j`:
//!
//! ```text
//! x_j = √d · (E[id_j] + P^T · nhot(id_j)) + pos_j
//! ```
//!
//! followed by pre-norm encoder layers, a final layer norm and a softmax head.
//! Gradients are computed by hand in [`ToyModel::backward`].

mod checkpoint;
mod encoder;
mod optim;

pub use checkpoint::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use encoder::{BatchOutcome, ForwardCache, ForwardOutput, MaskedSequence};
pub use optim::{clip_global_norm, AdamW, OptimizerConfig};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nhot::NHotTable;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub use_nhot: bool,
    /// Divide the n-hot vector by its number of active features.
    pub nhot_normalize: bool,
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl ToyModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ToyModelConfig {
            vocab_size,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            max_len: 256,
            dropout: 0.1,
            use_nhot: false,
            nhot_normalize: false,
            tie_embeddings: true,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::config(
                "vocab_size, d_ff and max_len must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| T::c(dist.sample(rng)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    /// Projections are stored `[in, out]`: `y = x · W + b`.
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams<T> {
    /// `[vocab, d_model]`
    pub token_embedding: Tensor<T>,
    /// `[vocab, d_model]`, row `f` is the contribution of feature `f`.
    pub nhot_projection: Option<Tensor<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gamma: Tensor<T>,
    pub lnf_beta: Tensor<T>,
    /// `[vocab, d_model]`; absent when tied to the token embedding.
    pub output_weight: Option<Tensor<T>>,
    pub output_bias: Tensor<T>,
}

impl<T: Scalar> ToyModelParams<T> {
    /// Normal(0, std) matrices, zero biases, unit layer-norm gains.
    pub fn init<R: Rng>(config: &ToyModelConfig, rng: &mut R) -> Self {
        let (v, d, ff, s) = (
            config.vocab_size,
            config.d_model,
            config.d_ff,
            config.init_std,
        );
        let token_embedding = Tensor::normal(&[v, d], s, rng);
        let nhot_projection = config.use_nhot.then(|| Tensor::normal(&[v, d], s, rng));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gamma: Tensor::filled(&[d], T::one()),
                ln1_beta: Tensor::zeros(&[d]),
                wq: Tensor::normal(&[d, d], s, rng),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::normal(&[d, d], s, rng),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::normal(&[d, d], s, rng),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::normal(&[d, d], s, rng),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::filled(&[d], T::one()),
                ln2_beta: Tensor::zeros(&[d]),
                w1: Tensor::normal(&[d, ff], s, rng),
                b1: Tensor::zeros(&[ff]),
                w2: Tensor::normal(&[ff, d], s, rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let output_weight = (!config.tie_embeddings).then(|| Tensor::normal(&[v, d], s, rng));
        ToyModelParams {
            token_embedding,
            nhot_projection,
            layers,
            lnf_gamma: Tensor::filled(&[d], T::one()),
            lnf_beta: Tensor::zeros(&[d]),
            output_weight,
            output_bias: Tensor::zeros(&[v]),
        }
    }

    /// Same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_blocks_mut() {
            t.data.fill(T::zero());
        }
        z
    }

    /// Blocks in canonical order with stable names.
    pub fn named_blocks(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        if let Some(p) = &self.nhot_projection {
            out.push(("nhot_projection".into(), p));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let blocks = [
                ("ln1_gamma", &l.ln1_gamma),
                ("ln1_beta", &l.ln1_beta),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_gamma", &l.ln2_gamma),
                ("ln2_beta", &l.ln2_beta),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ];
            out.extend(
                blocks
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("lnf_gamma".into(), &self.lnf_gamma));
        out.push(("lnf_beta".into(), &self.lnf_beta));
        if let Some(w) = &self.output_weight {
            out.push(("output_weight".into(), w));
        }
        out.push(("output_bias".into(), &self.output_bias));
        out
    }

    /// Mutable blocks in the same order as [`Self::named_blocks`].
    pub fn named_blocks_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("token_embedding".to_string(), &mut self.token_embedding)];
        if let Some(p) = &mut self.nhot_projection {
            out.push(("nhot_projection".into(), p));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            let blocks = [
                ("ln1_gamma", &mut l.ln1_gamma),
                ("ln1_beta", &mut l.ln1_beta),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2_gamma", &mut l.ln2_gamma),
                ("ln2_beta", &mut l.ln2_beta),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ];
            out.extend(
                blocks
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("lnf_gamma".into(), &mut self.lnf_gamma));
        out.push(("lnf_beta".into(), &mut self.lnf_beta));
        if let Some(w) = &mut self.output_weight {
            out.push(("output_weight".into(), w));
        }
        out.push(("output_bias".into(), &mut self.output_bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_blocks().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_blocks()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn check_shapes(&self, config: &ToyModelConfig) -> Result<()> {
        let expected = Self::init(
            config,
            &mut crate::rng::stream_rng(0, crate::rng::Stream::Init),
        );
        let names: Vec<(String, Vec<usize>)> = expected
            .named_blocks()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        let actual: Vec<(String, Vec<usize>)> = self
            .named_blocks()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        if names != actual {
            return Err(Error::Incompatible {
                what: "model parameter layout",
                expected: format!("{} blocks", names.len()),
                found: format!("{} blocks", actual.len()),
            });
        }
        Ok(())
    }
}

/// Configuration, parameters and the precomputed feature table.
#[derive(Debug, Clone)]
pub struct ToyModel<T> {
    pub config: ToyModelConfig,
    pub params: ToyModelParams<T>,
    pub nhot: Option<Arc<NHotTable>>,
    positional: Vec<T>,
}

impl<T: Scalar> ToyModel<T> {
    pub fn new<R: Rng>(
        config: ToyModelConfig,
        nhot: Option<Arc<NHotTable>>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let params = ToyModelParams::init(&config, rng);
        Self::from_params(config, params, nhot)
    }

    pub fn from_params(
        config: ToyModelConfig,
        params: ToyModelParams<T>,
        nhot: Option<Arc<NHotTable>>,
    ) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        match (&nhot, config.use_nhot) {
            (Some(t), true) if t.vocab_size() != config.vocab_size => {
                return Err(Error::Incompatible {
                    what: "n-hot table vocabulary size",
                    expected: config.vocab_size.to_string(),
                    found: t.vocab_size().to_string(),
                })
            }
            (None, true) => {
                return Err(Error::config(
                    "use_nhot is set but no n-hot table was given",
                ))
            }
            _ => {}
        }
        let positional = sinusoidal(config.max_len, config.d_model);
        Ok(ToyModel {
            config,
            params,
            nhot,
            positional,
        })
    }
}

/// Fixed sinusoidal positions, `[max_len, d]` row-major.
pub fn sinusoidal<T: Scalar>(max_len: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let k = (i / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(k as f64 / d as f64);
            out[pos * d + i] = T::c(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}
