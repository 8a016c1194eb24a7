//! Model checkpoint file.
//!
//! Little-endian, fixed width. Parameter values use the model's scalar type.
//!
//! ```text
//! magic            8 bytes  "AMLMMODL"
//! version          u32
//! dtype            u8   (1 = f32, 2 = f64)
//! config           vocab_size d_model n_layers n_heads d_ff max_len: u64 each
//!                  dropout f64, use_nhot u8, nhot_normalize u8,
//!                  tie_embeddings u8, init_std f64
//! n_blocks         u32
//! block            name (u32 length + UTF-8), ndim u32, dims ndim × u64,
//!                  values product(dims) × dtype
//! has_optimizer    u8
//! optimizer        peak_lr beta1 beta2 eps weight_decay warmup_ratio: f64
//!                  total_steps u64, has_clip u8, clip_norm f64, t u64
//!                  first moments, second moments: values of every block in
//!                  block order
//! ```

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{AdamW, OptimizerConfig, ToyModel, ToyModelConfig, ToyModelParams};
use crate::binio::*;
use crate::error::{Error, Result};
use crate::nhot::NHotTable;
use crate::scalar::Scalar;

pub const MODEL_MAGIC: [u8; 8] = *b"AMLMMODL";
pub const MODEL_VERSION: u32 = 1;

const WHAT: &str = "model checkpoint";

fn read_err(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::format(WHAT, "truncated file")
    } else {
        Error::format(WHAT, e.to_string())
    }
}

pub fn save_model<T: Scalar>(
    path: impl AsRef<Path>,
    model: &ToyModel<T>,
    optimizer: Option<&AdamW<T>>,
) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_model(&mut w, model, optimizer).map_err(|e| Error::io(path, e))
}

fn write_model<T: Scalar, W: Write>(
    w: &mut W,
    model: &ToyModel<T>,
    optimizer: Option<&AdamW<T>>,
) -> io::Result<()> {
    w.write_all(&MODEL_MAGIC)?;
    write_u32(w, MODEL_VERSION)?;
    write_u8(w, T::DTYPE)?;
    let c = &model.config;
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ff,
        c.max_len,
    ] {
        write_u64(w, v as u64)?;
    }
    write_f64(w, c.dropout)?;
    write_u8(w, c.use_nhot as u8)?;
    write_u8(w, c.nhot_normalize as u8)?;
    write_u8(w, c.tie_embeddings as u8)?;
    write_f64(w, c.init_std)?;

    let blocks = model.params.named_blocks();
    write_u32(w, blocks.len() as u32)?;
    for (name, t) in &blocks {
        write_str(w, name)?;
        write_u32(w, t.shape.len() as u32)?;
        for &d in &t.shape {
            write_u64(w, d as u64)?;
        }
        for &x in &t.data {
            x.write_le(w)?;
        }
    }

    match optimizer {
        None => write_u8(w, 0)?,
        Some(opt) => {
            write_u8(w, 1)?;
            let o = &opt.config;
            for v in [
                o.peak_lr,
                o.beta1,
                o.beta2,
                o.eps,
                o.weight_decay,
                o.warmup_ratio,
            ] {
                write_f64(w, v)?;
            }
            write_u64(w, o.total_steps)?;
            write_u8(w, o.clip_norm.is_some() as u8)?;
            write_f64(w, o.clip_norm.unwrap_or(0.0))?;
            write_u64(w, opt.t)?;
            for moments in [&opt.m, &opt.v] {
                for (_, t) in moments.named_blocks() {
                    for &x in &t.data {
                        x.write_le(w)?;
                    }
                }
            }
        }
    }
    w.flush()
}

/// Loads a checkpoint written with the same scalar type. `nhot` must be given
/// when the stored config uses n-hot features.
pub fn load_model<T: Scalar>(
    path: impl AsRef<Path>,
    nhot: Option<Arc<NHotTable>>,
) -> Result<(ToyModel<T>, Option<AdamW<T>>)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let out = read_model(&mut r, nhot)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(WHAT, "trailing bytes"));
    }
    Ok(out)
}

fn read_values<T: Scalar, R: Read>(r: &mut R, params: &mut ToyModelParams<T>) -> Result<()> {
    for (_, t) in params.named_blocks_mut() {
        for x in t.data.iter_mut() {
            *x = T::read_le(r).map_err(read_err)?;
        }
    }
    Ok(())
}

fn read_model<T: Scalar, R: Read>(
    r: &mut R,
    nhot: Option<Arc<NHotTable>>,
) -> Result<(ToyModel<T>, Option<AdamW<T>>)> {
    let magic = read_magic(r).map_err(read_err)?;
    if magic != MODEL_MAGIC {
        return Err(Error::format(WHAT, format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(read_err)?;
    if version != MODEL_VERSION {
        return Err(Error::Incompatible {
            what: "model checkpoint version",
            expected: MODEL_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let dtype = read_u8(r).map_err(read_err)?;
    if dtype != T::DTYPE {
        return Err(Error::Incompatible {
            what: "model checkpoint scalar type",
            expected: T::DTYPE.to_string(),
            found: dtype.to_string(),
        });
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        let v = read_u64(r).map_err(read_err)?;
        if v > (1 << 28) {
            return Err(Error::format(WHAT, format!("implausible dimension {v}")));
        }
        *d = v as usize;
    }
    let [vocab_size, d_model, n_layers, n_heads, d_ff, max_len] = dims;
    let config = ToyModelConfig {
        vocab_size,
        d_model,
        n_layers,
        n_heads,
        d_ff,
        max_len,
        dropout: read_f64(r).map_err(read_err)?,
        use_nhot: read_u8(r).map_err(read_err)? != 0,
        nhot_normalize: read_u8(r).map_err(read_err)? != 0,
        tie_embeddings: read_u8(r).map_err(read_err)? != 0,
        init_std: read_f64(r).map_err(read_err)?,
    };
    config
        .validate()
        .map_err(|e| Error::format(WHAT, format!("stored config invalid: {e}")))?;

    // The expected layout follows from the config; stored names and shapes
    // must match it block by block.
    let mut params = ToyModelParams::<T>::init(
        &config,
        &mut crate::rng::stream_rng(0, crate::rng::Stream::Init),
    );
    let n_blocks = read_u32(r).map_err(read_err)? as usize;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_blocks()
        .into_iter()
        .map(|(n, t)| (n, t.shape.clone()))
        .collect();
    if n_blocks != expected.len() {
        return Err(Error::format(
            WHAT,
            format!(
                "{n_blocks} parameter blocks, config implies {}",
                expected.len()
            ),
        ));
    }
    for ((name, shape), (_, t)) in expected.iter().zip(params.named_blocks_mut()) {
        let stored = read_str(r, 256).map_err(read_err)?;
        let ndim = read_u32(r).map_err(read_err)? as usize;
        if ndim > 4 {
            return Err(Error::format(
                WHAT,
                format!("block {stored}: {ndim} dimensions"),
            ));
        }
        let mut stored_shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            stored_shape.push(read_u64(r).map_err(read_err)? as usize);
        }
        if &stored != name || &stored_shape != shape {
            return Err(Error::format(
                WHAT,
                format!("expected block {name} {shape:?}, found {stored} {stored_shape:?}"),
            ));
        }
        for x in t.data.iter_mut() {
            *x = T::read_le(r).map_err(read_err)?;
        }
    }

    let optimizer = match read_u8(r).map_err(read_err)? {
        0 => None,
        1 => {
            let mut f = [0f64; 6];
            for v in f.iter_mut() {
                *v = read_f64(r).map_err(read_err)?;
            }
            let total_steps = read_u64(r).map_err(read_err)?;
            let has_clip = read_u8(r).map_err(read_err)? != 0;
            let clip = read_f64(r).map_err(read_err)?;
            let t = read_u64(r).map_err(read_err)?;
            let oc = OptimizerConfig {
                peak_lr: f[0],
                beta1: f[1],
                beta2: f[2],
                eps: f[3],
                weight_decay: f[4],
                warmup_ratio: f[5],
                total_steps,
                clip_norm: has_clip.then_some(clip),
            };
            let mut opt = AdamW::new(oc, &params);
            opt.t = t;
            read_values(r, &mut opt.m)?;
            read_values(r, &mut opt.v)?;
            Some(opt)
        }
        x => return Err(Error::format(WHAT, format!("bad optimizer flag {x}"))),
    };

    if !params.all_finite() {
        return Err(Error::format(WHAT, "non-finite parameter values"));
    }
    let model = ToyModel::from_params(config, params, nhot)?;
    Ok((model, optimizer))
}
