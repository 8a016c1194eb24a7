//! Scheduler checkpoint file.
//!
//! All numbers little-endian, fixed width:
//!
//! ```text
//! magic               8 bytes  "AMLMSCH\0"
//! version             u32
//! config echo
//!   p_start p_end     f64 f64
//!   total_steps       u64
//!   lambda            f64
//!   timestep_batches  u64
//!   metric            u8   (0 regular, 1 hard, 2 soft)
//!   schedule          u8   (0 constant, 1 decay)
//!   track_schedule    u8
//!   mask/random/keep  f64 f64 f64
//!   seed              u64
//! vocab_size V        u64
//! step t              u64 u64
//! p_current p_max     f64 f64
//! special             V × u8
//! w                   V × f64
//! correct total       V × u64, V × u64
//! loss_sum            V × f64
//! loss_count          V × u64
//! rng select          32-byte key, u64 stream, u128 word position
//! rng corrupt         same layout
//! ```

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{
    AmlmScheduler, MaskRng, MaskScheduleConfig, MaskWeightTable, Metric, ScheduleKind,
    TokenStatsAccumulator,
};
use crate::binio::*;
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"AMLMSCH\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const WHAT: &str = "scheduler checkpoint";

fn metric_code(m: Metric) -> u8 {
    match m {
        Metric::Regular => 0,
        Metric::Hard => 1,
        Metric::Soft => 2,
    }
}

fn schedule_code(s: ScheduleKind) -> u8 {
    match s {
        ScheduleKind::Constant => 0,
        ScheduleKind::Decay => 1,
    }
}

pub(crate) fn write_config<W: Write>(w: &mut W, c: &MaskScheduleConfig) -> io::Result<()> {
    write_f64(w, c.p_start)?;
    write_f64(w, c.p_end)?;
    write_u64(w, c.total_steps)?;
    write_f64(w, c.lambda)?;
    write_u64(w, c.timestep_batches)?;
    write_u8(w, metric_code(c.metric))?;
    write_u8(w, schedule_code(c.schedule))?;
    write_u8(w, c.track_schedule as u8)?;
    write_f64(w, c.mask_frac)?;
    write_f64(w, c.random_frac)?;
    write_f64(w, c.keep_frac)?;
    write_u64(w, c.seed)
}

fn read_config<R: Read>(r: &mut R) -> Result<MaskScheduleConfig> {
    let io = |e: io::Error| map_read_err(e);
    let p_start = read_f64(r).map_err(io)?;
    let p_end = read_f64(r).map_err(io)?;
    let total_steps = read_u64(r).map_err(io)?;
    let lambda = read_f64(r).map_err(io)?;
    let timestep_batches = read_u64(r).map_err(io)?;
    let metric = match read_u8(r).map_err(io)? {
        0 => Metric::Regular,
        1 => Metric::Hard,
        2 => Metric::Soft,
        x => return Err(Error::format(WHAT, format!("unknown metric code {x}"))),
    };
    let schedule = match read_u8(r).map_err(io)? {
        0 => ScheduleKind::Constant,
        1 => ScheduleKind::Decay,
        x => return Err(Error::format(WHAT, format!("unknown schedule code {x}"))),
    };
    let track_schedule = read_u8(r).map_err(io)? != 0;
    Ok(MaskScheduleConfig {
        p_start,
        p_end,
        total_steps,
        lambda,
        timestep_batches,
        metric,
        schedule,
        track_schedule,
        mask_frac: read_f64(r).map_err(io)?,
        random_frac: read_f64(r).map_err(io)?,
        keep_frac: read_f64(r).map_err(io)?,
        seed: read_u64(r).map_err(io)?,
    })
}

fn map_read_err(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::format(WHAT, "truncated file")
    } else {
        Error::format(WHAT, e.to_string())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, s: &AmlmScheduler) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_all(&mut w, s).map_err(|e| Error::io(path, e))
}

fn write_all<W: Write>(w: &mut W, s: &AmlmScheduler) -> io::Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    write_config(w, &s.config)?;
    let t = &s.table;
    write_u64(w, t.w.len() as u64)?;
    write_u64(w, s.step)?;
    write_u64(w, t.t)?;
    write_f64(w, t.p_current)?;
    write_f64(w, t.p_max)?;
    for &sp in &t.special {
        write_u8(w, sp as u8)?;
    }
    for &x in &t.w {
        write_f64(w, x)?;
    }
    let a = &s.acc;
    for &x in &a.correct {
        write_u64(w, x)?;
    }
    for &x in &a.total {
        write_u64(w, x)?;
    }
    for &x in &a.loss_sum {
        write_f64(w, x)?;
    }
    for &x in &a.loss_count {
        write_u64(w, x)?;
    }
    RngState::capture(&s.rng.select).write(w)?;
    RngState::capture(&s.rng.corrupt).write(w)?;
    w.flush()
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AmlmScheduler> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let s = read_all(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(WHAT, "trailing bytes after rng state"));
    }
    Ok(s)
}

fn read_all<R: Read>(r: &mut R) -> Result<AmlmScheduler> {
    let magic = read_magic(r).map_err(map_read_err)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(WHAT, format!("bad magic {magic:?}")));
    }
    let version = read_u32(r).map_err(map_read_err)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            what: "scheduler checkpoint version",
            expected: CHECKPOINT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let config = read_config(r)?;
    let n = read_u64(r).map_err(map_read_err)? as usize;
    if n > (1 << 28) {
        return Err(Error::format(
            WHAT,
            format!("implausible vocabulary size {n}"),
        ));
    }
    let step = read_u64(r).map_err(map_read_err)?;
    let t = read_u64(r).map_err(map_read_err)?;
    let p_current = read_f64(r).map_err(map_read_err)?;
    let p_max = read_f64(r).map_err(map_read_err)?;

    let mut special = Vec::with_capacity(n);
    for _ in 0..n {
        special.push(read_u8(r).map_err(map_read_err)? != 0);
    }
    let f64s = |r: &mut R| -> Result<Vec<f64>> {
        (0..n).map(|_| read_f64(r).map_err(map_read_err)).collect()
    };
    let u64s = |r: &mut R| -> Result<Vec<u64>> {
        (0..n).map(|_| read_u64(r).map_err(map_read_err)).collect()
    };
    let w = f64s(r)?;
    let acc = TokenStatsAccumulator {
        correct: u64s(r)?,
        total: u64s(r)?,
        loss_sum: f64s(r)?,
        loss_count: u64s(r)?,
    };
    let select = RngState::read(r).map_err(map_read_err)?.restore();
    let corrupt = RngState::read(r).map_err(map_read_err)?.restore();

    let mut table = MaskWeightTable::with_special_mask(&config, special);
    table.w = w;
    table.t = t;
    table.p_current = p_current;
    table.p_max = p_max;
    Ok(AmlmScheduler {
        config,
        table,
        acc,
        rng: MaskRng { select, corrupt },
        step,
    })
}
