//! Seed splitting.
//!
//! Every random decision in a run derives from one `u64` seed. Each consumer
//! gets its own ChaCha8 stream: the generator is keyed with
//! `ChaCha8Rng::seed_from_u64(seed)` and then moved to the stream number of
//! its [`Stream`]. Streams never overlap, so adding draws to one consumer
//! leaves all others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio;

/// Named sub-streams of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Parameter initialization.
    Init = 1,
    /// Epoch shuffling of training sequences.
    Shuffle = 2,
    /// Selection of positions to predict.
    MaskSelect = 3,
    /// Mask / random / keep actions and random replacement ids.
    MaskCorrupt = 4,
    /// Dropout masks.
    Dropout = 5,
    /// Synthetic data generation.
    Synthetic = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Exact position of a ChaCha8 generator, enough to restore it bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            key: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub(crate) fn write<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.key)?;
        binio::write_u64(w, self.stream)?;
        binio::write_u128(w, self.word_pos)
    }

    pub(crate) fn read<R: std::io::Read>(r: &mut R) -> std::io::Result<Self> {
        let mut key = [0u8; 32];
        r.read_exact(&mut key)?;
        let stream = binio::read_u64(r)?;
        let word_pos = binio::read_u128(r)?;
        Ok(RngState {
            key,
            stream,
            word_pos,
        })
    }
}
