//! Seeded random streams.
//!
//! One master seed spawns independent ChaCha streams by name, so that the
//! data shuffle, reparameterization noise and initialization never share
//! state. Stream positions serialize exactly, which makes checkpoint
//! resume reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Noise = 3,
    Validation = 4,
    Data = 5,
    Eval = 6,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    substream(seed, which, 0)
}

/// Stream `which` further indexed by `index` (e.g. the epoch number).
pub fn substream(seed: u64, which: Stream, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(((which as u64) << 48) | (index & 0xFFFF_FFFF_FFFF));
    rng
}

/// Child generator seeded from the parent's output.
pub fn fork(rng: &mut Rng) -> Rng {
    Rng::from_rng(rng)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng)).collect())
}

/// Serializable position of a [`Rng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bad = || Error::Format(format!("invalid rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}
