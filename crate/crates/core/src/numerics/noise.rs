//! Counter-keyed Brownian increments.
//!
//! Increment `i` of a stream is a pure function of
//! `(master_seed, channel, replica_id, i)`: the channel selects a ChaCha8 key,
//! the replica selects the ChaCha stream id and `i` selects the word position.
//! Each increment consumes exactly two 64-bit outputs (one Box–Muller draw), so
//! any index can be reached without generating its predecessors.

use std::f64::consts::PI;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Words of ChaCha output consumed per increment (two u64 values).
const WORDS_PER_DRAW: u128 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// Shared driver of ξ and η in the single-noise model.
    W,
    W1,
    W2,
    W3,
}

impl Channel {
    fn tag(self) -> u64 {
        match self {
            Channel::W => 0x5745_0000_0000_0001,
            Channel::W1 => 0x5745_0000_0000_0011,
            Channel::W2 => 0x5745_0000_0000_0021,
            Channel::W3 => 0x5745_0000_0000_0031,
        }
    }
}

pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for an auxiliary computation (ergodic estimators, samplers) so
/// it never reuses a simulation stream.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(master ^ mix64(h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseStream {
    pub master_seed: u64,
    pub channel: Channel,
    pub replica_id: u64,
    pub base_step: f64,
}

impl NoiseStream {
    pub fn new(master_seed: u64, channel: Channel, replica_id: u64, base_step: f64) -> Result<Self> {
        if !(base_step > 0.0 && base_step.is_finite()) {
            return Err(Error::InvalidArgument(format!("base step must be positive, got {base_step}")));
        }
        Ok(NoiseStream { master_seed, channel, replica_id, base_step })
    }

    fn rng_at(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.master_seed ^ self.channel.tag()));
        rng.set_stream(self.replica_id);
        rng.set_word_pos(u128::from(index) * WORDS_PER_DRAW);
        rng
    }

    /// Sequential reader starting at fine index `from`.
    pub fn cursor(&self, from: u64) -> NoiseCursor {
        NoiseCursor { rng: self.rng_at(from), scale: self.base_step.sqrt(), index: from }
    }

    /// `count` fine increments starting at `from_index`, each `N(0, base_step)`.
    pub fn increments(&self, from_index: u64, count: usize) -> Result<Vec<f64>> {
        if count == 0 {
            return Err(Error::InvalidArgument("increment count must be at least 1".into()));
        }
        let mut c = self.cursor(from_index);
        Ok((0..count).map(|_| c.next_fine()).collect())
    }

    pub fn increment(&self, index: u64) -> f64 {
        self.cursor(index).next_fine()
    }

    /// Increments over steps of `factor · base_step`; coarse increment `i`
    /// is the exact sum of fine increments `factor·i .. factor·(i+1)`.
    pub fn coarse_increments(&self, from_coarse: u64, count: usize, factor: usize) -> Result<Vec<f64>> {
        if count == 0 || factor == 0 {
            return Err(Error::InvalidArgument("count and factor must be at least 1".into()));
        }
        let mut c = self.cursor(from_coarse * factor as u64);
        Ok((0..count).map(|_| c.next_coarse(factor)).collect())
    }

    /// Number of fine steps per step of length `h`; `h` must be an integer
    /// multiple of the base step.
    pub fn factor_for(&self, h: f64) -> Result<usize> {
        step_ratio(h, self.base_step)
    }
}

/// `h / base` as an integer, or an error when `h` is not a multiple of `base`.
pub fn step_ratio(h: f64, base: f64) -> Result<usize> {
    let r = h / base;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "step {h} is not an integer multiple of the base step {base}"
        )));
    }
    Ok(n as usize)
}

/// Number of steps of length `h` covering `[0, t_final]` exactly.
pub fn step_count(t_final: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && t_final > 0.0 && h.is_finite() && t_final.is_finite()) {
        return Err(Error::InvalidArgument(format!("need t_final > 0 and h > 0, got {t_final} and {h}")));
    }
    step_ratio(t_final, h).map_err(|_| {
        Error::InvalidArgument(format!("horizon {t_final} is not an integer number of steps {h}"))
    })
}

pub struct NoiseCursor {
    rng: ChaCha8Rng,
    scale: f64,
    index: u64,
}

impl NoiseCursor {
    fn standard_normal(&mut self) -> f64 {
        // u1 ∈ (0, 1], u2 ∈ [0, 1)
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    pub fn next_fine(&mut self) -> f64 {
        self.index += 1;
        self.scale * self.standard_normal()
    }

    pub fn next_coarse(&mut self, factor: usize) -> f64 {
        (0..factor).map(|_| self.next_fine()).sum()
    }

    /// Fine index of the next increment to be read.
    pub fn position(&self) -> u64 {
        self.index
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_by_key() {
        let s = NoiseStream::new(42, Channel::W1, 3, 0.01).unwrap();
        assert_eq!(s.increment(17), s.increment(17));
        let t = NoiseStream::new(42, Channel::W1, 3, 0.01).unwrap();
        assert_eq!(s.increments(5, 20).unwrap(), t.increments(5, 20).unwrap());
    }

    #[test]
    fn random_access_matches_sequential() {
        let s = NoiseStream::new(9, Channel::W2, 0, 1.0).unwrap();
        let seq = s.increments(0, 50).unwrap();
        for (i, v) in seq.iter().enumerate() {
            assert_eq!(*v, s.increment(i as u64));
        }
    }

    #[test]
    fn coarse_is_sum_of_fine() {
        let s = NoiseStream::new(1, Channel::W, 7, 0.005).unwrap();
        let fine = s.increments(0, 40).unwrap();
        let coarse = s.coarse_increments(0, 20, 2).unwrap();
        for i in 0..20 {
            assert_eq!(coarse[i], fine[2 * i] + fine[2 * i + 1]);
        }
        let c5 = s.coarse_increments(3, 2, 5).unwrap();
        assert_eq!(c5[0], fine[15..20].iter().sum::<f64>());
    }

    #[test]
    fn channels_and_replicas_differ() {
        let a = NoiseStream::new(1, Channel::W1, 0, 1.0).unwrap().increments(0, 4).unwrap();
        let b = NoiseStream::new(1, Channel::W2, 0, 1.0).unwrap().increments(0, 4).unwrap();
        let c = NoiseStream::new(1, Channel::W1, 1, 1.0).unwrap().increments(0, 4).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseStream::new(1, Channel::W, 0, 0.0).is_err());
        let s = NoiseStream::new(1, Channel::W, 0, 0.1).unwrap();
        assert!(s.increments(0, 0).is_err());
        assert_eq!(s.factor_for(0.3).unwrap(), 3);
        assert!(s.factor_for(0.25).is_err());
    }
}
