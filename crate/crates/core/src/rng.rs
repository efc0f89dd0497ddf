//! Deterministic random number generation.
//!
//! The generator is xoshiro256++ seeded through SplitMix64, both fixed
//! public-domain algorithms over `u64` arithmetic, so a given seed yields the
//! same draw sequence on every platform and in every process. Normal draws
//! use the basic Box-Muller transform (two uniforms per draw, no caching).

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Sampling distribution for [`SeededRng::draw`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    state: [u64; 4],
    seed: u64,
}

#[inline]
fn rotl(x: u64, k: u32) -> u64 {
    x.rotate_left(k)
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut state = [0u64; 4];
        for s in &mut state {
            *s = splitmix64(&mut sm);
        }
        if state.iter().all(|&s| s == 0) {
            state[0] = 1; // xoshiro must not start all-zero
        }
        SeededRng { state, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent generator from this one's stream.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = rotl(s[0].wrapping_add(s[3]), 23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo < hi);
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        debug_assert!(std > 0.0);
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Matrix of i.i.d. draws; advances the generator state.
    pub fn draw(&mut self, rows: usize, cols: usize, dist: Dist) -> Result<Matrix> {
        match dist {
            Dist::Normal { std, .. } if std <= 0.0 => {
                return Err(Error::InvalidParameter(format!(
                    "normal std must be positive, got {std}"
                )))
            }
            Dist::Uniform { lo, hi } if lo >= hi => {
                return Err(Error::InvalidParameter(format!(
                    "uniform bounds must satisfy lo < hi, got [{lo}, {hi})"
                )))
            }
            _ => {}
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = match dist {
                Dist::Normal { mean, std } => self.normal(mean, std),
                Dist::Uniform { lo, hi } => self.uniform(lo, hi),
            };
            data.push(v);
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// Index below `n`. The modulo bias is ~n/2^64, irrelevant here.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}
