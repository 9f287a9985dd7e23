use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::ndcore::Tensor;

/// Deterministic, splittable random stream.
///
/// A stream is keyed by `(seed, stream_id)`; the ChaCha block counter is the
/// position within the stream. Forking derives a fresh stream id from the
/// parent's id and its fork counter, so children never share a stream with
/// their parent or with each other.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    forks: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            forks: 0,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Splits off an independent child stream. The parent's own draw
    /// sequence is unaffected.
    pub fn fork(&mut self) -> RngStream {
        self.forks += 1;
        let child = splitmix64(self.stream_id ^ splitmix64(self.forks).rotate_left(17));
        RngStream::with_stream(self.seed, child)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw strictly inside (0, 1), 53-bit resolution.
    pub fn next_open01(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64 + 0.5) * SCALE
    }

    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n` (n > 0).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// I.i.d. draws strictly inside (0, 1).
    pub fn uniform(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.next_open01()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform_range(&mut self, shape: &[usize], low: f64, high: f64) -> Tensor {
        self.uniform(shape).map(|u| low + (high - low) * u)
    }

    /// I.i.d. normal draws via the Box–Muller transform of uniform draws.
    pub fn gaussian(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor> {
        if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::Argument(format!(
                "gaussian requires finite mean and std >= 0, got mean={mean}, std={std}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1 = self.next_open01();
            let u2 = self.next_open01();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            data.push(mean + std * r * c);
            if data.len() < n {
                data.push(mean + std * r * s);
            }
        }
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }
}
