//! Reproducible per-worker normal streams.
//!
//! Every rank draws from its own ChaCha20 keystream: the key is expanded from
//! the master seed and the 64-bit stream id is the rank, so streams for
//! distinct ranks never overlap and stream creation is O(1). Uniforms are
//! taken from the open interval (0, 1) and mapped to N(0, 1) through the
//! inverse normal CDF, which keeps the output a pure function of
//! `(master_seed, rank, position)`.

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RngError {
    #[error("random streams have not been initialized on this worker")]
    StreamsUninitialized,
}

/// One family of streams, keyed by a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFamily {
    master_seed: u64,
}

impl StreamFamily {
    pub fn new(master_seed: u64) -> Self {
        StreamFamily { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// The stream owned by `rank`, positioned at its start.
    pub fn stream(&self, rank: usize) -> NormalStream {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(rank as u64);
        NormalStream { rng, position: 0 }
    }
}

/// A positioned standard-normal stream.
#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha20Rng,
    position: u64,
}

impl NormalStream {
    /// Uniform on the open interval (0, 1) with 53 bits of resolution.
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11;
        (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        self.position += 1;
        let u = self.next_uniform();
        standard_normal().inverse_cdf(u)
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.next_normal();
        }
    }

    pub fn standard_normals(&mut self, count: usize) -> Vec<f64> {
        let mut v = vec![0.0; count];
        self.fill(&mut v);
        v
    }

    /// Number of normals drawn so far.
    pub fn position(&self) -> u64 {
        self.position
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// The stream slot held by a worker; empty until the runtime initializes it.
#[derive(Debug, Clone, Default)]
pub struct WorkerStreams {
    stream: Option<NormalStream>,
}

impl WorkerStreams {
    pub fn initialized(family: StreamFamily, rank: usize) -> Self {
        WorkerStreams { stream: Some(family.stream(rank)) }
    }

    pub fn stream_mut(&mut self) -> Result<&mut NormalStream, RngError> {
        self.stream.as_mut().ok_or(RngError::StreamsUninitialized)
    }

    /// `count` draws from this worker's stream.
    pub fn worker_standard_normals(&mut self, count: usize) -> Result<Vec<f64>, RngError> {
        Ok(self.stream_mut()?.standard_normals(count))
    }
}
