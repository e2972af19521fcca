//! Seeded, splittable random streams.
//!
//! A stream is identified by `(seed, stream_id)`. The same pair always
//! yields the same draws; distinct ids select disjoint ChaCha streams.
//! Child streams are derived deterministically so that work split across
//! threads stays reproducible whatever the schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::linalg::Matrix;
use super::NumericsError;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A child stream keyed by `index`. Does not consume draws from `self`.
    pub fn derive(&self, index: u64) -> RngStream {
        let child_seed = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0xA076_1D64_78BD_642F)));
        RngStream::new(child_seed, index)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u: f64 = self.rng.random();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

/// `mean + chol_cov · z` with `z` i.i.d. standard normal drawn from `stream`.
pub fn draw_normal(stream: &mut RngStream, mean: &[f64], chol_cov: &Matrix) -> Result<Vec<f64>, NumericsError> {
    let n = mean.len();
    if chol_cov.rows() != n || chol_cov.cols() != n {
        return Err(NumericsError::Dimension(format!(
            "mean has length {n} but covariance factor is {}x{}",
            chol_cov.rows(),
            chol_cov.cols()
        )));
    }
    let z: Vec<f64> = (0..n).map(|_| stream.normal()).collect();
    let mut out = mean.to_vec();
    for i in 0..n {
        for k in 0..=i {
            out[i] += chol_cov[(i, k)] * z[k];
        }
    }
    Ok(out)
}
