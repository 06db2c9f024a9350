//! Seeded synthetic layers for tests, demos and the `synth` subcommand.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};

/// A layer weight `W` (m×n) with calibration input `X` (N×m).
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub weights: Array2<f32>,
    pub calib: Array2<f32>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sample(rng: &mut ChaCha8Rng, dim: (usize, usize), dist: &impl Distribution<f64>, scale: f64) -> Array2<f32> {
    Array2::from_shape_simple_fn(dim, || (scale * dist.sample(rng)) as f32)
}

/// Standard normal matrix.
pub fn gaussian_matrix(seed: u64, rows: usize, cols: usize) -> Array2<f32> {
    sample(&mut rng(seed), (rows, cols), &Normal::new(0.0, 1.0).unwrap(), 1.0)
}

impl Instance {
    /// Gaussian weights with standard deviation 0.1 and standard normal inputs.
    pub fn gaussian(seed: u64, samples: usize, rows: usize, cols: usize) -> Self {
        let mut r = rng(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let weights = sample(&mut r, (rows, cols), &normal, 0.1);
        let calib = sample(&mut r, (samples, rows), &normal, 1.0);
        Instance { weights, calib }
    }

    /// Student-t weights (scaled by 0.1) with `dof` degrees of freedom and
    /// standard normal inputs.
    pub fn heavy_tailed(seed: u64, samples: usize, rows: usize, cols: usize, dof: f64) -> Self {
        let mut r = rng(seed);
        let t = StudentT::new(dof).unwrap();
        let weights = sample(&mut r, (rows, cols), &t, 0.1);
        let calib = sample(&mut r, (samples, rows), &Normal::new(0.0, 1.0).unwrap(), 1.0);
        Instance { weights, calib }
    }

    /// Column `i` drawn uniformly from `[-ranges[i], ranges[i]]`; standard
    /// normal inputs.
    pub fn ranged(seed: u64, samples: usize, rows: usize, ranges: &[f32]) -> Self {
        let mut r = rng(seed);
        let weights = Array2::from_shape_fn((rows, ranges.len()), |(_, i)| {
            r.random_range(-1.0f32..=1.0) * ranges[i]
        });
        let calib = sample(&mut r, (samples, rows), &Normal::new(0.0, 1.0).unwrap(), 1.0);
        Instance { weights, calib }
    }

    /// `W = scale * Q` for random symmetric `bits`-bit codes `Q` where every
    /// column contains the most negative code, so the column infinity norms
    /// all equal `2^(bits-1) * scale`. `X` is the identity. Returns the
    /// instance, the scale and the codes.
    pub fn planted(seed: u64, rows: usize, cols: usize, bits: u32) -> (Self, f64, Array2<i32>) {
        let mut r = rng(seed);
        let half = 1i32 << (bits - 1);
        let scale = r.random_range(0.05..0.5f64);
        let mut codes = Array2::from_shape_simple_fn((rows, cols), || r.random_range(-half + 1..half));
        for mut col in codes.columns_mut() {
            let j = r.random_range(0..rows);
            col[j] = -half;
        }
        // A 12-bit dyadic scale keeps every product exact in f32.
        let scale = (scale * 4096.0).round() / 4096.0;
        let weights = codes.mapv(|q| (q as f64 * scale) as f32);
        (
            Instance {
                weights,
                calib: Array2::eye(rows),
            },
            scale,
            codes,
        )
    }
}
