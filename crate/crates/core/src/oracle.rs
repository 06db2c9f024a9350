//! Exhaustive references for certifying solver steps on small instances.
//!
//! Nothing here calls into the solvers or their kernels: every objective is
//! evaluated directly as a sum of squared differences.

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{ComqError, Result};
use crate::grid::{round_zero_point, CodeSet};

/// Largest number of code vectors `brute_force_joint` will enumerate.
pub const MAX_JOINT_VECTORS: u128 = 1 << 20;
/// Largest code set `coordinate_argmin` will scan.
pub const MAX_SCAN_CODES: u64 = 1 << 16;
/// Points in the dense scale scan.
pub const SCALE_SCAN_POINTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub best_codes: Vec<i32>,
    pub best_delta: f64,
    /// Zero-point of the winning affine set; `None` for symmetric grids.
    pub best_zero_point: Option<i32>,
    /// `||delta X q - X w||^2` at the optimum.
    pub best_error: f64,
}

/// Code set family searched by [`brute_force_joint`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleGrid {
    /// `{-2^(b-1), ..., 2^(b-1)-1}` with a scale of either sign.
    Symmetric,
    /// `{z, ..., z + 2^b - 1}` for every `z` in `z_lo..=z_hi`, positive scale.
    Affine { z_lo: i32, z_hi: i32 },
}

impl OracleGrid {
    /// Affine search window of ±2 around the zero-point implied by the
    /// min-max initial scale `lambda * (max - min) / (2^b - 1)`.
    pub fn affine_around(weights: &[f64], bits: u32, lambda: f64) -> Result<Self> {
        let (lo, hi) = weights
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &w| (a.min(w), b.max(w)));
        if hi <= lo || hi.is_nan() || lo.is_nan() {
            return Err(ComqError::NumericDomain(
                "affine window needs a non-constant weight column".into(),
            ));
        }
        let delta = lambda * (hi - lo) / ((1u64 << bits) - 1) as f64;
        let z = round_zero_point(lo / delta)?;
        Ok(OracleGrid::Affine {
            z_lo: z.saturating_sub(2),
            z_hi: z.saturating_add(2),
        })
    }
}

fn subproblem_error(q: i32, x: &[f64], s: &[f64], delta: f64) -> f64 {
    x.iter()
        .zip(s)
        .map(|(&xk, &sk)| {
            let d = q as f64 * delta * xk - sk;
            d * d
        })
        .sum()
}

/// Scan every code in `set` for the minimizer of `||q * delta * x - s||^2`.
///
/// Codes whose error ties the minimum (to within accumulated rounding) are
/// resolved by distance to the unconstrained minimizer, then to the even code.
pub fn coordinate_argmin(x: &[f64], s: &[f64], delta: f64, set: CodeSet) -> Result<i32> {
    if set.len() > MAX_SCAN_CODES {
        return Err(ComqError::SearchTooLarge {
            size: set.len() as u128,
            limit: MAX_SCAN_CODES as u128,
        });
    }
    if x.len() != s.len() {
        return Err(ComqError::Shape("feature and target lengths differ".into()));
    }
    let errors: Vec<(i32, f64)> = set.iter().map(|q| (q, subproblem_error(q, x, s, delta))).collect();
    let best = errors.iter().map(|&(_, e)| e).fold(f64::INFINITY, f64::min);
    let scale = s.iter().map(|v| v * v).sum::<f64>() + best;
    let tol = 1e-12 * scale;

    let dx: Vec<f64> = x.iter().map(|v| delta * v).collect();
    let num: f64 = dx.iter().zip(s).map(|(a, b)| a * b).sum();
    let den: f64 = dx.iter().map(|a| a * a).sum();
    let p = if den > 0.0 { num / den } else { 0.0 };

    let mut choice: Option<i32> = None;
    for &(q, e) in &errors {
        if e > best + tol {
            continue;
        }
        choice = Some(match choice {
            None => q,
            Some(c) => {
                let (dq, dc) = ((q as f64 - p).abs(), (c as f64 - p).abs());
                if dq < dc || (dq == dc && q % 2 == 0) {
                    q
                } else {
                    c
                }
            }
        });
    }
    Ok(choice.expect("code sets are never empty"))
}

fn matmul(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (rows, inner) = a.dim();
    let cols = b.ncols();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for k in 0..inner {
            let av = a[(r, k)];
            for c in 0..cols {
                out[(r, c)] += av * b[(k, c)];
            }
        }
    }
    out
}

fn scale_objective(delta: f64, xq: &[f64], xw: &[f64]) -> f64 {
    xq.iter()
        .zip(xw)
        .map(|(&a, &b)| {
            let d = delta * a - b;
            d * d
        })
        .sum()
}

fn parabola_vertex(x0: f64, h: f64, f: impl Fn(f64) -> f64) -> Option<f64> {
    let (fl, fc, fr) = (f(x0 - h), f(x0), f(x0 + h));
    let curvature = fl - 2.0 * fc + fr;
    (curvature > 0.0).then(|| x0 + 0.5 * h * (fl - fr) / curvature)
}

/// Minimize `delta -> ||delta X Q - X W||^2` by a dense scan of
/// `[-2B, 2B]`, `B = ||XW|| / ||XQ||` (which bounds the minimizer), followed
/// by a parabola fit on the best scan point and a wide-stencil parabola
/// refinement. Works for a single column (`Q`, `W` of width 1) as well.
pub fn scale_argmin_1d(
    codes: ArrayView2<'_, f64>,
    calib: ArrayView2<'_, f64>,
    weights: ArrayView2<'_, f64>,
) -> Result<f64> {
    if calib.ncols() != codes.nrows() || codes.dim() != weights.dim() {
        return Err(ComqError::Shape("oracle scale inputs disagree in shape".into()));
    }
    let xq: Vec<f64> = matmul(calib, codes).into_iter().collect();
    let xw: Vec<f64> = matmul(calib, weights).into_iter().collect();
    let xq_norm = xq.iter().map(|v| v * v).sum::<f64>().sqrt();
    if xq_norm == 0.0 {
        return Err(ComqError::NumericDomain("XQ is zero; every scale is optimal".into()));
    }
    let xw_norm = xw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if xw_norm == 0.0 {
        return Ok(0.0);
    }
    let bound = xw_norm / xq_norm;
    let f = |d: f64| scale_objective(d, &xq, &xw);

    let step = 4.0 * bound / (SCALE_SCAN_POINTS - 1) as f64;
    let grid = |k: usize| -2.0 * bound + k as f64 * step;
    let best = (0..SCALE_SCAN_POINTS)
        .min_by(|&a, &b| f(grid(a)).total_cmp(&f(grid(b))))
        .unwrap()
        .clamp(1, SCALE_SCAN_POINTS - 2);
    let coarse = parabola_vertex(grid(best), step, f).unwrap_or(grid(best));
    Ok(parabola_vertex(coarse, bound, f).unwrap_or(coarse))
}

/// Global minimum of `||delta X q - X w||^2` over all code vectors `q` of the
/// grid and all admissible scales, by enumeration.
pub fn brute_force_joint(
    weights: &[f64],
    calib: ArrayView2<'_, f64>,
    bits: u32,
    grid: OracleGrid,
) -> Result<OracleResult> {
    let m = weights.len();
    if calib.ncols() != m {
        return Err(ComqError::Shape(format!(
            "calibration has {} columns, weight column has {m} rows",
            calib.ncols()
        )));
    }
    if bits == 0 || bits > 20 {
        return Err(ComqError::InvalidConfig(format!("oracle bit-width {bits} out of range")));
    }
    let levels = 1u128 << bits;
    let size = levels.checked_pow(m as u32).unwrap_or(u128::MAX);
    if size > MAX_JOINT_VECTORS {
        return Err(ComqError::SearchTooLarge {
            size,
            limit: MAX_JOINT_VECTORS,
        });
    }
    let zero_points: Vec<Option<i32>> = match grid {
        OracleGrid::Symmetric => vec![None],
        OracleGrid::Affine { z_lo, z_hi } => {
            if z_hi < z_lo || (z_hi as i64 - z_lo as i64) > 64 {
                return Err(ComqError::InvalidConfig(format!(
                    "zero-point window {z_lo}..={z_hi} is empty or wider than 65"
                )));
            }
            (z_lo..=z_hi).map(Some).collect()
        }
    };

    let samples = calib.nrows();
    let w = ndarray::Array2::from_shape_vec((m, 1), weights.to_vec()).unwrap();
    let xw: Vec<f64> = matmul(calib, w.view()).into_iter().collect();
    let xw_sq: f64 = xw.iter().map(|v| v * v).sum();
    let columns: Vec<Vec<f64>> = (0..m).map(|j| calib.column(j).to_vec()).collect();

    let mut best = OracleResult {
        best_codes: Vec::new(),
        best_delta: 0.0,
        best_zero_point: None,
        best_error: f64::INFINITY,
    };
    let levels = levels as usize;
    let mut digits = vec![0usize; m];
    let mut xq = vec![0.0; samples];
    for z in zero_points {
        let lo = z.unwrap_or(-(1i32 << (bits - 1)));
        loop {
            let codes: Vec<i32> = digits.iter().map(|&d| lo + d as i32).collect();
            xq.iter_mut().for_each(|v| *v = 0.0);
            for (col, &q) in columns.iter().zip(&codes) {
                for (acc, &xv) in xq.iter_mut().zip(col) {
                    *acc += q as f64 * xv;
                }
            }
            let num: f64 = xq.iter().zip(&xw).map(|(a, b)| a * b).sum();
            let den: f64 = xq.iter().map(|a| a * a).sum();
            let delta = if den == 0.0 || (z.is_some() && num <= 0.0) {
                // Best admissible scale is zero (or its positive limit).
                0.0
            } else {
                num / den
            };
            let error = if delta == 0.0 { xw_sq } else { scale_objective(delta, &xq, &xw) };
            if error < best.best_error {
                best = OracleResult {
                    best_codes: codes,
                    best_delta: delta,
                    best_zero_point: z,
                    best_error: error,
                };
            }
            // Odometer increment.
            let mut pos = 0;
            while pos < m {
                digits[pos] += 1;
                if digits[pos] < levels {
                    break;
                }
                digits[pos] = 0;
                pos += 1;
            }
            if pos == m {
                break;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{affine_codes, project_to_codes, symmetric_codes};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coordinate_argmin_examples() {
        let set = symmetric_codes(2).unwrap();
        let x = [1.0, 0.0];
        let s = [0.9, 0.0];
        let errs: Vec<f64> = set.iter().map(|q| subproblem_error(q, &x, &s, 0.5)).collect();
        for (e, want) in errs.iter().zip([3.61, 1.96, 0.81, 0.16]) {
            assert!((e - want).abs() < 1e-12);
        }
        assert_eq!(coordinate_argmin(&x, &s, 0.5, set).unwrap(), 1);
        assert_eq!(coordinate_argmin(&x, &[0.0, 4.0], 0.5, set).unwrap(), 0);
        assert_eq!(coordinate_argmin(&[1e8, 0.0], &[1.0, 0.0], 1.0, set).unwrap(), 0);
    }

    #[test]
    fn coordinate_argmin_ties_prefer_even() {
        let set = affine_codes(-4, 3).unwrap();
        // p = 1.5 exactly: codes 1 and 2 tie.
        assert_eq!(coordinate_argmin(&[2.0], &[3.0], 1.0, set).unwrap(), 2);
        // p = -2.5: codes -3 and -2 tie.
        assert_eq!(coordinate_argmin(&[0.5, 0.5], &[-0.625, -0.625], 0.5, set).unwrap(), -2);
    }

    #[test]
    fn coordinate_argmin_matches_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20_000 {
            let len = rng.random_range(1..6);
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
            let delta = rng.random_range(0.05..1.5) * if rng.random_bool(0.2) { -1.0 } else { 1.0 };
            let set = affine_codes(rng.random_range(-10..5), rng.random_range(1..5)).unwrap();
            let xx: f64 = x.iter().map(|v| v * v).sum();
            if xx == 0.0 {
                continue;
            }
            let p = x.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / (delta * xx);
            assert_eq!(
                coordinate_argmin(&x, &s, delta, set).unwrap(),
                project_to_codes(p, set).unwrap()
            );
        }
    }

    #[test]
    fn scale_scan_examples() {
        let eye = Array2::<f64>::eye(2);
        let q = array![[1.0], [1.0]];
        let w = array![[0.5], [0.5]];
        let d = scale_argmin_1d(q.view(), eye.view(), w.view()).unwrap();
        assert!((d - 0.5).abs() < 1e-10);
        let q = array![[1.0], [-1.0]];
        let w = array![[1.0], [1.0]];
        let d = scale_argmin_1d(q.view(), eye.view(), w.view()).unwrap();
        assert!(d.abs() < 1e-10);
        let q = array![[0.0], [0.0]];
        assert!(scale_argmin_1d(q.view(), eye.view(), w.view()).is_err());
    }

    #[test]
    fn scale_scan_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = Array2::from_shape_fn((12, 5), |_| rng.random_range(-1.0..1.0));
            let q = Array2::from_shape_fn((5, 3), |_| rng.random_range(-4..4) as f64);
            let w = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
            let xq = x.dot(&q);
            let xw = x.dot(&w);
            let closed = (&xq * &xw).sum() / (&xq * &xq).sum();
            let scan = scale_argmin_1d(q.view(), x.view(), w.view()).unwrap();
            assert!((scan - closed).abs() <= 1e-8 * closed.abs().max(1e-3), "{scan} vs {closed}");
        }
    }

    #[test]
    fn joint_symmetric_negative_scale() {
        let eye = Array2::<f64>::eye(2);
        let r = brute_force_joint(&[1.0, 1.0], eye.view(), 1, OracleGrid::Symmetric).unwrap();
        assert_eq!(r.best_codes, vec![-1, -1]);
        assert_eq!(r.best_delta, -1.0);
        assert_eq!(r.best_error, 0.0);
    }

    #[test]
    fn joint_recovers_planted_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0));
        let planted = [1, -2, 0, 1];
        let w: Vec<f64> = planted.iter().map(|&q| 0.37 * q as f64).collect();
        let r = brute_force_joint(&w, x.view(), 2, OracleGrid::Symmetric).unwrap();
        assert!(r.best_error < 1e-20);
        for (q, p) in r.best_codes.iter().zip(planted) {
            assert!((r.best_delta * *q as f64 - 0.37 * p as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_affine_window() {
        let w = [-1.0, 3.0];
        let grid = OracleGrid::affine_around(&w, 2, 1.0).unwrap();
        assert_eq!(grid, OracleGrid::Affine { z_lo: -3, z_hi: 1 });
        let eye = Array2::<f64>::eye(2);
        let r = brute_force_joint(&w, eye.view(), 2, grid).unwrap();
        assert!(r.best_delta > 0.0);
        let z = r.best_zero_point.unwrap();
        assert!(r.best_codes.iter().all(|&q| q >= z && q <= z + 3));
        // Min-max codes (-1, 2) with their least-squares scale 1.4 give 0.2;
        // no window of four codes represents the ratio -3 exactly.
        assert!(r.best_error > 0.0);
        assert!(r.best_error <= 0.2 + 1e-12);
    }

    #[test]
    fn joint_refuses_large_search() {
        let x = Array2::<f64>::zeros((4, 11));
        let w = vec![0.0; 11];
        assert!(matches!(
            brute_force_joint(&w, x.view(), 2, OracleGrid::Symmetric),
            Err(ComqError::SearchTooLarge { .. })
        ));
    }
}
