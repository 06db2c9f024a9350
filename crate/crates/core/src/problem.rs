//! Precomputed quantities for one layer and the column kernel both solvers share.
//!
//! Everything here is `f64`; inputs arrive as `f32` and are widened once.

use ndarray::{Array2, ArrayView2};

use crate::error::{ComqError, Result};
use crate::grid::CodeSet;

/// A layer's weight `W` (m×n) and calibration input `X` (N×m), laid out so
/// that features `x_j`, weight columns `w_i` and targets `X w_i` are
/// contiguous slices.
#[derive(Debug, Clone)]
pub struct LayerProblem {
    weights_t: Array2<f64>,
    features: Array2<f64>,
    feature_sq_norms: Vec<f64>,
    targets: Array2<f64>,
}

impl LayerProblem {
    pub fn new(weights: ArrayView2<'_, f32>, calib: ArrayView2<'_, f32>) -> Result<Self> {
        let (m, n) = weights.dim();
        let (rows, features) = calib.dim();
        if m == 0 || n == 0 {
            return Err(ComqError::Shape(format!("empty weight matrix {m}x{n}")));
        }
        if rows == 0 {
            return Err(ComqError::Shape("calibration matrix has no rows".into()));
        }
        if features != m {
            return Err(ComqError::Shape(format!(
                "calibration has {features} columns but weight has {m} rows"
            )));
        }
        if weights.iter().chain(calib.iter()).any(|v| !v.is_finite()) {
            return Err(ComqError::NumericDomain(
                "weights and calibration data must be finite".into(),
            ));
        }
        let w = weights.mapv(f64::from);
        let x = calib.mapv(f64::from);
        let targets = x.dot(&w).t().as_standard_layout().into_owned();
        let features = x.t().as_standard_layout().into_owned();
        let feature_sq_norms = features.rows().into_iter().map(|r| sq_norm(r.as_slice().unwrap())).collect();
        Ok(LayerProblem {
            weights_t: w.t().as_standard_layout().into_owned(),
            features,
            feature_sq_norms,
            targets,
        })
    }

    /// Input features `m`.
    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    /// Output channels `n`.
    pub fn cols(&self) -> usize {
        self.targets.nrows()
    }

    /// Calibration samples `N`.
    pub fn samples(&self) -> usize {
        self.features.ncols()
    }

    /// Column `j` of `X`.
    pub fn feature(&self, j: usize) -> &[f64] {
        self.features.row(j).to_slice().unwrap()
    }

    pub fn feature_sq_norm(&self, j: usize) -> f64 {
        self.feature_sq_norms[j]
    }

    pub fn feature_sq_norms(&self) -> &[f64] {
        &self.feature_sq_norms
    }

    /// Column `i` of `W`.
    pub fn weight_column(&self, i: usize) -> &[f64] {
        self.weights_t.row(i).to_slice().unwrap()
    }

    /// `X w_i`.
    pub fn target(&self, i: usize) -> &[f64] {
        self.targets.row(i).to_slice().unwrap()
    }

    /// `X q` for a code column `q`.
    pub fn apply(&self, codes: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.samples()];
        for (j, &q) in codes.iter().enumerate() {
            if q != 0.0 {
                axpy(q, self.feature(j), &mut out);
            }
        }
        out
    }

    /// `||X (wq_i - w_i)||^2` summed over columns for a dequantized matrix (m×n).
    pub fn sq_error_of(&self, dequantized: ArrayView2<'_, f64>) -> f64 {
        (0..self.cols())
            .map(|i| {
                let col: Vec<f64> = dequantized.column(i).to_vec();
                let xq = self.apply(&col);
                xq.iter()
                    .zip(self.target(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }

    /// `||X W||_F^2`.
    pub fn target_sq_norm(&self) -> f64 {
        self.targets.iter().map(|v| v * v).sum()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Code minimizing `||q * delta * x - s||^2` given `<x, s>` and `||x||^2`.
#[inline]
pub(crate) fn code_from_moments(xs: f64, xx: f64, delta: f64, set: CodeSet) -> Result<i32> {
    let p = xs / (delta * xx);
    if !p.is_finite() {
        return Err(ComqError::NumericDomain(format!(
            "coordinate minimizer is not finite (<x,s>={xs}, ||x||^2={xx}, delta={delta})"
        )));
    }
    Ok(set.project(p))
}

/// Solver step for the single-coordinate subproblem
/// `min_{q in set} ||q * delta * x - s||^2`.
pub fn coordinate_code(x: &[f64], s: &[f64], delta: f64, set: CodeSet) -> Result<i32> {
    if x.len() != s.len() {
        return Err(ComqError::Shape(format!(
            "feature has length {} but target has length {}",
            x.len(),
            s.len()
        )));
    }
    let xx = sq_norm(x);
    if xx == 0.0 {
        // Constant objective; any code is optimal.
        return Ok(set.project(0.0));
    }
    code_from_moments(dot(x, s), xx, delta, set)
}

/// Closed-form minimizer of `delta -> ||delta * xq - target||^2`, or `None`
/// when `xq` is zero.
pub(crate) fn least_squares_scale(num: f64, den: f64) -> Option<f64> {
    if den > 0.0 {
        let s = num / den;
        (s.is_finite() && s != 0.0).then_some(s)
    } else {
        None
    }
}

/// Outcome of one coordinate update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateStep {
    pub row: usize,
    pub old: f64,
    pub new: i32,
    /// The feature was all zeros and the weight was rounded directly.
    pub dead_feature: bool,
}

/// Update code `row` of one column in place and apply the rank-1 residual
/// correction `r -= delta * (new - old) * x_row`.
pub(crate) fn update_coordinate(
    problem: &LayerProblem,
    column: usize,
    row: usize,
    codes: &mut [f64],
    residual: &mut [f64],
    delta: f64,
    set: CodeSet,
) -> Result<CoordinateStep> {
    let old = codes[row];
    let xx = problem.feature_sq_norm(row);
    if xx == 0.0 {
        let w = problem.weight_column(column)[row];
        let new = crate::grid::project_to_codes(w / delta, set)?;
        codes[row] = new as f64;
        return Ok(CoordinateStep {
            row,
            old,
            new,
            dead_feature: true,
        });
    }
    let x = problem.feature(row);
    // <x, s> with s = r + delta * old * x.
    let xs = dot(x, residual) + delta * old * xx;
    let new = code_from_moments(xs, xx, delta, set)?;
    let change = new as f64 - old;
    if change != 0.0 {
        axpy(-delta * change, x, residual);
    }
    codes[row] = new as f64;
    Ok(CoordinateStep {
        row,
        old,
        new,
        dead_feature: false,
    })
}

/// Rows sorted by `|w_j| * ||x_j||` descending, ties by ascending row.
pub(crate) fn greedy_rows(weights: &[f64], feature_sq_norms: &[f64]) -> Vec<usize> {
    let magnitude: Vec<f64> = weights
        .iter()
        .zip(feature_sq_norms)
        .map(|(w, xx)| w.abs() * xx.sqrt())
        .collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps ascending index among equal magnitudes.
    order.sort_by(|&a, &b| magnitude[b].total_cmp(&magnitude[a]));
    order
}

/// Recompute `r = X w - delta * X q` exactly, returning `X q` and the drift
/// `||r_incremental - r_exact|| / (1 + ||X w||)` of the incremental residual.
pub(crate) fn refresh_residual(
    problem: &LayerProblem,
    column: usize,
    codes: &[f64],
    residual: &mut [f64],
    delta: f64,
) -> (Vec<f64>, f64) {
    let xq = problem.apply(codes);
    let target = problem.target(column);
    let mut drift = 0.0;
    for ((r, &t), &a) in residual.iter_mut().zip(target).zip(&xq) {
        let exact = t - delta * a;
        drift += (*r - exact) * (*r - exact);
        *r = exact;
    }
    (xq, drift.sqrt() / (1.0 + sq_norm(target).sqrt()))
}

/// What happened at one solver step; used by tests and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    Coordinate {
        row: usize,
        /// The previous code was already a member of the current code set.
        old_feasible: bool,
    },
    Scale {
        /// Whether the scale actually changed (false when `||Xq|| = 0`).
        updated: bool,
        /// `<Xq, Xw - delta Xq>` at the new scale.
        inner: f64,
        /// `||Xq||`.
        xq_norm: f64,
        /// `||Xw - delta Xq||` at the new scale.
        residual_norm: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    /// 1-based sweep index.
    pub sweep: u32,
    /// Column the step belongs to; `None` for the shared per-layer scale.
    pub column: Option<usize>,
    pub kind: StepKind,
    /// Squared error of the affected column (or whole layer for the shared
    /// scale) before and after the step.
    pub error_before: f64,
    pub error_after: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    /// Largest relative residual drift seen at a sweep boundary.
    pub max_residual_drift: f64,
}

impl Trace {
    pub(crate) fn merge(&mut self, other: Trace) {
        self.events.extend(other.events);
        self.max_residual_drift = self.max_residual_drift.max(other.max_residual_drift);
    }
}

/// Run every coordinate update of one column in `order`, then refresh the
/// residual. Returns `X q` for the subsequent scale update.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sweep_column(
    problem: &LayerProblem,
    column: usize,
    order: &[usize],
    codes: &mut [f64],
    residual: &mut [f64],
    delta: f64,
    set: CodeSet,
    sweep: u32,
    mut trace: Option<&mut Trace>,
) -> Result<Vec<f64>> {
    for &row in order {
        match trace.as_deref_mut() {
            Some(t) => {
                let before = sq_norm(residual);
                let old_feasible = set.contains_real(codes[row]);
                update_coordinate(problem, column, row, codes, residual, delta, set)?;
                t.events.push(TraceEvent {
                    sweep,
                    column: Some(column),
                    kind: StepKind::Coordinate { row, old_feasible },
                    error_before: before,
                    error_after: sq_norm(residual),
                });
            }
            None => {
                update_coordinate(problem, column, row, codes, residual, delta, set)?;
            }
        }
    }
    let (xq, drift) = refresh_residual(problem, column, codes, residual, delta);
    if let Some(t) = trace {
        t.max_residual_drift = t.max_residual_drift.max(drift);
    }
    Ok(xq)
}
