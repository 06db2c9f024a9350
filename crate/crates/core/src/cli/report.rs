use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{Granularity, Order};

/// Added to `||XW||_F` in relative errors.
pub const RELATIVE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    /// `[m, n]` of the weight.
    pub shape: [usize; 2],
    pub calib_rows: usize,
    pub bits: u32,
    pub granularity: Granularity,
    pub order: Order,
    pub iters: u32,
    /// `||X RTN(W) - X W||_F` at the initial scale(s).
    pub error_before: f64,
    /// `||X W_q - X W||_F` recomputed from the stored artifact.
    pub error_after: f64,
    /// `error_after / (||XW||_F + eps)`.
    pub relative_error: f64,
    pub wall_time_s: f64,
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub layers: usize,
    pub degenerate: usize,
    /// Root of summed squared errors across layers.
    pub error_before: f64,
    pub error_after: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub solver_version: String,
    pub layers: Vec<LayerReport>,
    pub totals: Totals,
}

impl JobReport {
    pub fn new(layers: Vec<LayerReport>) -> Self {
        let sq = |f: fn(&LayerReport) -> f64| layers.iter().map(|l| f(l).powi(2)).sum::<f64>().sqrt();
        let totals = Totals {
            layers: layers.len(),
            degenerate: layers.iter().filter(|l| l.degenerate).count(),
            error_before: sq(|l| l.error_before),
            error_after: sq(|l| l.error_after),
            wall_time_s: layers.iter().map(|l| l.wall_time_s).sum(),
        };
        JobReport {
            solver_version: crate::SOLVER_VERSION.to_string(),
            layers,
            totals,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for JobReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>11} {:>4} {:<11} {:<6} {:>2} {:>12} {:>12} {:>10} {:>8}",
            "layer", "shape", "bits", "granularity", "order", "K", "err_before", "err_after", "rel_err", "time_s"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<24} {:>11} {:>4} {:<11} {:<6} {:>2} {:>12.5e} {:>12.5e} {:>10.3e} {:>8.3}{}",
                l.name,
                format!("{}x{}", l.shape[0], l.shape[1]),
                l.bits,
                l.granularity.to_string(),
                l.order.to_string(),
                l.iters,
                l.error_before,
                l.error_after,
                l.relative_error,
                l.wall_time_s,
                if l.degenerate { "  (degenerate)" } else { "" }
            )?;
        }
        write!(
            f,
            "total: {} layer(s), {} degenerate, err_before {:.5e}, err_after {:.5e}, {:.3}s",
            self.totals.layers,
            self.totals.degenerate,
            self.totals.error_before,
            self.totals.error_after,
            self.totals.wall_time_s
        )
    }
}

/// One layer (and resampling seed) under both update orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderComparison {
    pub name: String,
    pub seed: u64,
    pub cyclic_error: f64,
    pub greedy_error: f64,
    /// `greedy / cyclic`.
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub bits: u32,
    pub iters: u32,
    pub rows: Vec<OrderComparison>,
    pub median_ratio: f64,
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>5} {:>14} {:>14} {:>8}", "layer", "seed", "cyclic", "greedy", "ratio")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<24} {:>5} {:>14.6e} {:>14.6e} {:>8.4}",
                r.name, r.seed, r.cyclic_error, r.greedy_error, r.ratio
            )?;
        }
        write!(f, "median greedy/cyclic ratio: {:.4} (bits {}, K {})", self.median_ratio, self.bits, self.iters)
    }
}

/// Median of a non-empty sample; `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}
