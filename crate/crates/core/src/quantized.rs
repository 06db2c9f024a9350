use ndarray::{Array2, ArrayView2};

use crate::channel;
use crate::config::{Granularity, QuantConfig};
use crate::error::Result;
use crate::grid::{affine_codes, dequantize, symmetric_codes, CodeSet};
use crate::layer;
use crate::problem::{LayerProblem, Trace};

/// Solver output for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub granularity: Granularity,
    pub bits: u32,
    /// Integer codes, m×n.
    pub codes: Array2<i32>,
    /// One shared scale (per-layer) or one per column.
    pub scales: Vec<f64>,
    /// Empty for per-layer, one per column otherwise.
    pub zero_points: Vec<i32>,
    /// Per column: stored exactly because the column was constant.
    pub exact_columns: Vec<bool>,
    /// `||X RTN(W) - X W||^2` at the initial scale(s).
    pub rtn_sq_error: f64,
    /// `||X W_q - X W||^2` with the solver's `f64` scales.
    pub sq_error: f64,
    /// The whole layer was zero and passed through.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

impl QuantizedLayer {
    pub(crate) fn passthrough(problem: &LayerProblem, granularity: Granularity, bits: u32) -> Self {
        let (m, n) = (problem.rows(), problem.cols());
        let per_channel = granularity == Granularity::PerChannel;
        QuantizedLayer {
            granularity,
            bits,
            codes: Array2::zeros((m, n)),
            scales: vec![1.0; if per_channel { n } else { 1 }],
            zero_points: if per_channel { vec![0; n] } else { Vec::new() },
            exact_columns: vec![true; n],
            rtn_sq_error: 0.0,
            sq_error: 0.0,
            degenerate: true,
            warnings: vec!["all weights are zero; layer passed through unquantized".into()],
        }
    }

    pub fn rows(&self) -> usize {
        self.codes.nrows()
    }

    pub fn cols(&self) -> usize {
        self.codes.ncols()
    }

    /// Code set column `column` was projected onto.
    pub fn code_set(&self, column: usize) -> Result<CodeSet> {
        match self.granularity {
            Granularity::PerLayer => symmetric_codes(self.bits),
            Granularity::PerChannel => affine_codes(self.zero_points[column], self.bits),
        }
    }

    /// Scales rounded to binary32, as stored on disk.
    pub fn scales_f32(&self) -> Vec<f32> {
        self.scales.iter().map(|&s| s as f32).collect()
    }

    /// `W_q` in binary32 with the stored scales.
    pub fn dequantize(&self) -> Array2<f32> {
        dequantize(self.codes.view(), &self.scales_f32()).expect("scale count matches granularity")
    }
}

/// Run the solver selected by `cfg.granularity`.
pub fn quantize_layer(weights: ArrayView2<'_, f32>, calib: ArrayView2<'_, f32>, cfg: &QuantConfig) -> Result<QuantizedLayer> {
    let problem = LayerProblem::new(weights, calib)?;
    quantize_problem(&problem, cfg, None)
}

pub fn quantize_layer_traced(
    weights: ArrayView2<'_, f32>,
    calib: ArrayView2<'_, f32>,
    cfg: &QuantConfig,
) -> Result<(QuantizedLayer, Trace)> {
    let problem = LayerProblem::new(weights, calib)?;
    let mut trace = Trace::default();
    let out = quantize_problem(&problem, cfg, Some(&mut trace))?;
    Ok((out, trace))
}

pub fn quantize_problem(problem: &LayerProblem, cfg: &QuantConfig, trace: Option<&mut Trace>) -> Result<QuantizedLayer> {
    match cfg.granularity {
        Granularity::PerLayer => layer::solve(problem, cfg, trace),
        Granularity::PerChannel => channel::solve(problem, cfg, trace),
    }
}

/// Squared error of round-to-nearest at the initial scale(s) for `cfg`.
pub fn rtn_sq_error(problem: &LayerProblem, cfg: &QuantConfig) -> Result<f64> {
    cfg.validate()?;
    match cfg.granularity {
        Granularity::PerLayer => match layer::init_per_layer(problem, cfg.bits) {
            Ok(state) => layer::rtn_sq_error(problem, state.delta(), state.code_set()),
            Err(crate::ComqError::DegenerateLayer) => Ok(0.0),
            Err(e) => Err(e),
        },
        Granularity::PerChannel => {
            let mut total = 0.0;
            for i in 0..problem.cols() {
                let init = channel::init_per_channel(problem.weight_column(i), cfg.bits, cfg.lambda())?;
                let set = affine_codes(init.zero_point, cfg.bits)?;
                let deq: Vec<f64> = problem
                    .weight_column(i)
                    .iter()
                    .map(|w| set.project(w / init.delta) as f64 * init.delta)
                    .collect();
                let xq = problem.apply(&deq);
                total += xq.iter().zip(problem.target(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            Ok(total)
        }
    }
}
