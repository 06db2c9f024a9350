//! Per-layer COMQ: one shared scale, symmetric codes.
//!
//! A sweep updates every code once and then refits the shared scale. With the
//! scale fixed the columns decouple, so each sweep runs the columns as
//! independent jobs; within a column rows are taken in cyclic (or optionally
//! greedy) order. Visiting row `j` for every column before row `j + 1` gives
//! the same codes, since no column reads another's state.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::config::{Granularity, Order, QuantConfig};
use crate::error::{ComqError, Result};
use crate::grid::{project_to_codes, symmetric_codes, CodeSet, ScaleFactor};
use crate::problem::{
    dot, greedy_rows, least_squares_scale, sq_norm, sweep_column, update_coordinate,
    CoordinateStep, LayerProblem, StepKind, Trace, TraceEvent,
};
use crate::quantized::QuantizedLayer;

#[derive(Debug, Clone)]
struct Column {
    codes: Vec<f64>,
    residual: Vec<f64>,
    /// `X q` as of the last sweep boundary.
    xq: Vec<f64>,
    order: Vec<usize>,
}

/// Solver state: codes, the shared scale and one residual
/// `r_i = X w_i - delta X q_i` per column.
#[derive(Debug, Clone)]
pub struct PerLayerState {
    columns: Vec<Column>,
    delta: f64,
    set: CodeSet,
    sweep: u32,
}

/// `(1 / 2^(b-1)) * mean_i ||w_i||_inf`.
pub fn initial_scale_per_layer(weights: ArrayView2<'_, f32>, bits: u32) -> Result<ScaleFactor> {
    let half = symmetric_codes(bits)?.hi() as f64 + 1.0;
    let n = weights.ncols();
    if n == 0 {
        return Err(ComqError::Shape("weight matrix has no columns".into()));
    }
    let total: f64 = weights
        .columns()
        .into_iter()
        .map(|c| c.iter().fold(0.0f64, |a, &v| a.max((v as f64).abs())))
        .sum();
    let delta = total / n as f64 / half;
    if delta == 0.0 {
        return Err(ComqError::DegenerateLayer);
    }
    ScaleFactor::new(delta)
}

/// Initial state: `delta0` from the average column infinity norm and the
/// real-valued `Q0 = W / delta0`, which makes every residual zero.
pub fn init_per_layer(problem: &LayerProblem, bits: u32) -> Result<PerLayerState> {
    let set = symmetric_codes(bits)?;
    let (m, n) = (problem.rows(), problem.cols());
    let half = set.hi() as f64 + 1.0;
    let total: f64 = (0..n)
        .map(|i| problem.weight_column(i).iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .sum();
    let delta = total / n as f64 / half;
    if delta == 0.0 {
        return Err(ComqError::DegenerateLayer);
    }
    let columns = (0..n)
        .map(|i| Column {
            codes: problem.weight_column(i).iter().map(|w| w / delta).collect(),
            residual: vec![0.0; problem.samples()],
            xq: Vec::new(),
            order: (0..m).collect(),
        })
        .collect();
    Ok(PerLayerState {
        columns,
        delta,
        set,
        sweep: 0,
    })
}

impl PerLayerState {
    /// State at explicit (possibly real-valued) codes `codes` (m×n) and
    /// scale, with residuals computed exactly.
    pub fn from_codes(problem: &LayerProblem, codes: ArrayView2<'_, f64>, delta: f64, bits: u32) -> Result<Self> {
        let delta = ScaleFactor::new(delta)?.get();
        if codes.dim() != (problem.rows(), problem.cols()) {
            return Err(ComqError::Shape(format!(
                "codes {:?} do not match a {}x{} layer",
                codes.dim(),
                problem.rows(),
                problem.cols()
            )));
        }
        let columns = (0..problem.cols())
            .map(|i| {
                let codes = codes.column(i).to_vec();
                let xq = problem.apply(&codes);
                let residual = problem.target(i).iter().zip(&xq).map(|(t, a)| t - delta * a).collect();
                Column {
                    codes,
                    residual,
                    xq,
                    order: (0..problem.rows()).collect(),
                }
            })
            .collect();
        Ok(PerLayerState {
            columns,
            delta,
            set: symmetric_codes(bits)?,
            sweep: 0,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn code_set(&self) -> CodeSet {
        self.set
    }

    /// Completed sweeps.
    pub fn sweep(&self) -> u32 {
        self.sweep
    }

    /// Current (possibly still real-valued) codes, m×n.
    pub fn codes(&self) -> Array2<f64> {
        let m = self.columns.first().map_or(0, |c| c.codes.len());
        Array2::from_shape_fn((m, self.columns.len()), |(j, i)| self.columns[i].codes[j])
    }

    pub fn residual(&self, column: usize) -> &[f64] {
        &self.columns[column].residual
    }

    /// Squared error `||delta X Q - X W||^2` from the maintained residuals.
    pub fn sq_error(&self) -> f64 {
        self.columns.iter().map(|c| sq_norm(&c.residual)).sum()
    }

    /// Use the greedy row order within every column.
    pub fn set_order(&mut self, problem: &LayerProblem, order: Order) {
        for (i, col) in self.columns.iter_mut().enumerate() {
            col.order = match order {
                Order::Cyclic => (0..col.codes.len()).collect(),
                Order::Greedy => greedy_rows(problem.weight_column(i), problem.feature_sq_norms()),
            };
        }
    }

    /// Update code `(row, column)` against the current residual.
    pub fn coordinate_update(
        &mut self,
        problem: &LayerProblem,
        row: usize,
        column: usize,
    ) -> Result<CoordinateStep> {
        let (delta, set) = (self.delta, self.set);
        let col = &mut self.columns[column];
        update_coordinate(problem, column, row, &mut col.codes, &mut col.residual, delta, set)
    }

    /// Update every code once with the scale fixed, then recompute the
    /// residuals exactly.
    pub fn sweep_codes(&mut self, problem: &LayerProblem, trace: Option<&mut Trace>) -> Result<()> {
        let (delta, set) = (self.delta, self.set);
        let sweep = self.sweep + 1;
        let tracing = trace.is_some();
        let traces: Vec<Option<Trace>> = self
            .columns
            .par_iter_mut()
            .enumerate()
            .map(|(i, col)| {
                let mut local = tracing.then(Trace::default);
                col.xq = sweep_column(
                    problem,
                    i,
                    &col.order,
                    &mut col.codes,
                    &mut col.residual,
                    delta,
                    set,
                    sweep,
                    local.as_mut(),
                )?;
                Ok(local)
            })
            .collect::<Result<_>>()?;
        if let Some(t) = trace {
            for local in traces.into_iter().flatten() {
                t.merge(local);
            }
        }
        Ok(())
    }

    /// Refit the shared scale by least squares. Keeps the previous scale when
    /// `XQ = 0` and returns whether it changed.
    pub fn update_scale(&mut self, problem: &LayerProblem, trace: Option<&mut Trace>) -> bool {
        let before = self.sq_error();
        let (num, den) = self
            .columns
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(n, d), (i, c)| {
                (n + dot(&c.xq, problem.target(i)), d + sq_norm(&c.xq))
            });
        let new = least_squares_scale(num, den);
        if let Some(delta) = new {
            self.delta = delta;
        }
        let mut inner = 0.0;
        for (i, col) in self.columns.iter_mut().enumerate() {
            for ((r, &t), &a) in col.residual.iter_mut().zip(problem.target(i)).zip(&col.xq) {
                *r = t - self.delta * a;
                inner += a * *r;
            }
        }
        let after = self.sq_error();
        self.sweep += 1;
        if let Some(t) = trace {
            t.events.push(TraceEvent {
                sweep: self.sweep,
                column: None,
                kind: StepKind::Scale {
                    updated: new.is_some(),
                    inner,
                    xq_norm: den.sqrt(),
                    residual_norm: after.sqrt(),
                },
                error_before: before,
                error_after: after,
            });
        }
        new.is_some()
    }

    fn integer_codes(&self) -> Result<Array2<i32>> {
        let codes = self.codes();
        if let Some(bad) = codes.iter().find(|&&q| !self.set.contains_real(q)) {
            return Err(ComqError::Consistency(format!(
                "code {bad} outside {:?} after a full sweep",
                self.set
            )));
        }
        Ok(codes.mapv(|q| q as i32))
    }
}

/// Closed-form shared scale `<XQ, XW> / ||XQ||^2`, or `None` when `XQ = 0`.
pub fn update_scale_per_layer(
    codes: ArrayView2<'_, i32>,
    calib: ArrayView2<'_, f32>,
    weights: ArrayView2<'_, f32>,
) -> Result<Option<ScaleFactor>> {
    if codes.dim() != weights.dim() {
        return Err(ComqError::Shape(format!(
            "codes {:?} and weights {:?} differ in shape",
            codes.dim(),
            weights.dim()
        )));
    }
    let problem = LayerProblem::new(weights, calib)?;
    let (num, den) = (0..problem.cols()).fold((0.0, 0.0), |(n, d), i| {
        let q: Vec<f64> = codes.column(i).iter().map(|&v| v as f64).collect();
        let xq = problem.apply(&q);
        (n + dot(&xq, problem.target(i)), d + sq_norm(&xq))
    });
    least_squares_scale(num, den).map(ScaleFactor::new).transpose()
}

/// Squared error of plain round-to-nearest at the initial scale.
pub(crate) fn rtn_sq_error(problem: &LayerProblem, delta: f64, set: CodeSet) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..problem.cols() {
        let q = problem
            .weight_column(i)
            .iter()
            .map(|w| project_to_codes(w / delta, set).map(|c| c as f64 * delta))
            .collect::<Result<Vec<_>>>()?;
        let xq = problem.apply(&q);
        total += xq
            .iter()
            .zip(problem.target(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

/// Quantize a layer (W: m×n, X: N×m) with one shared scale.
pub fn comq_per_layer(
    weights: ArrayView2<'_, f32>,
    calib: ArrayView2<'_, f32>,
    cfg: &QuantConfig,
) -> Result<QuantizedLayer> {
    let problem = LayerProblem::new(weights, calib)?;
    solve(&problem, cfg, None)
}

/// [`comq_per_layer`] recording every step.
pub fn comq_per_layer_traced(
    weights: ArrayView2<'_, f32>,
    calib: ArrayView2<'_, f32>,
    cfg: &QuantConfig,
) -> Result<(QuantizedLayer, Trace)> {
    let problem = LayerProblem::new(weights, calib)?;
    let mut trace = Trace::default();
    let layer = solve(&problem, cfg, Some(&mut trace))?;
    Ok((layer, trace))
}

pub(crate) fn solve(
    problem: &LayerProblem,
    cfg: &QuantConfig,
    mut trace: Option<&mut Trace>,
) -> Result<QuantizedLayer> {
    cfg.validate()?;
    let mut state = match init_per_layer(problem, cfg.bits) {
        Ok(s) => s,
        Err(ComqError::DegenerateLayer) => {
            log::warn!("all-zero weight matrix passed through unquantized");
            return Ok(QuantizedLayer::passthrough(problem, Granularity::PerLayer, cfg.bits));
        }
        Err(e) => return Err(e),
    };
    state.set_order(problem, cfg.order);
    let rtn = rtn_sq_error(problem, state.delta, state.set)?;
    let mut warnings = Vec::new();
    for _ in 0..cfg.iters {
        state.sweep_codes(problem, trace.as_deref_mut())?;
        if !state.update_scale(problem, trace.as_deref_mut()) {
            let msg = format!("sweep {}: XQ is zero or scale vanished, kept previous scale", state.sweep);
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let dead = problem.feature_sq_norms().iter().filter(|&&v| v == 0.0).count();
    if dead > 0 {
        warnings.push(format!("{dead} calibration feature(s) are all zero; rounded weights directly"));
    }
    let n = problem.cols();
    Ok(QuantizedLayer {
        granularity: Granularity::PerLayer,
        bits: cfg.bits,
        codes: state.integer_codes()?,
        scales: vec![state.delta],
        zero_points: Vec::new(),
        exact_columns: vec![false; n],
        rtn_sq_error: rtn,
        sq_error: state.sq_error(),
        degenerate: false,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::synth::{gaussian_matrix, Instance};
    use ndarray::array;

    fn problem(w: Array2<f32>, x: Array2<f32>) -> LayerProblem {
        LayerProblem::new(w.view(), x.view()).unwrap()
    }

    #[test]
    fn init_examples() {
        let w = array![[1.0f32, -2.0], [3.0, 4.0]];
        let p = problem(w.clone(), Array2::eye(2));
        let s = init_per_layer(&p, 4).unwrap();
        assert_eq!(s.delta(), 0.4375);
        assert_eq!(initial_scale_per_layer(w.view(), 4).unwrap().get(), 0.4375);
        assert!(s.residual(0).iter().chain(s.residual(1)).all(|&r| r == 0.0));
        assert_eq!(s.codes()[(1, 1)], 4.0 / 0.4375);

        let p = problem(array![[-3.0f32]], array![[1.0f32]]);
        let s = init_per_layer(&p, 2).unwrap();
        assert_eq!(s.delta(), 1.5);
        assert_eq!(s.codes()[(0, 0)], -2.0);

        let p = problem(Array2::zeros((3, 2)), Array2::eye(3));
        assert!(matches!(init_per_layer(&p, 4), Err(ComqError::DegenerateLayer)));
    }

    #[test]
    fn coordinate_update_example() {
        // X = I2, w = (0.9, -0.3), delta = 0.5, b = 2, codes start at zero.
        let w = array![[0.9f32], [-0.3]];
        let p = problem(w, Array2::eye(2));
        let mut s = init_per_layer(&p, 2).unwrap();
        s.delta = 0.5;
        s.columns[0].codes = vec![0.0, 0.0];
        s.columns[0].residual = p.target(0).to_vec();
        let set = s.code_set();

        let r = s.residual(0).to_vec();
        let step = s.coordinate_update(&p, 0, 0).unwrap();
        assert_eq!(step.new, 1);
        assert_eq!(step.new, oracle::coordinate_argmin(p.feature(0), &r, 0.5, set).unwrap());

        let r = s.residual(0).to_vec();
        let step = s.coordinate_update(&p, 1, 0).unwrap();
        assert_eq!(step.new, -1);
        assert_eq!(step.new, oracle::coordinate_argmin(p.feature(1), &r, 0.5, set).unwrap());
        assert!((s.sq_error() - 0.20).abs() < 1e-6);
    }

    #[test]
    fn zero_residual_fixed_point() {
        let w = array![[0.5f32, -1.0], [0.25, 0.75]];
        let p = problem(w, Array2::eye(2));
        let mut s = init_per_layer(&p, 4).unwrap();
        s.delta = 0.25;
        for (i, col) in s.columns.iter_mut().enumerate() {
            col.codes = p.weight_column(i).iter().map(|v| v / 0.25).collect();
        }
        for i in 0..2 {
            for j in 0..2 {
                let before = s.codes()[(j, i)];
                let step = s.coordinate_update(&p, j, i).unwrap();
                assert_eq!(step.new as f64, before);
            }
        }
        assert_eq!(s.sq_error(), 0.0);
    }

    #[test]
    fn scale_update_examples() {
        let eye = Array2::<f32>::eye(2);
        let q = array![[1, 0], [0, 1]];
        let d = update_scale_per_layer(q.view(), eye.view(), array![[0.5f32, 0.0], [0.0, 0.5]].view());
        assert_eq!(d.unwrap().unwrap().get(), 0.5);
        let d = update_scale_per_layer(q.view(), eye.view(), array![[1.0f32, 0.0], [0.0, 0.0]].view());
        assert_eq!(d.unwrap().unwrap().get(), 0.5);
        let zero = Array2::<i32>::zeros((2, 2));
        assert!(update_scale_per_layer(zero.view(), eye.view(), eye.view()).unwrap().is_none());
    }

    #[test]
    fn scale_update_matches_oracle() {
        let inst = Instance::gaussian(9, 24, 6, 4);
        let q = Array2::from_shape_fn((6, 4), |(j, i)| ((j * 7 + i * 3) % 9) as i32 - 4);
        let d = update_scale_per_layer(q.view(), inst.calib.view(), inst.weights.view())
            .unwrap()
            .unwrap()
            .get();
        let scan = oracle::scale_argmin_1d(
            q.mapv(|v| v as f64).view(),
            inst.calib.mapv(f64::from).view(),
            inst.weights.mapv(f64::from).view(),
        )
        .unwrap();
        assert!((d - scan).abs() <= 1e-8 * d.abs());
    }

    #[test]
    fn planted_solution_is_recovered() {
        for seed in 0..10 {
            let (inst, _, _) = Instance::planted(seed, 4, 4, 4);
            let out = comq_per_layer(inst.weights.view(), inst.calib.view(), &QuantConfig::per_layer(4)).unwrap();
            assert!(out.sq_error <= out.rtn_sq_error + 1e-12);
            let norm = inst.weights.iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
            assert!(out.sq_error / norm <= 1e-6, "seed {seed}: {}", out.sq_error / norm);
        }
    }

    #[test]
    fn scalar_layer() {
        for (w, x) in [(0.7f32, 1.3f32), (-2.0, 0.5), (5.0, -1.0)] {
            let out = comq_per_layer(array![[w]].view(), array![[x]].view(), &QuantConfig::per_layer(3)).unwrap();
            assert!(out.sq_error < 1e-10, "{w} {x}: {}", out.sq_error);
        }
    }

    #[test]
    fn beats_rtn_on_gaussian_layers() {
        let mut wins = 0;
        for seed in 0..100 {
            let inst = Instance::gaussian(seed, 64, 16, 8);
            let out = comq_per_layer(inst.weights.view(), inst.calib.view(), &QuantConfig::per_layer(4)).unwrap();
            if out.sq_error <= out.rtn_sq_error {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{wins}/100");
    }

    #[test]
    fn per_step_optimality_after_first_sweep() {
        let inst = Instance::gaussian(21, 32, 8, 3);
        let p = LayerProblem::new(inst.weights.view(), inst.calib.view()).unwrap();
        let mut s = init_per_layer(&p, 3).unwrap();
        s.sweep_codes(&p, None).unwrap();
        s.update_scale(&p, None);
        for k in 0..2 {
            for j in 0..p.rows() {
                for i in 0..p.cols() {
                    let old = s.codes()[(j, i)];
                    let mut target = s.residual(i).to_vec();
                    crate::problem::axpy(s.delta() * old, p.feature(j), &mut target);
                    let want = oracle::coordinate_argmin(p.feature(j), &target, s.delta(), s.code_set()).unwrap();
                    assert_eq!(s.coordinate_update(&p, j, i).unwrap().new, want, "sweep {k} ({j},{i})");
                }
            }
            s.update_scale(&p, None);
        }
    }

    #[test]
    fn column_order_does_not_matter() {
        let inst = Instance::gaussian(4, 40, 10, 5);
        let p = LayerProblem::new(inst.weights.view(), inst.calib.view()).unwrap();
        let mut a = init_per_layer(&p, 3).unwrap();
        let mut b = a.clone();
        for i in 0..5 {
            for j in 0..10 {
                a.coordinate_update(&p, j, i).unwrap();
            }
        }
        for j in 0..10 {
            for i in (0..5).rev() {
                b.coordinate_update(&p, j, i).unwrap();
            }
        }
        assert_eq!(a.codes(), b.codes());
    }

    #[test]
    fn dead_feature_rounds_the_weight() {
        let w = array![[0.9f32, 0.2], [-0.4, 0.6]];
        let mut x = gaussian_matrix(3, 10, 2);
        x.column_mut(1).fill(0.0);
        let (out, _) = comq_per_layer_traced(w.view(), x.view(), &QuantConfig::per_layer(4)).unwrap();
        let d = out.scales[0];
        for i in 0..2 {
            assert_eq!(out.codes[(1, i)], project_to_codes(w[(1, i)] as f64 / d, symmetric_codes(4).unwrap()).unwrap());
        }
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn degenerate_layer_passes_through() {
        let w = Array2::<f32>::zeros((3, 2));
        let out = comq_per_layer(w.view(), gaussian_matrix(1, 5, 3).view(), &QuantConfig::per_layer(4)).unwrap();
        assert!(out.degenerate);
        assert!(out.codes.iter().all(|&q| q == 0));
        assert_eq!(out.sq_error, 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let w = Array2::<f32>::zeros((3, 2));
        let x = Array2::<f32>::zeros((5, 4));
        assert!(matches!(
            comq_per_layer(w.view(), x.view(), &QuantConfig::per_layer(4)),
            Err(ComqError::Shape(_))
        ));
    }
}
