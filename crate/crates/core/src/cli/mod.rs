//! Command implementations behind the `comq` binary.
//!
//! Each command takes plain option structs so it can be driven from tests
//! without going through argument parsing.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{median, ComparisonTable, JobReport, LayerReport, OrderComparison, Totals, RELATIVE_EPS};

use crate::config::{Granularity, Order, QuantConfig};
use crate::error::{ComqError, Result};
use crate::grid::dequantize_f64;
use crate::manifest::{LayerEntry, LoadedLayer, Manifest};
use crate::oracle::{self, OracleGrid, OracleResult};
use crate::problem::LayerProblem;
use crate::quantized::{quantize_problem, rtn_sq_error};
use crate::synth::Instance;
use crate::tensor_io::{load_matrix, load_quantized, save_matrix, save_quantized, ArtifactEntry, QuantizedLayerArtifact};

pub const DEFAULT_BITS: u32 = 4;
pub const ARTIFACT_INDEX: &str = "artifacts.toml";
pub const REPORT_FILE: &str = "report.json";

/// Flag values; `None` falls back to the manifest defaults.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub bits: Option<u32>,
    pub iters: Option<u32>,
    pub lambda: Option<f64>,
    pub granularity: Option<Granularity>,
    pub order: Option<Order>,
    pub strict_paper_scale: bool,
}

impl ConfigOverrides {
    /// Flags override manifest defaults, which override built-in defaults.
    pub fn resolve(&self, manifest: &Manifest) -> Result<QuantConfig> {
        let d = &manifest.defaults;
        let bits = self.bits.or(d.bits).unwrap_or(DEFAULT_BITS);
        let granularity = self.granularity.or(d.granularity).unwrap_or(Granularity::PerChannel);
        let mut cfg = QuantConfig::new(bits, granularity);
        if let Some(order) = self.order.or(d.order) {
            cfg.order = order;
        }
        if let Some(iters) = self.iters.or(d.iters) {
            cfg.iters = iters;
        }
        cfg.lambda = self.lambda.or(d.lambda);
        cfg.strict_paper_scale = self.strict_paper_scale || d.strict_paper_scale.unwrap_or(false);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct QuantizeOptions {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub config: ConfigOverrides,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    /// Seeds calibration row subsampling.
    pub seed: u64,
    /// Subsample calibration to at most this many rows.
    pub max_calib_rows: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArtifactIndex {
    #[serde(default, rename = "layer")]
    layers: Vec<ArtifactEntry>,
}

pub struct QuantizeOutcome {
    pub report: JobReport,
    pub entries: Vec<ArtifactEntry>,
}

impl QuantizeOutcome {
    /// Layers that could not be quantized (all-zero weights).
    pub fn failures(&self) -> Vec<&str> {
        self.report.layers.iter().filter(|l| l.degenerate).map(|l| l.name.as_str()).collect()
    }
}

pub(crate) fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ComqError::InvalidConfig(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn subsample_rows(calib: Array2<f32>, max_rows: Option<usize>, seed: u64) -> Array2<f32> {
    match max_rows {
        Some(cap) if cap > 0 && calib.nrows() > cap => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = index::sample(&mut rng, calib.nrows(), cap).into_vec();
            rows.sort_unstable();
            calib.select(Axis(0), &rows)
        }
        _ => calib,
    }
}

/// `||X W_q - X W||_F` with `W_q` taken from the stored artifact.
pub fn artifact_error(problem: &LayerProblem, artifact: &QuantizedLayerArtifact) -> Result<f64> {
    if artifact.codes.dim() != (problem.rows(), problem.cols()) {
        return Err(ComqError::Shape(format!(
            "artifact {} is {:?} but the layer weight is {}x{}",
            artifact.name(),
            artifact.codes.dim(),
            problem.rows(),
            problem.cols()
        )));
    }
    let wq = dequantize_f64(artifact.codes.view(), &artifact.scales)?;
    Ok(problem.sq_error_of(wq.view()).sqrt())
}

fn layer_report(
    layer: &LoadedLayer,
    artifact: &QuantizedLayerArtifact,
    problem: &LayerProblem,
    wall_time_s: f64,
    warnings: Vec<String>,
) -> Result<LayerReport> {
    let error_after = artifact_error(problem, artifact)?;
    let meta = &artifact.meta;
    Ok(LayerReport {
        name: layer.name.clone(),
        shape: [layer.weights.nrows(), layer.weights.ncols()],
        calib_rows: layer.calib.nrows(),
        bits: meta.bits,
        granularity: meta.granularity,
        order: meta.order,
        iters: meta.iters,
        error_before: meta.error_before,
        error_after,
        relative_error: error_after / (problem.target_sq_norm().sqrt() + RELATIVE_EPS),
        wall_time_s,
        degenerate: meta.degenerate,
        warnings,
    })
}

/// Quantize every layer of a manifest and write artifacts plus a report.
pub fn quantize(opts: &QuantizeOptions) -> Result<QuantizeOutcome> {
    let manifest = Manifest::load(&opts.manifest)?;
    let cfg = opts.config.resolve(&manifest)?;
    // Every layer is loaded and shape-checked before any solving starts.
    let layers: Vec<LoadedLayer> = manifest
        .load_layers()?
        .into_iter()
        .enumerate()
        .map(|(k, mut l)| {
            l.calib = subsample_rows(l.calib, opts.max_calib_rows, opts.seed.wrapping_add(k as u64));
            l
        })
        .collect();
    fs::create_dir_all(&opts.out).map_err(|e| ComqError::io(&opts.out, e))?;

    let results = with_threads(opts.threads, || {
        layers
            .iter()
            .map(|layer| {
                let start = Instant::now();
                let problem = LayerProblem::new(layer.weights.view(), layer.calib.view())?;
                let solved = quantize_problem(&problem, &cfg, None)?;
                let mut artifact = QuantizedLayerArtifact::from_layer(&layer.name, &solved, &cfg);
                artifact.meta.error_before = solved.rtn_sq_error.sqrt();
                artifact.meta.error_after = artifact_error(&problem, &artifact)?;
                let entry = save_quantized(&artifact, &opts.out)?;
                let elapsed = start.elapsed().as_secs_f64();
                // Report from what is on disk, not from solver state.
                let stored = load_quantized(&opts.out, &layer.name)?;
                let report = layer_report(layer, &stored, &problem, elapsed, solved.warnings)?;
                log::info!("{}: error {:.4e} -> {:.4e}", layer.name, report.error_before, report.error_after);
                Ok((entry, report))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let (entries, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let index = ArtifactIndex { layers: entries.clone() };
    let index_path = opts.out.join(ARTIFACT_INDEX);
    let text = toml::to_string(&index).map_err(|e| ComqError::Consistency(e.to_string()))?;
    fs::write(&index_path, text).map_err(|e| ComqError::io(&index_path, e))?;
    let report = JobReport::new(reports);
    let report_path = opts.out.join(REPORT_FILE);
    fs::write(&report_path, report.to_json()).map_err(|e| ComqError::io(&report_path, e))?;
    Ok(QuantizeOutcome { report, entries })
}

/// Recompute every layer's reconstruction error from stored artifacts.
pub fn eval(manifest_path: &Path, artifacts: &Path) -> Result<JobReport> {
    let manifest = Manifest::load(manifest_path)?;
    let mut reports = Vec::new();
    for layer in manifest.load_layers()? {
        let start = Instant::now();
        let artifact = load_quantized(artifacts, &layer.name)?;
        let problem = LayerProblem::new(layer.weights.view(), layer.calib.view())?;
        let meta = &artifact.meta;
        let mut cfg = QuantConfig::new(meta.bits, meta.granularity).with_iters(meta.iters);
        cfg.lambda = Some(meta.lambda);
        let mut artifact = artifact.clone();
        artifact.meta.error_before = rtn_sq_error(&problem, &cfg)?.sqrt();
        let elapsed = start.elapsed().as_secs_f64();
        reports.push(layer_report(&layer, &artifact, &problem, elapsed, Vec::new())?);
    }
    Ok(JobReport::new(reports))
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub manifest: PathBuf,
    pub bits: Option<u32>,
    pub iters: Option<u32>,
    pub lambda: Option<f64>,
    /// Seed 0 uses the calibration rows as given; seeds `1..seeds` use a
    /// bootstrap resample of the rows.
    pub seeds: u64,
    pub threads: usize,
}

fn bootstrap_rows(calib: &Array2<f32>, seed: u64) -> Array2<f32> {
    if seed == 0 {
        return calib.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = calib.nrows();
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    calib.select(Axis(0), &rows)
}

/// Quantize each layer per-channel with cyclic and greedy order.
pub fn compare_orders(opts: &CompareOptions) -> Result<ComparisonTable> {
    let manifest = Manifest::load(&opts.manifest)?;
    let overrides = ConfigOverrides {
        bits: opts.bits,
        iters: opts.iters,
        lambda: opts.lambda,
        granularity: Some(Granularity::PerChannel),
        order: Some(Order::Cyclic),
        strict_paper_scale: false,
    };
    let cyclic = overrides.resolve(&manifest)?;
    let greedy = cyclic.clone().with_order(Order::Greedy);
    let layers = manifest.load_layers()?;
    let jobs: Vec<(usize, u64)> = (0..layers.len())
        .flat_map(|l| (0..opts.seeds.max(1)).map(move |s| (l, s)))
        .collect();
    let rows = with_threads(opts.threads, || {
        jobs.par_iter()
            .map(|&(l, seed)| {
                let layer = &layers[l];
                let calib = bootstrap_rows(&layer.calib, seed);
                let problem = LayerProblem::new(layer.weights.view(), calib.view())?;
                let c = quantize_problem(&problem, &cyclic, None)?.sq_error.sqrt();
                let g = quantize_problem(&problem, &greedy, None)?.sq_error.sqrt();
                Ok(OrderComparison {
                    name: layer.name.clone(),
                    seed,
                    cyclic_error: c,
                    greedy_error: g,
                    ratio: if c > 0.0 { g / c } else if g == 0.0 { 1.0 } else { f64::INFINITY },
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    Ok(ComparisonTable {
        bits: cyclic.bits,
        iters: cyclic.iters,
        median_ratio: median(&ratios),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OracleGridKind {
    Symmetric,
    Affine,
}

/// Exhaustive optimum for a single-column weight (m×1) on small grids.
pub fn oracle_search(weight: &Path, calib: &Path, bits: u32, grid: OracleGridKind, lambda: Option<f64>) -> Result<OracleResult> {
    let w = load_matrix(weight)?;
    let x = load_matrix(calib)?;
    if w.ncols() != 1 {
        return Err(ComqError::Shape(format!("oracle expects an m x 1 weight, got {:?}", w.dim())));
    }
    let w: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let grid = match grid {
        OracleGridKind::Symmetric => OracleGrid::Symmetric,
        OracleGridKind::Affine => {
            OracleGrid::affine_around(&w, bits, lambda.unwrap_or_else(|| crate::config::default_lambda(bits)))?
        }
    };
    oracle::brute_force_joint(&w, x.mapv(f64::from).view(), bits, grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthDist {
    Gaussian,
    StudentT,
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub out: PathBuf,
    pub layers: usize,
    pub samples: usize,
    pub rows: usize,
    pub cols: usize,
    pub dist: SynthDist,
    pub seed: u64,
}

/// Write a seeded synthetic manifest with its tensors; returns the manifest path.
pub fn synth(opts: &SynthOptions) -> Result<PathBuf> {
    fs::create_dir_all(&opts.out).map_err(|e| ComqError::io(&opts.out, e))?;
    let mut manifest = Manifest::default();
    for k in 0..opts.layers {
        let seed = opts.seed.wrapping_add(k as u64);
        let inst = match opts.dist {
            SynthDist::Gaussian => Instance::gaussian(seed, opts.samples, opts.rows, opts.cols),
            SynthDist::StudentT => Instance::heavy_tailed(seed, opts.samples, opts.rows, opts.cols, 2.0),
        };
        let name = format!("layer{k}");
        let (w, x) = (format!("{name}.weight.ct"), format!("{name}.input.ct"));
        save_matrix(&opts.out.join(&w), &inst.weights)?;
        save_matrix(&opts.out.join(&x), &inst.calib)?;
        manifest.layers.push(LayerEntry::new(name, w, x));
    }
    let path = opts.out.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}
