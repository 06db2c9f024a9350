//! Job manifest: a TOML file listing layers and job-level defaults.
//!
//! ```toml
//! [defaults]
//! bits = 4
//! iters = 3
//! lambda = 1.0              # optional; defaults by bit-width
//! granularity = "per-channel"
//! order = "greedy"
//! strict_paper_scale = false
//!
//! [[layer]]
//! name = "fc1"
//! weight = "fc1.weight.ct"  # m×n f32, relative to the manifest
//! calib = "fc1.input.ct"    # N×m f32
//! ```
//!
//! Unknown keys produce warnings, not errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{Granularity, Order};
use crate::error::{ComqError, Result};
use crate::tensor_io::{check_layer_name, load_matrix};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<Order>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strict_paper_scale: Option<bool>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub weight: PathBuf,
    pub calib: PathBuf,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, toml::Value>,
}

impl LayerEntry {
    pub fn new(name: impl Into<String>, weight: impl Into<PathBuf>, calib: impl Into<PathBuf>) -> Self {
        LayerEntry {
            name: name.into(),
            weight: weight.into(),
            calib: calib.into(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default, rename = "layer")]
    pub layers: Vec<LayerEntry>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, toml::Value>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A layer with its tensors loaded and shape-checked.
#[derive(Debug, Clone)]
pub struct LoadedLayer {
    pub name: String,
    pub weights: Array2<f32>,
    pub calib: Array2<f32>,
}

impl Manifest {
    pub fn new(layers: Vec<LayerEntry>) -> Self {
        Manifest {
            layers,
            ..Default::default()
        }
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<(Self, Vec<String>)> {
        let mut manifest: Manifest =
            toml::from_str(text).map_err(|e| ComqError::Manifest(e.to_string()))?;
        manifest.base_dir = base_dir.to_path_buf();
        let mut warnings: Vec<String> = manifest.extra.keys().map(|k| format!("unknown key `{k}`")).collect();
        warnings.extend(manifest.defaults.extra.keys().map(|k| format!("unknown key `defaults.{k}`")));
        for l in &manifest.layers {
            warnings.extend(l.extra.keys().map(|k| format!("unknown key `{k}` in layer {}", l.name)));
        }
        Ok((manifest, warnings))
    }

    /// Read a manifest, logging unknown keys.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ComqError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let (manifest, warnings) = Self::parse(&text, &base)?;
        for w in warnings {
            log::warn!("{}: {w}", path.display());
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| ComqError::Manifest(e.to_string()))?;
        fs::write(path, text).map_err(|e| ComqError::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Load every layer, rejecting duplicate names and shape mismatches.
    pub fn load_layers(&self) -> Result<Vec<LoadedLayer>> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for entry in &self.layers {
            check_layer_name(&entry.name)?;
            if !seen.insert(entry.name.as_str()) {
                return Err(ComqError::Manifest(format!("duplicate layer name {:?}", entry.name)));
            }
            let weights = load_matrix(&self.resolve(&entry.weight))?;
            let calib = load_matrix(&self.resolve(&entry.calib))?;
            if calib.ncols() != weights.nrows() {
                return Err(ComqError::Shape(format!(
                    "layer {}: calibration is {}x{} but weight is {}x{}",
                    entry.name,
                    calib.nrows(),
                    calib.ncols(),
                    weights.nrows(),
                    weights.ncols()
                )));
            }
            if weights.is_empty() || calib.nrows() == 0 {
                return Err(ComqError::Shape(format!("layer {}: empty tensor", entry.name)));
            }
            out.push(LoadedLayer {
                name: entry.name.clone(),
                weights,
                calib,
            });
        }
        Ok(out)
    }
}
