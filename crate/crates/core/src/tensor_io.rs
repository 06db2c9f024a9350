//! Tensor files and quantized-layer artifacts.
//!
//! Tensor file layout, all integers little-endian:
//!
//! | offset | size      | field                                       |
//! |--------|-----------|---------------------------------------------|
//! | 0      | 8         | magic `COMQTNSR`                            |
//! | 8      | 4         | version, `u32` = 1                          |
//! | 12     | 1         | dtype: 0 = `f32`, 1 = `i8`, 2 = `i32`       |
//! | 13     | 1         | rank `r`                                    |
//! | 14     | 8·r       | dims, `u64` each                            |
//! | 14+8r  | …         | row-major payload, `size(dtype) · Π dims`   |
//!
//! A quantized layer is a directory `<name>/` holding `codes.ct` (m×n,
//! `i8` when every code fits, else `i32`), `scales.ct` (length 1 or n,
//! `f32`), `zeros.ct` (length 0 or n, `i32`) and `meta.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{Granularity, Order, QuantConfig};
use crate::error::{ComqError, FormatError, Result};
use crate::grid::{affine_codes, dequantize, symmetric_codes};
use crate::quantized::QuantizedLayer;

pub const MAGIC: [u8; 8] = *b"COMQTNSR";
pub const VERSION: u32 = 1;
const HEADER_FIXED: usize = 14;

pub const CODES_FILE: &str = "codes.ct";
pub const SCALES_FILE: &str = "scales.ct";
pub const ZEROS_FILE: &str = "zeros.ct";
pub const META_FILE: &str = "meta.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I32 => 2,
        }
    }

    pub fn from_code(code: u8) -> std::result::Result<Self, FormatError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::I8),
            2 => Ok(DType::I32),
            other => Err(FormatError::BadDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<u64>,
    data: TensorData,
}

fn element_count(dims: &[u64]) -> std::result::Result<usize, FormatError> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or(FormatError::DimOverflow)
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(ComqError::Shape(format!("rank {} exceeds 255", dims.len())));
        }
        let count = element_count(&dims)?;
        if count != data.len() {
            return Err(ComqError::Shape(format!(
                "dims {dims:?} hold {count} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_matrix_f32(m: &Array2<f32>) -> Self {
        let (r, c) = m.dim();
        Tensor {
            dims: vec![r as u64, c as u64],
            data: TensorData::F32(m.iter().copied().collect()),
        }
    }

    pub fn vector_f32(v: Vec<f32>) -> Self {
        Tensor {
            dims: vec![v.len() as u64],
            data: TensorData::F32(v),
        }
    }

    pub fn vector_i32(v: Vec<i32>) -> Self {
        Tensor {
            dims: vec![v.len() as u64],
            data: TensorData::I32(v),
        }
    }

    /// Codes as `i8` when every value fits, else `i32`.
    pub fn from_codes(m: &Array2<i32>) -> Self {
        let (r, c) = m.dim();
        let dims = vec![r as u64, c as u64];
        let narrow: Option<Vec<i8>> = m.iter().map(|&q| i8::try_from(q).ok()).collect();
        let data = match narrow {
            Some(v) => TensorData::I8(v),
            None => TensorData::I32(m.iter().copied().collect()),
        };
        Tensor { dims, data }
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    fn describe(&self) -> String {
        format!("{:?} tensor with dims {:?}", self.dtype(), self.dims)
    }

    fn mismatch(&self, expected: &str) -> ComqError {
        FormatError::UnexpectedTensor {
            expected: expected.into(),
            found: self.describe(),
        }
        .into()
    }

    pub fn into_matrix_f32(self) -> Result<Array2<f32>> {
        if let (&[r, c], TensorData::F32(_)) = (&self.dims[..], &self.data) {
            let shape = (r as usize, c as usize);
            if let TensorData::F32(v) = self.data {
                return Ok(Array2::from_shape_vec(shape, v).unwrap());
            }
        }
        Err(self.mismatch("rank-2 f32 tensor"))
    }

    /// Rank-2 integer codes stored as `i8` or `i32`.
    pub fn into_codes(self) -> Result<Array2<i32>> {
        let shape = match self.dims[..] {
            [r, c] => (r as usize, c as usize),
            _ => return Err(self.mismatch("rank-2 integer tensor")),
        };
        let v = match &self.data {
            TensorData::I8(v) => v.iter().map(|&q| i32::from(q)).collect(),
            TensorData::I32(v) => v.clone(),
            TensorData::F32(_) => return Err(self.mismatch("rank-2 integer tensor")),
        };
        Ok(Array2::from_shape_vec(shape, v).unwrap())
    }

    pub fn into_vector_f32(self) -> Result<Vec<f32>> {
        match (self.dims.len(), self.data) {
            (1, TensorData::F32(v)) => Ok(v),
            (_, data) => Err(Tensor { dims: self.dims, data }.mismatch("rank-1 f32 tensor")),
        }
    }

    pub fn into_vector_i32(self) -> Result<Vec<i32>> {
        match (self.dims.len(), self.data) {
            (1, TensorData::I32(v)) => Ok(v),
            (_, data) => Err(Tensor { dims: self.dims, data }.mismatch("rank-1 i32 tensor")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.data.len() * self.dtype().size();
        let mut out = Vec::with_capacity(HEADER_FIXED + 8 * self.dims.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        if bytes.len() < HEADER_FIXED {
            if bytes.len() >= 8 && bytes[..8] != MAGIC {
                return Err(FormatError::BadMagic(bytes[..8].try_into().unwrap()));
            }
            return Err(FormatError::TruncatedHeader {
                needed: HEADER_FIXED,
                available: bytes.len(),
            });
        }
        let magic: [u8; 8] = bytes[..8].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(FormatError::BadVersion(version));
        }
        let dtype = DType::from_code(bytes[12])?;
        let rank = bytes[13] as usize;
        let header = HEADER_FIXED + 8 * rank;
        if bytes.len() < header {
            return Err(FormatError::TruncatedHeader {
                needed: header,
                available: bytes.len(),
            });
        }
        let dims: Vec<u64> = bytes[HEADER_FIXED..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let count = element_count(&dims)?;
        let expected = count.checked_mul(dtype.size()).ok_or(FormatError::DimOverflow)?;
        let payload = &bytes[header..];
        if payload.len() < expected {
            return Err(FormatError::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(FormatError::TrailingBytes {
                expected,
                found: payload.len(),
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(
                payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(Tensor { dims, data })
    }
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, tensor.to_bytes()).map_err(|e| ComqError::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| ComqError::io(path, e))?;
    Ok(Tensor::from_bytes(&bytes)?)
}

/// Load a rank-2 `f32` tensor.
pub fn load_matrix(path: &Path) -> Result<Array2<f32>> {
    load_tensor(path)?.into_matrix_f32()
}

pub fn save_matrix(path: &Path, m: &Array2<f32>) -> Result<()> {
    save_tensor(path, &Tensor::from_matrix_f32(m))
}

/// Per-layer record stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub name: String,
    pub bits: u32,
    pub iters: u32,
    pub lambda: f64,
    pub granularity: Granularity,
    pub order: Order,
    pub strict_paper_scale: bool,
    pub solver_version: String,
    /// `||X RTN(W) - X W||_F` at the initial scale(s).
    pub error_before: f64,
    /// `||X W_q - X W||_F` of the stored artifact.
    pub error_after: f64,
    pub exact_columns: Vec<bool>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayerArtifact {
    pub codes: Array2<i32>,
    pub scales: Vec<f32>,
    pub zero_points: Vec<i32>,
    pub meta: ArtifactMeta,
}

/// Where a layer landed on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    /// Directory relative to the artifact root.
    pub dir: PathBuf,
    pub code_dtype: DType,
}

pub(crate) fn check_layer_name(name: &str) -> Result<()> {
    if name.is_empty() || name == "." || name == ".." || name.contains(['/', '\\']) {
        return Err(ComqError::Manifest(format!(
            "layer name {name:?} cannot be used as a directory name"
        )));
    }
    Ok(())
}

impl QuantizedLayerArtifact {
    /// Artifact for `layer` with its scales rounded to binary32. Errors are
    /// filled in by the caller, since they need the calibration data.
    pub fn from_layer(name: &str, layer: &QuantizedLayer, cfg: &QuantConfig) -> Self {
        QuantizedLayerArtifact {
            codes: layer.codes.clone(),
            scales: layer.scales_f32(),
            zero_points: layer.zero_points.clone(),
            meta: ArtifactMeta {
                name: name.to_string(),
                bits: cfg.bits,
                iters: cfg.iters,
                lambda: cfg.lambda(),
                granularity: cfg.granularity,
                order: cfg.order,
                strict_paper_scale: cfg.strict_paper_scale,
                solver_version: crate::SOLVER_VERSION.to_string(),
                error_before: f64::NAN,
                error_after: f64::NAN,
                exact_columns: layer.exact_columns.clone(),
                degenerate: layer.degenerate,
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.meta.name
    }

    pub fn dequantize(&self) -> Result<Array2<f32>> {
        dequantize(self.codes.view(), &self.scales)
    }

    /// Check shapes and that every code is inside its code set.
    pub fn validate(&self) -> Result<()> {
        let n = self.codes.ncols();
        let (want_scales, want_zeros) = match self.meta.granularity {
            Granularity::PerLayer => (1, 0),
            Granularity::PerChannel => (n, n),
        };
        if self.scales.len() != want_scales || self.zero_points.len() != want_zeros {
            return Err(ComqError::Consistency(format!(
                "{} layer with {n} columns has {} scales and {} zero-points",
                self.meta.granularity,
                self.scales.len(),
                self.zero_points.len()
            )));
        }
        for (i, col) in self.codes.columns().into_iter().enumerate() {
            let set = match self.meta.granularity {
                Granularity::PerLayer => symmetric_codes(self.meta.bits)?,
                Granularity::PerChannel => affine_codes(self.zero_points[i], self.meta.bits)?,
            };
            if let Some(q) = col.iter().find(|&&q| !set.contains(q)) {
                return Err(ComqError::Consistency(format!(
                    "layer {}: code {q} in column {i} lies outside {}..={}",
                    self.meta.name,
                    set.lo(),
                    set.hi()
                )));
            }
        }
        Ok(())
    }
}

/// Write `artifact` under `root/<name>/`.
pub fn save_quantized(artifact: &QuantizedLayerArtifact, root: &Path) -> Result<ArtifactEntry> {
    check_layer_name(artifact.name())?;
    artifact.validate()?;
    let rel = PathBuf::from(artifact.name());
    let dir = root.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| ComqError::io(&dir, e))?;
    let codes = Tensor::from_codes(&artifact.codes);
    let code_dtype = codes.dtype();
    save_tensor(&dir.join(CODES_FILE), &codes)?;
    save_tensor(&dir.join(SCALES_FILE), &Tensor::vector_f32(artifact.scales.clone()))?;
    save_tensor(&dir.join(ZEROS_FILE), &Tensor::vector_i32(artifact.zero_points.clone()))?;
    let meta = toml::to_string(&artifact.meta)
        .map_err(|e| ComqError::Consistency(format!("cannot encode metadata: {e}")))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta).map_err(|e| ComqError::io(&meta_path, e))?;
    Ok(ArtifactEntry {
        name: artifact.name().to_string(),
        dir: rel,
        code_dtype,
    })
}

pub fn load_quantized(root: &Path, name: &str) -> Result<QuantizedLayerArtifact> {
    check_layer_name(name)?;
    let dir = root.join(name);
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| ComqError::io(&meta_path, e))?;
    let meta: ArtifactMeta = toml::from_str(&text)
        .map_err(|e| ComqError::Manifest(format!("{}: {e}", meta_path.display())))?;
    let artifact = QuantizedLayerArtifact {
        codes: load_tensor(&dir.join(CODES_FILE))?.into_codes()?,
        scales: load_tensor(&dir.join(SCALES_FILE))?.into_vector_f32()?,
        zero_points: load_tensor(&dir.join(ZEROS_FILE))?.into_vector_i32()?,
        meta,
    };
    artifact.validate()?;
    Ok(artifact)
}
