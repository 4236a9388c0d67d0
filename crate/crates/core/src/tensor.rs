//! 4-D tensor containers and their on-disk format.
//!
//! Filter banks (C_out, C_in, k, k) and feature maps (N, C, H, W) share
//! one serialization: a JSON manifest `{"shape": [...], "dtype": "f32le"}`
//! beside a raw little-endian f32 blob in row-major order. Internal
//! arithmetic is f64; values are narrowed on write and widened on read.

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("blob {path} holds {got} values but the manifest shape wants {want}")]
    SizeMismatch {
        path: PathBuf,
        got: usize,
        want: usize,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum BankError {
    #[error("filter bank dims must all be >= 1, got {0:?}")]
    EmptyDim([usize; 4]),
    #[error("filter bank kernel must be square, got {kh}x{kw}")]
    NonSquareKernel { kh: usize, kw: usize },
    #[error("filter {index} is all-zero; cosine similarity is undefined for it")]
    ZeroFilter { index: usize },
    #[error("filter bank contains a non-finite value")]
    NonFinite,
}

/// Convolution filter weights, shape (C_out, C_in, k, k).
///
/// Construction rejects all-zero filters (their direction is undefined)
/// and non-finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    weights: Array4<f64>,
}

impl FilterBank {
    pub fn new(weights: Array4<f64>) -> Result<Self, BankError> {
        let (c_out, c_in, kh, kw) = weights.dim();
        if c_out == 0 || c_in == 0 || kh == 0 || kw == 0 {
            return Err(BankError::EmptyDim([c_out, c_in, kh, kw]));
        }
        if kh != kw {
            return Err(BankError::NonSquareKernel { kh, kw });
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(BankError::NonFinite);
        }
        for (index, filter) in weights.outer_iter().enumerate() {
            if filter.iter().all(|v| *v == 0.0) {
                return Err(BankError::ZeroFilter { index });
            }
        }
        Ok(FilterBank { weights })
    }

    pub fn weights(&self) -> &Array4<f64> {
        &self.weights
    }

    /// (C_out, C_in, k, k)
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.weights.dim()
    }

    pub fn c_out(&self) -> usize {
        self.weights.dim().0
    }

    pub fn c_in(&self) -> usize {
        self.weights.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.weights.dim().2
    }

    /// Number of weight elements.
    pub fn param_count(&self) -> usize {
        self.weights.len()
    }
}

/// Activation tensor, shape (N, C, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array4<f64>,
}

#[derive(Debug, Error, PartialEq)]
#[error("feature map dims must all be >= 1, got {0:?}")]
pub struct EmptyFeatureMap(pub [usize; 4]);

impl FeatureMap {
    pub fn new(data: Array4<f64>) -> Result<Self, EmptyFeatureMap> {
        let (n, c, h, w) = data.dim();
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(EmptyFeatureMap([n, c, h, w]));
        }
        Ok(FeatureMap { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }

    /// (N, C, H, W)
    pub fn dim(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorManifest {
    shape: Vec<usize>,
    dtype: String,
}

const DTYPE: &str = "f32le";

fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Write `arr` as `<stem>.json` + `<stem>.bin` (f32 little-endian,
/// row-major).
pub fn save_tensor4(stem: &Path, arr: &Array4<f64>) -> Result<(), TensorIoError> {
    let manifest = TensorManifest {
        shape: arr.shape().to_vec(),
        dtype: DTYPE.to_string(),
    };
    let mpath = manifest_path(stem);
    let text = serde_json::to_string(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(|source| TensorIoError::Io {
        path: mpath,
        source,
    })?;

    let mut bytes = Vec::with_capacity(arr.len() * 4);
    for v in arr.as_standard_layout().iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let bpath = blob_path(stem);
    fs::write(&bpath, bytes).map_err(|source| TensorIoError::Io {
        path: bpath,
        source,
    })
}

/// Read a tensor written by [`save_tensor4`], widening to f64.
pub fn load_tensor4(stem: &Path) -> Result<Array4<f64>, TensorIoError> {
    let mpath = manifest_path(stem);
    let text = fs::read_to_string(&mpath).map_err(|source| TensorIoError::Io {
        path: mpath.clone(),
        source,
    })?;
    let manifest: TensorManifest =
        serde_json::from_str(&text).map_err(|e| TensorIoError::BadManifest {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
    if manifest.dtype != DTYPE {
        return Err(TensorIoError::BadManifest {
            path: mpath.clone(),
            reason: format!("unsupported dtype {:?}", manifest.dtype),
        });
    }
    if manifest.shape.len() != 4 {
        return Err(TensorIoError::BadManifest {
            path: mpath,
            reason: format!("expected 4-D shape, got {:?}", manifest.shape),
        });
    }
    let shape = (
        manifest.shape[0],
        manifest.shape[1],
        manifest.shape[2],
        manifest.shape[3],
    );
    let want = manifest.shape.iter().product::<usize>();

    let bpath = blob_path(stem);
    let mut bytes = Vec::new();
    fs::File::open(&bpath)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| TensorIoError::Io {
            path: bpath.clone(),
            source,
        })?;
    if bytes.len() != want * 4 {
        return Err(TensorIoError::SizeMismatch {
            path: bpath,
            got: bytes.len() / 4,
            want,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array4::from_shape_vec(shape, values).expect("size checked above"))
}
