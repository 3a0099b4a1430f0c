//! Foreground weighting masks for the reconstruction loss.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{Array1, Array2};

use crate::datamodel::write_atomic;
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_FRAC: f64 = 0.5;

/// Non-negative per-pixel weights with maximum exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    weights: Array2<f64>,
}

impl ForegroundMask {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::shape("mask has no pixels"));
        }
        if weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("mask weights must be finite and non-negative"));
        }
        let max = weights.iter().copied().fold(0.0, f64::max);
        if max == 0.0 {
            return Err(Error::invalid("mask is all zero"));
        }
        if max != 1.0 {
            return Err(Error::invalid(format!("mask peak is {max}, expected 1")));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn size(&self) -> (usize, usize) {
        self.weights.dim()
    }

    /// Errors unless the mask is `height × width`.
    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        if self.size() != (height, width) {
            let (h, w) = self.size();
            return Err(Error::shape(format!("mask is {h}x{w} but the image is {height}x{width}")));
        }
        Ok(())
    }

    /// Bilinear resize, renormalized to peak 1.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if self.size() == (height, width) {
            return Ok(self.clone());
        }
        let plane = self.weights.clone().insert_axis(ndarray::Axis(0));
        let out = crate::degrade::resize_array(&plane, height, width);
        normalized(out.index_axis_move(ndarray::Axis(0), 0))
    }
}

fn normalized(mut w: Array2<f64>) -> Result<ForegroundMask> {
    let max = w.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::invalid("mask is all zero"));
    }
    w.mapv_inplace(|v| (v / max).min(1.0));
    ForegroundMask::new(w)
}

fn profile(n: usize, sigma_frac: f64) -> Array1<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let s = sigma_frac * n as f64 / 2.0;
    let p = Array1::from_shape_fn(n, |i| (-((i as f64 - c).powi(2)) / (2.0 * s * s)).exp());
    // Even lengths have no sample at the centre; rescale so the peak is 1.
    let max = p.iter().copied().fold(0.0, f64::max);
    p / max
}

/// Separable Gaussian centred on the image with `σ = sigma_frac · size / 2`
/// per axis, scaled so the largest weight is 1.
pub fn gaussian_mask(height: usize, width: usize, sigma_frac: f64) -> Result<ForegroundMask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("mask size {height}x{width} must be positive")));
    }
    if !(sigma_frac > 0.0 && sigma_frac.is_finite()) {
        return Err(Error::invalid(format!("sigma_frac {sigma_frac} must be positive")));
    }
    let col = profile(height, sigma_frac);
    let row = profile(width, sigma_frac);
    let w = Array2::from_shape_fn((height, width), |(y, x)| col[y] * row[x]);
    ForegroundMask::new(w)
}

pub fn ones_mask(height: usize, width: usize) -> Result<ForegroundMask> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!("mask size {height}x{width} must be positive")));
    }
    ForegroundMask::new(Array2::ones((height, width)))
}

/// Loads a grayscale mask image and rescales it so its maximum is 1.
pub fn external_mask(path: impl AsRef<Path>) -> Result<ForegroundMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma16();
    let (w, h) = img.dimensions();
    let raw = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] as f64);
    normalized(raw).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::invalid(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Which mask the reconstruction loss uses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Gaussian,
    Ones,
    /// Per-sample masks from the manifest's `mask_path` column.
    External,
}

/// Computed masks keyed by size. When `RIVID_CACHE` names a directory,
/// Gaussian masks are also persisted there as raw little-endian `f64`.
#[derive(Debug, Default)]
pub struct MaskCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<(usize, usize, u64), ForegroundMask>>,
}

impl MaskCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            memory: Mutex::default(),
        }
    }

    pub fn from_env() -> Self {
        Self::new(std::env::var_os("RIVID_CACHE").map(PathBuf::from))
    }

    pub fn gaussian(&self, height: usize, width: usize, sigma_frac: f64) -> Result<ForegroundMask> {
        let key = (height, width, sigma_frac.to_bits());
        if let Some(m) = self.memory.lock().unwrap().get(&key) {
            return Ok(m.clone());
        }
        let file = self
            .dir
            .as_ref()
            .map(|d| d.join(format!("gaussian_{height}x{width}_{:016x}.f64", sigma_frac.to_bits())));
        let cached = file.as_ref().and_then(|f| read_cached(f, height, width));
        let mask = match cached {
            Some(m) => m,
            None => {
                let m = gaussian_mask(height, width, sigma_frac)?;
                if let Some(f) = &file {
                    let bytes: Vec<u8> = m.weights.iter().flat_map(|v| v.to_le_bytes()).collect();
                    write_atomic(f, &bytes)?;
                }
                m
            }
        };
        self.memory.lock().unwrap().insert(key, mask.clone());
        Ok(mask)
    }
}

fn read_cached(path: &Path, height: usize, width: usize) -> Option<ForegroundMask> {
    let bytes = fs::read(path).ok()?;
    if bytes.len() != height * width * 8 {
        return None;
    }
    let vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    ForegroundMask::new(Array2::from_shape_vec((height, width), vals).ok()?).ok()
}
