//! Resolution arithmetic, resampling and benchmark degradation protocols.
//!
//! Shrinking uses area averaging and enlarging uses bilinear interpolation
//! with half-pixel centres. Both are separable, so a resize is
//! `W_y · X_c · W_xᵀ` per channel.

mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{save_image, ImageTensor, Manifest, ManifestEntry, Split, MIN_HEIGHT, MIN_WIDTH};
use crate::error::{Error, Result};

pub use synth::{render_person, synth_corpus, Appearance, SynthCorpus, SynthSpec};

/// `width / width_max`, the scalar resolution of an image.
pub fn resolution_of(width: usize, width_max: usize) -> Result<f64> {
    if width == 0 || width_max == 0 {
        return Err(Error::invalid("widths must be positive"));
    }
    if width > width_max {
        return Err(Error::invalid(format!("width {width} exceeds width_max {width_max}")));
    }
    Ok(width as f64 / width_max as f64)
}

/// Round half up, applied independently to each axis of a scaled size.
pub fn scaled_len(len: usize, ratio: f64) -> usize {
    (len as f64 * ratio + 0.5).floor() as usize
}

fn area_weights(n_in: usize, n_out: usize) -> Array2<f64> {
    let scale = n_in as f64 / n_out as f64;
    let mut w = Array2::zeros((n_out, n_in));
    for o in 0..n_out {
        let a = o as f64 * scale;
        let b = (o + 1) as f64 * scale;
        let first = a.floor() as usize;
        let last = (b.ceil() as usize).min(n_in);
        for i in first..last {
            let overlap = b.min(i as f64 + 1.0) - a.max(i as f64);
            if overlap > 0.0 {
                w[[o, i]] = overlap / scale;
            }
        }
    }
    w
}

fn bilinear_weights(n_in: usize, n_out: usize) -> Array2<f64> {
    let scale = n_in as f64 / n_out as f64;
    let mut w = Array2::zeros((n_out, n_in));
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let t = src - i0 as f64;
        w[[o, i0]] += 1.0 - t;
        w[[o, i1]] += t;
    }
    w
}

fn axis_weights(n_in: usize, n_out: usize) -> Array2<f64> {
    match n_out.cmp(&n_in) {
        std::cmp::Ordering::Less => area_weights(n_in, n_out),
        std::cmp::Ordering::Equal => Array2::eye(n_in),
        std::cmp::Ordering::Greater => bilinear_weights(n_in, n_out),
    }
}

/// Resizes a `[c, h, w]` array; each axis shrinks by area averaging or grows
/// bilinearly. Output is clamped to `[0, 1]`.
pub fn resize_array(src: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    assert!(height > 0 && width > 0 && h > 0 && w > 0, "resize to or from an empty image");
    if (h, w) == (height, width) {
        return src.clone();
    }
    let wy = axis_weights(h, height);
    let wx = axis_weights(w, width);
    let mut out = Array3::zeros((c, height, width));
    for (ch, mut dst) in out.axis_iter_mut(Axis(0)).enumerate() {
        let plane = src.index_axis(Axis(0), ch);
        dst.assign(&wy.dot(&plane).dot(&wx.t()));
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Area-averaging downscale to `round(ratio × size)` on each axis.
pub fn downsample(image: &ImageTensor, ratio: f64) -> Result<ImageTensor> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("downsample ratio {ratio} outside (0, 1]")));
    }
    if ratio == 1.0 {
        return Ok(image.clone());
    }
    let (h, w) = image.size();
    downsample_to(image, scaled_len(h, ratio), scaled_len(w, ratio))
}

/// Area-averaging downscale to an exact size.
pub fn downsample_to(image: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    let (h, w) = image.size();
    if height > h || width > w {
        return Err(Error::invalid(format!("cannot downsample {h}x{w} to {height}x{width}")));
    }
    if height < MIN_HEIGHT || width < MIN_WIDTH {
        return Err(Error::invalid(format!(
            "downsampled size {height}x{width} is below the {MIN_HEIGHT}x{MIN_WIDTH} minimum"
        )));
    }
    ImageTensor::new(resize_array(image.pixels(), height, width))
}

/// Aspect-preserving downscale to a target width.
pub fn downsample_to_width(image: &ImageTensor, width: usize) -> Result<ImageTensor> {
    let (h, w) = image.size();
    let height = scaled_len(h, width as f64 / w as f64);
    downsample_to(image, height, width)
}

/// Bilinear enlargement to exactly `size`; never shrinks.
pub fn upsample_to(image: &ImageTensor, size: (usize, usize)) -> Result<ImageTensor> {
    let (h, w) = image.size();
    if size.0 < h || size.1 < w {
        return Err(Error::invalid(format!(
            "upsample target {}x{} is smaller than the {h}x{w} source",
            size.0, size.1
        )));
    }
    ImageTensor::new(resize_array(image.pixels(), size.0, size.1))
}

/// A rational downsampling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub const fn new(num: u32, den: u32) -> Self {
        Self { num, den }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad ratio `{s}` (expected e.g. 1/2)"));
        let (n, d) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => (s.trim().parse().map_err(|_| bad())?, 1),
        };
        if d == 0 {
            return Err(bad());
        }
        Ok(Ratio::new(n, d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolKind {
    /// Multiple low resolutions: train and query images are shrunk by a
    /// ratio drawn uniformly from the set; gallery images stay untouched.
    Mlr { ratios: Vec<Ratio> },
    /// Varied resolution: every image is shrunk to a width drawn uniformly
    /// from `[lo, hi)`, height following the aspect ratio.
    Vr { lo: u32, hi: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradeProtocol {
    pub kind: ProtocolKind,
    pub seed: u64,
}

impl DegradeProtocol {
    pub fn mlr_default(seed: u64) -> Self {
        Self {
            kind: ProtocolKind::Mlr {
                ratios: vec![Ratio::new(1, 2), Ratio::new(1, 3), Ratio::new(1, 4)],
            },
            seed,
        }
    }

    pub fn vr(lo: u32, hi: u32, seed: u64) -> Self {
        Self {
            kind: ProtocolKind::Vr { lo, hi },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ProtocolKind::Mlr { ratios } => {
                if ratios.is_empty() {
                    return Err(Error::invalid("MLR protocol needs at least one ratio"));
                }
                if let Some(r) = ratios.iter().find(|r| !(r.value() > 0.0 && r.value() <= 1.0)) {
                    return Err(Error::invalid(format!("MLR ratio {r} outside (0, 1]")));
                }
            }
            ProtocolKind::Vr { lo, hi } => {
                if !(4 <= *lo && lo < hi) {
                    return Err(Error::invalid(format!("VR range [{lo}, {hi}) must satisfy 4 <= lo < hi")));
                }
            }
        }
        Ok(())
    }

    /// Degrades one image; `None` leaves it untouched.
    pub fn degrade(&self, image: &ImageTensor, split: Split, index: usize) -> Result<Option<ImageTensor>> {
        let mut rng = sample_rng(self.seed, split, index);
        match &self.kind {
            ProtocolKind::Mlr { ratios } => {
                if split == Split::Gallery {
                    return Ok(None);
                }
                let r = ratios[rng.random_range(0..ratios.len())];
                downsample(image, r.value()).map(Some)
            }
            ProtocolKind::Vr { lo, hi } => {
                let target = rng.random_range(*lo..*hi) as usize;
                if target > image.width() {
                    return Err(Error::invalid(format!(
                        "VR target width {target} exceeds source width {}",
                        image.width()
                    )));
                }
                downsample_to_width(image, target).map(Some)
            }
        }
    }
}

/// Independent stream per (seed, split, image index), so output never depends
/// on processing order.
pub(crate) fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let split_code = match split {
        Split::Train => 1u64,
        Split::Query => 2,
        Split::Gallery => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split_code << 40) | index as u64);
    rng
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    if let Some(d) = to.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::copy(from, to).map_err(|e| Error::io(from, e))?;
    Ok(())
}

/// Applies a protocol to every image of a manifest, writing the degraded
/// inputs to `out_dir/images/`, copies of the targets to `out_dir/hr/` and
/// masks to `out_dir/masks/`. Identity labels and the split are preserved.
pub fn apply_protocol(manifest: &Manifest, protocol: &DegradeProtocol, out_dir: &Path) -> Result<Manifest> {
    protocol.validate()?;
    if manifest.is_empty() {
        return Err(Error::invalid("cannot degrade an empty manifest"));
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(manifest.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let name = e
            .input_path
            .file_name()
            .ok_or_else(|| Error::invalid(format!("entry {i} has no file name")))?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::invalid(format!("duplicate image name {}", name.to_string_lossy())));
        }
        let src = manifest.resolve(&e.input_path);
        let image = crate::datamodel::load_image(&src)?;
        let (input_path, width) = match protocol.degrade(&image, manifest.split, i)? {
            Some(img) => {
                let rel = PathBuf::from("images").join(Path::new(&name).with_extension("png"));
                save_image(&img, out_dir.join(&rel))?;
                (rel, img.width())
            }
            None => {
                let rel = PathBuf::from("images").join(&name);
                copy_file(&src, &out_dir.join(&rel))?;
                (rel, image.width())
            }
        };
        let hr_rel = PathBuf::from("hr").join(e.hr_path.file_name().unwrap_or(&name));
        copy_file(&manifest.resolve(&e.hr_path), &out_dir.join(&hr_rel))?;
        let mask_path = match &e.mask_path {
            Some(m) => {
                let rel = PathBuf::from("masks").join(m.file_name().unwrap_or(&name));
                copy_file(&manifest.resolve(m), &out_dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            input_path,
            hr_path: hr_rel,
            person_id: e.person_id,
            resolution: resolution_of(width, manifest.width_max as usize)?,
            mask_path,
        });
    }
    Ok(Manifest {
        entries,
        width_max: manifest.width_max,
        split: manifest.split,
        base_dir: out_dir.to_path_buf(),
    })
}
