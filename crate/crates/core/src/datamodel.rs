//! Images, samples, dataset manifests and the identity-label table.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_HEIGHT: usize = 8;
pub const MIN_WIDTH: usize = 4;

/// Tolerance when comparing a stored resolution with the width ratio.
pub const RESOLUTION_TOLERANCE: f64 = 1e-6;

/// RGB image, `[3, height, width]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_HEIGHT || w < MIN_WIDTH {
            return Err(Error::shape(format!(
                "image {h}x{w} is smaller than the {MIN_HEIGHT}x{MIN_WIDTH} minimum"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((3, height, width), value))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }
}

/// Load a PNG or JPEG as RGB scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut pixels = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(pixels)
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an 8-bit PNG.
pub fn save_image(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.size();
    let px = image.pixels();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([quantize(px[[0, y, x]]), quantize(px[[1, y, x]]), quantize(px[[2, y, x]])])
    });
    save_png(path, |p| buf.save_with_format(p, image::ImageFormat::Png))
}

pub(crate) fn save_png(
    path: &Path,
    write: impl FnOnce(&Path) -> image::ImageResult<()>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest directory unless absolute.
    pub input_path: PathBuf,
    pub hr_path: PathBuf,
    pub person_id: u32,
    pub resolution: f64,
    pub mask_path: Option<PathBuf>,
}

/// One split of a dataset. Stored as CSV with header
/// `input_path,hr_path,person_id,resolution[,mask_path]` plus the
/// `# width_max=N` and `# split=NAME` directive comments.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub width_max: u32,
    pub split: Split,
    pub base_dir: PathBuf,
}

const HEADER: [&str; 4] = ["input_path", "hr_path", "person_id", "resolution"];

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted distinct raw identity labels.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Re-derives every resolution from the input image widths and checks
    /// the stored values against them.
    pub fn validate(&mut self) -> Result<()> {
        let mut widths = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let p = self.resolve(&e.input_path);
            let (w, _) = image::image_dimensions(&p).map_err(|source| match source {
                image::ImageError::IoError(err) => Error::io(&p, err),
                source => Error::Image { path: p.clone(), source },
            })?;
            if w > self.width_max {
                return Err(self.row_error(i, format!("input width {w} exceeds width_max {}", self.width_max)));
            }
            widths.push(w);
        }
        for (i, w) in widths.into_iter().enumerate() {
            let r = crate::degrade::resolution_of(w as usize, self.width_max as usize)?;
            let stored = self.entries[i].resolution;
            if (stored - r).abs() > RESOLUTION_TOLERANCE {
                return Err(self.row_error(
                    i,
                    format!("stored resolution {stored} but width {w} / width_max {} = {r}", self.width_max),
                ));
            }
            self.entries[i].resolution = r;
        }
        Ok(())
    }

    fn row_error(&self, index: usize, message: String) -> Error {
        Error::Manifest {
            path: self.base_dir.clone(),
            line: index as u64 + 1,
            message,
        }
    }

    /// Serializes to the CSV form read by [`load_manifest`].
    pub fn to_csv(&self) -> String {
        let with_mask = self.entries.iter().any(|e| e.mask_path.is_some());
        let mut out = format!("# width_max={}\n# split={}\n", self.width_max, self.split);
        out.push_str(&HEADER.join(","));
        if with_mask {
            out.push_str(",mask_path");
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}",
                path_str(&e.input_path),
                path_str(&e.hr_path),
                e.person_id,
                e.resolution
            ));
            if with_mask {
                out.push(',');
                if let Some(m) = &e.mask_path {
                    out.push_str(&path_str(m));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn load_sample(&self, index: usize) -> Result<LabeledSample> {
        let e = &self.entries[index];
        let input = self.resolve(&e.input_path);
        Ok(LabeledSample {
            image: load_image(&input)?,
            hr_target: load_image(self.resolve(&e.hr_path))?,
            person_id: e.person_id,
            resolution: e.resolution,
            source_path: input,
        })
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Write via a temporary sibling and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads and validates a manifest CSV.
///
/// Lines starting with `#` are comments; `# width_max=N` and `# split=NAME`
/// are honoured as directives. Without a `width_max` directive the maximum
/// input width in the file is used; without a `split` directive the file
/// stem (`train`, `query`, `gallery`) decides.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: u64, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut width_max = None;
    let mut split = None;
    for (i, line) in text.lines().enumerate() {
        let Some(comment) = line.trim_start().strip_prefix('#') else { continue };
        let Some((k, v)) = comment.split_once('=') else { continue };
        match k.trim() {
            "width_max" => {
                let w: u32 = v.trim().parse().map_err(|_| err(i as u64 + 1, format!("bad width_max `{}`", v.trim())))?;
                if w == 0 {
                    return Err(err(i as u64 + 1, "width_max must be positive".into()));
                }
                width_max = Some(w);
            }
            "split" => split = Some(v.trim().parse::<Split>().map_err(|e| err(i as u64 + 1, e.to_string()))?),
            _ => {}
        }
    }
    let split = match split {
        Some(s) => s,
        None => path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(0, "no `# split=` directive and the file name names no split".into()))?,
    };

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let with_mask = match names.as_slice() {
        [a, b, c, d] if [*a, *b, *c, *d] == HEADER => false,
        [a, b, c, d, "mask_path"] if [*a, *b, *c, *d] == HEADER => true,
        _ => {
            return Err(err(
                1,
                format!("header must be `{}[,mask_path]`, got `{}`", HEADER.join(","), names.join(",")),
            ))
        }
    };

    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let expected = if with_mask { 5 } else { 4 };
        if rec.len() != expected {
            return Err(err(line, format!("expected {expected} fields, got {}", rec.len())));
        }
        let person_id: u32 = rec[2]
            .parse()
            .map_err(|_| err(line, format!("person_id `{}` is not a non-negative integer", &rec[2])))?;
        let resolution: f64 = rec[3]
            .parse()
            .map_err(|_| err(line, format!("resolution `{}` is not a number", &rec[3])))?;
        if !(resolution > 0.0 && resolution <= 1.0) {
            return Err(err(line, format!("resolution {resolution} outside (0, 1]")));
        }
        if rec[0].is_empty() || rec[1].is_empty() {
            return Err(err(line, "empty image path".into()));
        }
        entries.push(ManifestEntry {
            input_path: PathBuf::from(&rec[0]),
            hr_path: PathBuf::from(&rec[1]),
            person_id,
            resolution,
            mask_path: (with_mask && !rec[4].is_empty()).then(|| PathBuf::from(&rec[4])),
        });
    }

    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let width_max = match width_max {
        Some(w) => w,
        None => {
            let mut wmax = 0;
            for e in &entries {
                let p = if e.input_path.is_absolute() { e.input_path.clone() } else { base_dir.join(&e.input_path) };
                let (w, _) = image::image_dimensions(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
                wmax = wmax.max(w);
            }
            wmax.max(1)
        }
    };

    let mut manifest = Manifest {
        entries,
        width_max,
        split,
        base_dir,
    };
    manifest.validate().map_err(|e| match e {
        Error::Manifest { line, message, .. } => Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })?;
    Ok(manifest)
}

/// An input image with its identity, resolution and high-resolution target.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: ImageTensor,
    pub hr_target: ImageTensor,
    pub person_id: u32,
    pub resolution: f64,
    pub source_path: PathBuf,
}

/// Dense `0..C` class indices for the raw identity labels of a training split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityMap {
    /// `raw[class]` is the raw label of dense class `class`.
    raw: Vec<u32>,
    #[serde(skip)]
    dense: BTreeMap<u32, usize>,
}

impl IdentityMap {
    pub fn from_labels(labels: impl IntoIterator<Item = u32>) -> Self {
        let mut raw: Vec<u32> = labels.into_iter().collect();
        raw.sort_unstable();
        raw.dedup();
        Self::from_raw(raw)
    }

    fn from_raw(raw: Vec<u32>) -> Self {
        let dense = raw.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        Self { raw, dense }
    }

    pub fn num_classes(&self) -> usize {
        self.raw.len()
    }

    pub fn dense(&self, raw: u32) -> Option<usize> {
        self.dense.get(&raw).copied()
    }

    pub fn raw(&self, class: usize) -> Option<u32> {
        self.raw.get(class).copied()
    }

    pub fn raw_labels(&self) -> &[u32] {
        &self.raw
    }

    /// Restores the reverse index after deserialization.
    pub(crate) fn rebuilt(self) -> Self {
        Self::from_raw(self.raw)
    }
}

/// Retrieval feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}
