//! Procedural person images for desk-scale experiments.
//!
//! Each identity owns a fixed appearance: coarse cues (shirt, trouser and
//! skin colours) that survive heavy downscaling, and fine cues (one-pixel
//! stripes, a thin hair band) that vanish at low resolution. Every image
//! of an identity redraws the nuisance parameters: background clutter,
//! illumination, horizontal placement and stance.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{save_image, save_png, ImageTensor, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub canonical_height: usize,
    pub canonical_width: usize,
    pub seed: u64,
    /// Number of clutter shapes drawn behind each person.
    pub clutter: usize,
    /// Amplitude of per-pixel background noise.
    pub background_noise: f64,
    /// Illumination gain is drawn from `1 ± illumination`.
    pub illumination: f64,
    /// Maximum horizontal displacement of the person, in pixels at the canonical size.
    pub jitter: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 32,
            images_per_identity: 20,
            canonical_height: 128,
            canonical_width: 64,
            seed: 0,
            clutter: 6,
            background_noise: 0.08,
            illumination: 0.15,
            jitter: 4,
        }
    }
}

const SHIRTS: [[f64; 3]; 10] = [
    [0.80, 0.20, 0.20],
    [0.20, 0.35, 0.80],
    [0.20, 0.65, 0.30],
    [0.85, 0.75, 0.20],
    [0.55, 0.25, 0.65],
    [0.90, 0.50, 0.15],
    [0.25, 0.70, 0.75],
    [0.85, 0.85, 0.85],
    [0.30, 0.30, 0.30],
    [0.60, 0.40, 0.25],
];

const TROUSERS: [[f64; 3]; 8] = [
    [0.15, 0.15, 0.35],
    [0.10, 0.10, 0.10],
    [0.45, 0.45, 0.45],
    [0.35, 0.25, 0.15],
    [0.20, 0.35, 0.20],
    [0.70, 0.65, 0.50],
    [0.50, 0.15, 0.15],
    [0.25, 0.45, 0.65],
];

const ACCENTS: [[f64; 3]; 6] = [
    [1.00, 1.00, 1.00],
    [0.05, 0.05, 0.05],
    [1.00, 0.90, 0.10],
    [0.10, 0.90, 0.90],
    [0.95, 0.20, 0.75],
    [0.30, 0.90, 0.20],
];

const SKIN: [[f64; 3]; 3] = [[0.92, 0.76, 0.62], [0.76, 0.57, 0.42], [0.45, 0.32, 0.24]];

const PERIODS: [usize; 4] = [2, 3, 4, 5];

/// Fixed per-identity attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    pub shirt: [f64; 3],
    pub trousers: [f64; 3],
    pub skin: [f64; 3],
    pub stripe_color: [f64; 3],
    pub stripe_period: usize,
    pub stripes_vertical: bool,
    pub band_color: [f64; 3],
    /// Torso width as a fraction of the canvas width.
    pub build: f64,
}

/// Per-image nuisance draw.
#[derive(Debug, Clone)]
struct Nuisance {
    background: [f64; 3],
    gain: f64,
    dx: isize,
    dy: isize,
    stance: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::invalid("synthetic corpus needs at least 2 identities"));
        }
        if self.images_per_identity < 1 {
            return Err(Error::invalid("images_per_identity must be at least 1"));
        }
        if self.canonical_height < 32 || self.canonical_width < 16 {
            return Err(Error::invalid(format!(
                "canonical size {}x{} is too small to draw stripes and hair bands (minimum 32x16)",
                self.canonical_height, self.canonical_width
            )));
        }
        let coarse = SHIRTS.len() * TROUSERS.len();
        let fine = 2 * PERIODS.len() * ACCENTS.len() * ACCENTS.len();
        if self.n_identities > coarse.min(fine) {
            return Err(Error::invalid(format!(
                "at most {} identities have distinct appearances",
                coarse.min(fine)
            )));
        }
        if !(0.0..1.0).contains(&self.illumination) || self.background_noise < 0.0 {
            return Err(Error::invalid("illumination must be in [0, 1) and noise non-negative"));
        }
        Ok(())
    }

    /// Identities `0..n/2` train; the rest are split into query and gallery.
    pub fn n_train_identities(&self) -> usize {
        self.n_identities / 2
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Appearances for all identities. Coarse colour pairs and fine pattern
    /// tuples are each drawn without replacement, so any two identities
    /// differ in both kinds of cue.
    pub fn appearances(&self) -> Vec<Appearance> {
        let mut rng = self.rng(0);
        let mut coarse: Vec<(usize, usize)> = (0..SHIRTS.len())
            .flat_map(|s| (0..TROUSERS.len()).map(move |t| (s, t)))
            .collect();
        coarse.shuffle(&mut rng);
        let mut fine: Vec<(bool, usize, usize, usize)> = Vec::new();
        for v in [false, true] {
            for p in 0..PERIODS.len() {
                for s in 0..ACCENTS.len() {
                    for b in 0..ACCENTS.len() {
                        fine.push((v, p, s, b));
                    }
                }
            }
        }
        fine.shuffle(&mut rng);
        (0..self.n_identities)
            .map(|i| {
                let (s, t) = coarse[i];
                let (v, p, sc, bc) = fine[i];
                Appearance {
                    shirt: SHIRTS[s],
                    trousers: TROUSERS[t],
                    skin: SKIN[rng.random_range(0..SKIN.len())],
                    stripe_color: ACCENTS[sc],
                    stripe_period: PERIODS[p],
                    stripes_vertical: v,
                    band_color: ACCENTS[bc],
                    build: rng.random_range(0.36..0.46),
                }
            })
            .collect()
    }

    fn nuisance(&self, identity: usize, k: usize) -> ChaCha8Rng {
        self.rng(1 + (identity * self.images_per_identity + k) as u64)
    }
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (u, v) = ((x - cx) / rx, (y - cy) / ry);
    u * u + v * v <= 1.0
}

/// Renders image `k` of an identity. Returns the image and its binary
/// person silhouette.
pub fn render_person(spec: &SynthSpec, look: &Appearance, identity: usize, k: usize) -> (ImageTensor, Array2<bool>) {
    let (h, w) = (spec.canonical_height, spec.canonical_width);
    let mut rng = spec.nuisance(identity, k);
    let j = spec.jitter as isize;
    let nz = Nuisance {
        background: [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)],
        gain: rng.random_range(1.0 - spec.illumination..=1.0 + spec.illumination),
        dx: rng.random_range(-j as i64..=j as i64) as isize,
        dy: rng.random_range(-2i64..=2) as isize,
        stance: rng.random_range(0.0..1.0),
    };

    let mut px = Array3::zeros((3, h, w));
    for y in 0..h {
        let shade = 0.85 + 0.3 * y as f64 / h as f64;
        for x in 0..w {
            for c in 0..3 {
                px[[c, y, x]] = nz.background[c] * shade;
            }
        }
    }
    for _ in 0..spec.clutter {
        let col = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let (rx, ry) = (rng.random_range(2.0..w as f64 / 3.0), rng.random_range(2.0..h as f64 / 5.0));
        let round = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = if round {
                    ellipse(fx, fy, cx, cy, rx, ry)
                } else {
                    (fx - cx).abs() <= rx && (fy - cy).abs() <= ry
                };
                if inside {
                    for c in 0..3 {
                        px[[c, y, x]] = col[c];
                    }
                }
            }
        }
    }
    for v in px.iter_mut() {
        *v += spec.background_noise * (rng.random::<f64>() * 2.0 - 1.0);
    }

    // Person geometry, in canvas fractions.
    let (hf, wf) = (h as f64, w as f64);
    let cx = wf / 2.0 + nz.dx as f64;
    let y0 = nz.dy as f64;
    let torso_half = look.build * wf / 2.0;
    let head = (cx, y0 + 0.13 * hf, 0.11 * wf, 0.07 * hf);
    let torso_top = y0 + 0.22 * hf;
    let torso_bot = y0 + 0.56 * hf;
    let leg_bot = y0 + 0.96 * hf;
    let leg_w = 0.13 * wf;
    let spread = 0.02 * wf + nz.stance * 0.06 * wf;
    let band_h = (hf / 64.0).max(1.0);

    let mut sil = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = None;
            if ellipse(fx, fy, head.0, head.1, head.2, head.3) {
                let top = head.1 - head.3;
                color = Some(if fy - top < 0.45 * head.3 {
                    [0.15, 0.10, 0.08]
                } else if fy - top < 0.45 * head.3 + band_h {
                    look.band_color
                } else {
                    look.skin
                });
            } else if fy >= torso_top && fy < torso_bot && (fx - cx).abs() <= torso_half + 0.07 * wf {
                let rel_x = fx - cx + torso_half;
                if (fx - cx).abs() <= torso_half {
                    let phase = if look.stripes_vertical { rel_x } else { fy - torso_top };
                    let on = (phase.floor() as i64).rem_euclid(look.stripe_period as i64) == 0;
                    color = Some(if on { look.stripe_color } else { look.shirt });
                } else if fy < torso_bot - 0.05 * hf {
                    color = Some(look.shirt);
                }
            } else if fy >= torso_bot && fy < leg_bot {
                let t = (fy - torso_bot) / (leg_bot - torso_bot);
                let off = spread * t;
                let left = (fx - (cx - leg_w / 2.0 - off)).abs() <= leg_w / 2.0;
                let right = (fx - (cx + leg_w / 2.0 + off)).abs() <= leg_w / 2.0;
                if left || right {
                    color = Some(look.trousers);
                }
            }
            if let Some(col) = color {
                sil[[y, x]] = true;
                for c in 0..3 {
                    px[[c, y, x]] = col[c];
                }
            }
        }
    }
    px.mapv_inplace(|v| (v * nz.gain).clamp(0.0, 1.0));
    (ImageTensor::new(px).expect("rendered canvas is valid"), sil)
}

/// Manifests of a rendered corpus.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Manifest,
    pub query: Manifest,
    pub gallery: Manifest,
}

impl SynthCorpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.train.save(dir.join("train.csv"))?;
        self.query.save(dir.join("query.csv"))?;
        self.gallery.save(dir.join("gallery.csv"))
    }
}

/// Renders every image to `out_dir/hr/` with silhouettes in `out_dir/masks/`
/// and returns (but does not save) the split manifests. Identities
/// `0..n/2` form the training split; for each remaining identity the first
/// half of its images are queries and the rest gallery.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<SynthCorpus> {
    spec.validate()?;
    let looks = spec.appearances();
    let n_train = spec.n_train_identities();
    let n_query = spec.images_per_identity / 2;
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for (id, look) in looks.iter().enumerate() {
        for k in 0..spec.images_per_identity {
            let (img, sil) = render_person(spec, look, id, k);
            let name = format!("{id:04}_{k:02}.png");
            let rel = PathBuf::from("hr").join(&name);
            let mask_rel = PathBuf::from("masks").join(&name);
            save_image(&img, out_dir.join(&rel))?;
            let mask = image::GrayImage::from_fn(sil.ncols() as u32, sil.nrows() as u32, |x, y| {
                image::Luma([if sil[[y as usize, x as usize]] { 255 } else { 0 }])
            });
            let mask_path = out_dir.join(&mask_rel);
            save_png(&mask_path, |p| mask.save_with_format(p, image::ImageFormat::Png))?;
            let entry = ManifestEntry {
                input_path: rel.clone(),
                hr_path: rel,
                person_id: id as u32,
                resolution: 1.0,
                mask_path: Some(mask_rel),
            };
            if id < n_train {
                train.push(entry);
            } else if k < n_query {
                query.push(entry);
            } else {
                gallery.push(entry);
            }
        }
    }
    let manifest = |entries, split| Manifest {
        entries,
        width_max: spec.canonical_width as u32,
        split,
        base_dir: out_dir.to_path_buf(),
    };
    Ok(SynthCorpus {
        train: manifest(train, Split::Train),
        query: manifest(query, Split::Query),
        gallery: manifest(gallery, Split::Gallery),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_identities: 2,
            images_per_identity: 1,
            seed: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = small();
        let looks = spec.appearances();
        let (a, sa) = render_person(&spec, &looks[1], 1, 0);
        let (b, sb) = render_person(&spec, &spec.appearances()[1], 1, 0);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn same_identity_shares_clothes_not_nuisance() {
        let spec = SynthSpec { seed: 9, ..SynthSpec::default() };
        let looks = spec.appearances();
        let (a, _) = render_person(&spec, &looks[3], 3, 0);
        let (b, _) = render_person(&spec, &looks[3], 3, 1);
        assert_ne!(a, b);
        // Appearance is a pure function of (seed, identity).
        assert_eq!(spec.appearances()[3], looks[3]);
    }

    #[test]
    fn identities_differ_in_coarse_and_fine_cues() {
        let spec = SynthSpec { n_identities: 64, ..SynthSpec::default() };
        let looks = spec.appearances();
        for i in 0..looks.len() {
            for j in 0..i {
                let (a, b) = (&looks[i], &looks[j]);
                assert!(a.shirt != b.shirt || a.trousers != b.trousers, "{i} {j} share colours");
                assert!(
                    a.stripe_period != b.stripe_period
                        || a.stripes_vertical != b.stripes_vertical
                        || a.stripe_color != b.stripe_color
                        || a.band_color != b.band_color,
                    "{i} {j} share fine detail"
                );
            }
        }
    }

    #[test]
    fn silhouette_covers_the_centre() {
        let spec = small();
        let (_, sil) = render_person(&spec, &spec.appearances()[0], 0, 0);
        assert!(sil[[64, 32]]);
        assert!(!sil[[2, 1]]);
        let frac = sil.iter().filter(|v| **v).count() as f64 / sil.len() as f64;
        assert!((0.15..0.5).contains(&frac), "{frac}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SynthSpec { n_identities: 1, ..small() }.validate().is_err());
        assert!(SynthSpec { canonical_height: 16, ..small() }.validate().is_err());
        assert!(SynthSpec { n_identities: 500, ..small() }.validate().is_err());
    }
}
