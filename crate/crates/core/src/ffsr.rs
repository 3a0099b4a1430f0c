//! Foreground-focus restoration network: a 12-layer convolutional
//! encoder-decoder with additive skips and a residual output head.
//!
//! Layer plan (1-based):
//!
//! | layer | op               | scale | channels        |
//! |-------|------------------|-------|-----------------|
//! | 1     | conv 3×3 / 1     | 1     | 3 → c           |
//! | 2     | conv 3×3 / 2     | 1/2   | c → c           |
//! | 3     | conv 3×3 / 2     | 1/4   | c → c           |
//! | 4–9   | conv 3×3 / 1     | 1/4   | c → c           |
//! | 10    | tconv 4×4 / 2    | 1/2   | c → c, + layer 2 |
//! | 11    | tconv 4×4 / 2    | 1     | c → c, + layer 1 |
//! | 12    | conv 3×3 / 1     | 1     | c → 3, linear   |
//!
//! The head predicts a residual added to the input image and starts at
//! zero, so an untrained network is the identity.

use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::ImageTensor;
use crate::error::{Error, Result};
use crate::masks::ForegroundMask;
use crate::nn::{init, stack_chw, unstack_chw, ParamId, ParamKind, ParamStore, Real, Tape, Var};

pub const PREFIX: &str = "ffsr.";
const N_LAYERS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfsrConfig {
    pub n_layers: usize,
    pub base_channels: usize,
    pub downsample_stages: usize,
    /// `(encoder layer, decoder layer)`, 1-based.
    pub skip_pairs: Vec<(usize, usize)>,
    /// `(height, width)` of every input.
    pub canonical_size: (usize, usize),
}

impl Default for FfsrConfig {
    fn default() -> Self {
        Self {
            n_layers: N_LAYERS,
            base_channels: 16,
            downsample_stages: 2,
            skip_pairs: vec![(2, 10), (1, 11)],
            canonical_size: (128, 64),
        }
    }
}

/// Downsampling factor of each layer's output.
const SCALES: [usize; N_LAYERS] = [1, 2, 4, 4, 4, 4, 4, 4, 4, 2, 1, 1];

impl FfsrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers != N_LAYERS || self.downsample_stages != 2 {
            return Err(Error::Config(format!(
                "the restoration network has exactly {N_LAYERS} layers and 2 downsampling stages (got {} and {})",
                self.n_layers, self.downsample_stages
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        let (h, w) = self.canonical_size;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("canonical size {h}x{w} must be positive multiples of 4")));
        }
        for &(e, d) in &self.skip_pairs {
            if !(1 <= e && e < d && d <= N_LAYERS - 1) {
                return Err(Error::Config(format!("skip ({e}, {d}) must join an earlier layer to a later hidden layer")));
            }
            if SCALES[e - 1] != SCALES[d - 1] {
                return Err(Error::Config(format!("skip ({e}, {d}) joins layers at different scales")));
            }
        }
        Ok(())
    }

    /// Trainable scalar count: weights plus biases of all 12 layers.
    pub fn parameter_count(&self) -> usize {
        let c = self.base_channels;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        conv(3, c, 3) + 8 * conv(c, c, 3) + 2 * conv(c, c, 4) + conv(c, 3, 3)
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

/// Handles to the network's parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Ffsr {
    pub config: FfsrConfig,
    layers: Vec<Layer>,
}

fn layer_shape(i: usize, c: usize) -> (Vec<usize>, bool) {
    match i {
        1 => (vec![c, 3, 3, 3], false),
        10 | 11 => (vec![c, c, 4, 4], true),
        12 => (vec![3, c, 3, 3], false),
        _ => (vec![c, c, 3, 3], false),
    }
}

impl Ffsr {
    /// Adds freshly initialized parameters to `store`.
    pub fn init<F: Real, R: Rng>(config: FfsrConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut layers = Vec::with_capacity(N_LAYERS);
        for i in 1..=N_LAYERS {
            let (shape, transposed) = layer_shape(i, c);
            let fan_in = if transposed { shape[0] * 4 } else { shape[1] * 9 };
            let w = if i == N_LAYERS {
                ArrayD::zeros(shape.clone())
            } else {
                init::kaiming(rng, &shape, fan_in)
            };
            let bias_len = if transposed { shape[1] } else { shape[0] };
            layers.push(Layer {
                w: store.add(format!("{PREFIX}l{i}.w"), w, ParamKind::Weight { decay: true }),
                b: store.zeros(format!("{PREFIX}l{i}.b"), &[bias_len], ParamKind::Weight { decay: true }),
            });
        }
        Ok(Self { config, layers })
    }

    /// Looks up the parameters of a previously initialized network.
    pub fn bind<F: Real>(config: FfsrConfig, store: &ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut layers = Vec::with_capacity(N_LAYERS);
        for i in 1..=N_LAYERS {
            let (shape, transposed) = layer_shape(i, c);
            let w = find(store, &format!("{PREFIX}l{i}.w"), &shape)?;
            let b = find(store, &format!("{PREFIX}l{i}.b"), &[if transposed { shape[1] } else { shape[0] }])?;
            layers.push(Layer { w, b });
        }
        Ok(Self { config, layers })
    }

    /// Unclamped restoration of an `[n, 3, h, w]` batch.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let mut outs: Vec<Var> = Vec::with_capacity(N_LAYERS);
        let mut h = x;
        for (idx, l) in self.layers.iter().enumerate() {
            let i = idx + 1;
            let w = tape.param(store, l.w);
            let b = tape.param(store, l.b);
            let mut y = match i {
                2 | 3 => tape.conv2d(h, w, Some(b), 2, 1),
                10 | 11 => tape.conv_transpose2d(h, w, Some(b), 2, 1),
                _ => tape.conv2d(h, w, Some(b), 1, 1),
            };
            if i == N_LAYERS {
                return tape.add(x, y);
            }
            for &(e, d) in &self.config.skip_pairs {
                if d == i {
                    y = tape.add(y, outs[e - 1]);
                }
            }
            h = tape.relu(y);
            outs.push(h);
        }
        unreachable!("the head returns")
    }

    fn check_size(&self, size: (usize, usize)) -> Result<()> {
        if size != self.config.canonical_size {
            let (h, w) = self.config.canonical_size;
            return Err(Error::shape(format!(
                "restoration input is {}x{}, expected the canonical {h}x{w}",
                size.0, size.1
            )));
        }
        Ok(())
    }

    /// Restores a batch of canonical-size images, clamping to `[0, 1]`.
    pub fn restore<F: Real>(&self, store: &ParamStore<F>, images: &[&Array3<f64>]) -> Result<Vec<Array3<f64>>> {
        for im in images {
            self.check_size((im.dim().1, im.dim().2))?;
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::inference();
        let x = tape.constant(stack_chw(images));
        let y = self.forward(&mut tape, store, x);
        Ok(unstack_chw(tape.value(y))
            .into_iter()
            .map(|a| a.mapv(|v| v.clamp(0.0, 1.0)))
            .collect())
    }
}

pub(crate) fn find<F: Real>(store: &ParamStore<F>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .find(name)
        .ok_or_else(|| Error::Config(format!("parameter `{name}` is missing")))?;
    if store.value(id).shape() != shape {
        return Err(Error::shape(format!(
            "parameter `{name}` has shape {:?}, expected {shape:?}",
            store.value(id).shape()
        )));
    }
    Ok(id)
}

/// Restored image at canonical size.
#[derive(Debug, Clone, PartialEq)]
pub struct FfsrOutput {
    pub restored: ImageTensor,
}

pub fn ffsr_forward<F: Real>(net: &Ffsr, store: &ParamStore<F>, image: &ImageTensor) -> Result<FfsrOutput> {
    let mut out = net.restore(store, &[image.pixels()])?;
    Ok(FfsrOutput {
        restored: ImageTensor::new(out.pop().unwrap())?,
    })
}

/// Mean over pixels and channels of `(M ⊙ (pred − target))²`, with the 2-D
/// mask broadcast over channels.
pub fn masked_mse(pred: &Array3<f64>, target: &Array3<f64>, mask: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    let (_, h, w) = pred.dim();
    if mask.dim() != (h, w) {
        return Err(Error::shape(format!("mask {:?} vs image {h}x{w}", mask.dim())));
    }
    let mut total = 0.0;
    for ((c, y, x), &p) in pred.indexed_iter() {
        let d = mask[[y, x]] * (p - target[[c, y, x]]);
        total += d * d;
    }
    Ok(total / pred.len() as f64)
}

pub fn ffsr_loss(output: &FfsrOutput, hr_target: &ImageTensor, mask: &ForegroundMask) -> Result<f64> {
    masked_mse(output.restored.pixels(), hr_target.pixels(), mask.weights())
}
