//! Resolution-invariant feature extractor: a residual backbone whose stages
//! are dual-stream blocks. Each block runs two copies of the same residual
//! stack on its input and fuses them with per-sample weights predicted from
//! each stream's own output.

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Embedding, ImageTensor};
use crate::error::{Error, Result};
use crate::nn::{init, stack_chw, ParamId, ParamKind, ParamStore, Real, Tape, Var};

pub const PREFIX: &str = "rife.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RifeConfig {
    pub n_blocks: usize,
    /// Output channels of each block.
    pub widths: Vec<usize>,
    /// Stride of the first residual unit of each block.
    pub strides: Vec<usize>,
    pub units_per_block: usize,
    pub stem_channels: usize,
    pub embedding_dim: usize,
    pub n_classes: usize,
    /// Hidden width of the fusion-weight heads.
    pub weight_hidden: usize,
    pub beta: f64,
    /// `false` gives the single-stream baseline: no second stream, no
    /// weight heads, no resolution-weighting terms.
    pub dual_stream: bool,
    pub canonical_size: (usize, usize),
}

impl Default for RifeConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            widths: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 2],
            units_per_block: 2,
            stem_channels: 16,
            embedding_dim: 256,
            n_classes: 16,
            weight_hidden: 64,
            beta: 0.1,
            dual_stream: true,
            canonical_size: (128, 64),
        }
    }
}

impl RifeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_blocks < 1 {
            return fail("n_blocks must be at least 1".into());
        }
        if self.widths.len() != self.n_blocks || self.strides.len() != self.n_blocks {
            return fail(format!(
                "{} blocks need {0} widths and strides (got {} and {})",
                self.n_blocks,
                self.widths.len(),
                self.strides.len()
            ));
        }
        if self.widths.iter().chain([&self.stem_channels]).any(|&w| w == 0) || self.units_per_block == 0 {
            return fail("widths and unit counts must be positive".into());
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return fail("block strides must be 1 or 2".into());
        }
        if self.embedding_dim < 8 {
            return fail(format!("embedding_dim {} is below 8", self.embedding_dim));
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if !(self.beta >= 0.0) || self.weight_hidden == 0 {
            return fail("beta must be non-negative and weight_hidden positive".into());
        }
        let (h, w) = self.canonical_size;
        if h < 8 || w < 4 {
            return fail(format!("canonical size {h}x{w} is below the 8x4 minimum"));
        }
        Ok(())
    }

    pub fn n_streams(&self) -> usize {
        if self.dual_stream {
            2
        } else {
            1
        }
    }

    /// Trainable scalar count (batch-norm running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
        let fc = |i: usize, o: usize| i * o + o;
        let mut stream_total = 0;
        let mut cin = self.stem_channels;
        for (t, &c) in self.widths.iter().enumerate() {
            let mut per_stream = 0;
            for u in 0..self.units_per_block {
                let (i, s) = if u == 0 { (cin, self.strides[t]) } else { (c, 1) };
                per_stream += conv_bn(i, c, 3) + conv_bn(c, c, 3);
                if s != 1 || i != c {
                    per_stream += conv_bn(i, c, 1);
                }
            }
            if self.dual_stream {
                per_stream += fc(c, self.weight_hidden) + fc(self.weight_hidden, 1);
            }
            stream_total += self.n_streams() * per_stream;
            cin = c;
        }
        conv_bn(3, self.stem_channels, 3)
            + stream_total
            + fc(cin, self.embedding_dim)
            + fc(self.embedding_dim, self.n_classes)
    }
}

enum Alloc<'a, F> {
    Init {
        store: &'a mut ParamStore<F>,
        rng: &'a mut dyn RngCore,
    },
    Bind {
        store: &'a ParamStore<F>,
    },
}

#[derive(Clone, Copy)]
enum Fill {
    Kaiming(usize),
    Linear(usize),
    Zeros,
    Ones,
}

impl<F: Real> Alloc<'_, F> {
    fn param(&mut self, name: String, shape: &[usize], kind: ParamKind, fill: Fill) -> Result<ParamId> {
        match self {
            Alloc::Bind { store } => crate::ffsr::find(store, &name, shape),
            Alloc::Init { store, rng } => {
                let value = match fill {
                    Fill::Kaiming(fan_in) => init::kaiming(rng, shape, fan_in),
                    Fill::Linear(fan_in) => init::scaled_normal(rng, shape, fan_in, 1.0),
                    Fill::Zeros => ArrayD::zeros(IxDyn(shape)),
                    Fill::Ones => ArrayD::ones(IxDyn(shape)),
                };
                Ok(store.add(name, value, kind))
            }
        }
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvBn> {
        let nodecay = ParamKind::Weight { decay: false };
        Ok(ConvBn {
            w: self.param(
                format!("{name}.w"),
                &[cout, cin, k, k],
                ParamKind::Weight { decay: true },
                Fill::Kaiming(cin * k * k),
            )?,
            gamma: self.param(format!("{name}.gamma"), &[cout], nodecay, Fill::Ones)?,
            beta: self.param(format!("{name}.beta"), &[cout], nodecay, Fill::Zeros)?,
            mean: self.param(format!("{name}.mean"), &[cout], ParamKind::Buffer, Fill::Zeros)?,
            var: self.param(format!("{name}.var"), &[cout], ParamKind::Buffer, Fill::Ones)?,
            k,
        })
    }

    fn fc(&mut self, name: &str, i: usize, o: usize, bias_decay: bool, fill: Fill) -> Result<Fc> {
        Ok(Fc {
            w: self.param(format!("{name}.w"), &[o, i], ParamKind::Weight { decay: true }, fill)?,
            b: self.param(
                format!("{name}.b"),
                &[o],
                ParamKind::Weight { decay: bias_decay },
                Fill::Zeros,
            )?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    k: usize,
}

impl ConvBn {
    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, stride: usize, relu: bool) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.conv2d(x, w, None, stride, self.k / 2);
        let y = tape.batch_norm(store, y, self.gamma, self.beta, self.mean, self.var);
        if relu {
            tape.relu(y)
        } else {
            y
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Fc {
    w: ParamId,
    b: ParamId,
}

impl Fc {
    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
struct Unit {
    c1: ConvBn,
    c2: ConvBn,
    shortcut: Option<ConvBn>,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Stream {
    units: Vec<Unit>,
    /// Fusion-weight head: GAP → fc → ReLU → fc → sigmoid.
    head: Option<(Fc, Fc)>,
}

impl Stream {
    fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let mut h = x;
        for u in &self.units {
            let a = u.c1.forward(tape, store, h, u.stride, true);
            let b = u.c2.forward(tape, store, a, 1, false);
            let s = match &u.shortcut {
                Some(sc) => sc.forward(tape, store, h, u.stride, false),
                None => h,
            };
            let sum = tape.add(b, s);
            h = tape.relu(sum);
        }
        h
    }

    fn weight<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, m: Var) -> Var {
        let (fc1, fc2) = self.head.as_ref().expect("dual-stream block has weight heads");
        let g = tape.global_avg_pool(m);
        let a = fc1.forward(tape, store, g);
        let a = tape.relu(a);
        let z = fc2.forward(tape, store, a);
        tape.sigmoid(z)
    }
}

/// Tape handles of one dual-stream block's intermediate values.
#[derive(Debug, Clone, Copy)]
pub struct DsbVars {
    pub m_low: Var,
    pub m_high: Option<Var>,
    /// `[n, 1]` fusion weights.
    pub w_low: Option<Var>,
    pub w_high: Option<Var>,
    pub fused: Var,
}

#[derive(Debug, Clone)]
pub struct RifeVars {
    /// `[n, embedding_dim]`.
    pub embedding: Var,
    /// `[n, n_classes]`.
    pub logits: Var,
    pub blocks: Vec<DsbVars>,
}

#[derive(Debug, Clone)]
struct Dsb {
    streams: Vec<Stream>,
}

/// Handles to the extractor's parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Rife {
    pub config: RifeConfig,
    stem: ConvBn,
    blocks: Vec<Dsb>,
    embed: Fc,
    classifier: Fc,
}

const STREAM_NAMES: [&str; 2] = ["low", "high"];

impl Rife {
    /// Adds freshly initialized parameters to `store`. Both streams of a
    /// block start from the same draw.
    pub fn init<F: Real>(config: RifeConfig, store: &mut ParamStore<F>, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let net = Self::build(config, &mut Alloc::Init { store, rng })?;
        if net.config.dual_stream {
            let pairs: Vec<(ParamId, ParamId)> = store
                .iter()
                .filter(|(_, name, _)| name.contains(".high."))
                .map(|(id, name, _)| (id, store.find(&name.replace(".high.", ".low.")).unwrap()))
                .collect();
            for (high, low) in pairs {
                let v = store.value(low).clone();
                *store.value_mut(high) = v;
            }
        }
        Ok(net)
    }

    pub fn bind<F: Real>(config: RifeConfig, store: &ParamStore<F>) -> Result<Self> {
        config.validate()?;
        Self::build(config, &mut Alloc::Bind { store })
    }

    fn build<F: Real>(config: RifeConfig, a: &mut Alloc<'_, F>) -> Result<Self> {
        let stem = a.conv_bn(&format!("{PREFIX}stem"), 3, config.stem_channels, 3)?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        let mut cin = config.stem_channels;
        for t in 0..config.n_blocks {
            let c = config.widths[t];
            let mut streams = Vec::new();
            for s in &STREAM_NAMES[..config.n_streams()] {
                let p = format!("{PREFIX}b{}.{s}", t + 1);
                let mut units = Vec::new();
                for u in 0..config.units_per_block {
                    let (i, stride) = if u == 0 { (cin, config.strides[t]) } else { (c, 1) };
                    let up = format!("{p}.u{}", u + 1);
                    units.push(Unit {
                        c1: a.conv_bn(&format!("{up}.c1"), i, c, 3)?,
                        c2: a.conv_bn(&format!("{up}.c2"), c, c, 3)?,
                        shortcut: if stride != 1 || i != c {
                            Some(a.conv_bn(&format!("{up}.sc"), i, c, 1)?)
                        } else {
                            None
                        },
                        stride,
                    });
                }
                let head = if config.dual_stream {
                    let hdim = config.weight_hidden;
                    Some((
                        a.fc(&format!("{p}.head.fc1"), c, hdim, false, Fill::Kaiming(c))?,
                        a.fc(&format!("{p}.head.fc2"), hdim, 1, false, Fill::Linear(hdim))?,
                    ))
                } else {
                    None
                };
                streams.push(Stream { units, head });
            }
            blocks.push(Dsb { streams });
            cin = c;
        }
        let embed = a.fc(&format!("{PREFIX}embed"), cin, config.embedding_dim, true, Fill::Linear(cin))?;
        let classifier = a.fc(
            &format!("{PREFIX}classifier"),
            config.embedding_dim,
            config.n_classes,
            true,
            Fill::Linear(config.embedding_dim),
        )?;
        Ok(Self {
            config,
            stem,
            blocks,
            embed,
            classifier,
        })
    }

    /// One block. With `clamp = Some((w_l, w_h))` the predicted weights are
    /// replaced by those constants.
    pub fn dsb_forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        block: usize,
        x: Var,
        clamp: Option<(F, F)>,
    ) -> DsbVars {
        let b = &self.blocks[block];
        let m_low = b.streams[0].forward(tape, store, x);
        if !self.config.dual_stream {
            return DsbVars {
                m_low,
                m_high: None,
                w_low: None,
                w_high: None,
                fused: m_low,
            };
        }
        let m_high = b.streams[1].forward(tape, store, x);
        let n = tape.value(x).shape()[0];
        let (w_low, w_high) = match clamp {
            Some((l, h)) => (
                tape.constant(ArrayD::from_elem(IxDyn(&[n, 1]), l)),
                tape.constant(ArrayD::from_elem(IxDyn(&[n, 1]), h)),
            ),
            None => (
                b.streams[0].weight(tape, store, m_low),
                b.streams[1].weight(tape, store, m_high),
            ),
        };
        let a = tape.scale_samples(m_low, w_low);
        let c = tape.scale_samples(m_high, w_high);
        let fused = tape.add(a, c);
        DsbVars {
            m_low,
            m_high: Some(m_high),
            w_low: Some(w_low),
            w_high: Some(w_high),
            fused,
        }
    }

    /// Stem, all blocks, pooled embedding and classifier logits for an
    /// `[n, 3, h, w]` batch.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, clamp: Option<(F, F)>) -> RifeVars {
        let mut h = self.stem.forward(tape, store, x, 2, true);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for t in 0..self.blocks.len() {
            let d = self.dsb_forward(tape, store, t, h, clamp);
            h = d.fused;
            blocks.push(d);
        }
        let g = tape.global_avg_pool(h);
        let embedding = self.embed.forward(tape, store, g);
        let logits = self.classifier.forward(tape, store, embedding);
        RifeVars {
            embedding,
            logits,
            blocks,
        }
    }

    /// Cross entropy plus `beta` times the resolution-weighting terms of
    /// every block (none for the single-stream variant).
    pub fn loss<F: Real>(&self, tape: &mut Tape<F>, out: &RifeVars, labels: &[usize], r: &[F]) -> (Var, Var, Option<Var>) {
        let xent = tape.cross_entropy(out.logits, labels);
        if !self.config.dual_stream {
            return (xent, xent, None);
        }
        let rw: Vec<(Var, F)> = out
            .blocks
            .iter()
            .map(|b| (tape.resolution_weight_loss(b.w_low.unwrap(), b.w_high.unwrap(), r), F::one()))
            .collect();
        let rw_sum = tape.weighted_sum(&rw);
        let total = tape.weighted_sum(&[(xent, F::one()), (rw_sum, F::of(self.config.beta))]);
        (total, xent, Some(rw_sum))
    }

    pub fn check_size(&self, size: (usize, usize)) -> Result<()> {
        if size != self.config.canonical_size {
            let (h, w) = self.config.canonical_size;
            return Err(Error::shape(format!(
                "extractor input is {}x{}, expected the canonical {h}x{w}",
                size.0, size.1
            )));
        }
        Ok(())
    }

    /// Inference on canonical-size images.
    pub fn infer<F: Real>(&self, store: &ParamStore<F>, images: &[&Array3<f64>]) -> Result<RifeOutput> {
        if images.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for im in images {
            self.check_size((im.dim().1, im.dim().2))?;
        }
        let mut tape = Tape::inference();
        let x = tape.constant(stack_chw(images));
        let out = self.forward(&mut tape, store, x, None);
        Ok(RifeOutput::collect(&tape, &out))
    }
}

/// Inference results for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RifeOutput {
    pub embeddings: Vec<Embedding>,
    /// `[n, n_classes]`.
    pub logits: Array2<f64>,
    /// Per block, the `(w_low, w_high)` weights of every sample. Empty for
    /// the single-stream variant.
    pub block_weights: Vec<(Array1<f64>, Array1<f64>)>,
}

fn to_f64<F: Real>(a: &ArrayD<F>) -> ArrayD<f64> {
    a.mapv(|v| v.to_f64().unwrap())
}

impl RifeOutput {
    pub(crate) fn collect<F: Real>(tape: &Tape<F>, out: &RifeVars) -> Self {
        let emb = tape.value(out.embedding);
        let embeddings = emb
            .outer_iter()
            .map(|row| Embedding(row.iter().map(|v| v.to_f32().unwrap()).collect()))
            .collect();
        let logits = to_f64(tape.value(out.logits)).into_dimensionality().unwrap();
        let block_weights = out
            .blocks
            .iter()
            .filter_map(|b| {
                let flat = |v: Var| Array1::from_iter(to_f64(tape.value(v)).iter().copied());
                Some((flat(b.w_low?), flat(b.w_high?)))
            })
            .collect();
        Self {
            embeddings,
            logits,
            block_weights,
        }
    }
}

pub fn rife_forward<F: Real>(net: &Rife, store: &ParamStore<F>, image: &ImageTensor) -> Result<RifeOutput> {
    net.infer(store, &[image.pixels()])
}

/// `(w_low − (1 − r))² + (w_high − r)²`.
pub fn rw_loss(w_low: f64, w_high: f64, r: f64) -> Result<f64> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::invalid(format!("resolution {r} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&w_low) || !(0.0..=1.0).contains(&w_high) {
        return Err(Error::invalid(format!("weights ({w_low}, {w_high}) outside [0, 1]")));
    }
    Ok((w_low - (1.0 - r)).powi(2) + (w_high - r).powi(2))
}

/// `−log softmax(logits)[class]`.
pub fn xent_loss(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(Error::invalid(format!("class {class} out of range for {} logits", logits.len())));
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
    Ok(lse - logits[class])
}

/// Cross entropy plus `beta · Σ_t rw_loss_t` for one sample.
pub fn rife_loss(logits: &[f64], class: usize, weights: &[(f64, f64)], r: f64, beta: f64) -> Result<f64> {
    let mut rw = 0.0;
    for &(l, h) in weights {
        rw += rw_loss(l, h, r)?;
    }
    Ok(xent_loss(logits, class)? + beta * rw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(dual: bool) -> RifeConfig {
        RifeConfig {
            widths: vec![4, 6, 8, 8],
            stem_channels: 4,
            embedding_dim: 8,
            n_classes: 3,
            weight_hidden: 5,
            dual_stream: dual,
            canonical_size: (32, 16),
            ..RifeConfig::default()
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<Array3<f64>> {
        (0..n).map(|_| Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>())).collect()
    }

    #[test]
    fn loss_examples() {
        assert!((rw_loss(0.3, 0.8, 0.5).unwrap() - 0.13).abs() < 1e-15);
        assert_eq!(rw_loss(0.0, 0.0, 1.0).unwrap(), 1.0);
        for r in [0.125, 0.5, 1.0] {
            assert_eq!(rw_loss(1.0 - r, r, r).unwrap(), 0.0);
        }
        assert!(rw_loss(0.5, 0.5, 0.0).is_err());
        assert!(rw_loss(0.5, 0.5, 1.5).is_err());

        assert!((xent_loss(&[1.0, 0.0], 0).unwrap() - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((xent_loss(&[1.0, 0.0], 0).unwrap() - 0.3133).abs() < 1e-4);
        assert!(xent_loss(&[20.0, 0.0, 0.0], 0).unwrap() < 1e-8);
        assert!((xent_loss(&[0.0; 7], 3).unwrap() - 7f64.ln()).abs() < 1e-12);
        assert!(xent_loss(&[0.0; 2], 2).is_err());

        let l = rife_loss(&[1.0, 0.0], 0, &[(0.3, 0.8); 4], 0.5, 0.1).unwrap();
        assert!((l - 0.3653).abs() < 1e-4);
        let on_target = rife_loss(&[0.2, 0.1], 1, &[(0.75, 0.25); 4], 0.25, 0.1).unwrap();
        assert_eq!(on_target, xent_loss(&[0.2, 0.1], 1).unwrap());
        let no_beta = rife_loss(&[0.2, 0.1], 1, &[(0.1, 0.9); 4], 0.25, 0.0).unwrap();
        assert_eq!(no_beta, xent_loss(&[0.2, 0.1], 1).unwrap());
    }

    #[test]
    fn parameter_count_matches_store() {
        for dual in [true, false] {
            let cfg = RifeConfig {
                n_classes: 16,
                dual_stream: dual,
                ..RifeConfig::default()
            };
            let mut store = ParamStore::<f32>::new();
            Rife::init(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(store.weight_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn default_parameter_count_by_hand() {
        // Stem: 3*16*9 + 2*16 = 464.
        // Block 1 (16 -> 16, stride 2), per stream:
        //   unit 1: two 16x16 3x3 conv-bn (2*(2304+32)) + 1x1 shortcut (256+32) = 4960
        //   unit 2: 2*(2304+32) = 4672
        //   head: 16*64+64 + 64+1 = 1153
        // Block 2 (16 -> 32):
        //   unit 1: (4608+64) + (9216+64) + (512+64) = 14528
        //   unit 2: 2*(9216+64) = 18560
        //   head: 32*64+64 + 65 = 2177
        // Block 3 (32 -> 64):
        //   unit 1: (18432+128) + (36864+128) + (2048+128) = 57728
        //   unit 2: 2*(36864+128) = 73984
        //   head: 64*64+64 + 65 = 4225
        // Block 4 (64 -> 128):
        //   unit 1: (73728+256) + (147456+256) + (8192+256) = 230144
        //   unit 2: 2*(147456+256) = 295424
        //   head: 128*64+64 + 65 = 8321
        // Embedding 128*256+256 = 33024, classifier 256*16+16 = 4112.
        let per_stream = (4960 + 4672 + 1153)
            + (14528 + 18560 + 2177)
            + (57728 + 73984 + 4225)
            + (230144 + 295424 + 8321);
        let expected = 464 + 2 * per_stream + 33024 + 4112;
        assert_eq!(expected, 1_469_352);
        assert_eq!(RifeConfig::default().parameter_count(), expected);
    }

    #[test]
    fn streams_start_identical() {
        let mut store = ParamStore::<f32>::new();
        let net = Rife::init(small(true), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = random_batch(&mut ChaCha8Rng::seed_from_u64(2), 2, 32, 16);
        let mut tape = Tape::inference();
        let x = tape.constant(stack_chw(&[&img[0], &img[1]]));
        let out = net.forward(&mut tape, &store, x, None);
        for b in &out.blocks {
            assert_eq!(tape.value(b.m_low), tape.value(b.m_high.unwrap()));
            assert_eq!(tape.value(b.w_low.unwrap()), tape.value(b.w_high.unwrap()));
        }
    }

    #[test]
    fn clamped_fusion_passes_the_low_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let net = Rife::init(small(true), &mut store, &mut rng).unwrap();
        // Break the copy symmetry so the streams differ.
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains(".high.") {
                store.value_mut(id).mapv_inplace(|v| v * 1.5 + 0.01);
            }
        }
        let img = random_batch(&mut rng, 3, 32, 16);
        let mut tape = Tape::new(Mode::Train);
        let x = tape.constant(stack_chw(&[&img[0], &img[1], &img[2]]));
        let out = net.forward(&mut tape, &store, x, Some((1.0, 0.0)));
        for b in &out.blocks {
            assert_ne!(tape.value(b.m_low), tape.value(b.m_high.unwrap()));
            assert_eq!(tape.value(b.fused), tape.value(b.m_low));
        }
    }

    #[test]
    fn fusion_is_linear_in_the_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ml = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 2]), |_| rng.random::<f32>());
        let mh = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 2]), |_| rng.random::<f32>());
        let fuse = |a: f32, b: f32| {
            let mut t = Tape::<f32>::inference();
            let (l, h) = (t.constant(ml.clone()), t.constant(mh.clone()));
            let wl = t.constant(ArrayD::from_elem(IxDyn(&[2, 1]), a));
            let wh = t.constant(ArrayD::from_elem(IxDyn(&[2, 1]), b));
            let x = t.scale_samples(l, wl);
            let y = t.scale_samples(h, wh);
            let f = t.add(x, y);
            t.value(f).clone()
        };
        let sum = &fuse(0.2, 0.3) + &fuse(0.5, 0.4);
        let direct = fuse(0.7, 0.7);
        for (a, b) in sum.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let same = fuse(0.25, 0.75);
        let mut t = Tape::<f32>::inference();
        let m = t.constant(ml.clone());
        let wl = t.constant(ArrayD::from_elem(IxDyn(&[2, 1]), 0.25f32));
        let wh = t.constant(ArrayD::from_elem(IxDyn(&[2, 1]), 0.75f32));
        let a = t.scale_samples(m, wl);
        let b = t.scale_samples(m, wh);
        let f = t.add(a, b);
        for (a, b) in t.value(f).iter().zip(ml.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(same.shape(), ml.shape());
    }

    #[test]
    fn inference_is_deterministic_and_brightness_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let net = Rife::init(small(true), &mut store, &mut rng).unwrap();
        let img = random_batch(&mut rng, 1, 32, 16).pop().unwrap();
        let a = net.infer(&store, &[&img]).unwrap();
        let b = net.infer(&store, &[&img]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.embeddings[0].dim(), 8);
        assert_eq!(a.logits.dim(), (1, 3));
        assert_eq!(a.block_weights.len(), 4);
        let bright = img.mapv(|v| (2.0 * v).min(1.0));
        let c = net.infer(&store, &[&bright]).unwrap();
        let d: f32 = a.embeddings[0]
            .as_slice()
            .iter()
            .zip(c.embeddings[0].as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(d > 0.0);
        assert!(net.infer(&store, &[&Array3::zeros((3, 16, 16))]).is_err());
    }

    #[test]
    fn single_stream_variant_has_no_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let net = Rife::init(small(false), &mut store, &mut rng).unwrap();
        assert!(store.iter().all(|(_, n, _)| !n.contains(".high.") && !n.contains(".head.")));
        let img = random_batch(&mut rng, 1, 32, 16).pop().unwrap();
        assert!(net.infer(&store, &[&img]).unwrap().block_weights.is_empty());
    }

    #[test]
    fn bind_finds_every_parameter() {
        let mut store = ParamStore::<f32>::new();
        let a = Rife::init(small(true), &mut store, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = Rife::bind(small(true), &store).unwrap();
        let img = random_batch(&mut ChaCha8Rng::seed_from_u64(8), 1, 32, 16).pop().unwrap();
        assert_eq!(a.infer(&store, &[&img]).unwrap(), b.infer(&store, &[&img]).unwrap());
        assert!(Rife::bind(small(false), &ParamStore::<f32>::new()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RifeConfig { n_classes: 1, ..small(true) }.validate().is_err());
        assert!(RifeConfig { embedding_dim: 4, ..small(true) }.validate().is_err());
        assert!(RifeConfig { n_blocks: 3, ..small(true) }.validate().is_err());
        assert!(RifeConfig { n_blocks: 0, widths: vec![], strides: vec![], ..small(true) }.validate().is_err());
    }
}
