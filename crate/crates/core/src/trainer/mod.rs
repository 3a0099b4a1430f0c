//! Staged training of the restoration and feature networks, and the
//! inference glue used by evaluation.

mod config;
mod model;

use std::fmt::Write as _;

use ndarray::{s, Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::StageRecord;
use crate::datamodel::{load_image, IdentityMap, ImageTensor, LabeledSample, Manifest, MIN_HEIGHT, MIN_WIDTH};
use crate::degrade::{downsample, resize_array};
use crate::error::{Error, Result};
use crate::evalkit::{self, GridMode, ObjectiveGrid, RetrievalMetrics};
use crate::ffsr::{self, Ffsr};
use crate::masks::{external_mask, ones_mask, ForegroundMask, MaskCache, MaskKind};
use crate::nn::optim::Sgd;
use crate::nn::{stack_chw, Mode, ParamStore, Tape};
use crate::rife::{self, Rife, RifeOutput};

pub use config::{Stage, TrainConfig, Variant};
pub use model::{joint_objective, stage_loss, Batch, BatchMask, Model, StageVars};

pub const LOSS_LOG_HEADER: &str = "epoch,stage,mean_total,mean_ffsr,mean_xent,mean_rw,lr";

/// A sample at canonical size.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    /// The degraded image, resized bilinearly to canonical size.
    pub input: Array3<f64>,
    pub hr: Array3<f64>,
    /// Resolution of the degraded image before resizing.
    pub resolution: f64,
    pub person_id: u32,
}

fn check_canonical((h, w): (usize, usize)) -> Result<()> {
    if h < MIN_HEIGHT || w < MIN_WIDTH {
        return Err(Error::invalid(format!(
            "canonical size {h}x{w} is below the {MIN_HEIGHT}x{MIN_WIDTH} minimum"
        )));
    }
    Ok(())
}

pub fn preprocess(sample: &LabeledSample, canonical: (usize, usize)) -> Result<Preprocessed> {
    check_canonical(canonical)?;
    let (h, w) = canonical;
    Ok(Preprocessed {
        input: resize_array(sample.image.pixels(), h, w),
        hr: resize_array(sample.hr_target.pixels(), h, w),
        resolution: sample.resolution,
        person_id: sample.person_id,
    })
}

/// `f(0..n)` on up to `workers` threads; results keep index order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start workers: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// The preprocessed training split.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub samples: Vec<Preprocessed>,
    pub identities: IdentityMap,
    /// Canonical-size per-sample masks, loaded only for the external provider.
    masks: Option<Vec<Array2<f64>>>,
}

impl TrainingSet {
    pub fn from_manifest(manifest: &Manifest, config: &TrainConfig, workers: usize) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::invalid("training manifest is empty"));
        }
        let canonical = config.canonical_size;
        let samples = parallel_map(manifest.len(), workers, |i| preprocess(&manifest.load_sample(i)?, canonical))?;
        let masks = match config.mask {
            MaskKind::External => Some(parallel_map(manifest.len(), workers, |i| {
                let e = &manifest.entries[i];
                let p = e.mask_path.as_ref().ok_or_else(|| {
                    Error::invalid(format!("entry {} has no mask_path but the external mask is selected", i + 1))
                })?;
                let m = external_mask(manifest.resolve(p))?.resized(canonical.0, canonical.1)?;
                Ok(m.weights().clone())
            })?),
            _ => None,
        };
        Ok(Self {
            identities: IdentityMap::from_labels(manifest.identities()),
            samples,
            masks,
        })
    }

    /// In-memory samples; used with the Gaussian and all-ones masks.
    pub fn from_samples(samples: Vec<Preprocessed>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let dim = samples[0].input.dim();
        if samples.iter().any(|s| s.input.dim() != dim || s.hr.dim() != dim) {
            return Err(Error::shape("samples differ in size"));
        }
        Ok(Self {
            identities: IdentityMap::from_labels(samples.iter().map(|s| s.person_id)),
            samples,
            masks: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.samples[0].input.dim();
        (h, w)
    }
}

/// Mean losses of one epoch. Terms the stage does not compute are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub mean_total: f64,
    pub mean_ffsr: Option<f64>,
    pub mean_xent: Option<f64>,
    pub mean_rw: Option<f64>,
    pub lr: f64,
}

/// CSV with [`LOSS_LOG_HEADER`]; absent terms are empty fields.
pub fn loss_log_csv(rows: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = format!("{LOSS_LOG_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.stage,
            r.mean_total,
            opt(r.mean_ffsr),
            opt(r.mean_xent),
            opt(r.mean_rw),
            r.lr
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn empty_model() -> Model {
    Model {
        ffsr: None,
        rife: None,
        store: ParamStore::new(),
        identities: None,
        provenance: Vec::new(),
    }
}

/// Brings `init` (or an empty model) up to what `config.stage` needs.
/// Stage 2 without a restoration network is allowed only with
/// `from_scratch`, and then trains on the bilinear inputs directly.
fn prepare_model(config: &TrainConfig, data: &TrainingSet, init: Option<Model>, from_scratch: bool) -> Result<Model> {
    let stage = config.stage;
    if from_scratch && init.is_some() {
        return Err(Error::invalid("--from-scratch conflicts with an initial checkpoint"));
    }
    let mut m = init.unwrap_or_else(empty_model);
    let mut rng = stage_rng(config.seed, stage.number() as u64);
    match stage {
        Stage::FfsrPretrain => {}
        Stage::RifeTrain if m.ffsr.is_none() && !from_scratch => {
            return Err(Error::Prerequisite(format!(
                "stage 2 needs a stage-1 checkpoint with a restoration network (got {}); pass --from-scratch to train without one",
                m.names()
            )));
        }
        Stage::Joint if (m.ffsr.is_none() || m.rife.is_none()) && !from_scratch => {
            return Err(Error::Prerequisite(format!(
                "stage 3 needs a stage-2 checkpoint with both networks (got {})",
                m.names()
            )));
        }
        _ => {}
    }
    let wants_ffsr = stage != Stage::RifeTrain;
    if wants_ffsr && m.ffsr.is_none() {
        m.ffsr = Some(Ffsr::init(config.ffsr_config(), &mut m.store, &mut rng)?);
    }
    if stage != Stage::FfsrPretrain {
        match (&m.rife, &m.identities) {
            (Some(_), Some(ids)) if *ids != data.identities => {
                return Err(Error::invalid("checkpoint was trained on a different identity set"));
            }
            (Some(_), _) => {}
            (None, _) => {
                let cfg = config.rife_config(data.identities.num_classes());
                m.rife = Some(Rife::init(cfg, &mut m.store, &mut rng)?);
                m.identities = Some(data.identities.clone());
            }
        }
    }
    if let Some(r) = &mut m.rife {
        r.config.beta = config.beta;
    }
    if let Some(size) = m.canonical_size() {
        if size != config.canonical_size || size != data.size() {
            return Err(Error::Config(format!(
                "model works at {size:?} but the config says {:?} and the data is {:?}",
                config.canonical_size,
                data.size()
            )));
        }
    }
    Ok(m)
}

fn to_f32(a: &Array3<f64>) -> Array3<f32> {
    a.mapv(|v| v as f32)
}

fn flipped<T: Clone>(a: &Array3<T>, flip: bool) -> Array3<T> {
    if flip {
        a.slice(s![.., .., ..;-1]).to_owned()
    } else {
        a.clone()
    }
}

fn stack3(items: &[Array3<f32>]) -> ArrayD<f32> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).unwrap().into_dyn()
}

/// Runs one training stage and returns the updated model with its
/// per-epoch loss log. Deterministic given `config.seed`.
pub fn run_stage(config: &TrainConfig, data: &TrainingSet, init: Option<Model>, from_scratch: bool) -> Result<StageOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let stage = config.stage;
    let mut model = prepare_model(config, data, init, from_scratch)?;
    let (h, w) = config.canonical_size;

    match stage {
        Stage::FfsrPretrain => model.store.set_trainable_prefix(rife::PREFIX, false),
        Stage::RifeTrain => model.store.set_trainable_prefix(ffsr::PREFIX, false),
        Stage::Joint => {}
    }

    let shared_mask = match config.mask {
        MaskKind::Gaussian => Some(MaskCache::from_env().gaussian(h, w, config.sigma_frac)?),
        MaskKind::Ones => Some(ones_mask(h, w)?),
        MaskKind::External => None,
    }
    .map(|m| m.weights().mapv(|v| v as f32));
    if shared_mask.is_none() && data.masks.is_none() && stage != Stage::RifeTrain {
        return Err(Error::invalid("external masks were selected but the training set has none"));
    }

    // The frozen restoration network is deterministic, so without flips its
    // outputs can be computed once.
    let precomputed: Option<Vec<Array3<f32>>> = match (&model.ffsr, stage, config.hflip) {
        (Some(f), Stage::RifeTrain, false) => Some(restore_unclamped(f, &model.store, &data.samples)?),
        _ => None,
    };

    let classes: Vec<usize> = data
        .samples
        .iter()
        .map(|s| {
            model
                .identities
                .as_ref()
                .and_then(|ids| ids.dense(s.person_id))
                .unwrap_or(0)
        })
        .collect();

    let mut sgd = Sgd::<f32>::new(config.lr_at(1), config.momentum, config.weight_decay);
    let mut log = Vec::with_capacity(config.epochs_per_stage);
    for epoch in 1..=config.epochs_per_stage {
        sgd.lr = config.lr_at(epoch);
        let mut rng = stage_rng(config.seed, ((stage.number() as u64) << 32) | epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..data.len()).map(|_| config.hflip && rng.random::<bool>()).collect();

        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for idx in order.chunks(config.batch_size) {
            let batch = Batch {
                inputs: stack3(
                    &idx.iter()
                        .map(|&i| match &precomputed {
                            Some(p) => p[i].clone(),
                            None => flipped(&to_f32(&data.samples[i].input), flips[i]),
                        })
                        .collect::<Vec<_>>(),
                ),
                targets: stack3(
                    &idx.iter()
                        .map(|&i| flipped(&to_f32(&data.samples[i].hr), flips[i]))
                        .collect::<Vec<_>>(),
                ),
                mask: match &shared_mask {
                    Some(m) => BatchMask::Shared(m.clone()),
                    None => match &data.masks {
                        Some(ms) => BatchMask::Each(
                            ndarray::stack(
                                Axis(0),
                                &idx.iter()
                                    .map(|&i| {
                                        let m = ms[i].mapv(|v| v as f32);
                                        if flips[i] {
                                            m.slice(s![.., ..;-1]).to_owned()
                                        } else {
                                            m
                                        }
                                    })
                                    .collect::<Vec<_>>()
                                    .iter()
                                    .map(|m| m.view())
                                    .collect::<Vec<_>>(),
                            )
                            .unwrap(),
                        ),
                        // Stage 2 never reads the mask.
                        None => BatchMask::Shared(Array2::ones((h, w))),
                    },
                },
                labels: idx.iter().map(|&i| classes[i]).collect(),
                resolutions: idx.iter().map(|&i| data.samples[i].resolution as f32).collect(),
            };
            let ffsr_net = if precomputed.is_some() { None } else { model.ffsr.as_ref() };
            let mut tape = Tape::new(Mode::Train);
            let vars = stage_loss(&mut tape, stage, ffsr_net, model.rife.as_ref(), &model.store, &batch, config.alpha)?;
            let value = |v: Option<crate::nn::Var>| v.map(|v| tape.scalar_value(v) as f64);
            let terms = [Some(tape.scalar_value(vars.total) as f64), value(vars.ffsr), value(vars.xent), value(vars.rw)];
            if !terms[0].unwrap().is_finite() {
                return Err(Error::invalid(format!("loss diverged in stage {} epoch {epoch}", stage.number())));
            }
            let grads = tape.backward(vars.total);
            tape.apply_stat_updates(&mut model.store, config.bn_momentum as f32);
            sgd.step(&mut model.store, &grads);
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t.unwrap_or(0.0) * idx.len() as f64;
            }
            seen += idx.len();
        }
        let mean = |k: usize| sums[k] / seen as f64;
        let has_rw = model.rife.as_ref().is_some_and(|r| r.config.dual_stream);
        log.push(EpochLog {
            epoch,
            stage: stage.number(),
            mean_total: mean(0),
            mean_ffsr: (stage != Stage::RifeTrain).then(|| mean(1)),
            mean_xent: (stage != Stage::FfsrPretrain).then(|| mean(2)),
            mean_rw: (stage != Stage::FfsrPretrain && has_rw).then(|| mean(3)),
            lr: sgd.lr,
        });
    }

    model.store.set_trainable_prefix("", true);
    let note = match stage {
        Stage::FfsrPretrain => format!("mask={}", mask_name(config.mask)),
        Stage::RifeTrain => format!(
            "variant={} restoration={}",
            if model.rife.as_ref().is_some_and(|r| r.config.dual_stream) { "dual" } else { "single" },
            if model.ffsr.is_some() { "frozen" } else { "none" }
        ),
        Stage::Joint => format!("alpha={} mask={}", config.alpha, mask_name(config.mask)),
    };
    model.provenance.push(StageRecord {
        stage: stage.number(),
        epochs: config.epochs_per_stage,
        seed: config.seed,
        final_loss: log.last().map_or(f64::NAN, |l| l.mean_total),
        note,
    });
    Ok(StageOutcome { model, log })
}

fn mask_name(m: MaskKind) -> &'static str {
    match m {
        MaskKind::Gaussian => "gaussian",
        MaskKind::Ones => "ones",
        MaskKind::External => "external",
    }
}

/// Unclamped restoration, exactly as the joint stage feeds the extractor.
fn restore_unclamped(net: &Ffsr, store: &ParamStore<f32>, samples: &[Preprocessed]) -> Result<Vec<Array3<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let mut tape = Tape::<f32>::inference();
        let refs: Vec<&Array3<f64>> = chunk.iter().map(|s| &s.input).collect();
        let x = tape.constant(stack_chw(&refs));
        let y = net.forward(&mut tape, store, x);
        for row in tape.value(y).outer_iter() {
            out.push(row.to_owned().into_dimensionality().map_err(|e| Error::shape(e.to_string()))?);
        }
    }
    Ok(out)
}

/// Every term of the joint objective for one sample, in double precision
/// with running batch-norm statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub ffsr: f64,
    pub xent: f64,
    pub rw: Option<f64>,
    pub rife: f64,
    pub total: f64,
}

pub fn total_loss(model: &Model, sample: &Preprocessed, mask: &ForegroundMask, alpha: f64) -> Result<LossTerms> {
    let (ffsr_net, rife_net) = match (&model.ffsr, &model.rife) {
        (Some(f), Some(r)) => (f, r),
        _ => return Err(Error::Prerequisite(format!("the joint loss needs both networks (got {})", model.names()))),
    };
    let (_, h, w) = sample.input.dim();
    mask.check_size(h, w)?;
    let class = model
        .identities
        .as_ref()
        .and_then(|ids| ids.dense(sample.person_id))
        .ok_or_else(|| Error::invalid(format!("identity {} is not a training class", sample.person_id)))?;
    let store = model.store.cast::<f64>();
    let batch = Batch {
        inputs: stack_chw::<f64>(&[&sample.input]),
        targets: stack_chw::<f64>(&[&sample.hr]),
        mask: BatchMask::Shared(mask.weights().clone()),
        labels: vec![class],
        resolutions: vec![sample.resolution],
    };
    let mut tape = Tape::<f64>::inference();
    let v = stage_loss(&mut tape, Stage::Joint, Some(ffsr_net), Some(rife_net), &store, &batch, alpha)?;
    Ok(LossTerms {
        ffsr: tape.scalar_value(v.ffsr.unwrap()),
        xent: tape.scalar_value(v.xent.unwrap()),
        rw: v.rw.map(|r| tape.scalar_value(r)),
        rife: tape.scalar_value(v.rife.unwrap()),
        total: tape.scalar_value(v.total),
    })
}

/// Degrades a full-resolution image to resolution `r` and resizes it back
/// to canonical size.
pub fn render_at(hr: &ImageTensor, r: f64, canonical: (usize, usize)) -> Result<Array3<f64>> {
    check_canonical(canonical)?;
    Ok(resize_array(downsample(hr, r)?.pixels(), canonical.0, canonical.1))
}

fn model_size(model: &Model) -> Result<(usize, usize)> {
    model
        .canonical_size()
        .ok_or_else(|| Error::Prerequisite("checkpoint holds no network".into()))
}

/// Identity labels and network outputs for every input image of a manifest.
pub fn embed_manifest(model: &Model, manifest: &Manifest, workers: usize) -> Result<(Vec<u32>, RifeOutput)> {
    if manifest.is_empty() {
        return Err(Error::invalid("manifest is empty"));
    }
    let (h, w) = model_size(model)?;
    let inputs = parallel_map(manifest.len(), workers, |i| {
        let img = load_image(manifest.resolve(&manifest.entries[i].input_path))?;
        Ok(resize_array(img.pixels(), h, w))
    })?;
    let refs: Vec<&Array3<f64>> = inputs.iter().collect();
    let ids = manifest.entries.iter().map(|e| e.person_id).collect();
    Ok((ids, model.infer(&refs)?))
}

/// Rank-1/Rank-5 of `query` against `gallery`.
pub fn evaluate_retrieval(model: &Model, query: &Manifest, gallery: &Manifest, workers: usize) -> Result<RetrievalMetrics> {
    let (qid, q) = embed_manifest(model, query, workers)?;
    let (gid, g) = embed_manifest(model, gallery, workers)?;
    evalkit::retrieval_metrics(&q.embeddings, &qid, &g.embeddings, &gid)
}

/// Network outputs of full-resolution images re-rendered at resolution `r`.
pub fn infer_at(model: &Model, images: &[ImageTensor], r: f64, workers: usize) -> Result<RifeOutput> {
    let size = model_size(model)?;
    let inputs = parallel_map(images.len(), workers, |i| render_at(&images[i], r, size))?;
    let refs: Vec<&Array3<f64>> = inputs.iter().collect();
    model.infer(&refs)
}

/// The separability diagnostic over the resolution grid, from labelled
/// full-resolution test images.
pub fn diagnose(model: &Model, images: &[(u32, ImageTensor)], mode: GridMode, workers: usize) -> Result<ObjectiveGrid> {
    let (ids, imgs): (Vec<u32>, Vec<ImageTensor>) = images.iter().cloned().unzip();
    evalkit::objective_curves(mode, |r| {
        let out = infer_at(model, &imgs, r, workers)?;
        Ok(ids.iter().copied().zip(out.embeddings).collect())
    })
}

/// Full-resolution images of every entry's `hr_path`, with identities.
pub fn load_hr_images(manifests: &[&Manifest], workers: usize) -> Result<Vec<(u32, ImageTensor)>> {
    let entries: Vec<(&Manifest, usize)> = manifests.iter().flat_map(|m| (0..m.len()).map(move |i| (*m, i))).collect();
    parallel_map(entries.len(), workers, |k| {
        let (m, i) = entries[k];
        let e = &m.entries[i];
        Ok((e.person_id, load_image(m.resolve(&e.hr_path))?))
    })
}

/// Mean squared error over the pixels where `region` is set, averaged
/// over channels.
pub fn region_mse(pred: &Array3<f64>, target: &Array3<f64>, region: &Array2<bool>) -> Result<f64> {
    let (c, h, w) = pred.dim();
    if target.dim() != (c, h, w) || region.dim() != (h, w) {
        return Err(Error::shape("prediction, target and region sizes differ"));
    }
    let n = region.iter().filter(|&&b| b).count();
    if n == 0 {
        return Err(Error::invalid("region is empty"));
    }
    let mut total = 0.0;
    for ((ch, y, x), &p) in pred.indexed_iter() {
        if region[[y, x]] {
            let d = p - target[[ch, y, x]];
            total += d * d;
        }
    }
    Ok(total / (n * c) as f64)
}

#[cfg(test)]
mod tests;
