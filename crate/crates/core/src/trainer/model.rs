use ndarray::{concatenate, Array1, Array2, Array3, ArrayD, Axis};

use crate::checkpoint::{Checkpoint, StageRecord};
use crate::datamodel::IdentityMap;
use crate::error::{Error, Result};
use crate::ffsr::{self, Ffsr};
use crate::nn::{stack_chw, ParamStore, Real, Tape, Var};
use crate::rife::{self, Rife, RifeOutput};

use super::Stage;

/// Images pushed through the networks per inference call.
const INFER_CHUNK: usize = 32;

/// Reconstruction-loss weights for a batch.
#[derive(Debug, Clone)]
pub enum BatchMask<F> {
    /// One `[h, w]` mask for every sample.
    Shared(Array2<F>),
    /// `[n, h, w]`, one mask per sample.
    Each(Array3<F>),
}

/// A training batch at canonical size.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    /// `[n, 3, h, w]` network inputs.
    pub inputs: ArrayD<F>,
    /// `[n, 3, h, w]` restoration targets.
    pub targets: ArrayD<F>,
    pub mask: BatchMask<F>,
    /// Dense class indices.
    pub labels: Vec<usize>,
    pub resolutions: Vec<F>,
}

/// Tape handles of one stage objective. Terms a stage does not compute are `None`.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub total: Var,
    pub ffsr: Option<Var>,
    pub rife: Option<Var>,
    pub xent: Option<Var>,
    pub rw: Option<Var>,
}

fn need<'a, T>(v: Option<&'a T>, what: &str) -> Result<&'a T> {
    v.ok_or_else(|| Error::Prerequisite(format!("this stage needs a {what} network")))
}

/// Records the objective of `stage` on `tape`: the reconstruction loss for
/// stage 1, the extractor loss (optionally behind `ffsr`) for stage 2, and
/// `ffsr + alpha · rife` on the chained networks for stage 3.
pub fn stage_loss<F: Real>(
    tape: &mut Tape<F>,
    stage: Stage,
    ffsr: Option<&Ffsr>,
    rife: Option<&Rife>,
    store: &ParamStore<F>,
    batch: &Batch<F>,
    alpha: f64,
) -> Result<StageVars> {
    let x = tape.constant(batch.inputs.clone());
    let restoration = |tape: &mut Tape<F>, net: &Ffsr| {
        let y = net.forward(tape, store, x);
        let l = match &batch.mask {
            BatchMask::Shared(m) => tape.masked_mse(y, &batch.targets, m),
            BatchMask::Each(m) => tape.masked_mse_each(y, &batch.targets, m),
        };
        (y, l)
    };
    match stage {
        Stage::FfsrPretrain => {
            let (_, l) = restoration(tape, need(ffsr, "restoration")?);
            Ok(StageVars {
                total: l,
                ffsr: Some(l),
                rife: None,
                xent: None,
                rw: None,
            })
        }
        Stage::RifeTrain => {
            let net = need(rife, "feature")?;
            let h = match ffsr {
                Some(f) => f.forward(tape, store, x),
                None => x,
            };
            let out = net.forward(tape, store, h, None);
            let (l, xent, rw) = net.loss(tape, &out, &batch.labels, &batch.resolutions);
            Ok(StageVars {
                total: l,
                ffsr: None,
                rife: Some(l),
                xent: Some(xent),
                rw,
            })
        }
        Stage::Joint => {
            let net = need(rife, "feature")?;
            let (y, fl) = restoration(tape, need(ffsr, "restoration")?);
            let out = net.forward(tape, store, y, None);
            let (rl, xent, rw) = net.loss(tape, &out, &batch.labels, &batch.resolutions);
            let total = tape.weighted_sum(&[(fl, F::one()), (rl, F::of(alpha))]);
            Ok(StageVars {
                total,
                ffsr: Some(fl),
                rife: Some(rl),
                xent: Some(xent),
                rw,
            })
        }
    }
}

/// The joint objective from its two module terms.
pub fn joint_objective(ffsr_term: f64, rife_term: f64, alpha: f64) -> f64 {
    ffsr_term + alpha * rife_term
}

/// Restoration and feature networks sharing one parameter store, plus
/// what is needed to save them.
#[derive(Debug, Clone)]
pub struct Model {
    pub ffsr: Option<Ffsr>,
    pub rife: Option<Rife>,
    pub store: ParamStore<f32>,
    pub identities: Option<IdentityMap>,
    pub provenance: Vec<StageRecord>,
}

impl Model {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let ffsr = ckpt.ffsr.map(|c| Ffsr::bind(c, &ckpt.store)).transpose()?;
        let rife = ckpt.rife.map(|c| Rife::bind(c, &ckpt.store)).transpose()?;
        if let (Some(f), Some(r)) = (&ffsr, &rife) {
            if f.config.canonical_size != r.config.canonical_size {
                return Err(Error::Config(format!(
                    "restoration size {:?} differs from extractor size {:?}",
                    f.config.canonical_size, r.config.canonical_size
                )));
            }
        }
        if let (Some(r), Some(ids)) = (&rife, &ckpt.identities) {
            if r.config.n_classes != ids.num_classes() {
                return Err(Error::Config(format!(
                    "classifier has {} classes but the identity map has {}",
                    r.config.n_classes,
                    ids.num_classes()
                )));
            }
        }
        Ok(Self {
            ffsr,
            rife,
            store: ckpt.store,
            identities: ckpt.identities,
            provenance: ckpt.provenance,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            ffsr: self.ffsr.as_ref().map(|f| f.config.clone()),
            rife: self.rife.as_ref().map(|r| r.config.clone()),
            identities: self.identities.clone(),
            provenance: self.provenance.clone(),
            store: self.store.clone(),
        }
    }

    pub fn canonical_size(&self) -> Option<(usize, usize)> {
        self.rife
            .as_ref()
            .map(|r| r.config.canonical_size)
            .or_else(|| self.ffsr.as_ref().map(|f| f.config.canonical_size))
    }

    /// Clamped restorations of canonical-size inputs.
    pub fn restore(&self, inputs: &[&Array3<f64>]) -> Result<Vec<Array3<f64>>> {
        let net = need(self.ffsr.as_ref(), "restoration")?;
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFER_CHUNK) {
            out.extend(net.restore(&self.store, chunk)?);
        }
        Ok(out)
    }

    /// Embeddings, logits and fusion weights of canonical-size inputs,
    /// restored first when the model has a restoration network.
    pub fn infer(&self, inputs: &[&Array3<f64>]) -> Result<RifeOutput> {
        let net = need(self.rife.as_ref(), "feature")?;
        if inputs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for im in inputs {
            net.check_size((im.dim().1, im.dim().2))?;
        }
        let mut parts = Vec::new();
        for chunk in inputs.chunks(INFER_CHUNK) {
            let mut tape = Tape::<f32>::inference();
            let x = tape.constant(stack_chw(chunk));
            let h = match &self.ffsr {
                Some(f) => f.forward(&mut tape, &self.store, x),
                None => x,
            };
            let out = net.forward(&mut tape, &self.store, h, None);
            parts.push(RifeOutput::collect(&tape, &out));
        }
        Ok(concat_outputs(parts))
    }

    /// Which networks are present, for messages.
    pub(crate) fn names(&self) -> String {
        let mut v = Vec::new();
        if self.ffsr.is_some() {
            v.push(ffsr::PREFIX.trim_end_matches('.'));
        }
        if self.rife.is_some() {
            v.push(rife::PREFIX.trim_end_matches('.'));
        }
        if v.is_empty() {
            "nothing".into()
        } else {
            v.join("+")
        }
    }
}

fn concat_outputs(mut parts: Vec<RifeOutput>) -> RifeOutput {
    if parts.len() == 1 {
        return parts.pop().unwrap();
    }
    let embeddings = parts.iter().flat_map(|p| p.embeddings.iter().cloned()).collect();
    let logits = concatenate(Axis(0), &parts.iter().map(|p| p.logits.view()).collect::<Vec<_>>()).unwrap();
    let n_blocks = parts[0].block_weights.len();
    let block_weights = (0..n_blocks)
        .map(|b| {
            let cat = |f: fn(&(Array1<f64>, Array1<f64>)) -> &Array1<f64>| {
                Array1::from_iter(parts.iter().flat_map(|p| f(&p.block_weights[b]).iter().copied()))
            };
            (cat(|w| &w.0), cat(|w| &w.1))
        })
        .collect();
    RifeOutput {
        embeddings,
        logits,
        block_weights,
    }
}
