use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{ParamId, ParamStore, Real};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Batch-norm layers use batch statistics in `Train` and running statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a backward closure sees: the incoming gradient, the node's own
/// output, its inputs, and which inputs actually need a gradient.
pub struct BackCtx<'a, F> {
    pub grad: &'a ArrayD<F>,
    pub output: &'a ArrayD<F>,
    pub inputs: Vec<&'a ArrayD<F>>,
    pub needs: Vec<bool>,
}

type Backward<F> = Box<dyn Fn(&BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>>>;

struct Node<F> {
    value: ArrayD<F>,
    parents: Vec<usize>,
    backward: Option<Backward<F>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Running-statistic update produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub(crate) struct StatUpdate<F> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: ArrayD<F>,
    pub batch_var: ArrayD<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    mode: Mode,
    grad_enabled: bool,
    pub(crate) stat_updates: Vec<StatUpdate<F>>,
}

/// Gradients of a scalar with respect to tape leaves.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    params: BTreeMap<ParamId, ArrayD<F>>,
    leaves: BTreeMap<usize, ArrayD<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ArrayD<F>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn wrt(&self, var: Var) -> Option<&ArrayD<F>> {
        self.leaves.get(&var.0)
    }

    /// Sum of squared gradient entries over parameters whose name starts with `prefix`.
    pub fn sq_norm_prefix(&self, store: &ParamStore<F>, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(id, _)| store.name(**id).starts_with(prefix))
            .map(|(_, g)| g.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>())
            .sum()
    }
}

impl<F: Real> Tape<F> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            grad_enabled: true,
            stat_updates: Vec::new(),
        }
    }

    /// A tape that records no backward closures.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(Mode::Eval)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        let rg = self.grad_enabled;
        self.leaf(value, rg)
    }

    fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let rg = self.grad_enabled && store.is_trainable(id);
        let v = self.leaf(store.value(id).clone(), rg);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Records an operation. `backward` maps the output gradient to one
    /// optional gradient per parent, in order.
    pub fn push<B>(&mut self, value: ArrayD<F>, parents: &[Var], backward: B) -> Var
    where
        B: Fn(&BackCtx<'_, F>) -> Vec<Option<ArrayD<F>>> + 'static,
    {
        let rg = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if rg { Some(Box::new(backward)) } else { None },
            requires_grad: rg,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar (or any tensor, seeded with ones).
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: BTreeMap::new(),
        };
        if !self.nodes[root.0].requires_grad {
            return out;
        }
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                Some(back) => {
                    let ctx = BackCtx {
                        grad: &g,
                        output: &node.value,
                        inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                        needs: node
                            .parents
                            .iter()
                            .map(|&p| self.nodes[p].requires_grad)
                            .collect(),
                    };
                    let pgrads = back(&ctx);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                        match &mut grads[p] {
                            Some(acc) => *acc += &pg,
                            slot => *slot = Some(pg),
                        }
                    }
                }
                None => {
                    if !node.requires_grad {
                        continue;
                    }
                    match node.param {
                        Some(id) => match out.params.get_mut(&id) {
                            Some(acc) => *acc += &g,
                            None => {
                                out.params.insert(id, g);
                            }
                        },
                        None => {
                            out.leaves.insert(i, g);
                        }
                    }
                }
            }
        }
        out
    }

    /// Folds train-mode batch statistics into the store's running buffers.
    pub fn apply_stat_updates(&mut self, store: &mut ParamStore<F>, momentum: F) {
        for u in self.stat_updates.drain(..) {
            let keep = F::one() - momentum;
            store
                .value_mut(u.mean)
                .zip_mut_with(&u.batch_mean, |r, &b| *r = keep * *r + momentum * b);
            store
                .value_mut(u.var)
                .zip_mut_with(&u.batch_var, |r, &b| *r = keep * *r + momentum * b);
        }
    }
}
