use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use super::{Gradients, ParamId, ParamKind, ParamStore, Real};

/// SGD with heavy-ball momentum and decoupled-from-bias weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, ArrayD<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) {
        let lr = F::of(self.lr);
        let mu = F::of(self.momentum);
        for (id, g) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let wd = match store.kind(id) {
                ParamKind::Weight { decay: true } => F::of(self.weight_decay),
                ParamKind::Weight { decay: false } => F::zero(),
                ParamKind::Buffer => continue,
            };
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = store.value_mut(id);
            Zip::from(v).and(&mut *p).and(g).for_each(|v, p, &g| {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            });
        }
    }
}
