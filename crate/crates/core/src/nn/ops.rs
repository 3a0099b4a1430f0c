use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

use super::tape::StatUpdate;
use super::{Mode, ParamId, ParamStore, Real, Tape, Var};

pub(crate) const BN_EPS: f64 = 1e-5;

fn as2<F: Real>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected a 2-D tensor")
}

fn scalar<F: Real>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn scalar_of<F: Real>(a: &ArrayD<F>) -> F {
    *a.iter().next().expect("scalar tensor")
}

impl<F: Real> Tape<F> {
    pub fn relu(&mut self, x: Var) -> Var {
        // Strict comparison keeps negative zeros out of the output.
        let y = self.value(x).mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.push(y, &[x], |ctx| {
            let mut g = ctx.grad.clone();
            Zip::from(&mut g)
                .and(ctx.output)
                .for_each(|g, &y| {
                    if y <= F::zero() {
                        *g = F::zero()
                    }
                });
            vec![Some(g)]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| F::one() / (F::one() + (-v).exp()));
        self.push(y, &[x], |ctx| {
            let mut g = ctx.grad.clone();
            Zip::from(&mut g)
                .and(ctx.output)
                .for_each(|g, &y| *g = *g * y * (F::one() - y));
            vec![Some(g)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let y = self.value(a) + self.value(b);
        self.push(y, &[a, b], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.clone()),
                ctx.needs[1].then(|| ctx.grad.clone()),
            ]
        })
    }

    /// Multiplies sample `i` of `x` (`[n, ...]`) by `w[i]` (`w` is `[n, 1]`).
    pub fn scale_samples(&mut self, x: Var, w: Var) -> Var {
        let n = self.value(x).shape()[0];
        assert_eq!(self.value(w).len(), n, "scale_samples: one weight per sample");
        let ws: Vec<F> = self.value(w).iter().copied().collect();
        let mut y = self.value(x).clone();
        for (i, mut s) in y.axis_iter_mut(Axis(0)).enumerate() {
            s.mapv_inplace(|v| v * ws[i]);
        }
        let wshape = self.value(w).raw_dim();
        self.push(y, &[x, w], move |ctx| {
            let dx = ctx.needs[0].then(|| {
                let mut g = ctx.grad.clone();
                let ws: Vec<F> = ctx.inputs[1].iter().copied().collect();
                for (i, mut s) in g.axis_iter_mut(Axis(0)).enumerate() {
                    s.mapv_inplace(|v| v * ws[i]);
                }
                g
            });
            let dw = ctx.needs[1].then(|| {
                let vals: Vec<F> = ctx
                    .grad
                    .axis_iter(Axis(0))
                    .zip(ctx.inputs[0].axis_iter(Axis(0)))
                    .map(|(g, x)| g.iter().zip(x.iter()).map(|(&a, &b)| a * b).sum())
                    .collect();
                ArrayD::from_shape_vec(wshape.clone(), vals).unwrap()
            });
            vec![dx, dw]
        })
    }

    /// Global average pooling, `[n, c, h, w]` to `[n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = F::one() / F::of(hw as f64);
        let xs = self.value(x).as_slice().unwrap();
        let y: Vec<F> = xs.chunks(hw).map(|p| p.iter().copied().sum::<F>() * inv).collect();
        let y = ArrayD::from_shape_vec(IxDyn(&[n, c]), y).unwrap();
        self.push(y, &[x], move |ctx| {
            let mut g = vec![F::zero(); n * c * hw];
            for (chunk, &gv) in g.chunks_mut(hw).zip(ctx.grad.iter()) {
                chunk.fill(gv * inv);
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&s), g).unwrap())]
        })
    }

    /// `x` is `[n, in]`, `weight` is `[out, in]`, `bias` is `[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let xv = as2(self.value(x));
        let wv = as2(self.value(weight));
        assert_eq!(xv.ncols(), wv.ncols(), "linear: input width mismatch");
        let mut y = xv.dot(&wv.t());
        if let Some(b) = bias {
            let b = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &b;
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(y.into_dyn(), &parents, |ctx| {
            let g = as2(ctx.grad);
            let mut out = vec![
                ctx.needs[0].then(|| g.dot(&as2(ctx.inputs[1])).into_dyn()),
                ctx.needs[1].then(|| g.t().dot(&as2(ctx.inputs[0])).into_dyn()),
            ];
            if ctx.inputs.len() == 3 {
                out.push(ctx.needs[2].then(|| g.sum_axis(Axis(0)).into_dyn()));
            }
            out
        })
    }

    /// Per-channel normalization of an `[n, c, h, w]` tensor. Train mode
    /// normalizes with batch statistics and records them for the running
    /// buffers; eval mode uses the buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore<F>,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let m = n * hw;
        let eps = F::of(BN_EPS);
        let xs = self.value(x).as_slice().unwrap();

        let mut pending = None;
        let (mean, var) = match self.mode() {
            Mode::Train => {
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                let inv_m = F::one() / F::of(m as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        mean[ci] += xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().copied().sum::<F>();
                    }
                }
                mean.iter_mut().for_each(|v| *v *= inv_m);
                for ni in 0..n {
                    for ci in 0..c {
                        let mu = mean[ci];
                        var[ci] += xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .sum::<F>();
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv_m);
                let unbiased = if m > 1 { F::of(m as f64 / (m as f64 - 1.0)) } else { F::one() };
                pending = Some(StatUpdate {
                    mean: running_mean,
                    var: running_var,
                    batch_mean: ArrayD::from_shape_vec(IxDyn(&[c]), mean.clone()).unwrap(),
                    batch_var: ArrayD::from_shape_vec(IxDyn(&[c]), var.iter().map(|&v| v * unbiased).collect())
                        .unwrap(),
                });
                (mean, var)
            }
            Mode::Eval => (
                store.value(running_mean).iter().copied().collect(),
                store.value(running_var).iter().copied().collect(),
            ),
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                for (d, &v) in xhat[r.clone()].iter_mut().zip(&xs[r]) {
                    *d = (v - mean[ci]) * inv_std[ci];
                }
            }
        }
        if let Some(u) = pending {
            self.stat_updates.push(u);
        }
        let g = self.param(store, gamma);
        let b = self.param(store, beta);
        let gv: Vec<F> = self.value(g).iter().copied().collect();
        let bv: Vec<F> = self.value(b).iter().copied().collect();
        let mut y = xhat.clone();
        for ni in 0..n {
            for ci in 0..c {
                for v in &mut y[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    *v = *v * gv[ci] + bv[ci];
                }
            }
        }
        let y = ArrayD::from_shape_vec(IxDyn(&s), y).unwrap();
        let train = self.mode() == Mode::Train;
        self.push(y, &[x, g, b], move |ctx| {
            let gy = ctx.grad.as_slice().unwrap();
            let gamma: Vec<F> = ctx.inputs[1].iter().copied().collect();
            let mut dgamma = vec![F::zero(); c];
            let mut dbeta = vec![F::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                    for (&gv, &xh) in gy[r.clone()].iter().zip(&xhat[r]) {
                        dgamma[ci] += gv * xh;
                        dbeta[ci] += gv;
                    }
                }
            }
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![F::zero(); gy.len()];
                let inv_m = F::one() / F::of(m as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                        let k = gamma[ci] * inv_std[ci];
                        for ((d, &gv), &xh) in dx[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&xhat[r]) {
                            *d = if train {
                                k * (gv - dbeta[ci] * inv_m - xh * dgamma[ci] * inv_m)
                            } else {
                                k * gv
                            };
                        }
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&s), dx).unwrap()
            });
            vec![
                dx,
                ctx.needs[1].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
                ctx.needs[2].then(|| ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
            ]
        })
    }

    /// Mean over all elements of `(mask * (pred - target))^2`; `mask` is
    /// `[h, w]` and broadcast over batch and channels.
    pub fn masked_mse(&mut self, pred: Var, target: &ArrayD<F>, mask: &Array2<F>) -> Var {
        let s = self.value(pred).shape();
        assert_eq!(&s[2..], mask.shape(), "masked_mse: mask shape mismatch");
        self.masked_mse_impl(pred, target, mask.iter().map(|&v| v * v).collect(), false)
    }

    /// Like [`Tape::masked_mse`] with one `[h, w]` mask per sample (`masks` is `[n, h, w]`).
    pub fn masked_mse_each(&mut self, pred: Var, target: &ArrayD<F>, masks: &Array3<F>) -> Var {
        let s = self.value(pred).shape();
        assert_eq!(&[s[0], s[2], s[3]], masks.shape(), "masked_mse_each: mask shape mismatch");
        self.masked_mse_impl(pred, target, masks.iter().map(|&v| v * v).collect(), true)
    }

    fn masked_mse_impl(&mut self, pred: Var, target: &ArrayD<F>, m2: Vec<F>, per_sample: bool) -> Var {
        let s = self.value(pred).shape().to_vec();
        assert_eq!(s.as_slice(), target.shape(), "masked_mse: target shape mismatch");
        let plane = s[2] * s[3];
        let sample = s[1] * plane;
        let weight = move |i: usize| {
            if per_sample {
                m2[i / sample * plane + i % plane]
            } else {
                m2[i % plane]
            }
        };
        let count = F::of(self.value(pred).len() as f64);
        let p = self.value(pred).as_slice().unwrap();
        let t = target.as_slice().unwrap();
        let mut total = F::zero();
        let mut diff = vec![F::zero(); p.len()];
        for (i, (d, (&pv, &tv))) in diff.iter_mut().zip(p.iter().zip(t)).enumerate() {
            *d = pv - tv;
            total += weight(i) * *d * *d;
        }
        self.push(scalar(total / count), &[pred], move |ctx| {
            let k = F::of(2.0) * scalar_of(ctx.grad) / count;
            let g: Vec<F> = diff.iter().enumerate().map(|(i, &d)| k * weight(i) * d).collect();
            vec![Some(ArrayD::from_shape_vec(IxDyn(&s), g).unwrap())]
        })
    }

    /// Mean softmax cross entropy of `[n, k]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = as2(self.value(logits)).to_owned();
        let (n, k) = z.dim();
        assert_eq!(labels.len(), n, "cross_entropy: one label per row");
        assert!(labels.iter().all(|&l| l < k), "cross_entropy: label out of range");
        let mut probs = Array2::<F>::zeros((n, k));
        let mut total = F::zero();
        for (i, row) in z.outer_iter().enumerate() {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += lse - row[labels[i]];
            for j in 0..k {
                probs[[i, j]] = (row[j] - mx).exp() / sum;
            }
        }
        let nf = F::of(n as f64);
        let labels = labels.to_vec();
        self.push(scalar(total / nf), &[logits], move |ctx| {
            let k = scalar_of(ctx.grad) / nf;
            let mut g = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                g[[i, l]] -= F::one();
            }
            g.mapv_inplace(|v| v * k);
            vec![Some(g.into_dyn())]
        })
    }

    /// Batch mean of `(w_low - (1 - r))^2 + (w_high - r)^2`; weights are `[n, 1]`.
    pub fn resolution_weight_loss(&mut self, w_low: Var, w_high: Var, r: &[F]) -> Var {
        let lo: Vec<F> = self.value(w_low).iter().copied().collect();
        let hi: Vec<F> = self.value(w_high).iter().copied().collect();
        assert_eq!(lo.len(), r.len());
        assert_eq!(hi.len(), r.len());
        let n = F::of(r.len() as f64);
        let dl: Vec<F> = lo.iter().zip(r).map(|(&w, &r)| w - (F::one() - r)).collect();
        let dh: Vec<F> = hi.iter().zip(r).map(|(&w, &r)| w - r).collect();
        let total: F = dl.iter().chain(&dh).map(|&d| d * d).sum();
        let shape = self.value(w_low).raw_dim();
        self.push(scalar(total / n), &[w_low, w_high], move |ctx| {
            let k = F::of(2.0) * scalar_of(ctx.grad) / n;
            let mk = |d: &[F]| ArrayD::from_shape_vec(shape.clone(), d.iter().map(|&v| k * v).collect()).unwrap();
            vec![ctx.needs[0].then(|| mk(&dl)), ctx.needs[1].then(|| mk(&dh))]
        })
    }

    /// `Σ coef_i * term_i` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        let total: F = terms.iter().map(|&(v, c)| c * scalar_of(self.value(v))).sum();
        let coefs: Vec<F> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(scalar(total), &vars, move |ctx| {
            let g = scalar_of(ctx.grad);
            coefs
                .iter()
                .zip(&ctx.needs)
                .map(|(&c, &need)| need.then(|| scalar(c * g)))
                .collect()
        })
    }

    pub fn scalar_value(&self, v: Var) -> F {
        scalar_of(self.value(v))
    }
}
