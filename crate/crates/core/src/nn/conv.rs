//! 2-D convolutions lowered to one GEMM per sample through im2col.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::{Real, Tape, Var};

pub fn conv2d_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel larger than padded input");
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose2d_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Geometry of a single-sample convolution `[c, h, w] -> [_, ho, wo]`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Output columns `[lo, hi)` whose input column `ox*s + kj - p` lies inside the image.
    fn valid_ox(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.s, self.p);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.w + p <= kj {
            0
        } else {
            ((self.w + p - kj - 1) / s + 1).min(self.wo)
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(row, oy, iy)` for every patch row and output row that reads input row `iy`.
    fn for_rows(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    for oy in 0..self.ho {
                        let iy = (oy * self.s + ki) as isize - self.p as isize;
                        if iy >= 0 && (iy as usize) < self.h {
                            f(row, ci, oy, iy as usize);
                        }
                    }
                }
            }
        }
    }
}

/// `x` is one `[c, h, w]` sample; fills columns `off..off + ho*wo` of the
/// `[c*k*k, ld]` patch matrix. Entries that fall in the padding are left
/// untouched, so `out` must start zeroed and only ever hold patches of the
/// same geometry.
fn im2col<F: Real>(x: &[F], g: Geom, out: &mut [F], ld: usize, off: usize) {
    let plane = g.h * g.w;
    g.for_rows(|row, ci, oy, iy| {
        let kj = row % g.k;
        let (lo, hi) = g.valid_ox(kj);
        let srow = &x[ci * plane + iy * g.w..ci * plane + (iy + 1) * g.w];
        let start = row * ld + off + oy * g.wo;
        let drow = &mut out[start..start + g.wo];
        if g.s == 1 {
            let shift = kj as isize - g.p as isize;
            let a = (lo as isize + shift) as usize;
            let b = (hi as isize + shift) as usize;
            drow[lo..hi].copy_from_slice(&srow[a..b]);
        } else {
            for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                *d = srow[ox * g.s + kj - g.p];
            }
        }
    });
}

/// Adjoint of [`im2col`]: accumulates patch columns into a `[c, h, w]` sample.
fn col2im<F: Real>(col: &[F], g: Geom, out: &mut [F], ld: usize, off: usize) {
    let plane = g.h * g.w;
    g.for_rows(|row, ci, oy, iy| {
        let kj = row % g.k;
        let (lo, hi) = g.valid_ox(kj);
        let drow = &mut out[ci * plane + iy * g.w..ci * plane + (iy + 1) * g.w];
        let start = row * ld + off + oy * g.wo;
        let srow = &col[start..start + g.wo];
        if g.s == 1 {
            let a = (lo + kj) - g.p;
            for (d, &v) in drow[a..a + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                *d += v;
            }
        } else {
            for ox in lo..hi {
                drow[ox * g.s + kj - g.p] += srow[ox];
            }
        }
    });
}

fn add_bias<F: Real>(y: &mut [F], bias: &[F], plane: usize) {
    for (chunk, i) in y.chunks_mut(plane).zip(0..) {
        let b = bias[i % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<F: Real>(x: &[F], c: usize, plane: usize) -> ArrayD<F> {
    let mut out = ArrayD::zeros(IxDyn(&[c]));
    for (chunk, i) in x.chunks(plane).zip(0..) {
        out[i % c] += chunk.iter().copied().sum::<F>();
    }
    out
}

fn dims4<F>(a: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected an NCHW tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn slice<F>(a: &ArrayD<F>) -> &[F] {
    a.as_slice().expect("tape tensors are contiguous")
}

fn mat<F>(data: &[F], rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), data).unwrap()
}

fn mat_mut<F>(data: &mut [F], rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), data).unwrap()
}

/// Samples per GEMM: small feature maps are batched so each product has
/// a few thousand columns.
fn group_size(n: usize, cols: usize) -> usize {
    (256 / cols).clamp(1, n)
}

/// Copies samples `n0..n0+m` of an `[n, ch, cols]` buffer into a `[ch, m*cols]` matrix.
fn gather<F: Real>(src: &[F], ch: usize, cols: usize, n0: usize, m: usize, dst: &mut [F]) {
    let ld = m * cols;
    for j in 0..m {
        for c in 0..ch {
            let s = ((n0 + j) * ch + c) * cols;
            dst[c * ld + j * cols..c * ld + (j + 1) * cols].copy_from_slice(&src[s..s + cols]);
        }
    }
}

/// Inverse of [`gather`].
fn scatter<F: Real>(src: &[F], ch: usize, cols: usize, n0: usize, m: usize, dst: &mut [F]) {
    let ld = m * cols;
    for j in 0..m {
        for c in 0..ch {
            let d = ((n0 + j) * ch + c) * cols;
            dst[d..d + cols].copy_from_slice(&src[c * ld + j * cols..c * ld + (j + 1) * cols]);
        }
    }
}

/// Iterates `(first sample, group size)` and hands out a patch buffer that
/// is re-zeroed whenever the group size changes.
fn groups(n: usize, gs: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(gs).map(move |n0| (n0, gs.min(n - n0)))
}

impl<F: Real> Tape<F> {
    /// Cross-correlation with zero padding. `weight` is `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let (o, ci, k, k2) = dims4(self.value(weight));
        assert_eq!(ci, c, "conv2d: input has {c} channels, weight expects {ci}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let g = Geom {
            c,
            h,
            w,
            k,
            s: stride,
            p: pad,
            ho: conv2d_out_size(h, k, stride, pad),
            wo: conv2d_out_size(w, k, stride, pad),
        };
        let (rows, cols) = (g.rows(), g.cols());
        let gs = group_size(n, cols);
        let xs = slice(self.value(x));
        let wmat = mat(slice(self.value(weight)), o, rows);
        let mut y = vec![F::zero(); n * o * cols];
        let mut col = Vec::new();
        let mut yg = vec![F::zero(); o * gs * cols];
        for (n0, m) in groups(n, gs) {
            let ld = m * cols;
            if col.len() != rows * ld {
                col = vec![F::zero(); rows * ld];
            }
            for j in 0..m {
                im2col(&xs[(n0 + j) * g.in_len()..(n0 + j + 1) * g.in_len()], g, &mut col, ld, j * cols);
            }
            if m == 1 {
                let yn = &mut y[n0 * o * cols..(n0 + 1) * o * cols];
                general_mat_mul(F::one(), &wmat, &mat(&col, rows, ld), F::zero(), &mut mat_mut(yn, o, ld));
            } else {
                general_mat_mul(F::one(), &wmat, &mat(&col, rows, ld), F::zero(), &mut mat_mut(&mut yg[..o * ld], o, ld));
                scatter(&yg, o, cols, n0, m, &mut y);
            }
        }
        if let Some(b) = bias {
            add_bias(&mut y, slice(self.value(b)), cols);
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[n, o, g.ho, g.wo]), y).unwrap();

        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(y, &parents, move |ctx| {
            let gy = slice(ctx.grad);
            let xs = slice(ctx.inputs[0]);
            let wmat = mat(slice(ctx.inputs[1]), o, rows);
            let mut dx = ctx.needs[0].then(|| vec![F::zero(); n * g.in_len()]);
            let mut dw = ctx.needs[1].then(|| vec![F::zero(); o * rows]);
            let mut col = Vec::new();
            let mut dcol = Vec::new();
            let mut gyg = vec![F::zero(); o * gs * cols];
            for (n0, m) in groups(n, gs) {
                let ld = m * cols;
                let gyv = if m == 1 {
                    mat(&gy[n0 * o * cols..(n0 + 1) * o * cols], o, ld)
                } else {
                    gather(gy, o, cols, n0, m, &mut gyg);
                    mat(&gyg[..o * ld], o, ld)
                };
                if let Some(dw) = dw.as_mut() {
                    if col.len() != rows * ld {
                        col = vec![F::zero(); rows * ld];
                    }
                    for j in 0..m {
                        im2col(&xs[(n0 + j) * g.in_len()..(n0 + j + 1) * g.in_len()], g, &mut col, ld, j * cols);
                    }
                    let colv = mat(&col, rows, ld);
                    general_mat_mul(F::one(), &gyv, &colv.t(), F::one(), &mut mat_mut(dw, o, rows));
                }
                if let Some(dx) = dx.as_mut() {
                    dcol.resize(rows * ld, F::zero());
                    general_mat_mul(F::one(), &wmat.t(), &gyv, F::zero(), &mut mat_mut(&mut dcol, rows, ld));
                    for j in 0..m {
                        let s = (n0 + j) * g.in_len();
                        col2im(&dcol, g, &mut dx[s..s + g.in_len()], ld, j * cols);
                    }
                }
            }
            let mut out = vec![
                dx.map(|d| ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), d).unwrap()),
                dw.map(|d| ArrayD::from_shape_vec(IxDyn(&[o, c, k, k]), d).unwrap()),
            ];
            if ctx.inputs.len() == 3 {
                out.push(ctx.needs[2].then(|| channel_sums(gy, o, cols)));
            }
            out
        })
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`]). `weight` is `[in, out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (n, cin, h, w) = dims4(self.value(x));
        let (wi, cout, k, k2) = dims4(self.value(weight));
        assert_eq!(wi, cin, "conv_transpose2d: input has {cin} channels, weight expects {wi}");
        assert_eq!(k, k2, "conv_transpose2d: square kernels only");
        let ho = conv_transpose2d_out_size(h, k, stride, pad);
        let wo = conv_transpose2d_out_size(w, k, stride, pad);
        // Geometry of the equivalent forward convolution mapping (ho, wo) -> (h, w).
        let g = Geom {
            c: cout,
            h: ho,
            w: wo,
            k,
            s: stride,
            p: pad,
            ho: h,
            wo: w,
        };
        debug_assert_eq!(conv2d_out_size(ho, k, stride, pad), h);
        let (rows, cols) = (g.rows(), g.cols());
        let gs = group_size(n, cols);
        let xs = slice(self.value(x));
        let wmat = mat(slice(self.value(weight)), cin, rows);
        let mut y = vec![F::zero(); n * g.in_len()];
        let mut col = vec![F::zero(); rows * gs * cols];
        let mut xg = vec![F::zero(); cin * gs * cols];
        for (n0, m) in groups(n, gs) {
            let ld = m * cols;
            let xv = if m == 1 {
                mat(&xs[n0 * cin * cols..(n0 + 1) * cin * cols], cin, ld)
            } else {
                gather(xs, cin, cols, n0, m, &mut xg);
                mat(&xg[..cin * ld], cin, ld)
            };
            general_mat_mul(F::one(), &wmat.t(), &xv, F::zero(), &mut mat_mut(&mut col[..rows * ld], rows, ld));
            for j in 0..m {
                let s = (n0 + j) * g.in_len();
                col2im(&col, g, &mut y[s..s + g.in_len()], ld, j * cols);
            }
        }
        if let Some(b) = bias {
            add_bias(&mut y, slice(self.value(b)), ho * wo);
        }
        let y = ArrayD::from_shape_vec(IxDyn(&[n, cout, ho, wo]), y).unwrap();

        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(y, &parents, move |ctx| {
            let gy = slice(ctx.grad);
            let xs = slice(ctx.inputs[0]);
            let wmat = mat(slice(ctx.inputs[1]), cin, rows);
            let mut dx = ctx.needs[0].then(|| vec![F::zero(); n * cin * cols]);
            let mut dw = ctx.needs[1].then(|| vec![F::zero(); cin * rows]);
            let mut gcol = Vec::new();
            let mut buf = vec![F::zero(); cin * gs * cols];
            for (n0, m) in groups(n, gs) {
                let ld = m * cols;
                if gcol.len() != rows * ld {
                    gcol = vec![F::zero(); rows * ld];
                }
                for j in 0..m {
                    let s = (n0 + j) * g.in_len();
                    im2col(&gy[s..s + g.in_len()], g, &mut gcol, ld, j * cols);
                }
                let gv = mat(&gcol, rows, ld);
                if let Some(dw) = dw.as_mut() {
                    let xv = if m == 1 {
                        mat(&xs[n0 * cin * cols..(n0 + 1) * cin * cols], cin, ld)
                    } else {
                        gather(xs, cin, cols, n0, m, &mut buf);
                        mat(&buf[..cin * ld], cin, ld)
                    };
                    general_mat_mul(F::one(), &xv, &gv.t(), F::one(), &mut mat_mut(dw, cin, rows));
                }
                if let Some(dx) = dx.as_mut() {
                    if m == 1 {
                        let dxn = &mut dx[n0 * cin * cols..(n0 + 1) * cin * cols];
                        general_mat_mul(F::one(), &wmat, &gv, F::zero(), &mut mat_mut(dxn, cin, ld));
                    } else {
                        general_mat_mul(F::one(), &wmat, &gv, F::zero(), &mut mat_mut(&mut buf[..cin * ld], cin, ld));
                        scatter(&buf, cin, cols, n0, m, dx);
                    }
                }
            }
            let mut out = vec![
                dx.map(|d| ArrayD::from_shape_vec(IxDyn(&[n, cin, h, w]), d).unwrap()),
                dw.map(|d| ArrayD::from_shape_vec(IxDyn(&[cin, cout, k, k]), d).unwrap()),
            ];
            if ctx.inputs.len() == 3 {
                out.push(ctx.needs[2].then(|| channel_sums(gy, cout, ho * wo)));
            }
            out
        })
    }
}
