//! Minimal reverse-mode differentiation over NCHW tensors.
//!
//! Networks record their forward pass on a [`Tape`]; parameters live in a
//! [`ParamStore`] and enter the tape as leaves. Everything is generic over
//! [`Real`] so the same network code runs in `f32` for training and in `f64`
//! for finite-difference gradient checks.

mod conv;
pub mod init;
mod ops;
pub mod optim;
mod params;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use conv::{conv2d_out_size, conv_transpose2d_out_size};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tape::{BackCtx, Gradients, Mode, Tape, Var};

pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to every Real")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Stacks `[c, h, w]` arrays of equal shape into an `[n, c, h, w]` batch.
pub fn stack_chw<F: Real>(items: &[&ndarray::Array3<f64>]) -> ndarray::ArrayD<F> {
    assert!(!items.is_empty(), "stack_chw: empty batch");
    let (c, h, w) = items[0].dim();
    let mut out = Vec::with_capacity(items.len() * c * h * w);
    for a in items {
        assert_eq!(a.dim(), (c, h, w), "stack_chw: ragged batch");
        out.extend(a.iter().map(|&v| F::of(v)));
    }
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[items.len(), c, h, w]), out).unwrap()
}

/// Splits an `[n, c, h, w]` batch back into `f64` samples.
pub fn unstack_chw<F: Real>(batch: &ndarray::ArrayD<F>) -> Vec<ndarray::Array3<f64>> {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    batch
        .outer_iter()
        .map(|a| {
            let v = a.iter().map(|x| x.to_f64().unwrap()).collect();
            ndarray::Array3::from_shape_vec((c, h, w), v).unwrap()
        })
        .collect()
}
