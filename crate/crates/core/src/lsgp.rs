//! Lightweight SE-guided global context path.
//!
//! Channel gate from global average pooling:
//! `z = mean_{H,W}(x)`, `s = sigmoid(W2 relu(W1 z + b1) + b2)`,
//! `out = x ⊙ s + x` with `s` broadcast over the spatial axes.

use crate::autodiff::engine::{Engine, EvalEngine};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use rand::Rng;

/// Two-layer gating network. `w2` starts near zero (scale 0.01) and `b2 = 0`
/// so the path opens at `s ~ 0.5`, i.e. `out ~ 1.5 x`.
#[derive(Clone, Debug)]
pub struct LsgpParams<T> {
    pub channels: usize,
    pub reduction: usize,
    pub w1: Tensor<T>, // [C, C/r]
    pub b1: Tensor<T>, // [C/r]
    pub w2: Tensor<T>, // [C/r, C]
    pub b2: Tensor<T>, // [C]
}

impl<T: Scalar> LsgpParams<T> {
    pub fn init<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidArgument(format!(
                "channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            w1: Tensor::randn(&[channels, hidden], 1.0 / (channels as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, channels], 0.01, rng),
            b2: Tensor::zeros(&[channels]),
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

/// Residual channel-wise modulation `x ⊙ s + x`.
pub fn lsgp_forward<T: Scalar, E: Engine<T>>(
    e: &mut E,
    x: &E::H,
    p: &LsgpParams<T>,
    prefix: &str,
) -> Result<E::H> {
    let (_, _, _, c) = e.value(x).bhwc()?;
    if c != p.channels {
        return Err(Error::ShapeMismatch(format!(
            "lsgp channels {} vs input {c}",
            p.channels
        )));
    }
    let w1 = e.param(&format!("{prefix}.w1"), &p.w1);
    let b1 = e.param(&format!("{prefix}.b1"), &p.b1);
    let w2 = e.param(&format!("{prefix}.w2"), &p.w2);
    let b2 = e.param(&format!("{prefix}.b2"), &p.b2);

    let z = e.mean_hw(x)?; // [B, C]
    let h1 = e.matmul(&z, &w1)?;
    let h1 = e.bias_add(&h1, &b1)?;
    let h1 = e.relu(&h1)?;
    let logits = e.matmul(&h1, &w2)?;
    let logits = e.bias_add(&logits, &b2)?;
    let s = e.sigmoid(&logits)?; // [B, C]
    let gated = e.mul_bc(x, &s)?;
    e.add(&gated, x)
}

/// No-grad convenience wrapper.
pub fn lsgp_forward_eval<T: Scalar>(x: &Tensor<T>, p: &LsgpParams<T>) -> Result<Tensor<T>> {
    let mut ev = EvalEngine::new();
    let xh = ev.constant(x.clone());
    let out = lsgp_forward(&mut ev, &xh, p, "lsgp")?;
    Ok(ev.value(&out).clone())
}
