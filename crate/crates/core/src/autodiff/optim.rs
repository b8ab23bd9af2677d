//! Adam-type optimizer with decoupled weight decay, plus the step-granular
//! cosine learning-rate schedule with linear warm-up.

use crate::autodiff::tape::Params;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use std::collections::BTreeMap;

/// Anything holding named trainable tensors.
pub trait ParamSet<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    /// Flattens into a named map (used for checkpoints and gradient checks).
    fn to_params(&self) -> Params<T> {
        let mut p = Params::new();
        self.visit(&mut |name, t| p.insert(name, t.clone()));
        p
    }

    /// Assigns tensors from a named map in place. Errors on missing names or
    /// shape mismatches; extra names in `src` are reported too.
    fn assign_from(&mut self, src: &Params<T>) -> Result<()> {
        let mut used = 0usize;
        let mut err: Option<Error> = None;
        self.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match src.get(name) {
                Some(s) if s.dims() == t.dims() => {
                    *t = s.clone();
                    used += 1;
                }
                Some(s) => {
                    err = Some(Error::ShapeMismatch(format!(
                        "param {name}: {:?} vs {:?}",
                        s.dims(),
                        t.dims()
                    )));
                }
                None => {
                    err = Some(Error::InvalidArgument(format!("missing param {name}")));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used != src.len() {
            return Err(Error::InvalidArgument(format!(
                "{} unused tensors in source set",
                src.len() - used
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> ParamSet<T> for Params<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, t) in self.iter() {
            f(name, t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, t) in self.iter_mut() {
            f(name, t);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment accumulators, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One bias-corrected update. Parameters without a gradient entry are left
/// untouched; gradient/parameter shape mismatches are an error.
pub fn adam_step<T: Scalar, P: ParamSet<T>>(
    params: &mut P,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "negative learning rate {lr}"
        )));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let (b1, b2) = (T::of_f64(cfg.beta1), T::of_f64(cfg.beta2));
    let (nb1, nb2) = (T::of_f64(1.0 - cfg.beta1), T::of_f64(1.0 - cfg.beta2));
    let eps = T::of_f64(cfg.eps);
    let lr_t = T::of_f64(lr);
    let wd = T::of_f64(lr * cfg.weight_decay);

    let mut err: Option<Error> = None;
    params.visit_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some(g) = grads.get(name) else { return };
        if g.dims() != p.dims() {
            err = Some(Error::ShapeMismatch(format!(
                "grad {name}: {:?} vs param {:?}",
                g.dims(),
                p.dims()
            )));
            return;
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.dims()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.dims()));
        let (ibc1, ibc2) = (T::of_f64(1.0 / bc1), T::of_f64(1.0 / bc2));
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + nb1 * gi;
            let vi = b2 * v.data()[i] + nb2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi * ibc1;
            let vhat = vi * ibc2;
            let mut pv = p.data()[i];
            pv = pv - wd * pv; // decoupled weight decay
            pv -= lr_t * mhat / (vhat.sqrt() + eps);
            p.data_mut()[i] = pv;
        }
    });
    err.map_or(Ok(()), Err)
}

/// Cosine annealing with linear warm-up, at step granularity.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
