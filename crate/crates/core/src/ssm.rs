//! Minimal selective state-space token mixer.
//!
//! Per channel `c` and token `t` the recurrence is
//!
//! ```text
//! Abar_t = exp(delta_t * A_c)        (A_c < 0, fixed decay spectrum)
//! h_t    = Abar_t ⊙ h_{t-1} + delta_t * B_t * x_t,   h_0 = 0
//! y_t    = <C_t, h_t>
//! ```
//!
//! followed by a multiplicative SiLU gate. `delta` (positive via softplus),
//! `B_t` and `C_t` are linear projections of the input token, so the state
//! transition is input-dependent. The scan is strictly causal and evaluated
//! left to right in time linear in the sequence length.
//!
//! State dim, gate form, and the decay ladder are toolkit defaults; they are
//! deliberately small and fully documented here rather than tuned.

use crate::autodiff::engine::{Engine, EvalEngine};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use rand::Rng;

/// Parameters of one selective-scan mixer over `channels`-wide tokens.
///
/// `a` holds the negative-real diagonal state matrix per channel; it is a
/// fixed buffer (ladder `-1, -2, ..., -N`), not a trainable parameter, which
/// keeps the decay invariant `A < 0` true by construction.
#[derive(Clone, Debug)]
pub struct SsmParams<T> {
    pub state_dim: usize,
    pub channels: usize,
    pub a: Tensor<T>,       // [C, N], entries < 0
    pub w_delta: Tensor<T>, // [C, C]
    pub b_delta: Tensor<T>, // [C]
    pub w_b: Tensor<T>,     // [C, N]
    pub b_b: Tensor<T>,     // [N]
    pub w_c: Tensor<T>,     // [C, N]
    pub b_c: Tensor<T>,     // [N]
    pub w_gate: Tensor<T>,  // [C, C]
    pub b_gate: Tensor<T>,  // [C]
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
}

impl<T: Scalar> SsmParams<T> {
    pub fn init<R: Rng>(channels: usize, state_dim: usize, rng: &mut R) -> Self {
        let mut a = Tensor::zeros(&[channels, state_dim]);
        for c in 0..channels {
            for n in 0..state_dim {
                a.data_mut()[c * state_dim + n] = T::of_f64(-((n + 1) as f64));
            }
        }
        let proj_std = 1.0 / (channels as f64).sqrt();
        // softplus(b_delta) = 0.5 at init
        let b_delta0 = (0.5f64.exp() - 1.0).ln();
        Self {
            state_dim,
            channels,
            a,
            w_delta: Tensor::randn(&[channels, channels], 0.01, rng),
            b_delta: Tensor::full(&[channels], T::of_f64(b_delta0)),
            w_b: Tensor::randn(&[channels, state_dim], proj_std, rng),
            b_b: Tensor::zeros(&[state_dim]),
            w_c: Tensor::randn(&[channels, state_dim], proj_std, rng),
            b_c: Tensor::zeros(&[state_dim]),
            w_gate: Tensor::randn(&[channels, channels], 0.01, rng),
            b_gate: Tensor::zeros(&[channels]),
            ln_gamma: Tensor::full(&[channels], T::one()),
            ln_beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.w_delta"), &self.w_delta);
        f(&format!("{prefix}.b_delta"), &self.b_delta);
        f(&format!("{prefix}.w_b"), &self.w_b);
        f(&format!("{prefix}.b_b"), &self.b_b);
        f(&format!("{prefix}.w_c"), &self.w_c);
        f(&format!("{prefix}.b_c"), &self.b_c);
        f(&format!("{prefix}.w_gate"), &self.w_gate);
        f(&format!("{prefix}.b_gate"), &self.b_gate);
        f(&format!("{prefix}.ln_gamma"), &self.ln_gamma);
        f(&format!("{prefix}.ln_beta"), &self.ln_beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.w_delta"), &mut self.w_delta);
        f(&format!("{prefix}.b_delta"), &mut self.b_delta);
        f(&format!("{prefix}.w_b"), &mut self.w_b);
        f(&format!("{prefix}.b_b"), &mut self.b_b);
        f(&format!("{prefix}.w_c"), &mut self.w_c);
        f(&format!("{prefix}.b_c"), &mut self.b_c);
        f(&format!("{prefix}.w_gate"), &mut self.w_gate);
        f(&format!("{prefix}.b_gate"), &mut self.b_gate);
        f(&format!("{prefix}.ln_gamma"), &mut self.ln_gamma);
        f(&format!("{prefix}.ln_beta"), &mut self.ln_beta);
    }
}

/// Raw scan recurrence and its adjoint.
pub mod kernel {
    use super::*;
    use crate::autodiff::tape::BackwardRule;
    use crate::par;

    fn shapes<T: Scalar>(
        x: &Tensor<T>,
        delta: &Tensor<T>,
        b_seq: &Tensor<T>,
        c_seq: &Tensor<T>,
        a: &Tensor<T>,
    ) -> Result<(usize, usize, usize, usize)> {
        if x.rank() < 2 {
            return Err(Error::ShapeMismatch(
                "scan input must be at least [L,C]".into(),
            ));
        }
        let c = *x.dims().last().unwrap();
        let batch = if x.rank() >= 3 { x.dims()[0] } else { 1 };
        let l = x.len() / (batch * c);
        if a.dims().len() != 2 || a.dims()[0] != c {
            return Err(Error::ShapeMismatch(format!(
                "state matrix {:?} vs channels {c}",
                a.dims()
            )));
        }
        let n = a.dims()[1];
        if delta.dims() != x.dims() {
            return Err(Error::ShapeMismatch("delta dims must match input".into()));
        }
        if *b_seq.dims().last().unwrap() != n
            || *c_seq.dims().last().unwrap() != n
            || b_seq.len() != batch * l * n
            || c_seq.len() != batch * l * n
        {
            return Err(Error::ShapeMismatch(
                "B/C projections must be [.., N]".into(),
            ));
        }
        Ok((batch, l, c, n))
    }

    /// Forward scan. Returns the output and all hidden states (`[B,L,C,N]`
    /// flattened), which the backward pass consumes.
    pub fn scan_forward<T: Scalar>(
        x: &Tensor<T>,
        delta: &Tensor<T>,
        b_seq: &Tensor<T>,
        c_seq: &Tensor<T>,
        a: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let (batch, l, c, n) = shapes(x, delta, b_seq, c_seq, a)?;
        // One task per (batch, channel) pair; the scan itself is sequential in l.
        let cols = par::map_indexed(batch * c, |pair| {
            let (bi, ci) = (pair / c, pair % c);
            let mut h = vec![T::zero(); n];
            let mut h_col = vec![T::zero(); l * n];
            let mut y_col = vec![T::zero(); l];
            for li in 0..l {
                let tok = (bi * l + li) * c + ci;
                let d = delta.data()[tok];
                let xv = x.data()[tok];
                let bn = &b_seq.data()[(bi * l + li) * n..(bi * l + li + 1) * n];
                let cn = &c_seq.data()[(bi * l + li) * n..(bi * l + li + 1) * n];
                let mut y = T::zero();
                for ni in 0..n {
                    let abar = (d * a.data()[ci * n + ni]).exp();
                    h[ni] = abar * h[ni] + d * bn[ni] * xv;
                    h_col[li * n + ni] = h[ni];
                    y += cn[ni] * h[ni];
                }
                y_col[li] = y;
            }
            (h_col, y_col)
        });

        let mut y = Tensor::zeros(x.dims());
        let mut h_all = vec![T::zero(); batch * l * c * n];
        for (pair, (h_col, y_col)) in cols.into_iter().enumerate() {
            let (bi, ci) = (pair / c, pair % c);
            for li in 0..l {
                y.data_mut()[(bi * l + li) * c + ci] = y_col[li];
                let base = ((bi * l + li) * c + ci) * n;
                h_all[base..base + n].copy_from_slice(&h_col[li * n..(li + 1) * n]);
            }
        }
        Ok((y, h_all))
    }

    /// Adjoint of the recurrence, propagating the output cotangent to the
    /// input, delta, and the B/C projections.
    #[allow(clippy::too_many_arguments)]
    pub fn scan_backward<T: Scalar>(
        grad_y: &Tensor<T>,
        x: &Tensor<T>,
        delta: &Tensor<T>,
        b_seq: &Tensor<T>,
        c_seq: &Tensor<T>,
        a: &Tensor<T>,
        h_all: &[T],
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
        let (batch, l, c, n) = shapes(x, delta, b_seq, c_seq, a).expect("checked in forward");
        let cols = par::map_indexed(batch * c, |pair| {
            let (bi, ci) = (pair / c, pair % c);
            let mut hbar = vec![T::zero(); n];
            let mut x_col = vec![T::zero(); l];
            let mut d_col = vec![T::zero(); l];
            let mut b_part = vec![T::zero(); l * n];
            let mut c_part = vec![T::zero(); l * n];
            for li in (0..l).rev() {
                let tok = (bi * l + li) * c + ci;
                let gy = grad_y.data()[tok];
                let d = delta.data()[tok];
                let xv = x.data()[tok];
                let bn = &b_seq.data()[(bi * l + li) * n..(bi * l + li + 1) * n];
                let cn = &c_seq.data()[(bi * l + li) * n..(bi * l + li + 1) * n];
                let h_now = &h_all[tok * n..tok * n + n];
                let mut dx = T::zero();
                let mut dd = T::zero();
                for ni in 0..n {
                    // y_t = <C_t, h_t>
                    c_part[li * n + ni] += gy * h_now[ni];
                    hbar[ni] += cn[ni] * gy;
                    let an = a.data()[ci * n + ni];
                    let abar = (d * an).exp();
                    let h_prev = if li > 0 {
                        h_all[((bi * l + li - 1) * c + ci) * n + ni]
                    } else {
                        T::zero()
                    };
                    let hb = hbar[ni];
                    dd += hb * (an * abar * h_prev + bn[ni] * xv);
                    dx += hb * d * bn[ni];
                    b_part[li * n + ni] += hb * d * xv;
                    // propagate through h_t = abar * h_{t-1} + ...
                    hbar[ni] = abar * hb;
                }
                x_col[li] = dx;
                d_col[li] = dd;
            }
            (x_col, d_col, b_part, c_part)
        });

        let mut gx = Tensor::zeros(x.dims());
        let mut gd = Tensor::zeros(delta.dims());
        let mut gb = Tensor::zeros(b_seq.dims());
        let mut gc = Tensor::zeros(c_seq.dims());
        for (pair, (x_col, d_col, b_part, c_part)) in cols.into_iter().enumerate() {
            let (bi, ci) = (pair / c, pair % c);
            for li in 0..l {
                gx.data_mut()[(bi * l + li) * c + ci] = x_col[li];
                gd.data_mut()[(bi * l + li) * c + ci] = d_col[li];
                let base = (bi * l + li) * n;
                for ni in 0..n {
                    gb.data_mut()[base + ni] += b_part[li * n + ni];
                    gc.data_mut()[base + ni] += c_part[li * n + ni];
                }
            }
        }
        (gx, gd, gb, gc)
    }

    /// Multiply-adds performed by one forward scan.
    pub fn scan_madds(batch: usize, l: usize, c: usize, n: usize) -> usize {
        // per (token, channel, state): decay update (2) + drive (1) + readout (1)
        batch * l * c * n * 4
    }

    pub struct ScanRule<T: Scalar> {
        pub a: Tensor<T>,
        pub h_all: Vec<T>,
    }

    impl<T: Scalar> BackwardRule<T> for ScanRule<T> {
        fn backward(
            &self,
            grad: &Tensor<T>,
            parents: &[&Tensor<T>],
            _output: &Tensor<T>,
        ) -> Vec<Tensor<T>> {
            let (gx, gd, gb, gc) = scan_backward(
                grad,
                parents[0],
                parents[1],
                parents[2],
                parents[3],
                &self.a,
                &self.h_all,
            );
            vec![gx, gd, gb, gc]
        }
    }
}

/// Full selective-scan op: input-dependent projections, causal recurrence,
/// SiLU gate. `seq` is `[L,C]` or `[B,L,C]`.
pub fn selective_scan<T: Scalar, E: Engine<T>>(
    e: &mut E,
    seq: &E::H,
    p: &SsmParams<T>,
    prefix: &str,
) -> Result<E::H> {
    let w_delta = e.param(&format!("{prefix}.w_delta"), &p.w_delta);
    let b_delta = e.param(&format!("{prefix}.b_delta"), &p.b_delta);
    let w_b = e.param(&format!("{prefix}.w_b"), &p.w_b);
    let b_b = e.param(&format!("{prefix}.b_b"), &p.b_b);
    let w_c = e.param(&format!("{prefix}.w_c"), &p.w_c);
    let b_c = e.param(&format!("{prefix}.b_c"), &p.b_c);
    let w_gate = e.param(&format!("{prefix}.w_gate"), &p.w_gate);
    let b_gate = e.param(&format!("{prefix}.b_gate"), &p.b_gate);

    let draw = e.matmul(seq, &w_delta)?;
    let draw = e.bias_add(&draw, &b_delta)?;
    let delta = e.softplus(&draw)?;
    let bs = e.matmul(seq, &w_b)?;
    let bs = e.bias_add(&bs, &b_b)?;
    let cs = e.matmul(seq, &w_c)?;
    let cs = e.bias_add(&cs, &b_c)?;
    let y = e.selective_scan(seq, &delta, &bs, &cs, &p.a)?;
    let graw = e.matmul(seq, &w_gate)?;
    let graw = e.bias_add(&graw, &b_gate)?;
    let gate = e.silu(&graw)?;
    e.mul(&y, &gate)
}

/// Convenience no-grad evaluation of [`selective_scan`].
pub fn selective_scan_eval<T: Scalar>(seq: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    let mut ev = EvalEngine::new();
    let h = ev.constant(seq.clone());
    let out = selective_scan(&mut ev, &h, p, "ssm")?;
    Ok(ev.value(&out).clone())
}

/// Frequency-aware token mixer block: patch-embed (raster order), layer
/// norm, causal selective scan with gate, residual add, un-patch.
///
/// `p` operates on tokens of width `channels * patch^2`.
pub fn ssm_mixer_block<T: Scalar, E: Engine<T>>(
    e: &mut E,
    x: &E::H,
    p: &SsmParams<T>,
    patch: usize,
    prefix: &str,
) -> Result<E::H> {
    let tok = e.space_to_depth(x, patch)?;
    let gamma = e.param(&format!("{prefix}.ln_gamma"), &p.ln_gamma);
    let beta = e.param(&format!("{prefix}.ln_beta"), &p.ln_beta);
    let ln = e.layer_norm(&tok, &gamma, &beta, 1e-5)?;
    let y = selective_scan(e, &ln, p, prefix)?;
    let out_tok = e.add(&tok, &y)?;
    e.depth_to_space(&out_tok, patch)
}

/// Convenience no-grad evaluation of [`ssm_mixer_block`].
pub fn ssm_mixer_block_eval<T: Scalar>(
    x: &Tensor<T>,
    p: &SsmParams<T>,
    patch: usize,
) -> Result<Tensor<T>> {
    let mut ev = EvalEngine::new();
    let h = ev.constant(x.clone());
    let out = ssm_mixer_block(&mut ev, &h, p, patch, "blk")?;
    Ok(ev.value(&out).clone())
}
