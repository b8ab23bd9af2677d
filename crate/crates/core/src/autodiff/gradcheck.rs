//! Central finite-difference gradient verification (64-bit mode).
//!
//! The checker runs the builder once on a recording tape to obtain
//! reverse-mode gradients, then perturbs every parameter scalar by ±h and
//! re-evaluates the loss, comparing against the symmetric difference
//! quotient. It is exhaustive by design: desk-scale configs keep the
//! parameter counts small enough for that to be cheap.

use crate::autodiff::optim::ParamSet;
use crate::autodiff::tape::{NodeId, Tape};
use crate::error::Result;
use crate::numerics::Tensor;

/// Outcome of a finite-difference sweep.
#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err <= tol,
            "gradient check failed: max rel err {:.3e} > {tol:.1e} at {} ({} scalars checked)",
            self.max_rel_err,
            self.worst,
            self.checked
        );
    }
}

/// Relative error with an absolute floor so finite-difference noise on
/// near-zero gradients does not explode the ratio.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-6)
}

/// Compares reverse-mode gradients of `build`'s scalar loss against central
/// finite differences for every scalar in `params`.
pub fn check_gradients<P, F>(params: &mut P, build: F, h: f64) -> Result<GradCheckReport>
where
    P: ParamSet<f64>,
    F: Fn(&mut Tape<f64>, &P) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let ad: std::collections::BTreeMap<String, Tensor<f64>> =
        grads.iter().map(|(k, v)| (k.clone(), v.clone())).collect();

    let mut names: Vec<(String, usize)> = Vec::new();
    params.visit(&mut |name, t| names.push((name.to_string(), t.len())));

    let eval = |params: &P| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::from("<none>"),
    };

    for (name, len) in &names {
        let Some(g) = ad.get(name) else { continue };
        for i in 0..*len {
            set_offset(params, name, i, h);
            let lp = eval(params)?;
            set_offset(params, name, i, -2.0 * h);
            let lm = eval(params)?;
            set_offset(params, name, i, h); // restore

            let fd = (lp - lm) / (2.0 * h);
            let err = rel_err(g.data()[i], fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{i}] (ad {:.6e}, fd {fd:.6e})", g.data()[i]);
            }
        }
    }
    Ok(report)
}

fn set_offset<P: ParamSet<f64>>(params: &mut P, target: &str, idx: usize, delta: f64) {
    params.visit_mut(&mut |name, t| {
        if name == target {
            t.data_mut()[idx] += delta;
        }
    });
}
