//! Desk-scale training loop: jittered phantoms, per-sample tapes evaluated
//! in parallel, gradient averaging in fixed sample order, AdamW with a
//! warm-up + cosine schedule. Fully deterministic for a given seed.

use crate::autodiff::{adam_step, AdamConfig, AdamState, CosineSchedule, Tape};
use crate::error::{Error, Result};
use crate::kspace::{forward_model, CoilSet, SamplingMask};
use crate::model::{cascade_forward, reconstruct, total_loss, CascadeParams};
use crate::moe::RouteStats;
use crate::numerics::{Scalar, Tensor};
use crate::par;
use crate::phantom_io::shepp_logan;
use std::collections::BTreeMap;

/// Run-level knobs of the training loop.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 2,
            lr: 8e-4,
            min_lr: 0.0,
            warmup_steps: 40,
            weight_decay: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    /// Batch-mean objective (includes the balance term when weighted).
    pub loss: f64,
    /// Batch-mean of the per-layer-mean load-balance value (always logged).
    pub l_bal: f64,
    /// Per-MoE-layer stats, gate mass averaged and counts summed over batch.
    pub stats: Vec<RouteStats>,
}

/// Deterministic stream split for (step, sample) seeds.
fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    base.wrapping_mul(0x9E3779B97F4A7C15)
        ^ a.wrapping_mul(0xBF58476D1CE4E5B9)
        ^ b.wrapping_mul(0x94D049BB133111EB)
}

/// Owns the model, optimizer state, and the fixed acquisition geometry.
pub struct Trainer<T: Scalar> {
    pub params: CascadeParams<T>,
    pub adam: AdamState<T>,
    pub opts: TrainOptions,
    pub mask: SamplingMask,
    pub coils: CoilSet<T>,
    pub step: u64,
    adam_cfg: AdamConfig,
    schedule: CosineSchedule,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        params: CascadeParams<T>,
        opts: TrainOptions,
        mask: SamplingMask,
        coils: CoilSet<T>,
    ) -> Self {
        let schedule = CosineSchedule {
            base_lr: opts.lr,
            min_lr: opts.min_lr,
            warmup_steps: opts.warmup_steps,
            total_steps: opts.steps,
        };
        let adam_cfg = AdamConfig {
            weight_decay: opts.weight_decay,
            ..AdamConfig::default()
        };
        Self {
            params,
            adam: AdamState::new(),
            opts,
            mask,
            coils,
            step: 0,
            adam_cfg,
            schedule,
        }
    }

    /// Phantom seed stream for training (disjoint from the held-out range).
    pub fn train_phantom_seed(&self, step: u64, sample: usize) -> u64 {
        derive_seed(self.opts.seed, step + 1, sample as u64 + 1)
    }

    /// One optimizer step over a fresh jittered batch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let lr = self.schedule.lr_at(step);
        let (h, w) = (self.mask.height, self.mask.width);
        let lambda_bal = if self.params.config.use_moe {
            self.params.config.lambda_bal
        } else {
            0.0
        };

        struct SampleOut<T: Scalar> {
            grads: BTreeMap<String, Tensor<T>>,
            loss: f64,
            l_bal: f64,
            stats: Vec<RouteStats>,
        }

        let params = &self.params;
        let mask = &self.mask;
        let coils = &self.coils;
        let noise_sigma = self.opts.noise_sigma;
        let seed0 = self.opts.seed;

        let outs: Vec<Result<SampleOut<T>>> =
            par::map_indexed(self.opts.batch_size, move |sample| {
                let pseed = derive_seed(seed0, step + 1, sample as u64 + 1);
                let nseed = derive_seed(seed0.wrapping_add(0xA5A5), step + 1, sample as u64 + 1);
                let phantom = shepp_logan::<T>(h, w, pseed)?;
                let acq = forward_model(&phantom.image, mask, coils, noise_sigma, nseed)?;

                let mut tape = Tape::<T>::new();
                let out = cascade_forward(&mut tape, &acq, params, false)?;
                let loss = total_loss(
                    &mut tape,
                    &out.image,
                    &phantom.image,
                    &out.trace.lbal,
                    lambda_bal,
                )?;
                let loss_val = tape.value(loss).item().as_f64();
                if !loss_val.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at step {step}, sample {sample}"
                    )));
                }
                let grads = tape.backward(loss)?;
                let l_bal = if out.trace.stats.is_empty() {
                    0.0
                } else {
                    out.trace.stats.iter().map(|s| s.l_bal).sum::<f64>()
                        / out.trace.stats.len() as f64
                };
                Ok(SampleOut {
                    grads: grads.into_param_map(),
                    loss: loss_val,
                    l_bal,
                    stats: out.trace.stats,
                })
            });

        let mut collected = Vec::with_capacity(outs.len());
        for o in outs {
            collected.push(o?);
        }

        // fixed-order gradient averaging
        let inv_b = T::of_f64(1.0 / collected.len() as f64);
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for s in &collected {
            for (name, g) in &s.grads {
                match grads.get_mut(name) {
                    Some(acc) => acc.axpy(T::one(), g),
                    None => {
                        grads.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        for g in grads.values_mut() {
            *g = g.scale(inv_b);
        }

        adam_step(&mut self.params, &grads, &mut self.adam, &self.adam_cfg, lr)?;
        self.step += 1;

        let loss = collected.iter().map(|s| s.loss).sum::<f64>() / collected.len() as f64;
        let l_bal = collected.iter().map(|s| s.l_bal).sum::<f64>() / collected.len() as f64;
        let stats = aggregate_stats(
            &collected
                .iter()
                .map(|s| s.stats.clone())
                .collect::<Vec<_>>(),
        );
        Ok(StepReport {
            step,
            lr,
            loss,
            l_bal,
            stats,
        })
    }
}

/// Averages gate mass and sums counts across batch members, per layer.
fn aggregate_stats(batch: &[Vec<RouteStats>]) -> Vec<RouteStats> {
    if batch.is_empty() || batch[0].is_empty() {
        return Vec::new();
    }
    let layers = batch[0].len();
    let mut out = Vec::with_capacity(layers);
    for li in 0..layers {
        let n_exp = batch[0][li].p.len();
        let mut p = vec![0.0; n_exp];
        let mut counts = vec![0usize; n_exp];
        let mut madds = 0usize;
        for sample in batch {
            for e in 0..n_exp {
                p[e] += sample[li].p[e];
                counts[e] += sample[li].counts[e];
            }
            madds += sample[li].routed_madds;
        }
        for v in p.iter_mut() {
            *v /= batch.len() as f64;
        }
        let l_bal = n_exp as f64 * p.iter().map(|v| v * v).sum::<f64>();
        out.push(RouteStats {
            p,
            counts,
            l_bal,
            routed_madds: madds,
        });
    }
    out
}

/// Mean reconstruction and zero-filled PSNR over a held-out seed set.
pub fn evaluate_heldout<T: Scalar>(
    params: &CascadeParams<T>,
    mask: &SamplingMask,
    coils: &CoilSet<T>,
    noise_sigma: f64,
    holdout_seeds: &[u64],
) -> Result<(f64, f64)> {
    let (h, w) = (mask.height, mask.width);
    let results: Vec<Result<(f64, f64)>> = par::map_indexed(holdout_seeds.len(), |i| {
        let seed = holdout_seeds[i];
        let phantom = shepp_logan::<T>(h, w, seed)?;
        let acq = forward_model(&phantom.image, mask, coils, noise_sigma, seed ^ 0x5EED)?;
        let gt_mag = phantom.image.magnitude();
        let range = gt_mag.max_abs().as_f64();
        let zf = crate::kspace::zero_filled(&acq)?;
        let zf_psnr = crate::metrics::psnr(&zf.magnitude(), &gt_mag, range)?;
        let (recon, _) = reconstruct(&acq, params, false)?;
        let rec_psnr = crate::metrics::psnr(&recon.magnitude(), &gt_mag, range)?;
        Ok((rec_psnr, zf_psnr))
    });
    let mut rec_sum = 0.0;
    let mut zf_sum = 0.0;
    let n = results.len() as f64;
    for r in results {
        let (rec, zf) = r?;
        rec_sum += rec;
        zf_sum += zf;
    }
    Ok((rec_sum / n, zf_sum / n))
}

/// Held-out phantom seeds, disjoint from any training stream by
/// construction (training seeds are hash-derived, these are small integers).
pub fn holdout_seeds(count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| 7_000_000 + i).collect()
}
