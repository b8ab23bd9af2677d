//! Acquisition physics: undersampling masks, simulated coil sensitivities,
//! the multi-coil forward/adjoint operators, and the data-consistency update
//! of the unrolled pipeline.
//!
//! The forward model is `y_c = M ⊙ (F(S_c ⊙ x) + n_c)` with unitary centered
//! DFT `F`, mask `M`, and per-coil sensitivities normalized so that
//! `Σ_c |S_c|² = 1` at every pixel. Noise is applied to the sampled entries
//! only, keeping unsampled k-space exactly zero.

use crate::error::{Error, Result};
use crate::numerics::{dft2_centered, ComplexImage, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Mask families used across the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Equispaced,
    Random,
    Radial,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Equispaced => "equispaced",
            MaskKind::Random => "random",
            MaskKind::Radial => "radial",
        }
    }
}

/// Boolean k-space selection pattern. Cartesian kinds are column-constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub height: usize,
    pub width: usize,
    pub kind: MaskKind,
    pub keep: Vec<bool>,
    pub af: usize,
    pub center_fraction: f64,
    /// Radial only; zero for Cartesian kinds.
    pub spokes: usize,
}

impl SamplingMask {
    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.count() as f64 / (self.height * self.width) as f64
    }

    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.width + c]
    }

    /// 0/1 plane for arithmetic and serialization.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .keep
            .iter()
            .map(|&k| if k { T::one() } else { T::zero() })
            .collect();
        Tensor::new(vec![self.height, self.width], data).expect("mask dims")
    }
}

/// Spoke count convention for radial masks: 32 spokes at 4x, 16 at 8x.
pub fn radial_spokes_for_af(af: usize) -> usize {
    (128 / af.max(1)).max(1)
}

/// Golden angle in radians (~111.246 degrees).
const GOLDEN_ANGLE: f64 = std::f64::consts::PI * 0.6180339887498949;

/// Builds a sampling mask.
///
/// * equispaced — fully sampled center band of `round(w*cf)` columns plus
///   every `af`-th remaining column (offset seeded); the band's excess over
///   the `1/af` budget is deliberate.
/// * random — center band plus Bernoulli columns calibrated so the expected
///   total sampled fraction is `1/af`.
/// * radial — golden-angle spokes rasterized (nearest neighbor) through the
///   grid center; `spokes == 0` picks the acceleration convention above.
pub fn make_mask(
    kind: MaskKind,
    h: usize,
    w: usize,
    af: usize,
    center_fraction: f64,
    spokes: usize,
    seed: u64,
) -> Result<SamplingMask> {
    if h == 0 || w == 0 || af == 0 {
        return Err(Error::InvalidArgument(
            "mask extents and af must be >= 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&center_fraction) {
        return Err(Error::InvalidArgument(format!(
            "center fraction {center_fraction} outside [0,1]"
        )));
    }
    let mut keep = vec![false; h * w];
    let num_low = (w as f64 * center_fraction).round() as usize;
    let band_start = (w - num_low) / 2;
    let mut spokes_out = 0;

    match kind {
        MaskKind::Equispaced | MaskKind::Random => {
            let budget = w as f64 / af as f64;
            if num_low as f64 > budget {
                return Err(Error::InvalidArgument(format!(
                    "impossible budget: center band {num_low} columns exceeds w/af = {budget:.1}"
                )));
            }
            let mut cols = vec![false; w];
            for c in band_start..band_start + num_low {
                cols[c] = true;
            }
            match kind {
                MaskKind::Equispaced => {
                    let offset = (seed % af as u64) as usize;
                    let mut i = 0usize;
                    for (c, col) in cols.iter_mut().enumerate() {
                        if c >= band_start && c < band_start + num_low {
                            continue;
                        }
                        if i % af == offset {
                            *col = true;
                        }
                        i += 1;
                    }
                }
                MaskKind::Random => {
                    let remaining = w - num_low;
                    let p = ((budget - num_low as f64) / remaining as f64).clamp(0.0, 1.0);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    for (c, col) in cols.iter_mut().enumerate() {
                        if c >= band_start && c < band_start + num_low {
                            continue;
                        }
                        if rng.gen::<f64>() < p {
                            *col = true;
                        }
                    }
                }
                MaskKind::Radial => unreachable!(),
            }
            for r in 0..h {
                for c in 0..w {
                    keep[r * w + c] = cols[c];
                }
            }
        }
        MaskKind::Radial => {
            spokes_out = if spokes == 0 {
                radial_spokes_for_af(af)
            } else {
                spokes
            };
            let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
            let radius = ((h * h + w * w) as f64).sqrt() / 2.0 + 1.0;
            let steps = (radius * 4.0) as i64;
            for s in 0..spokes_out {
                let theta = s as f64 * GOLDEN_ANGLE;
                let (dy, dx) = (theta.sin(), theta.cos());
                for t in -steps..=steps {
                    let tt = t as f64 * radius / steps as f64;
                    let y = (cy + tt * dy).round();
                    let x = (cx + tt * dx).round();
                    if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                        keep[y as usize * w + x as usize] = true;
                    }
                }
            }
        }
    }

    if !keep.iter().any(|&k| k) {
        return Err(Error::InvalidArgument("mask selects no samples".into()));
    }
    Ok(SamplingMask {
        height: h,
        width: w,
        kind,
        keep,
        af,
        center_fraction,
        spokes: spokes_out,
    })
}

/// Normalized coil sensitivity maps: `Σ_c |S_c|² = 1` pixelwise.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSet<T> {
    maps: Vec<ComplexImage<T>>,
}

impl<T: Scalar> CoilSet<T> {
    pub fn count(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[ComplexImage<T>] {
        &self.maps
    }

    pub fn from_maps_unchecked(maps: Vec<ComplexImage<T>>) -> Self {
        Self { maps }
    }
}

/// Smooth complex Gaussian-lobe sensitivity profiles centered on the image
/// border at equal angles, normalized pixelwise.
pub fn simulate_coils<T: Scalar>(
    h: usize,
    w: usize,
    count: usize,
    seed: u64,
) -> Result<CoilSet<T>> {
    if count == 0 {
        return Err(Error::InvalidArgument("coil count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = 0.6 * h.max(w) as f64;
    let mut maps = Vec::with_capacity(count);
    for ci in 0..count {
        let jitter: f64 = rng.gen_range(-0.1..0.1);
        let theta = 2.0 * std::f64::consts::PI * ci as f64 / count as f64 + jitter;
        let (cy, cx) = (
            h as f64 / 2.0 * (1.0 + 0.95 * theta.sin()),
            w as f64 / 2.0 * (1.0 + 0.95 * theta.cos()),
        );
        // smooth linear phase ramp per coil
        let (ky, kx, phi0): (f64, f64, f64) = (
            rng.gen_range(-0.02..0.02),
            rng.gen_range(-0.02..0.02),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        let mut re = Tensor::zeros(&[h, w]);
        let mut im = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let mag = (-d2 / (2.0 * sigma * sigma)).exp();
                let phase = ky * y as f64 + kx * x as f64 + phi0;
                re.data_mut()[y * w + x] = T::of_f64(mag * phase.cos());
                im.data_mut()[y * w + x] = T::of_f64(mag * phase.sin());
            }
        }
        maps.push(ComplexImage::new(re, im)?);
    }
    // pixelwise normalization
    for i in 0..h * w {
        let mut ss = T::zero();
        for m in &maps {
            let (r, ii) = (m.re().data()[i], m.im().data()[i]);
            ss += r * r + ii * ii;
        }
        let inv = T::one() / ss.sqrt();
        for m in maps.iter_mut() {
            m.re_mut().data_mut()[i] = m.re().data()[i] * inv;
            m.im_mut().data_mut()[i] = m.im().data()[i] * inv;
        }
    }
    Ok(CoilSet { maps })
}

/// A simulated scan: mask, coils, and the (noisy) measured k-space per coil.
#[derive(Debug, Clone)]
pub struct Acquisition<T> {
    pub mask: SamplingMask,
    pub coils: CoilSet<T>,
    pub y: Vec<ComplexImage<T>>,
    pub noise_sigma: f64,
}

/// Noise-free measurement operator `M ⊙ F(S_c ⊙ x)` per coil.
pub fn forward_op<T: Scalar>(
    x: &ComplexImage<T>,
    mask: &SamplingMask,
    coils: &CoilSet<T>,
) -> Result<Vec<ComplexImage<T>>> {
    if (x.h(), x.w()) != (mask.height, mask.width) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            x.h(),
            x.w(),
            mask.height,
            mask.width
        )));
    }
    let m = mask.to_tensor::<T>();
    coils
        .maps()
        .iter()
        .map(|s| {
            let weighted = x.mul(s)?;
            let k = dft2_centered(&weighted, false)?;
            k.mul_real(&m)
        })
        .collect()
}

/// Full forward model with seeded complex Gaussian noise on the sampled
/// entries.
pub fn forward_model<T: Scalar>(
    x: &ComplexImage<T>,
    mask: &SamplingMask,
    coils: &CoilSet<T>,
    noise_sigma: f64,
    seed: u64,
) -> Result<Acquisition<T>> {
    let clean = forward_op(x, mask, coils)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = mask.to_tensor::<T>();
    let y = clean
        .into_iter()
        .map(|mut k| {
            if noise_sigma > 0.0 {
                for i in 0..k.re().len() {
                    let nr: f64 = StandardNormal.sample(&mut rng);
                    let ni: f64 = StandardNormal.sample(&mut rng);
                    if m.data()[i] > T::zero() {
                        k.re_mut().data_mut()[i] += T::of_f64(nr * noise_sigma);
                        k.im_mut().data_mut()[i] += T::of_f64(ni * noise_sigma);
                    }
                }
            }
            k
        })
        .collect();
    Ok(Acquisition {
        mask: mask.clone(),
        coils: coils.clone(),
        y,
        noise_sigma,
    })
}

/// Adjoint of the measurement operator: `Σ_c conj(S_c) ⊙ F⁻¹(M ⊙ y_c)`.
pub fn adjoint<T: Scalar>(
    ys: &[ComplexImage<T>],
    mask: &SamplingMask,
    coils: &CoilSet<T>,
) -> Result<ComplexImage<T>> {
    if ys.len() != coils.count() {
        return Err(Error::ShapeMismatch(format!(
            "{} k-space planes vs {} coils",
            ys.len(),
            coils.count()
        )));
    }
    let m = mask.to_tensor::<T>();
    let mut out = ComplexImage::zeros(mask.height, mask.width);
    for (k, s) in ys.iter().zip(coils.maps()) {
        let masked = k.mul_real(&m)?;
        let img = dft2_centered(&masked, true)?;
        out = out.add(&img.mul_conj(s)?)?;
    }
    Ok(out)
}

/// Zero-filled reconstruction: the adjoint applied to the measurements.
pub fn zero_filled<T: Scalar>(acq: &Acquisition<T>) -> Result<ComplexImage<T>> {
    adjoint(&acq.y, &acq.mask, &acq.coils)
}

/// Data-fidelity residual `Σ_c ||M ⊙ F(S_c x) − y_c||²`.
pub fn residual_norm2<T: Scalar>(x: &ComplexImage<T>, acq: &Acquisition<T>) -> Result<T> {
    let ys = forward_op(x, &acq.mask, &acq.coils)?;
    let mut acc = T::zero();
    for (k, y) in ys.iter().zip(&acq.y) {
        let d = k.sub(y)?;
        acc += d.dot_real(&d);
    }
    Ok(acc)
}

/// Data-consistency operator selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DcMode {
    /// Gradient step on the data-fidelity term (the unrolled update).
    Soft,
    /// Overwrite sampled k-space entries with the measurements.
    Hard,
}

/// Soft data-consistency update
/// `x − λ Σ_c conj(S_c) F⁻¹(M ⊙ F(S_c x) − y_c)`.
pub fn dc_step<T: Scalar>(
    x: &ComplexImage<T>,
    acq: &Acquisition<T>,
    lambda: T,
) -> Result<ComplexImage<T>> {
    if lambda < T::zero() {
        return Err(Error::InvalidArgument("dc step size must be >= 0".into()));
    }
    let ys = forward_op(x, &acq.mask, &acq.coils)?;
    let residual: Vec<ComplexImage<T>> = ys
        .iter()
        .zip(&acq.y)
        .map(|(k, y)| k.sub(y))
        .collect::<Result<_>>()?;
    let corr = adjoint(&residual, &acq.mask, &acq.coils)?;
    x.sub(&corr.scale(lambda))
}

/// Hard data-consistency: replace sampled k-space of each coil image with
/// the measurements, then recombine.
pub fn dc_step_hard<T: Scalar>(
    x: &ComplexImage<T>,
    acq: &Acquisition<T>,
) -> Result<ComplexImage<T>> {
    let m = acq.mask.to_tensor::<T>();
    let mut out = ComplexImage::zeros(x.h(), x.w());
    for (s, y) in acq.coils.maps().iter().zip(&acq.y) {
        let mut k = dft2_centered(&x.mul(s)?, false)?;
        for i in 0..k.re().len() {
            if m.data()[i] > T::zero() {
                k.re_mut().data_mut()[i] = y.re().data()[i];
                k.im_mut().data_mut()[i] = y.im().data()[i];
            }
        }
        let img = dft2_centered(&k, true)?;
        out = out.add(&img.mul_conj(s)?)?;
    }
    Ok(out)
}
