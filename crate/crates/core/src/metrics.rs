//! Image-quality metrics computed on magnitude images: PSNR, SSIM (uniform
//! window), and NMSE, plus the CSV report rows the CLI appends.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use std::io::Write;
use std::path::Path;

/// One evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub nmse: f64,
}

/// Sentinel reported when images are identical (infinite PSNR). Differences
/// at or below the 32-bit relative precision floor count as identical.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

/// Relative RMS floor below which two images are indistinguishable at
/// working precision.
const IDENTICAL_RTOL: f64 = 1e-7;

fn check_same_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `10 log10(range² / MSE)`; +inf sentinel for identical inputs.
pub fn psnr<T: Scalar>(recon: &Tensor<T>, reference: &Tensor<T>, data_range: f64) -> Result<f64> {
    check_same_dims(recon, reference)?;
    if data_range <= 0.0 {
        return Err(Error::InvalidArgument("data range must be positive".into()));
    }
    let mut mse = 0.0f64;
    for (&a, &b) in recon.data().iter().zip(reference.data()) {
        let d = a.as_f64() - b.as_f64();
        mse += d * d;
    }
    mse /= recon.len() as f64;
    if mse <= (data_range * IDENTICAL_RTOL).powi(2) {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Mean local SSIM with a uniform `window`x`window` kernel over all valid
/// positions. Defaults elsewhere: window 7, k1 = 0.01, k2 = 0.03 (standard
/// conventions, configurable here).
pub fn ssim<T: Scalar>(
    recon: &Tensor<T>,
    reference: &Tensor<T>,
    window: usize,
    k1: f64,
    k2: f64,
    data_range: f64,
) -> Result<f64> {
    check_same_dims(recon, reference)?;
    if recon.rank() != 2 {
        return Err(Error::ShapeMismatch(
            "ssim expects [H,W] magnitude images".into(),
        ));
    }
    let (h, w) = (recon.dims()[0], recon.dims()[1]);
    if window.is_multiple_of(2) || window == 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be odd"
        )));
    }
    if window > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "window {window} larger than image {h}x{w}"
        )));
    }
    let c1 = (k1 * data_range).powi(2);
    let c2 = (k2 * data_range).powi(2);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - window {
        for x0 in 0..=w - window {
            let (mut ma, mut mb) = (0.0f64, 0.0f64);
            for dy in 0..window {
                for dx in 0..window {
                    ma += recon.data()[(y0 + dy) * w + x0 + dx].as_f64();
                    mb += reference.data()[(y0 + dy) * w + x0 + dx].as_f64();
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
            for dy in 0..window {
                for dx in 0..window {
                    let a = recon.data()[(y0 + dy) * w + x0 + dx].as_f64() - ma;
                    let b = reference.data()[(y0 + dy) * w + x0 + dx].as_f64() - mb;
                    va += a * a;
                    vb += b * b;
                    cov += a * b;
                }
            }
            va /= n - 1.0;
            vb /= n - 1.0;
            cov /= n - 1.0;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the toolkit defaults (window 7, k1 0.01, k2 0.03).
pub fn ssim_default<T: Scalar>(
    recon: &Tensor<T>,
    reference: &Tensor<T>,
    data_range: f64,
) -> Result<f64> {
    ssim(recon, reference, 7, 0.01, 0.03, data_range)
}

/// `||recon - reference||² / ||reference||²`.
pub fn nmse<T: Scalar>(recon: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_same_dims(recon, reference)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&a, &b) in recon.data().iter().zip(reference.data()) {
        let bf = b.as_f64();
        let d = a.as_f64() - bf;
        num += d * d;
        den += bf * bf;
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument(
            "nmse undefined for a zero reference".into(),
        ));
    }
    Ok(num / den)
}

/// Evaluates all three metrics on magnitude images.
pub fn report<T: Scalar>(
    recon: &Tensor<T>,
    reference: &Tensor<T>,
    data_range: f64,
) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(recon, reference, data_range)?,
        ssim: ssim_default(recon, reference, data_range)?,
        nmse: nmse(recon, reference)?,
    })
}

/// Appends `(run id, af, mask kind, psnr, ssim, nmse)` to a CSV file,
/// writing the header when the file is new.
pub fn append_report_csv(
    path: &Path,
    run_id: &str,
    af: usize,
    mask_kind: &str,
    m: &MetricReport,
) -> Result<()> {
    let new = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if new {
        wtr.write_record(["run_id", "af", "mask_kind", "psnr_db", "ssim", "nmse"])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    wtr.write_record([
        run_id,
        &af.to_string(),
        mask_kind,
        &format!("{:.6}", m.psnr_db),
        &format!("{:.6}", m.ssim),
        &format!("{:.6e}", m.nmse),
    ])
    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    wtr.flush()?;
    wtr.into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![h, w],
            (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_images_hit_the_sentinel() {
        let x = random(8, 8, 1);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_IDENTICAL);
        assert!((ssim_default(&x, &x, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmse(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn psnr_closed_form() {
        // MSE 0.01 at range 1 -> 20 dB
        let a = Tensor::<f64>::zeros(&[4, 4]);
        let b = Tensor::<f64>::full(&[4, 4], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let a = random(12, 9, 2);
        let b = random(12, 9, 3);
        let got = psnr(&a, &b, 2.0).unwrap();
        let mut mse = 0.0;
        for i in 0..a.len() {
            mse += (a.data()[i] - b.data()[i]).powi(2);
        }
        mse /= a.len() as f64;
        let want = 10.0 * (4.0 / mse).log10();
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        // constant a vs a+d: variances and covariance vanish, so
        // SSIM = (2ab + c1)c2 / ((a²+b²+c1)c2) — luminance only.
        let a = Tensor::<f64>::full(&[9, 9], 0.5);
        let b = Tensor::<f64>::full(&[9, 9], 0.6);
        let got = ssim_default(&a, &b, 1.0).unwrap();
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ssim_matches_dense_sliding_window_oracle() {
        let a = random(16, 14, 4);
        let b = random(16, 14, 5);
        let got = ssim(&a, &b, 5, 0.01, 0.03, 1.0).unwrap();

        // naive reference with explicit loops
        let (h, w, win) = (16usize, 14usize, 5usize);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let n = (win * win) as f64;
        let mut total = 0.0;
        let mut cnt = 0.0;
        for y in 0..=h - win {
            for x in 0..=w - win {
                let mut block_a = Vec::new();
                let mut block_b = Vec::new();
                for dy in 0..win {
                    for dx in 0..win {
                        block_a.push(a.data()[(y + dy) * w + x + dx]);
                        block_b.push(b.data()[(y + dy) * w + x + dx]);
                    }
                }
                let ma: f64 = block_a.iter().sum::<f64>() / n;
                let mb: f64 = block_b.iter().sum::<f64>() / n;
                let va: f64 = block_a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / (n - 1.0);
                let vb: f64 = block_b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (n - 1.0);
                let cov: f64 = block_a
                    .iter()
                    .zip(&block_b)
                    .map(|(x1, y1)| (x1 - ma) * (y1 - mb))
                    .sum::<f64>()
                    / (n - 1.0);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                cnt += 1.0;
            }
        }
        assert!((got - total / cnt).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let a = random(10, 10, 6);
        let b = random(10, 10, 7);
        let ab = ssim_default(&a, &b, 1.0).unwrap();
        let ba = ssim_default(&b, &a, 1.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab <= 1.0);
    }

    #[test]
    fn ssim_window_too_large_is_error() {
        let a = random(6, 6, 8);
        assert!(ssim(&a, &a, 7, 0.01, 0.03, 1.0).is_err());
    }

    #[test]
    fn nmse_closed_form_and_scale_invariance() {
        let x = random(8, 8, 9);
        let scaled = x.scale(1.1);
        assert!((nmse(&scaled, &x).unwrap() - 0.01).abs() < 1e-9);

        let a = random(8, 8, 10);
        let n1 = nmse(&a, &x).unwrap();
        let n2 = nmse(&a.scale(3.0), &x.scale(3.0)).unwrap();
        assert!((n1 - n2).abs() < 1e-12, "nmse must be scale invariant");
    }

    #[test]
    fn nmse_zero_reference_is_error() {
        let z = Tensor::<f64>::zeros(&[4, 4]);
        let a = random(4, 4, 11);
        assert!(nmse(&a, &z).is_err());
    }

    #[test]
    fn psnr_decreases_as_noise_grows() {
        // statistical: average over 20 seeds per noise level
        let x = random(16, 16, 12);
        let mut prev = f64::INFINITY;
        for (li, sigma) in [0.01, 0.05, 0.1].iter().enumerate() {
            let mut mean = 0.0;
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let mut noisy = x.clone();
                for v in noisy.data_mut() {
                    *v += rng.gen_range(-1.0..1.0) * sigma * 1.7320508;
                }
                mean += psnr(&noisy, &x, 1.0).unwrap();
            }
            mean /= 20.0;
            assert!(mean < prev, "psnr did not decrease at level {li}");
            prev = mean;
        }
    }
}
