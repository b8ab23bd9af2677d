//! Separable frequency-consistent Laplacian split.
//!
//! A two-pass binomial low-pass with reflect padding and 2x decimation on
//! both spatial axes produces the low stream; bilinear upsampling back to
//! full resolution and subtraction yields the high stream, so
//! `x == high + upsample(low)` holds exactly by construction. Filters are
//! fixed, making the decomposition deterministic and alias-resistant.

use crate::autodiff::engine::{Engine, EvalEngine};
use crate::error::{Error, Result};
use crate::numerics::{self, Axis, Scalar, Tensor};

/// Normalized 5-tap binomial kernel `[1,4,6,4,1]/16`.
pub fn binomial_kernel<T: Scalar>() -> [T; 5] {
    [
        T::of_f64(1.0 / 16.0),
        T::of_f64(4.0 / 16.0),
        T::of_f64(6.0 / 16.0),
        T::of_f64(4.0 / 16.0),
        T::of_f64(1.0 / 16.0),
    ]
}

/// Low/high frequency streams of one split.
///
/// Invariant by construction: `high == input - low_upsampled` exactly, so
/// the input is perfectly reconstructible as `high + low_upsampled`.
#[derive(Debug, Clone)]
pub struct FreqSplit<T> {
    /// `[B, H/2, W/2, C]`
    pub low: Tensor<T>,
    /// `[B, H, W, C]`
    pub high: Tensor<T>,
    /// `[B, H, W, C]`, cached bilinear x2 expansion of `low`.
    pub low_upsampled: Tensor<T>,
}

fn check_even<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (b, h, w, c) = x.bhwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "split requires even extents, got {h}x{w}"
        )));
    }
    Ok((b, h, w, c))
}

/// Reflect-pad, horizontal then vertical binomial pass with 2x decimation on
/// both axes: `[B,H,W,C] -> [B,H/2,W/2,C]`.
pub fn sflap_reduce<T: Scalar, E: Engine<T>>(e: &mut E, x: &E::H) -> Result<E::H> {
    check_even(e.value(x))?;
    let k = binomial_kernel::<T>();
    let padded = e.reflect_pad(x, 2, 2)?;
    let horiz = e.sep_conv(&padded, &k, Axis::W, 2)?;
    e.sep_conv(&horiz, &k, Axis::H, 2)
}

/// Multiply-adds of one reduction; two 1-D passes instead of a dense 5x5.
pub fn reduce_madds(dims: &[usize]) -> usize {
    let (b, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
    let padded = [b, h + 4, w + 4, c];
    let after_h = [b, h + 4, w / 2, c];
    numerics::sep_conv1d_madds(&padded, 5, Axis::W, 2)
        + numerics::sep_conv1d_madds(&after_h, 5, Axis::H, 2)
}

/// Full split: low via [`sflap_reduce`], `low_upsampled` via bilinear x2,
/// `high = x - low_upsampled`.
pub fn sflap_split_on<T: Scalar, E: Engine<T>>(e: &mut E, x: &E::H) -> Result<(E::H, E::H, E::H)> {
    let (_, h, w, _) = check_even(e.value(x))?;
    let low = sflap_reduce(e, x)?;
    let low_up = e.bilinear(&low, h, w)?;
    let high = e.sub(x, &low_up)?;
    Ok((low, high, low_up))
}

/// No-grad convenience wrapper returning the concrete streams.
pub fn sflap_split<T: Scalar>(x: &Tensor<T>) -> Result<FreqSplit<T>> {
    let mut ev = EvalEngine::new();
    let xh = ev.constant(x.clone());
    let (low, high, low_up) = sflap_split_on(&mut ev, &xh)?;
    Ok(FreqSplit {
        low: ev.value(&low).clone(),
        high: ev.value(&high).clone(),
        low_upsampled: ev.value(&low_up).clone(),
    })
}

/// Fraction of spectral energy inside the centered half-band box
/// (|f| below half Nyquist on both axes), channel-summed.
pub fn central_band_energy_fraction<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    use crate::numerics::{dft2_centered, ComplexImage};
    let (b, h, w, c) = x.bhwc()?;
    let (h0, h1) = (h / 4, h - h / 4);
    let (w0, w1) = (w / 4, w - w / 4);
    let mut inside = 0.0f64;
    let mut total = 0.0f64;
    for bi in 0..b {
        for ci in 0..c {
            let mut plane = Tensor::<T>::zeros(&[h, w]);
            for y in 0..h {
                for xx in 0..w {
                    plane.data_mut()[y * w + xx] = x.at4(bi, y, xx, ci);
                }
            }
            let spec = dft2_centered(&ComplexImage::from_real(plane)?, false)?;
            for y in 0..h {
                for xx in 0..w {
                    let i = y * w + xx;
                    let p = (spec.re().data()[i] * spec.re().data()[i]
                        + spec.im().data()[i] * spec.im().data()[i])
                        .as_f64();
                    total += p;
                    if y >= h0 && y < h1 && xx >= w0 && xx < w1 {
                        inside += p;
                    }
                }
            }
        }
    }
    if total == 0.0 {
        return Err(Error::InvalidArgument("zero-energy input".into()));
    }
    Ok(inside / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        Tensor::new(
            dims.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn reduce_eval(x: &Tensor<f64>) -> Tensor<f64> {
        let mut ev = EvalEngine::new();
        let h = ev.constant(x.clone());
        let out = sflap_reduce(&mut ev, &h).unwrap();
        ev.value(&out).clone()
    }

    #[test]
    fn kernel_is_normalized_symmetric_unit_variance() {
        let k = binomial_kernel::<f64>();
        let sum: f64 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(k[i], k[4 - i]);
        }
        // variance sum k_i (i-2)^2 = (4 + 4 + 0 + 4 + 4)/16 = 1 px^2
        let var: f64 = k
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ((i as f64) - 2.0).powi(2))
            .sum();
        assert!((var - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reduce_preserves_constants() {
        let x = Tensor::<f64>::full(&[1, 8, 12, 3], 2.75);
        let low = reduce_eval(&x);
        assert_eq!(low.dims(), &[1, 4, 6, 3]);
        for &v in low.data() {
            assert!((v - 2.75).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_rejects_odd_extents() {
        let x = Tensor::<f64>::zeros(&[1, 7, 8, 1]);
        let mut ev = EvalEngine::new();
        let h = ev.constant(x);
        assert!(sflap_reduce(&mut ev, &h).is_err());
    }

    #[test]
    fn reduce_is_linear() {
        let x = random(&[1, 8, 8, 2], 1);
        let a = 2.5;
        let lhs = reduce_eval(&x.scale(a));
        let rhs = reduce_eval(&x).scale(a);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    /// Dense 2-D oracle: reflect pad by 2, correlate with the 5x5 outer
    /// product of the binomial kernel, subsample even positions.
    fn dense_reduce_oracle(x: &Tensor<f64>) -> Tensor<f64> {
        let (b, h, w, c) = x.bhwc().unwrap();
        let k1 = [1.0, 4.0, 6.0, 4.0, 1.0].map(|v| v / 16.0);
        let padded = numerics::reflect_pad(x, 2, 2).unwrap();
        let mut out = Tensor::zeros(&[b, h / 2, w / 2, c]);
        for bi in 0..b {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for dy in 0..5 {
                            for dx in 0..5 {
                                acc +=
                                    k1[dy] * k1[dx] * padded.at4(bi, 2 * oy + dy, 2 * ox + dx, ci);
                            }
                        }
                        out.set4(bi, oy, ox, ci, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn separable_reduce_equals_dense_5x5_oracle() {
        let x = random(&[2, 8, 10, 3], 3);
        let fast = reduce_eval(&x);
        let dense = dense_reduce_oracle(&x);
        assert!(fast.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn impulse_image_matches_dense_oracle() {
        let mut x = Tensor::<f64>::zeros(&[1, 8, 8, 1]);
        x.set4(0, 4, 4, 0, 1.0);
        let fast = reduce_eval(&x);
        let dense = dense_reduce_oracle(&x);
        assert!(fast.max_abs_diff(&dense) < 1e-15);
    }

    #[test]
    fn split_reconstructs_exactly() {
        let x = random(&[1, 16, 16, 4], 5);
        let s = sflap_split(&x).unwrap();
        let recon = s.high.add(&s.low_upsampled).unwrap();
        // identity by construction, up to one rounding of (x - l) + l
        assert!(recon.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn constant_image_has_zero_high_stream() {
        let x = Tensor::<f64>::full(&[1, 8, 8, 2], 3.25);
        let s = sflap_split(&x).unwrap();
        assert!(s.high.max_abs() < 1e-12);
    }

    #[test]
    fn nyquist_checkerboard_lands_in_high_stream() {
        let mut x = Tensor::<f64>::zeros(&[1, 16, 16, 1]);
        for y in 0..16 {
            for xx in 0..16 {
                x.set4(0, y, xx, 0, if (y + xx) % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        let s = sflap_split(&x).unwrap();
        let e_high = s.high.dot(&s.high);
        let e_low_up = s.low_upsampled.dot(&s.low_upsampled);
        assert!(
            e_high > 100.0 * e_low_up,
            "high {e_high} should dominate low {e_low_up}"
        );
        // energy captured by the low stream, frozen from the oracle run
        let ratio = s.low.dot(&s.low) / x.dot(&x);
        assert!(
            ratio < 1e-3,
            "checkerboard leaks {ratio} into the low stream"
        );
    }

    #[test]
    fn low_stream_is_more_dc_concentrated_than_high() {
        // phantom-like smooth content: sum of shifted blobs
        let mut x = Tensor::<f64>::zeros(&[1, 32, 32, 2]);
        for y in 0..32 {
            for xx in 0..32 {
                let g1 = (-((y as f64 - 12.0).powi(2) + (xx as f64 - 14.0).powi(2)) / 40.0).exp();
                let g2 = (-((y as f64 - 22.0).powi(2) + (xx as f64 - 20.0).powi(2)) / 15.0).exp();
                x.set4(0, y, xx, 0, g1 + 0.5 * g2);
                x.set4(0, y, xx, 1, g2 - 0.3 * g1);
            }
        }
        let s = sflap_split(&x).unwrap();
        let f_low = central_band_energy_fraction(&s.low_upsampled).unwrap();
        let f_high = central_band_energy_fraction(&s.high).unwrap();
        assert!(f_low > f_high, "low {f_low} vs high {f_high}");
    }

    #[test]
    fn cost_scales_linearly_in_pixels_and_channels() {
        let base = reduce_madds(&[1, 32, 32, 4]);
        assert_eq!(reduce_madds(&[1, 32, 32, 8]), 2 * base, "linear in C");
        let quad = reduce_madds(&[1, 64, 64, 4]);
        // doubling both extents quadruples the work, up to boundary padding
        let ratio = quad as f64 / base as f64;
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
        // separable cost is ~2k per pixel, not k^2
        let per_pixel = base as f64 / (32.0 * 32.0 * 4.0);
        assert!(
            per_pixel < 2.0 * 5.0 + 1.0,
            "per-pixel madds {per_pixel} not O(2k)"
        );
    }
}
