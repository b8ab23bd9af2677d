//! Centered unitary 2-D discrete Fourier transform.
//!
//! Convention fixed for the whole toolkit: both directions are scaled by
//! `1/sqrt(H*W)` so the transform is unitary and the adjoint equals the
//! inverse, and the zero-frequency bin sits at `(H/2, W/2)` (floor division),
//! matching how sampling masks are defined around the k-space center.

use crate::error::{Error, Result};
use crate::numerics::{ComplexImage, Scalar, Tensor};
use crate::par;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Forward (or inverse) centered unitary 2-D DFT.
pub fn dft2_centered<T: Scalar>(img: &ComplexImage<T>, inverse: bool) -> Result<ComplexImage<T>> {
    if !img.all_finite() {
        return Err(Error::NonFinite("dft2_centered input"));
    }
    let (h, w) = (img.h(), img.w());

    // ifftshift: move the centered zero-frequency sample to index 0.
    let mut buf: Vec<Complex<T>> = Vec::with_capacity(h * w);
    for r in 0..h {
        let sr = (r + h / 2) % h;
        for c in 0..w {
            let sc = (c + w / 2) % w;
            let i = sr * w + sc;
            buf.push(Complex::new(img.re().data()[i], img.im().data()[i]));
        }
    }

    let mut planner = FftPlanner::<T>::new();
    let fft_row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let fft_col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };

    par::for_each_chunk_mut(&mut buf, w, |_, row| {
        fft_row.process(row);
    });

    // Column pass via transpose.
    let mut tr: Vec<Complex<T>> = vec![Complex::new(T::zero(), T::zero()); h * w];
    for r in 0..h {
        for c in 0..w {
            tr[c * h + r] = buf[r * w + c];
        }
    }
    par::for_each_chunk_mut(&mut tr, h, |_, col| {
        fft_col.process(col);
    });
    for r in 0..h {
        for c in 0..w {
            buf[r * w + c] = tr[c * h + r];
        }
    }

    // fftshift back to a centered spectrum, with unitary scaling.
    let scale = T::of_f64(1.0 / ((h * w) as f64).sqrt());
    let mut re = Tensor::zeros(&[h, w]);
    let mut im = Tensor::zeros(&[h, w]);
    for r in 0..h {
        let sr = (r + h.div_ceil(2)) % h;
        for c in 0..w {
            let sc = (c + w.div_ceil(2)) % w;
            let v = buf[sr * w + sc];
            re.data_mut()[r * w + c] = v.re * scale;
            im.data_mut()[r * w + c] = v.im * scale;
        }
    }
    ComplexImage::new(re, im)
}
