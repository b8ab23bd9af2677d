//! Dense forward kernels recorded by the tape.
//!
//! Every kernel is a pure function; the tape pairs each one with its
//! hand-written adjoint in `rules`. Keeping the math here lets the
//! immediate (no-grad) engine and the recording tape share one
//! implementation.

use crate::error::{Error, Result};
use crate::numerics::{dft2_centered, ComplexImage, Scalar, Tensor};
use crate::par;

/// `x [.., C] @ w [C, D] -> [.., D]`, treating all leading axes as rows.
pub fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "weight must be rank 2, got {:?}",
            w.dims()
        )));
    }
    let (c, d) = (w.dims()[0], w.dims()[1]);
    let last = *x
        .dims()
        .last()
        .ok_or_else(|| Error::ShapeMismatch("rank-0 input".into()))?;
    if last != c {
        return Err(Error::ShapeMismatch(format!(
            "matmul: input channels {last} vs weight rows {c}"
        )));
    }
    let rows = x.len() / c;
    let mut out_dims = x.dims().to_vec();
    *out_dims.last_mut().unwrap() = d;
    let mut out = Tensor::zeros(&out_dims);
    par::for_each_chunk_mut(out.data_mut(), d, |r, dst| {
        let xr = &x.data()[r * c..(r + 1) * c];
        for (j, o) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (i, &xi) in xr.iter().enumerate() {
                acc += xi * w.data()[i * d + j];
            }
            *o = acc;
        }
    });
    debug_assert_eq!(rows * d, out.len());
    Ok(out)
}

/// Gradient of [`matmul`] w.r.t. the weight: `x^T @ g`.
pub fn matmul_grad_w<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, c: usize, d: usize) -> Tensor<T> {
    let rows = x.len() / c;
    let mut gw = Tensor::zeros(&[c, d]);
    for r in 0..rows {
        let xr = &x.data()[r * c..(r + 1) * c];
        let gr = &g.data()[r * d..(r + 1) * d];
        for (i, &xi) in xr.iter().enumerate() {
            for (j, &gj) in gr.iter().enumerate() {
                gw.data_mut()[i * d + j] += xi * gj;
            }
        }
    }
    gw
}

/// Gradient of [`matmul`] w.r.t. the input: `g @ w^T`.
pub fn matmul_grad_x<T: Scalar>(g: &Tensor<T>, w: &Tensor<T>, x_dims: &[usize]) -> Tensor<T> {
    let (c, d) = (w.dims()[0], w.dims()[1]);
    let mut gx = Tensor::zeros(x_dims);
    par::for_each_chunk_mut(gx.data_mut(), c, |r, dst| {
        let gr = &g.data()[r * d..(r + 1) * d];
        for (i, o) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &gj) in gr.iter().enumerate() {
                acc += gj * w.data()[i * d + j];
            }
            *o = acc;
        }
    });
    gx
}

/// Broadcast add of a `[C]` bias over the last axis.
pub fn bias_add<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let c = b.len();
    if x.dims().last() != Some(&c) {
        return Err(Error::ShapeMismatch(format!(
            "bias {c} vs input {:?}",
            x.dims()
        )));
    }
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % c];
    }
    Ok(out)
}

/// Sum of gradients over all leading axes (adjoint of the bias broadcast).
pub fn sum_to_last<T: Scalar>(g: &Tensor<T>, c: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[c]);
    for (i, &v) in g.data().iter().enumerate() {
        out.data_mut()[i % c] += v;
    }
    out
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

pub fn softplus<T: Scalar>(v: T) -> T {
    // log(1+e^v), stable for large |v|
    if v > T::of_f64(30.0) {
        v
    } else {
        (T::one() + v.exp()).ln()
    }
}

/// Mean over (B,H,W) of a `[B,H,W,C]` map (used for per-expert gate mass).
pub fn mean_bhw<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.bhwc()?;
    let mut out = Tensor::zeros(&[c]);
    for (i, &v) in x.data().iter().enumerate() {
        out.data_mut()[i % c] += v;
    }
    let inv = T::of_f64(1.0 / (b * h * w) as f64);
    Ok(out.scale(inv))
}

/// Per-sample global average pool: `[B,H,W,C] -> [B,C]`.
pub fn mean_hw<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.bhwc()?;
    let mut out = Tensor::zeros(&[b, c]);
    let plane = h * w * c;
    for (i, &v) in x.data().iter().enumerate() {
        let bi = i / plane;
        out.data_mut()[bi * c + i % c] += v;
    }
    let inv = T::of_f64(1.0 / (h * w) as f64);
    Ok(out.scale(inv))
}

/// Softmax along the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.dims().last().unwrap();
    let mut out = x.clone();
    par::for_each_chunk_mut(out.data_mut(), c, |_, row| {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    });
    out
}

/// Layer normalization along the last axis with learned gain/offset.
pub fn layer_norm_last<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let c = *x.dims().last().unwrap();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "layer norm params {}x{} vs channels {c}",
            gamma.len(),
            beta.len()
        )));
    }
    let epsr = T::of_f64(eps);
    let invc = T::of_f64(1.0 / c as f64);
    let mut out = x.clone();
    par::for_each_chunk_mut(out.data_mut(), c, |_, row| {
        let mut mu = T::zero();
        for &v in row.iter() {
            mu += v;
        }
        mu *= invc;
        let mut var = T::zero();
        for &v in row.iter() {
            let d = v - mu;
            var += d * d;
        }
        var *= invc;
        let inv_std = T::one() / (var + epsr).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mu) * inv_std * gamma.data()[j] + beta.data()[j];
        }
    });
    Ok(out)
}

/// `x [B,H,W,C] * s [B,C]` with `s` broadcast over the spatial axes.
pub fn mul_bc<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, _h, _w, c) = x.bhwc()?;
    if s.dims() != [b, c] {
        return Err(Error::ShapeMismatch(format!(
            "broadcast gate dims {:?}, expected [{b},{c}]",
            s.dims()
        )));
    }
    let mut out = x.clone();
    let plane = x.len() / b;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let bi = i / plane;
        *v *= s.data()[bi * c + i % c];
    }
    Ok(out)
}

/// `x [B,H,W,C] * s [B,H,W,1]` broadcast over channels.
pub fn mul_pixel<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.bhwc()?;
    if s.dims() != [b, h, w, 1] {
        return Err(Error::ShapeMismatch(format!(
            "pixel weights {:?}, expected [{b},{h},{w},1]",
            s.dims()
        )));
    }
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= s.data()[i / c];
    }
    Ok(out)
}

/// Spatial crop of a `[B,H,W,C]` map.
pub fn crop_hw<T: Scalar>(
    x: &Tensor<T>,
    y0: usize,
    x0: usize,
    oh: usize,
    ow: usize,
) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.bhwc()?;
    if y0 + oh > h || x0 + ow > w {
        return Err(Error::InvalidArgument(format!(
            "crop {y0}+{oh} x {x0}+{ow} exceeds {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    for bi in 0..b {
        for y in 0..oh {
            let src = x.idx4(bi, y0 + y, x0, 0);
            let dst = out.idx4(bi, y, 0, 0);
            out.data_mut()[dst..dst + ow * c].copy_from_slice(&x.data()[src..src + ow * c]);
        }
    }
    Ok(out)
}

/// Rows of `x` at the given pixel indices: `[B,H,W,C] -> [K,C]`.
pub fn gather_pixels<T: Scalar>(x: &Tensor<T>, idxs: &[usize]) -> Result<Tensor<T>> {
    let (_b, _h, _w, c) = x.bhwc()?;
    let mut out = Tensor::zeros(&[idxs.len().max(1), c]);
    for (k, &pix) in idxs.iter().enumerate() {
        out.data_mut()[k * c..(k + 1) * c].copy_from_slice(&x.data()[pix * c..(pix + 1) * c]);
    }
    Ok(out)
}

/// Scatters `[K,C]` rows back to pixel positions of a zeroed `[B,H,W,C]` map.
pub fn scatter_pixels<T: Scalar>(
    rows: &Tensor<T>,
    idxs: &[usize],
    out_dims: &[usize],
) -> Result<Tensor<T>> {
    let c = out_dims[3];
    let mut out = Tensor::zeros(out_dims);
    for (k, &pix) in idxs.iter().enumerate() {
        out.data_mut()[pix * c..(pix + 1) * c].copy_from_slice(&rows.data()[k * c..(k + 1) * c]);
    }
    Ok(out)
}

// --- complex-pair kernels on [B,H,W,2] feature maps ---

fn cpair_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (b, h, w, c) = x.bhwc()?;
    if c != 2 {
        return Err(Error::ShapeMismatch(format!(
            "complex pair must have 2 channels, got {:?}",
            x.dims()
        )));
    }
    Ok((b, h, w))
}

/// Pointwise complex multiply of a pair map by a constant complex plane.
pub fn cpair_mul<T: Scalar>(x: &Tensor<T>, k: &ComplexImage<T>, conj: bool) -> Result<Tensor<T>> {
    let (b, h, w) = cpair_dims(x)?;
    if (k.h(), k.w()) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "plane {}x{} vs map {h}x{w}",
            k.h(),
            k.w()
        )));
    }
    let sgn = if conj { -T::one() } else { T::one() };
    let mut out = x.clone();
    let plane = h * w;
    for bi in 0..b {
        for i in 0..plane {
            let o = (bi * plane + i) * 2;
            let (ar, ai) = (x.data()[o], x.data()[o + 1]);
            let (br, bi_) = (k.re().data()[i], sgn * k.im().data()[i]);
            out.data_mut()[o] = ar * br - ai * bi_;
            out.data_mut()[o + 1] = ar * bi_ + ai * br;
        }
    }
    Ok(out)
}

/// Pointwise multiply of a pair map by a real `[H,W]` plane (e.g. a mask).
pub fn cpair_mask<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w) = cpair_dims(x)?;
    if m.dims() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs map {h}x{w}",
            m.dims()
        )));
    }
    let mut out = x.clone();
    let plane = h * w;
    for bi in 0..b {
        for i in 0..plane {
            let o = (bi * plane + i) * 2;
            let mv = m.data()[i];
            out.data_mut()[o] = out.data()[o] * mv;
            out.data_mut()[o + 1] = out.data()[o + 1] * mv;
        }
    }
    Ok(out)
}

/// Centered unitary 2-D DFT applied per batch element of a pair map.
pub fn cpair_dft2<T: Scalar>(x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let (b, h, w) = cpair_dims(x)?;
    let mut out = x.clone();
    let plane = h * w;
    for bi in 0..b {
        let mut img = ComplexImage::zeros(h, w);
        for i in 0..plane {
            let o = (bi * plane + i) * 2;
            img.re_mut().data_mut()[i] = x.data()[o];
            img.im_mut().data_mut()[i] = x.data()[o + 1];
        }
        let spec = dft2_centered(&img, inverse)?;
        for i in 0..plane {
            let o = (bi * plane + i) * 2;
            out.data_mut()[o] = spec.re().data()[i];
            out.data_mut()[o + 1] = spec.im().data()[i];
        }
    }
    Ok(out)
}

/// Pointwise magnitude of a pair map: `[B,H,W,2] -> [B,H,W,1]`.
pub fn cpair_abs<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w) = cpair_dims(x)?;
    let mut out = Tensor::zeros(&[b, h, w, 1]);
    for i in 0..b * h * w {
        let (r, im) = (x.data()[2 * i], x.data()[2 * i + 1]);
        out.data_mut()[i] = (r * r + im * im).sqrt();
    }
    Ok(out)
}
