//! Padding, depthwise separable 1-D convolution, bilinear resampling, and
//! patch (space<->depth) reshuffles on `[B,H,W,C]` tensors, together with
//! their adjoints. Each adjoint is the exact transpose of the forward linear
//! map, which is what reverse-mode differentiation requires.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::par;

/// Spatial axis selector for 1-D passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    H,
    W,
}

#[inline]
fn reflect_index(j: isize, ext: usize) -> usize {
    // Edge-excluded reflection: -1 -> 1, ext -> ext-2.
    let e = ext as isize;
    let j = if j < 0 {
        -j
    } else if j >= e {
        2 * (e - 1) - j
    } else {
        j
    };
    j as usize
}

/// Reflected (edge-excluded) boundary extension on the H and W axes.
pub fn reflect_pad<T: Scalar>(t: &Tensor<T>, pad_h: usize, pad_w: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = t.bhwc()?;
    if pad_h >= h || pad_w >= w {
        return Err(Error::InvalidArgument(format!(
            "reflect pad ({pad_h},{pad_w}) must be smaller than extents ({h},{w})"
        )));
    }
    let (oh, ow) = (h + 2 * pad_h, w + 2 * pad_w);
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    let row = ow * c;
    par::for_each_chunk_mut(out.data_mut(), row, |line, dst| {
        let (bi, ho) = (line / oh, line % oh);
        let hs = reflect_index(ho as isize - pad_h as isize, h);
        for wo in 0..ow {
            let ws = reflect_index(wo as isize - pad_w as isize, w);
            let src = t.idx4(bi, hs, ws, 0);
            dst[wo * c..(wo + 1) * c].copy_from_slice(&t.data()[src..src + c]);
        }
    });
    Ok(out)
}

/// Transpose of [`reflect_pad`]: folds boundary gradients back into the interior.
pub fn reflect_pad_adjoint<T: Scalar>(
    g: &Tensor<T>,
    pad_h: usize,
    pad_w: usize,
) -> Result<Tensor<T>> {
    let (b, oh, ow, c) = g.bhwc()?;
    let (h, w) = (oh - 2 * pad_h, ow - 2 * pad_w);
    let mut out = Tensor::zeros(&[b, h, w, c]);
    for bi in 0..b {
        for ho in 0..oh {
            let hs = reflect_index(ho as isize - pad_h as isize, h);
            for wo in 0..ow {
                let ws = reflect_index(wo as isize - pad_w as isize, w);
                let dst = out.idx4(bi, hs, ws, 0);
                let src = g.idx4(bi, ho, wo, 0);
                for ci in 0..c {
                    out.data_mut()[dst + ci] += g.data()[src + ci];
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel valid correlation along one spatial axis (no cross-channel
/// mixing). The caller pre-pads so the output extent is `ceil(extent/stride)`.
pub fn sep_conv1d<T: Scalar>(
    t: &Tensor<T>,
    kernel: &[T],
    axis: Axis,
    stride: usize,
) -> Result<Tensor<T>> {
    let (b, h, w, c) = t.bhwc()?;
    let k = kernel.len();
    if k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "kernel length {k} must be odd"
        )));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} not in {{1,2}}"
        )));
    }
    let ext = match axis {
        Axis::H => h,
        Axis::W => w,
    };
    if ext < k {
        return Err(Error::ShapeMismatch(format!(
            "extent {ext} shorter than kernel {k}"
        )));
    }
    let out_ext = (ext - k) / stride + 1;
    let (oh, ow) = match axis {
        Axis::H => (out_ext, w),
        Axis::W => (h, out_ext),
    };
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    let row = ow * c;
    par::for_each_chunk_mut(out.data_mut(), row, |line, dst| {
        let (bi, ho) = (line / oh, line % oh);
        match axis {
            Axis::W => {
                for wo in 0..ow {
                    for ci in 0..c {
                        let mut acc = T::zero();
                        for (j, &kj) in kernel.iter().enumerate() {
                            acc += kj * t.at4(bi, ho, wo * stride + j, ci);
                        }
                        dst[wo * c + ci] = acc;
                    }
                }
            }
            Axis::H => {
                for wo in 0..ow {
                    for ci in 0..c {
                        let mut acc = T::zero();
                        for (j, &kj) in kernel.iter().enumerate() {
                            acc += kj * t.at4(bi, ho * stride + j, wo, ci);
                        }
                        dst[wo * c + ci] = acc;
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Multiply-adds performed by [`sep_conv1d`] for the given input dims.
pub fn sep_conv1d_madds(dims: &[usize], klen: usize, axis: Axis, stride: usize) -> usize {
    let (b, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
    let ext = match axis {
        Axis::H => h,
        Axis::W => w,
    };
    let out_ext = (ext - klen) / stride + 1;
    let other = match axis {
        Axis::H => w,
        Axis::W => h,
    };
    b * out_ext * other * c * klen
}

/// Transpose of [`sep_conv1d`]: scatters output gradients back through the taps.
pub fn sep_conv1d_adjoint<T: Scalar>(
    g: &Tensor<T>,
    kernel: &[T],
    axis: Axis,
    stride: usize,
    input_dims: &[usize],
) -> Result<Tensor<T>> {
    let (b, oh, ow, c) = g.bhwc()?;
    let mut out = Tensor::zeros(input_dims);
    for bi in 0..b {
        for ho in 0..oh {
            for wo in 0..ow {
                for ci in 0..c {
                    let gv = g.at4(bi, ho, wo, ci);
                    for (j, &kj) in kernel.iter().enumerate() {
                        let (hi, wi) = match axis {
                            Axis::H => (ho * stride + j, wo),
                            Axis::W => (ho, wo * stride + j),
                        };
                        let idx = out.idx4(bi, hi, wi, ci);
                        out.data_mut()[idx] += kj * gv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-axis interpolation taps for align-corners-false bilinear sampling.
fn bilinear_taps(out_ext: usize, in_ext: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_ext as f64 / out_ext as f64;
    (0..out_ext)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let lo = (i0.max(0.0) as usize).min(in_ext - 1);
            let hi = ((i0 + 1.0).max(0.0) as usize).min(in_ext - 1);
            (lo, hi, frac)
        })
        .collect()
}

/// Align-corners-false bilinear interpolation to the given extents.
pub fn bilinear_resize<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = t.bhwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize extents must be >= 1".into()));
    }
    if out_h == h && out_w == w {
        return Ok(t.clone());
    }
    let taps_h = bilinear_taps(out_h, h);
    let taps_w = bilinear_taps(out_w, w);
    let mut out = Tensor::zeros(&[b, out_h, out_w, c]);
    let row = out_w * c;
    par::for_each_chunk_mut(out.data_mut(), row, |line, dst| {
        let (bi, ho) = (line / out_h, line % out_h);
        let (h0, h1, fh) = taps_h[ho];
        let (wh0, wh1) = (T::of_f64(1.0 - fh), T::of_f64(fh));
        for wo in 0..out_w {
            let (w0, w1, fw) = taps_w[wo];
            let (ww0, ww1) = (T::of_f64(1.0 - fw), T::of_f64(fw));
            for ci in 0..c {
                let v = wh0 * (ww0 * t.at4(bi, h0, w0, ci) + ww1 * t.at4(bi, h0, w1, ci))
                    + wh1 * (ww0 * t.at4(bi, h1, w0, ci) + ww1 * t.at4(bi, h1, w1, ci));
                dst[wo * c + ci] = v;
            }
        }
    });
    Ok(out)
}

/// Transpose of [`bilinear_resize`].
pub fn bilinear_resize_adjoint<T: Scalar>(
    g: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (b, oh, ow, c) = g.bhwc()?;
    if oh == in_h && ow == in_w {
        return Ok(g.clone());
    }
    let taps_h = bilinear_taps(oh, in_h);
    let taps_w = bilinear_taps(ow, in_w);
    let mut out = Tensor::zeros(&[b, in_h, in_w, c]);
    for bi in 0..b {
        for ho in 0..oh {
            let (h0, h1, fh) = taps_h[ho];
            let (wh0, wh1) = (T::of_f64(1.0 - fh), T::of_f64(fh));
            for wo in 0..ow {
                let (w0, w1, fw) = taps_w[wo];
                let (ww0, ww1) = (T::of_f64(1.0 - fw), T::of_f64(fw));
                for ci in 0..c {
                    let gv = g.at4(bi, ho, wo, ci);
                    for (hi, wh) in [(h0, wh0), (h1, wh1)] {
                        for (wi, wwt) in [(w0, ww0), (w1, ww1)] {
                            let idx = out.idx4(bi, hi, wi, ci);
                            out.data_mut()[idx] += wh * wwt * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Non-overlapping patch embedding: `[B,H,W,C] -> [B,H/p,W/p,C*p*p]`,
/// token channel layout `(dy*p + dx)*C + c`.
pub fn space_to_depth<T: Scalar>(t: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = t.bhwc()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "extents ({h},{w}) not divisible by patch {p}"
        )));
    }
    let (oh, ow, oc) = (h / p, w / p, c * p * p);
    let mut out = Tensor::zeros(&[b, oh, ow, oc]);
    for bi in 0..b {
        for ho in 0..oh {
            for wo in 0..ow {
                for dy in 0..p {
                    for dx in 0..p {
                        let src = t.idx4(bi, ho * p + dy, wo * p + dx, 0);
                        let dst = out.idx4(bi, ho, wo, (dy * p + dx) * c);
                        out.data_mut()[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(t: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (b, h, w, cpp) = t.bhwc()?;
    if p == 0 || cpp % (p * p) != 0 {
        return Err(Error::InvalidArgument(format!(
            "channel extent {cpp} not divisible by patch area {}",
            p * p
        )));
    }
    let c = cpp / (p * p);
    let (oh, ow) = (h * p, w * p);
    let mut out = Tensor::zeros(&[b, oh, ow, c]);
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                for dy in 0..p {
                    for dx in 0..p {
                        let src = t.idx4(bi, hi, wi, (dy * p + dx) * c);
                        let dst = out.idx4(bi, hi * p + dy, wi * p + dx, 0);
                        out.data_mut()[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
                    }
                }
            }
        }
    }
    Ok(out)
}
