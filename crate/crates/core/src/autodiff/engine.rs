//! Single-source forward definitions over two execution engines.
//!
//! Network blocks are written once against [`Engine`]. Running them on a
//! [`Tape`] records the graph for reverse-mode differentiation; running them
//! on [`EvalEngine`] computes values immediately with no graph retention,
//! which keeps inference memory flat for large images. Both paths call the
//! same kernels, so they agree bit for bit.

use crate::autodiff::kernels as k;
use crate::autodiff::tape::{BackwardRule, NodeId, Tape};
use crate::error::Result;
use crate::numerics::{self, Axis, ComplexImage, Scalar, Tensor};
use std::rc::Rc;

/// Operation set required by the network blocks.
#[allow(clippy::too_many_arguments)]
pub trait Engine<T: Scalar> {
    type H: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::H;
    /// Registers a named trainable leaf (ignored by the immediate engine).
    fn param(&mut self, name: &str, t: &Tensor<T>) -> Self::H;
    fn value<'s>(&'s self, h: &'s Self::H) -> &'s Tensor<T>;

    fn add(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn sub(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn mul(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H>;
    fn scale(&mut self, a: &Self::H, k: f64) -> Result<Self::H>;
    fn matmul(&mut self, x: &Self::H, w: &Self::H) -> Result<Self::H>;
    fn bias_add(&mut self, x: &Self::H, b: &Self::H) -> Result<Self::H>;
    /// Multiply a tensor by a scalar (1-element) node, e.g. a learnable step size.
    fn scale_by(&mut self, x: &Self::H, s: &Self::H) -> Result<Self::H>;

    fn relu(&mut self, x: &Self::H) -> Result<Self::H>;
    fn sigmoid(&mut self, x: &Self::H) -> Result<Self::H>;
    fn silu(&mut self, x: &Self::H) -> Result<Self::H>;
    fn softplus(&mut self, x: &Self::H) -> Result<Self::H>;

    fn sum_all(&mut self, x: &Self::H) -> Result<Self::H>;
    fn mean_bhw(&mut self, x: &Self::H) -> Result<Self::H>;
    fn mean_hw(&mut self, x: &Self::H) -> Result<Self::H>;
    fn reshape(&mut self, x: &Self::H, dims: &[usize]) -> Result<Self::H>;
    fn softmax_last(&mut self, x: &Self::H) -> Result<Self::H>;
    fn layer_norm(
        &mut self,
        x: &Self::H,
        gamma: &Self::H,
        beta: &Self::H,
        eps: f64,
    ) -> Result<Self::H>;

    fn concat_last(&mut self, xs: &[Self::H]) -> Result<Self::H>;
    fn slice_last(&mut self, x: &Self::H, from: usize, to: usize) -> Result<Self::H>;

    fn reflect_pad(&mut self, x: &Self::H, ph: usize, pw: usize) -> Result<Self::H>;
    fn sep_conv(&mut self, x: &Self::H, kernel: &[T], axis: Axis, stride: usize)
        -> Result<Self::H>;
    fn bilinear(&mut self, x: &Self::H, oh: usize, ow: usize) -> Result<Self::H>;
    fn space_to_depth(&mut self, x: &Self::H, p: usize) -> Result<Self::H>;
    fn depth_to_space(&mut self, x: &Self::H, p: usize) -> Result<Self::H>;

    fn mul_bc(&mut self, x: &Self::H, s: &Self::H) -> Result<Self::H>;
    /// `x [B,H,W,C] * s [B,H,W,1]` with the per-pixel weight broadcast over
    /// channels.
    fn mul_pixel(&mut self, x: &Self::H, s: &Self::H) -> Result<Self::H>;
    /// Center-crops the spatial axes to `oh x ow` starting at `(y0, x0)`.
    fn crop_hw(
        &mut self,
        x: &Self::H,
        y0: usize,
        x0: usize,
        oh: usize,
        ow: usize,
    ) -> Result<Self::H>;
    fn gather_pixels(&mut self, x: &Self::H, idxs: &[usize]) -> Result<Self::H>;
    fn scatter_pixels(&mut self, rows: &Self::H, idxs: &[usize], dims: &[usize])
        -> Result<Self::H>;

    fn cpair_mul(&mut self, x: &Self::H, plane: &ComplexImage<T>, conj: bool) -> Result<Self::H>;
    fn cpair_mask(&mut self, x: &Self::H, m: &Tensor<T>) -> Result<Self::H>;
    fn cpair_dft2(&mut self, x: &Self::H, inverse: bool) -> Result<Self::H>;
    fn cpair_abs(&mut self, x: &Self::H) -> Result<Self::H>;
    fn sub_const(&mut self, x: &Self::H, c: &Tensor<T>) -> Result<Self::H>;

    /// Causal selective-state-space recurrence (see `ssm::kernel`).
    fn selective_scan(
        &mut self,
        x: &Self::H,
        delta: &Self::H,
        b_seq: &Self::H,
        c_seq: &Self::H,
        a: &Tensor<T>,
    ) -> Result<Self::H>;
}

// ---------------------------------------------------------------------------
// Immediate engine
// ---------------------------------------------------------------------------

/// Handle of the immediate engine: just the value.
#[derive(Clone)]
pub struct EvalH<T>(pub Rc<Tensor<T>>);

/// Computes values eagerly and retains nothing.
#[derive(Default)]
pub struct EvalEngine;

impl EvalEngine {
    pub fn new() -> Self {
        Self
    }
}

fn ev<T: Scalar>(t: Tensor<T>) -> EvalH<T> {
    EvalH(Rc::new(t))
}

impl<T: Scalar> Engine<T> for EvalEngine {
    type H = EvalH<T>;

    fn constant(&mut self, t: Tensor<T>) -> Self::H {
        ev(t)
    }

    fn param(&mut self, _name: &str, t: &Tensor<T>) -> Self::H {
        ev(t.clone())
    }

    fn value<'s>(&'s self, h: &'s Self::H) -> &'s Tensor<T> {
        &h.0
    }

    fn add(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        Ok(ev(a.0.add(&b.0)?))
    }

    fn sub(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        Ok(ev(a.0.sub(&b.0)?))
    }

    fn mul(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        Ok(ev(a.0.zip_map(&b.0, |x, y| x * y)?))
    }

    fn scale(&mut self, a: &Self::H, k: f64) -> Result<Self::H> {
        Ok(ev(a.0.scale(T::of_f64(k))))
    }

    fn matmul(&mut self, x: &Self::H, w: &Self::H) -> Result<Self::H> {
        Ok(ev(k::matmul(&x.0, &w.0)?))
    }

    fn bias_add(&mut self, x: &Self::H, b: &Self::H) -> Result<Self::H> {
        Ok(ev(k::bias_add(&x.0, &b.0)?))
    }

    fn scale_by(&mut self, x: &Self::H, s: &Self::H) -> Result<Self::H> {
        Ok(ev(x.0.scale(s.0.item())))
    }

    fn relu(&mut self, x: &Self::H) -> Result<Self::H> {
        Ok(ev(x.0.map(|v| if v > T::zero() { v } else { T::zero() })))
    }

    fn sigmoid(&mut self, x: &Self::H) -> Result<Self::H> {
        Ok(ev(x.0.map(k::sigmoid)))
    }

    fn silu(&mut self, x: &Self::H) -> Result<Self::H> {
        Ok(ev(x.0.map(k::silu)))
    }

    fn softplus(&mut self, x: &Self::H) -> Result<Self::H> {
        Ok(ev(x.0.map(k::softplus)))
    }

    fn sum_all(&mut self, x: &Self::H) -> Result<Self::H> {
        Ok(ev(Tensor::scalar_tensor(x.0.sum())))
    }

    fn mean_bhw(&mut self, x: &Self::H) -> Result<Self::H> {
        Ok(ev(k::mean_bhw(&x.0)?))
    }

    fn mean_hw(&mut self, x: &Self::H) -> Result<Self::H> {
        Ok(ev(k::mean_hw(&x.0)?))
    }

    fn reshape(&mut self, x: &Self::H, dims: &[usize]) -> Result<Self::H> {
        Ok(ev(x.0.reshape(dims)?))
    }

    fn softmax_last(&mut self, x: &Self::H) -> Result<Self::H> {
        Ok(ev(k::softmax_last(&x.0)))
    }

    fn layer_norm(
        &mut self,
        x: &Self::H,
        gamma: &Self::H,
        beta: &Self::H,
        eps: f64,
    ) -> Result<Self::H> {
        Ok(ev(k::layer_norm_last(&x.0, &gamma.0, &beta.0, eps)?))
    }

    fn concat_last(&mut self, xs: &[Self::H]) -> Result<Self::H> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|h| h.0.as_ref()).collect();
        Ok(ev(concat_last_kernel(&vals)?))
    }

    fn slice_last(&mut self, x: &Self::H, from: usize, to: usize) -> Result<Self::H> {
        Ok(ev(slice_last_kernel(&x.0, from, to)?))
    }

    fn reflect_pad(&mut self, x: &Self::H, ph: usize, pw: usize) -> Result<Self::H> {
        Ok(ev(numerics::reflect_pad(&x.0, ph, pw)?))
    }

    fn sep_conv(
        &mut self,
        x: &Self::H,
        kernel: &[T],
        axis: Axis,
        stride: usize,
    ) -> Result<Self::H> {
        Ok(ev(numerics::sep_conv1d(&x.0, kernel, axis, stride)?))
    }

    fn bilinear(&mut self, x: &Self::H, oh: usize, ow: usize) -> Result<Self::H> {
        Ok(ev(numerics::bilinear_resize(&x.0, oh, ow)?))
    }

    fn space_to_depth(&mut self, x: &Self::H, p: usize) -> Result<Self::H> {
        Ok(ev(numerics::space_to_depth(&x.0, p)?))
    }

    fn depth_to_space(&mut self, x: &Self::H, p: usize) -> Result<Self::H> {
        Ok(ev(numerics::depth_to_space(&x.0, p)?))
    }

    fn mul_bc(&mut self, x: &Self::H, s: &Self::H) -> Result<Self::H> {
        Ok(ev(k::mul_bc(&x.0, &s.0)?))
    }

    fn mul_pixel(&mut self, x: &Self::H, s: &Self::H) -> Result<Self::H> {
        Ok(ev(k::mul_pixel(&x.0, &s.0)?))
    }

    fn crop_hw(
        &mut self,
        x: &Self::H,
        y0: usize,
        x0: usize,
        oh: usize,
        ow: usize,
    ) -> Result<Self::H> {
        Ok(ev(k::crop_hw(&x.0, y0, x0, oh, ow)?))
    }

    fn gather_pixels(&mut self, x: &Self::H, idxs: &[usize]) -> Result<Self::H> {
        Ok(ev(k::gather_pixels(&x.0, idxs)?))
    }

    fn scatter_pixels(
        &mut self,
        rows: &Self::H,
        idxs: &[usize],
        dims: &[usize],
    ) -> Result<Self::H> {
        Ok(ev(k::scatter_pixels(&rows.0, idxs, dims)?))
    }

    fn cpair_mul(&mut self, x: &Self::H, plane: &ComplexImage<T>, conj: bool) -> Result<Self::H> {
        Ok(ev(k::cpair_mul(&x.0, plane, conj)?))
    }

    fn cpair_mask(&mut self, x: &Self::H, m: &Tensor<T>) -> Result<Self::H> {
        Ok(ev(k::cpair_mask(&x.0, m)?))
    }

    fn cpair_dft2(&mut self, x: &Self::H, inverse: bool) -> Result<Self::H> {
        Ok(ev(k::cpair_dft2(&x.0, inverse)?))
    }

    fn cpair_abs(&mut self, x: &Self::H) -> Result<Self::H> {
        Ok(ev(k::cpair_abs(&x.0)?))
    }

    fn sub_const(&mut self, x: &Self::H, c: &Tensor<T>) -> Result<Self::H> {
        Ok(ev(x.0.sub(c)?))
    }

    fn selective_scan(
        &mut self,
        x: &Self::H,
        delta: &Self::H,
        b_seq: &Self::H,
        c_seq: &Self::H,
        a: &Tensor<T>,
    ) -> Result<Self::H> {
        let (y, _h) = crate::ssm::kernel::scan_forward(&x.0, &delta.0, &b_seq.0, &c_seq.0, a)?;
        Ok(ev(y))
    }
}

// ---------------------------------------------------------------------------
// Shared shape kernels for concat/slice
// ---------------------------------------------------------------------------

pub(crate) fn concat_last_kernel<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    use crate::error::Error;
    if xs.is_empty() {
        return Err(Error::InvalidArgument("concat of zero tensors".into()));
    }
    let lead = &xs[0].dims()[..xs[0].rank() - 1];
    let mut total_c = 0;
    for x in xs {
        if &x.dims()[..x.rank() - 1] != lead {
            return Err(Error::ShapeMismatch(format!(
                "concat leading dims {:?} vs {:?}",
                lead,
                x.dims()
            )));
        }
        total_c += x.dims()[x.rank() - 1];
    }
    let rows: usize = lead.iter().product();
    let mut dims = lead.to_vec();
    dims.push(total_c);
    let mut out = Tensor::zeros(&dims);
    for r in 0..rows {
        let mut o = r * total_c;
        for x in xs {
            let c = x.dims()[x.rank() - 1];
            out.data_mut()[o..o + c].copy_from_slice(&x.data()[r * c..(r + 1) * c]);
            o += c;
        }
    }
    Ok(out)
}

pub(crate) fn slice_last_kernel<T: Scalar>(
    x: &Tensor<T>,
    from: usize,
    to: usize,
) -> Result<Tensor<T>> {
    use crate::error::Error;
    let c = *x.dims().last().unwrap();
    if from >= to || to > c {
        return Err(Error::InvalidArgument(format!(
            "slice {from}..{to} of {c} channels"
        )));
    }
    let rows = x.len() / c;
    let oc = to - from;
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = oc;
    let mut out = Tensor::zeros(&dims);
    for r in 0..rows {
        out.data_mut()[r * oc..(r + 1) * oc].copy_from_slice(&x.data()[r * c + from..r * c + to]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

struct AddRule;
impl<T: Scalar> BackwardRule<T> for AddRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![g.clone(), g.clone()]
    }
}

struct SubRule;
impl<T: Scalar> BackwardRule<T> for SubRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![g.clone(), g.scale(-T::one())]
    }
}

struct MulRule;
impl<T: Scalar> BackwardRule<T> for MulRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![
            g.zip_map(p[1], |gv, b| gv * b).unwrap(),
            g.zip_map(p[0], |gv, a| gv * a).unwrap(),
        ]
    }
}

struct ScaleRule(f64);
impl<T: Scalar> BackwardRule<T> for ScaleRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![g.scale(T::of_f64(self.0))]
    }
}

struct MatmulRule;
impl<T: Scalar> BackwardRule<T> for MatmulRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let (x, w) = (p[0], p[1]);
        let (c, d) = (w.dims()[0], w.dims()[1]);
        vec![
            k::matmul_grad_x(g, w, x.dims()),
            k::matmul_grad_w(x, g, c, d),
        ]
    }
}

struct BiasAddRule;
impl<T: Scalar> BackwardRule<T> for BiasAddRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![g.clone(), k::sum_to_last(g, p[1].len())]
    }
}

struct ScaleByRule;
impl<T: Scalar> BackwardRule<T> for ScaleByRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let s = p[1].item();
        vec![g.scale(s), Tensor::scalar_tensor(g.dot(p[0]))]
    }
}

struct ReluRule;
impl<T: Scalar> BackwardRule<T> for ReluRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![g
            .zip_map(p[0], |gv, x| if x > T::zero() { gv } else { T::zero() })
            .unwrap()]
    }
}

struct SigmoidRule;
impl<T: Scalar> BackwardRule<T> for SigmoidRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![g.zip_map(o, |gv, y| gv * y * (T::one() - y)).unwrap()]
    }
}

struct SiluRule;
impl<T: Scalar> BackwardRule<T> for SiluRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![g
            .zip_map(p[0], |gv, x| {
                let s = k::sigmoid(x);
                gv * s * (T::one() + x * (T::one() - s))
            })
            .unwrap()]
    }
}

struct SoftplusRule;
impl<T: Scalar> BackwardRule<T> for SoftplusRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![g.zip_map(p[0], |gv, x| gv * k::sigmoid(x)).unwrap()]
    }
}

struct SumAllRule;
impl<T: Scalar> BackwardRule<T> for SumAllRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![Tensor::full(p[0].dims(), g.item())]
    }
}

struct MeanBhwRule;
impl<T: Scalar> BackwardRule<T> for MeanBhwRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let (b, h, w, c) = p[0].bhwc().unwrap();
        let inv = T::of_f64(1.0 / (b * h * w) as f64);
        let mut out = Tensor::zeros(p[0].dims());
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = g.data()[i % c] * inv;
        }
        vec![out]
    }
}

struct MeanHwRule;
impl<T: Scalar> BackwardRule<T> for MeanHwRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let (b, h, w, c) = p[0].bhwc().unwrap();
        let inv = T::of_f64(1.0 / (h * w) as f64);
        let plane = h * w * c;
        let mut out = Tensor::zeros(p[0].dims());
        let _ = b;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let bi = i / plane;
            *v = g.data()[bi * c + i % c] * inv;
        }
        vec![out]
    }
}

struct ReshapeRule {
    in_dims: Vec<usize>,
}
impl<T: Scalar> BackwardRule<T> for ReshapeRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![g.reshape(&self.in_dims).unwrap()]
    }
}

struct SoftmaxLastRule;
impl<T: Scalar> BackwardRule<T> for SoftmaxLastRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], o: &Tensor<T>) -> Vec<Tensor<T>> {
        let c = *o.dims().last().unwrap();
        let mut out = g.clone();
        let rows = o.len() / c;
        for r in 0..rows {
            let ys = &o.data()[r * c..(r + 1) * c];
            let gs = &g.data()[r * c..(r + 1) * c];
            let mut dot = T::zero();
            for (y, gv) in ys.iter().zip(gs) {
                dot += *y * *gv;
            }
            for j in 0..c {
                out.data_mut()[r * c + j] = ys[j] * (gs[j] - dot);
            }
        }
        vec![out]
    }
}

struct LayerNormRule {
    eps: f64,
}
impl<T: Scalar> BackwardRule<T> for LayerNormRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let (x, gamma) = (p[0], p[1]);
        let c = gamma.len();
        let rows = x.len() / c;
        let invc = T::of_f64(1.0 / c as f64);
        let epsr = T::of_f64(self.eps);
        let mut dx = Tensor::zeros(x.dims());
        let mut dgamma = Tensor::zeros(&[c]);
        let mut dbeta = Tensor::zeros(&[c]);
        for r in 0..rows {
            let xs = &x.data()[r * c..(r + 1) * c];
            let gs = &g.data()[r * c..(r + 1) * c];
            let mut mu = T::zero();
            for &v in xs {
                mu += v;
            }
            mu *= invc;
            let mut var = T::zero();
            for &v in xs {
                let d = v - mu;
                var += d * d;
            }
            var *= invc;
            let istd = T::one() / (var + epsr).sqrt();
            // dgamma/dbeta accumulate over rows
            let mut dvar = T::zero();
            let mut dmu = T::zero();
            for j in 0..c {
                let xc = xs[j] - mu;
                let xhat = xc * istd;
                dgamma.data_mut()[j] += gs[j] * xhat;
                dbeta.data_mut()[j] += gs[j];
                let dxhat = gs[j] * gamma.data()[j];
                dvar += dxhat * xc * T::of_f64(-0.5) * istd * istd * istd;
                dmu += dxhat * (-istd);
            }
            let mut sum_xc = T::zero();
            for &v in xs {
                sum_xc += v - mu;
            }
            dmu += dvar * T::of_f64(-2.0) * invc * sum_xc;
            for j in 0..c {
                let xc = xs[j] - mu;
                let dxhat = gs[j] * gamma.data()[j];
                dx.data_mut()[r * c + j] =
                    dxhat * istd + dvar * T::of_f64(2.0) * xc * invc + dmu * invc;
            }
        }
        vec![dx, dgamma, dbeta]
    }
}

struct ConcatLastRule {
    widths: Vec<usize>,
}
impl<T: Scalar> BackwardRule<T> for ConcatLastRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let total: usize = self.widths.iter().sum();
        let rows = g.len() / total;
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.widths.len());
        let mut from = 0;
        for &wd in &self.widths {
            let mut dims = g.dims().to_vec();
            *dims.last_mut().unwrap() = wd;
            let mut t = Tensor::zeros(&dims);
            for r in 0..rows {
                t.data_mut()[r * wd..(r + 1) * wd]
                    .copy_from_slice(&g.data()[r * total + from..r * total + from + wd]);
            }
            outs.push(t);
            from += wd;
        }
        outs
    }
}

struct SliceLastRule {
    from: usize,
    to: usize,
}
impl<T: Scalar> BackwardRule<T> for SliceLastRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let c = *p[0].dims().last().unwrap();
        let oc = self.to - self.from;
        let rows = p[0].len() / c;
        let mut out = Tensor::zeros(p[0].dims());
        for r in 0..rows {
            out.data_mut()[r * c + self.from..r * c + self.to]
                .copy_from_slice(&g.data()[r * oc..(r + 1) * oc]);
        }
        vec![out]
    }
}

struct ReflectPadRule {
    ph: usize,
    pw: usize,
}
impl<T: Scalar> BackwardRule<T> for ReflectPadRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![numerics::reflect_pad_adjoint(g, self.ph, self.pw).unwrap()]
    }
}

struct SepConvRule<T> {
    kernel: Vec<T>,
    axis: Axis,
    stride: usize,
}
impl<T: Scalar> BackwardRule<T> for SepConvRule<T> {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![
            numerics::sep_conv1d_adjoint(g, &self.kernel, self.axis, self.stride, p[0].dims())
                .unwrap(),
        ]
    }
}

struct BilinearRule;
impl<T: Scalar> BackwardRule<T> for BilinearRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let (_, h, w, _) = p[0].bhwc().unwrap();
        vec![numerics::bilinear_resize_adjoint(g, h, w).unwrap()]
    }
}

struct SpaceToDepthRule {
    p: usize,
}
impl<T: Scalar> BackwardRule<T> for SpaceToDepthRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![numerics::depth_to_space(g, self.p).unwrap()]
    }
}

struct DepthToSpaceRule {
    p: usize,
}
impl<T: Scalar> BackwardRule<T> for DepthToSpaceRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![numerics::space_to_depth(g, self.p).unwrap()]
    }
}

struct MulBcRule;
impl<T: Scalar> BackwardRule<T> for MulBcRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let (x, s) = (p[0], p[1]);
        let (b, _h, _w, c) = x.bhwc().unwrap();
        let dx = k::mul_bc(g, s).unwrap();
        let mut ds = Tensor::zeros(&[b, c]);
        let plane = x.len() / b;
        for (i, (&gv, &xv)) in g.data().iter().zip(x.data()).enumerate() {
            let bi = i / plane;
            ds.data_mut()[bi * c + i % c] += gv * xv;
        }
        vec![dx, ds]
    }
}

struct MulPixelRule;
impl<T: Scalar> BackwardRule<T> for MulPixelRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let (x, s) = (p[0], p[1]);
        let c = *x.dims().last().unwrap();
        let dx = k::mul_pixel(g, s).unwrap();
        let mut ds = Tensor::zeros(s.dims());
        for (i, (&gv, &xv)) in g.data().iter().zip(x.data()).enumerate() {
            ds.data_mut()[i / c] += gv * xv;
        }
        vec![dx, ds]
    }
}

struct CropHwRule {
    y0: usize,
    x0: usize,
}
impl<T: Scalar> BackwardRule<T> for CropHwRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let (b, _, _, c) = p[0].bhwc().unwrap();
        let (_, oh, ow, _) = g.bhwc().unwrap();
        let mut out = Tensor::zeros(p[0].dims());
        for bi in 0..b {
            for y in 0..oh {
                let dst = out.idx4(bi, self.y0 + y, self.x0, 0);
                let src = g.idx4(bi, y, 0, 0);
                out.data_mut()[dst..dst + ow * c].copy_from_slice(&g.data()[src..src + ow * c]);
            }
        }
        vec![out]
    }
}

struct GatherPixelsRule {
    idxs: Vec<usize>,
}
impl<T: Scalar> BackwardRule<T> for GatherPixelsRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        let c = *p[0].dims().last().unwrap();
        let mut out = Tensor::zeros(p[0].dims());
        for (kk, &pix) in self.idxs.iter().enumerate() {
            for ci in 0..c {
                out.data_mut()[pix * c + ci] += g.data()[kk * c + ci];
            }
        }
        vec![out]
    }
}

struct ScatterPixelsRule {
    idxs: Vec<usize>,
}
impl<T: Scalar> BackwardRule<T> for ScatterPixelsRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![k::gather_pixels(g, &self.idxs).unwrap()]
    }
}

struct CpairMulRule<T: Scalar> {
    plane: ComplexImage<T>,
    conj: bool,
}
impl<T: Scalar> BackwardRule<T> for CpairMulRule<T> {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        // adjoint of multiply-by-k is multiply-by-conj(k)
        vec![k::cpair_mul(g, &self.plane, !self.conj).unwrap()]
    }
}

struct CpairMaskRule<T: Scalar> {
    m: Tensor<T>,
}
impl<T: Scalar> BackwardRule<T> for CpairMaskRule<T> {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![k::cpair_mask(g, &self.m).unwrap()]
    }
}

struct CpairDftRule {
    inverse: bool,
}
impl<T: Scalar> BackwardRule<T> for CpairDftRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        // unitary transform: adjoint == inverse
        vec![k::cpair_dft2(g, !self.inverse).unwrap()]
    }
}

struct CpairAbsRule;
impl<T: Scalar> BackwardRule<T> for CpairAbsRule {
    fn backward(&self, g: &Tensor<T>, p: &[&Tensor<T>], o: &Tensor<T>) -> Vec<Tensor<T>> {
        let x = p[0];
        let mut out = Tensor::zeros(x.dims());
        let eps = T::of_f64(1e-20);
        for i in 0..o.len() {
            let mag = o.data()[i];
            if mag > eps {
                let gv = g.data()[i];
                out.data_mut()[2 * i] = gv * x.data()[2 * i] / mag;
                out.data_mut()[2 * i + 1] = gv * x.data()[2 * i + 1] / mag;
            }
        }
        vec![out]
    }
}

struct SubConstRule;
impl<T: Scalar> BackwardRule<T> for SubConstRule {
    fn backward(&self, g: &Tensor<T>, _p: &[&Tensor<T>], _o: &Tensor<T>) -> Vec<Tensor<T>> {
        vec![g.clone()]
    }
}

// ---------------------------------------------------------------------------
// Recording engine
// ---------------------------------------------------------------------------

impl<T: Scalar> Engine<T> for Tape<T> {
    type H = NodeId;

    fn constant(&mut self, t: Tensor<T>) -> Self::H {
        Tape::constant(self, t)
    }

    fn param(&mut self, name: &str, t: &Tensor<T>) -> Self::H {
        Tape::param(self, name, t)
    }

    fn value<'s>(&'s self, h: &'s Self::H) -> &'s Tensor<T> {
        Tape::value(self, *h)
    }

    fn add(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        let v = self.value(*a).add(self.value(*b))?;
        Ok(self.push(v, vec![*a, *b], Some(Box::new(AddRule))))
    }

    fn sub(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        let v = self.value(*a).sub(self.value(*b))?;
        Ok(self.push(v, vec![*a, *b], Some(Box::new(SubRule))))
    }

    fn mul(&mut self, a: &Self::H, b: &Self::H) -> Result<Self::H> {
        let v = self.value(*a).zip_map(self.value(*b), |x, y| x * y)?;
        Ok(self.push(v, vec![*a, *b], Some(Box::new(MulRule))))
    }

    fn scale(&mut self, a: &Self::H, kf: f64) -> Result<Self::H> {
        let v = self.value(*a).scale(T::of_f64(kf));
        Ok(self.push(v, vec![*a], Some(Box::new(ScaleRule(kf)))))
    }

    fn matmul(&mut self, x: &Self::H, w: &Self::H) -> Result<Self::H> {
        let v = k::matmul(self.value(*x), self.value(*w))?;
        Ok(self.push(v, vec![*x, *w], Some(Box::new(MatmulRule))))
    }

    fn bias_add(&mut self, x: &Self::H, b: &Self::H) -> Result<Self::H> {
        let v = k::bias_add(self.value(*x), self.value(*b))?;
        Ok(self.push(v, vec![*x, *b], Some(Box::new(BiasAddRule))))
    }

    fn scale_by(&mut self, x: &Self::H, s: &Self::H) -> Result<Self::H> {
        let v = self.value(*x).scale(self.value(*s).item());
        Ok(self.push(v, vec![*x, *s], Some(Box::new(ScaleByRule))))
    }

    fn relu(&mut self, x: &Self::H) -> Result<Self::H> {
        let v = self
            .value(*x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(v, vec![*x], Some(Box::new(ReluRule))))
    }

    fn sigmoid(&mut self, x: &Self::H) -> Result<Self::H> {
        let v = self.value(*x).map(k::sigmoid);
        Ok(self.push(v, vec![*x], Some(Box::new(SigmoidRule))))
    }

    fn silu(&mut self, x: &Self::H) -> Result<Self::H> {
        let v = self.value(*x).map(k::silu);
        Ok(self.push(v, vec![*x], Some(Box::new(SiluRule))))
    }

    fn softplus(&mut self, x: &Self::H) -> Result<Self::H> {
        let v = self.value(*x).map(k::softplus);
        Ok(self.push(v, vec![*x], Some(Box::new(SoftplusRule))))
    }

    fn sum_all(&mut self, x: &Self::H) -> Result<Self::H> {
        let v = Tensor::scalar_tensor(self.value(*x).sum());
        Ok(self.push(v, vec![*x], Some(Box::new(SumAllRule))))
    }

    fn mean_bhw(&mut self, x: &Self::H) -> Result<Self::H> {
        let v = k::mean_bhw(self.value(*x))?;
        Ok(self.push(v, vec![*x], Some(Box::new(MeanBhwRule))))
    }

    fn mean_hw(&mut self, x: &Self::H) -> Result<Self::H> {
        let v = k::mean_hw(self.value(*x))?;
        Ok(self.push(v, vec![*x], Some(Box::new(MeanHwRule))))
    }

    fn reshape(&mut self, x: &Self::H, dims: &[usize]) -> Result<Self::H> {
        let in_dims = self.value(*x).dims().to_vec();
        let v = self.value(*x).reshape(dims)?;
        Ok(self.push(v, vec![*x], Some(Box::new(ReshapeRule { in_dims }))))
    }

    fn softmax_last(&mut self, x: &Self::H) -> Result<Self::H> {
        let v = k::softmax_last(self.value(*x));
        Ok(self.push(v, vec![*x], Some(Box::new(SoftmaxLastRule))))
    }

    fn layer_norm(
        &mut self,
        x: &Self::H,
        gamma: &Self::H,
        beta: &Self::H,
        eps: f64,
    ) -> Result<Self::H> {
        let v = k::layer_norm_last(self.value(*x), self.value(*gamma), self.value(*beta), eps)?;
        Ok(self.push(
            v,
            vec![*x, *gamma, *beta],
            Some(Box::new(LayerNormRule { eps })),
        ))
    }

    fn concat_last(&mut self, xs: &[Self::H]) -> Result<Self::H> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|h| Tape::value(self, *h)).collect();
        let widths: Vec<usize> = vals.iter().map(|v| *v.dims().last().unwrap()).collect();
        let v = concat_last_kernel(&vals)?;
        Ok(self.push(v, xs.to_vec(), Some(Box::new(ConcatLastRule { widths }))))
    }

    fn slice_last(&mut self, x: &Self::H, from: usize, to: usize) -> Result<Self::H> {
        let v = slice_last_kernel(self.value(*x), from, to)?;
        Ok(self.push(v, vec![*x], Some(Box::new(SliceLastRule { from, to }))))
    }

    fn reflect_pad(&mut self, x: &Self::H, ph: usize, pw: usize) -> Result<Self::H> {
        let v = numerics::reflect_pad(self.value(*x), ph, pw)?;
        Ok(self.push(v, vec![*x], Some(Box::new(ReflectPadRule { ph, pw }))))
    }

    fn sep_conv(
        &mut self,
        x: &Self::H,
        kernel: &[T],
        axis: Axis,
        stride: usize,
    ) -> Result<Self::H> {
        let v = numerics::sep_conv1d(self.value(*x), kernel, axis, stride)?;
        let rule = SepConvRule {
            kernel: kernel.to_vec(),
            axis,
            stride,
        };
        Ok(self.push(v, vec![*x], Some(Box::new(rule))))
    }

    fn bilinear(&mut self, x: &Self::H, oh: usize, ow: usize) -> Result<Self::H> {
        let v = numerics::bilinear_resize(self.value(*x), oh, ow)?;
        Ok(self.push(v, vec![*x], Some(Box::new(BilinearRule))))
    }

    fn space_to_depth(&mut self, x: &Self::H, p: usize) -> Result<Self::H> {
        let v = numerics::space_to_depth(self.value(*x), p)?;
        Ok(self.push(v, vec![*x], Some(Box::new(SpaceToDepthRule { p }))))
    }

    fn depth_to_space(&mut self, x: &Self::H, p: usize) -> Result<Self::H> {
        let v = numerics::depth_to_space(self.value(*x), p)?;
        Ok(self.push(v, vec![*x], Some(Box::new(DepthToSpaceRule { p }))))
    }

    fn mul_bc(&mut self, x: &Self::H, s: &Self::H) -> Result<Self::H> {
        let v = k::mul_bc(self.value(*x), self.value(*s))?;
        Ok(self.push(v, vec![*x, *s], Some(Box::new(MulBcRule))))
    }

    fn mul_pixel(&mut self, x: &Self::H, s: &Self::H) -> Result<Self::H> {
        let v = k::mul_pixel(self.value(*x), self.value(*s))?;
        Ok(self.push(v, vec![*x, *s], Some(Box::new(MulPixelRule))))
    }

    fn crop_hw(
        &mut self,
        x: &Self::H,
        y0: usize,
        x0: usize,
        oh: usize,
        ow: usize,
    ) -> Result<Self::H> {
        let v = k::crop_hw(self.value(*x), y0, x0, oh, ow)?;
        Ok(self.push(v, vec![*x], Some(Box::new(CropHwRule { y0, x0 }))))
    }

    fn gather_pixels(&mut self, x: &Self::H, idxs: &[usize]) -> Result<Self::H> {
        let v = k::gather_pixels(self.value(*x), idxs)?;
        Ok(self.push(
            v,
            vec![*x],
            Some(Box::new(GatherPixelsRule {
                idxs: idxs.to_vec(),
            })),
        ))
    }

    fn scatter_pixels(
        &mut self,
        rows: &Self::H,
        idxs: &[usize],
        dims: &[usize],
    ) -> Result<Self::H> {
        let v = k::scatter_pixels(self.value(*rows), idxs, dims)?;
        Ok(self.push(
            v,
            vec![*rows],
            Some(Box::new(ScatterPixelsRule {
                idxs: idxs.to_vec(),
            })),
        ))
    }

    fn cpair_mul(&mut self, x: &Self::H, plane: &ComplexImage<T>, conj: bool) -> Result<Self::H> {
        let v = k::cpair_mul(self.value(*x), plane, conj)?;
        let rule = CpairMulRule {
            plane: plane.clone(),
            conj,
        };
        Ok(self.push(v, vec![*x], Some(Box::new(rule))))
    }

    fn cpair_mask(&mut self, x: &Self::H, m: &Tensor<T>) -> Result<Self::H> {
        let v = k::cpair_mask(self.value(*x), m)?;
        Ok(self.push(v, vec![*x], Some(Box::new(CpairMaskRule { m: m.clone() }))))
    }

    fn cpair_dft2(&mut self, x: &Self::H, inverse: bool) -> Result<Self::H> {
        let v = k::cpair_dft2(self.value(*x), inverse)?;
        Ok(self.push(v, vec![*x], Some(Box::new(CpairDftRule { inverse }))))
    }

    fn cpair_abs(&mut self, x: &Self::H) -> Result<Self::H> {
        let v = k::cpair_abs(self.value(*x))?;
        Ok(self.push(v, vec![*x], Some(Box::new(CpairAbsRule))))
    }

    fn sub_const(&mut self, x: &Self::H, c: &Tensor<T>) -> Result<Self::H> {
        let v = self.value(*x).sub(c)?;
        Ok(self.push(v, vec![*x], Some(Box::new(SubConstRule))))
    }

    fn selective_scan(
        &mut self,
        x: &Self::H,
        delta: &Self::H,
        b_seq: &Self::H,
        c_seq: &Self::H,
        a: &Tensor<T>,
    ) -> Result<Self::H> {
        let (y, h_all) = crate::ssm::kernel::scan_forward(
            self.value(*x),
            self.value(*delta),
            self.value(*b_seq),
            self.value(*c_seq),
            a,
        )?;
        let rule = crate::ssm::kernel::ScanRule {
            a: a.clone(),
            h_all,
        };
        Ok(self.push(y, vec![*x, *delta, *b_seq, *c_seq], Some(Box::new(rule))))
    }
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

    /// A composite expression producing a scalar, generic over the engine.
    fn composite<T: Scalar, E: Engine<T>>(e: &mut E, x: &Tensor<T>, w: &Tensor<T>) -> Result<E::H> {
        let xh = e.param("x", x);
        let wh = e.param("w", w);
        let y = e.matmul(&xh, &wh)?;
        let y = e.silu(&y)?;
        let p = e.reflect_pad(&y, 1, 1)?;
        let kk = [T::of_f64(0.25), T::of_f64(0.5), T::of_f64(0.25)];
        let cvd = e.sep_conv(&p, &kk, Axis::W, 1)?;
        let s = e.softmax_last(&cvd)?;
        e.sum_all(&s)
    }

    #[test]
    fn tape_and_eval_engines_agree() {
        let x = random(&[1, 4, 5, 3], 100);
        let w = random(&[3, 4], 101);
        let mut tape = Tape::<f64>::new();
        let tl = composite(&mut tape, &x, &w).unwrap();
        let mut eval = EvalEngine::new();
        let el = composite(&mut eval, &x, &w).unwrap();
        assert_eq!(tape.value(tl).item(), eval.value(&el).item());
    }

    #[test]
    fn concat_slice_round_trip_gradients() {
        let a = random(&[1, 2, 2, 3], 7);
        let b = random(&[1, 2, 2, 2], 8);
        let mut tape = Tape::<f64>::new();
        let ah = tape.param("a", &a);
        let bh = tape.param("b", &b);
        let cat = tape.concat_last(&[ah, bh]).unwrap();
        // loss only touches the second block of channels
        let sl = tape.slice_last(&cat, 3, 5).unwrap();
        let loss = tape.sum_all(&sl).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.param("a").unwrap().max_abs() == 0.0);
        assert!(g.param("b").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dft_round_trip_through_tape_recovers_input_gradient() {
        let x = random(&[1, 8, 8, 2], 9);
        let mut tape = Tape::<f64>::new();
        let xh = tape.param("x", &x);
        let f = tape.cpair_dft2(&xh, false).unwrap();
        let b = tape.cpair_dft2(&f, true).unwrap();
        // loss = <x, F^-1(F(x))> behaves like ||x||^2; grad = 2x
        let prod = tape.mul(&b, &xh).unwrap();
        let loss = tape.sum_all(&prod).unwrap();
        let g = tape.backward(loss).unwrap();
        let expect = x.scale(2.0);
        assert!(g.param("x").unwrap().max_abs_diff(&expect) < 1e-9);
    }
}
