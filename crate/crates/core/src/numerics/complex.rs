//! Complex-valued 2-D fields (image or k-space).

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Complex H×W field stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage<T> {
    re: Tensor<T>,
    im: Tensor<T>,
}

impl<T: Scalar> ComplexImage<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        if re.dims() != im.dims() {
            return Err(Error::ShapeMismatch(format!(
                "re {:?} vs im {:?}",
                re.dims(),
                im.dims()
            )));
        }
        if re.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "complex image must be rank 2, got {:?}",
                re.dims()
            )));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            re: Tensor::zeros(&[h, w]),
            im: Tensor::zeros(&[h, w]),
        }
    }

    pub fn from_real(re: Tensor<T>) -> Result<Self> {
        let im = Tensor::zeros(re.dims());
        Self::new(re, im)
    }

    pub fn h(&self) -> usize {
        self.re.dims()[0]
    }

    pub fn w(&self) -> usize {
        self.re.dims()[1]
    }

    pub fn re(&self) -> &Tensor<T> {
        &self.re
    }

    pub fn im(&self) -> &Tensor<T> {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut Tensor<T> {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut Tensor<T> {
        &mut self.im
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            re: self.re.add(&other.re)?,
            im: self.im.add(&other.im)?,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            re: self.re.sub(&other.re)?,
            im: self.im.sub(&other.im)?,
        })
    }

    pub fn scale(&self, k: T) -> Self {
        Self {
            re: self.re.scale(k),
            im: self.im.scale(k),
        }
    }

    /// Pointwise complex product `self * other`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.mul_impl(other, false)
    }

    /// Pointwise complex product `conj(other) * self`.
    pub fn mul_conj(&self, other: &Self) -> Result<Self> {
        self.mul_impl(other, true)
    }

    fn mul_impl(&self, other: &Self, conj_other: bool) -> Result<Self> {
        if self.re.dims() != other.re.dims() {
            return Err(Error::ShapeMismatch(format!(
                "complex mul {:?} vs {:?}",
                self.re.dims(),
                other.re.dims()
            )));
        }
        let sgn = if conj_other { -T::one() } else { T::one() };
        let mut re = self.re.clone();
        let mut im = self.im.clone();
        for i in 0..re.len() {
            let (ar, ai) = (self.re.data()[i], self.im.data()[i]);
            let (br, bi) = (other.re.data()[i], sgn * other.im.data()[i]);
            re.data_mut()[i] = ar * br - ai * bi;
            im.data_mut()[i] = ar * bi + ai * br;
        }
        Ok(Self { re, im })
    }

    /// Pointwise multiply by a real mask/weight plane.
    pub fn mul_real(&self, mask: &Tensor<T>) -> Result<Self> {
        Ok(Self {
            re: self.re.zip_map(mask, |a, m| a * m)?,
            im: self.im.zip_map(mask, |a, m| a * m)?,
        })
    }

    /// `sqrt(re^2 + im^2)` per pixel.
    pub fn magnitude(&self) -> Tensor<T> {
        self.re
            .zip_map(&self.im, |r, i| (r * r + i * i).sqrt())
            .expect("re/im dims agree by construction")
    }

    /// Real inner product `Re <self, other>` treating C^{HW} as R^{2HW}.
    pub fn dot_real(&self, other: &Self) -> T {
        self.re.dot(&other.re) + self.im.dot(&other.im)
    }

    pub fn norm2(&self) -> T {
        self.dot_real(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.re.all_finite() && self.im.all_finite()
    }

    /// Lifts into a `[1, H, W, 2]` feature map (channel 0 = re, 1 = im).
    pub fn to_feature(&self) -> Tensor<T> {
        let (h, w) = (self.h(), self.w());
        let mut out = Tensor::zeros(&[1, h, w, 2]);
        for i in 0..h * w {
            out.data_mut()[2 * i] = self.re.data()[i];
            out.data_mut()[2 * i + 1] = self.im.data()[i];
        }
        out
    }

    /// Inverse of [`to_feature`](Self::to_feature).
    pub fn from_feature(t: &Tensor<T>) -> Result<Self> {
        let (b, h, w, c) = t.bhwc()?;
        if b != 1 || c != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected [1,H,W,2] feature map, got {:?}",
                t.dims()
            )));
        }
        let mut re = Tensor::zeros(&[h, w]);
        let mut im = Tensor::zeros(&[h, w]);
        for i in 0..h * w {
            re.data_mut()[i] = t.data()[2 * i];
            im.data_mut()[i] = t.data()[2 * i + 1];
        }
        Self::new(re, im)
    }

    pub fn cast<U: Scalar>(&self) -> ComplexImage<U> {
        ComplexImage {
            re: self.re.cast(),
            im: self.im.cast(),
        }
    }
}
