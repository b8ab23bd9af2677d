//! Synthetic phantoms, the binary tensor container, PGM image dumps, and the
//! channel-wise log-magnitude spectra diagnostic.

mod tensor_file;

pub use tensor_file::{read_complex, read_tensor, write_complex, write_tensor, MAGIC, VERSION};

use crate::error::{Error, Result};
use crate::numerics::{dft2_centered, ComplexImage, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// One phantom ellipse in normalized [-1,1] coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub intensity: f64,
    pub half_a: f64,
    pub half_b: f64,
    pub x0: f64,
    pub y0: f64,
    pub phi_deg: f64,
}

/// Synthetic ground-truth image with the ellipse set that produced it.
#[derive(Debug, Clone)]
pub struct Phantom<T> {
    pub image: ComplexImage<T>,
    pub ellipses: Vec<Ellipse>,
}

/// The classical ten-ellipse head phantom (modified intensity variant with
/// values in [0,1]); parameters from the standard published table.
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
];

/// Shepp-Logan-style phantom with seeded jitter of ellipse centers and
/// intensities for training diversity. Deterministic per (h, w, seed).
pub fn shepp_logan<T: Scalar>(h: usize, w: usize, jitter_seed: u64) -> Result<Phantom<T>> {
    if h < 32 || w < 32 {
        return Err(Error::InvalidArgument(format!(
            "phantom extent {h}x{w} below 32"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let ellipses: Vec<Ellipse> = SHEPP_LOGAN
        .iter()
        .map(|&(a, ax, bx, x0, y0, phi)| Ellipse {
            intensity: a * (1.0 + rng.gen_range(-0.08..0.08)),
            half_a: ax,
            half_b: bx,
            x0: x0 + rng.gen_range(-0.04..0.04),
            y0: y0 + rng.gen_range(-0.04..0.04),
            phi_deg: phi,
        })
        .collect();

    let mut re = Tensor::zeros(&[h, w]);
    for iy in 0..h {
        // y grows upward in the phantom convention
        let y = 1.0 - 2.0 * (iy as f64 + 0.5) / h as f64;
        for ix in 0..w {
            let x = 2.0 * (ix as f64 + 0.5) / w as f64 - 1.0;
            let mut v = 0.0;
            for e in &ellipses {
                let phi = e.phi_deg.to_radians();
                let (dx, dy) = (x - e.x0, y - e.y0);
                let xr = dx * phi.cos() + dy * phi.sin();
                let yr = -dx * phi.sin() + dy * phi.cos();
                if (xr / e.half_a).powi(2) + (yr / e.half_b).powi(2) <= 1.0 {
                    v += e.intensity;
                }
            }
            re.data_mut()[iy * w + ix] = T::of_f64(v.clamp(0.0, 1.0));
        }
    }
    Ok(Phantom {
        image: ComplexImage::from_real(re)?,
        ellipses,
    })
}

/// Writes an 8-bit grayscale PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "pgm payload {} vs {}x{}",
            pixels.len(),
            width,
            height
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Normalizes a magnitude image to 0..=255 for PGM dumps.
pub fn to_gray<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in t.data() {
        let f = v.as_f64();
        lo = lo.min(f);
        hi = hi.max(f);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    t.data()
        .iter()
        .map(|v| (((v.as_f64() - lo) / span) * 255.0).round() as u8)
        .collect()
}

/// Grid geometry of a spectra dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectraLayout {
    pub rows: usize,
    pub cols: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

/// Per-channel centered log-magnitude spectra of a `[B,H,W,C]` feature map
/// (batch element 0), each tile normalized to [0,255], tiled into one PGM.
pub fn spectra_diagnostic<T: Scalar>(f: &Tensor<T>, out_path: &Path) -> Result<SpectraLayout> {
    let (_b, h, w, c) = f.bhwc()?;
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let mut canvas = vec![0u8; rows * h * cols * w];
    for ci in 0..c {
        let tile = spectra_tile(f, ci)?;
        let (ty, tx) = (ci / cols, ci % cols);
        for y in 0..h {
            for x in 0..w {
                canvas[(ty * h + y) * cols * w + tx * w + x] = tile[y * w + x];
            }
        }
    }
    write_pgm(out_path, cols * w, rows * h, &canvas)?;
    Ok(SpectraLayout {
        rows,
        cols,
        tile_h: h,
        tile_w: w,
    })
}

/// One channel's normalized log-magnitude spectrum as 8-bit pixels.
pub fn spectra_tile<T: Scalar>(f: &Tensor<T>, channel: usize) -> Result<Vec<u8>> {
    let (_b, h, w, _c) = f.bhwc()?;
    let mut plane = Tensor::<T>::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            plane.data_mut()[y * w + x] = f.at4(0, y, x, channel);
        }
    }
    let spec = dft2_centered(&ComplexImage::from_real(plane)?, false)?;
    let logmag: Vec<f64> = (0..h * w)
        .map(|i| {
            let m = (spec.re().data()[i].as_f64().powi(2) + spec.im().data()[i].as_f64().powi(2))
                .sqrt();
            (1.0 + m).ln()
        })
        .collect();
    let hi = logmag.iter().cloned().fold(0.0f64, f64::max);
    let span = if hi > 0.0 { hi } else { 1.0 };
    Ok(logmag
        .iter()
        .map(|v| ((v / span) * 255.0).round() as u8)
        .collect())
}
