//! Binary tensor container.
//!
//! Layout (little-endian):
//! ```text
//! magic   4 bytes  "KMOE"
//! version u16      currently 1
//! dtype   u8       0 = f32, 1 = f64, 2 = c64 (re/im f32 pairs)
//! rank    u16
//! extents rank * u64
//! payload product(extents) * element size, row-major
//! ```
//! Round trips are bit-exact; header violations yield distinct errors.

use crate::error::{FormatError, Result};
use crate::numerics::{ComplexImage, Dtype, Scalar, Tensor};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"KMOE";
pub const VERSION: u16 = 1;

fn write_header(out: &mut Vec<u8>, dtype: Dtype, dims: &[usize]) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

struct Header {
    dtype: Dtype,
    dims: Vec<usize>,
    payload_offset: usize,
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 9 {
        return Err(FormatError::Truncated {
            expected: 9,
            found: bytes.len(),
        }
        .into());
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != MAGIC {
        return Err(FormatError::MagicMismatch { found: magic }.into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let dtype = Dtype::from_code(bytes[6]).ok_or(FormatError::UnknownDtype(bytes[6]))?;
    let rank = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
    let need = 9 + rank * 8;
    if bytes.len() < need {
        return Err(FormatError::Truncated {
            expected: need,
            found: bytes.len(),
        }
        .into());
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut ext = [0u8; 8];
        ext.copy_from_slice(&bytes[9 + i * 8..9 + (i + 1) * 8]);
        let v = u64::from_le_bytes(ext);
        if v == 0 {
            return Err(FormatError::BadHeader(format!("zero extent at axis {i}")).into());
        }
        dims.push(v as usize);
    }
    Ok(Header {
        dtype,
        dims,
        payload_offset: need,
    })
}

/// Serializes a real tensor with the dtype of its scalar type.
pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + t.len() * T::DTYPE.size_bytes());
    write_header(&mut out, T::DTYPE, t.dims());
    match T::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        Dtype::C64 => unreachable!("real scalar types only"),
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a real tensor, requiring the on-disk dtype to match `T`.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let h = read_header(&bytes)?;
    if h.dtype != T::DTYPE {
        return Err(FormatError::DtypeMismatch {
            found: h.dtype.name(),
            requested: T::DTYPE.name(),
        }
        .into());
    }
    let n: usize = h.dims.iter().product();
    let esz = h.dtype.size_bytes();
    let expected = h.payload_offset + n * esz;
    if bytes.len() != expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        }
        .into());
    }
    let payload = &bytes[h.payload_offset..];
    let data: Vec<T> = match h.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| T::of_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| {
                T::of_f64(f64::from_le_bytes([
                    b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
                ]))
            })
            .collect(),
        Dtype::C64 => unreachable!("checked above"),
    };
    Tensor::new(h.dims, data)
}

/// Serializes a complex image as a rank-2 c64 tensor (f32 precision on disk).
pub fn write_complex<T: Scalar>(path: &Path, img: &ComplexImage<T>) -> Result<()> {
    let dims = [img.h(), img.w()];
    let mut out = Vec::with_capacity(16 + img.h() * img.w() * 8);
    write_header(&mut out, Dtype::C64, &dims);
    for i in 0..img.h() * img.w() {
        out.extend_from_slice(&(img.re().data()[i].as_f64() as f32).to_le_bytes());
        out.extend_from_slice(&(img.im().data()[i].as_f64() as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a rank-2 c64 tensor back into a complex image.
pub fn read_complex<T: Scalar>(path: &Path) -> Result<ComplexImage<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let h = read_header(&bytes)?;
    if h.dtype != Dtype::C64 {
        return Err(FormatError::DtypeMismatch {
            found: h.dtype.name(),
            requested: "c64",
        }
        .into());
    }
    if h.dims.len() != 2 {
        return Err(FormatError::BadHeader(format!(
            "complex image must be rank 2, got {}",
            h.dims.len()
        ))
        .into());
    }
    let n: usize = h.dims.iter().product();
    let expected = h.payload_offset + n * 8;
    if bytes.len() != expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        }
        .into());
    }
    let payload = &bytes[h.payload_offset..];
    let mut re = Tensor::zeros(&h.dims);
    let mut im = Tensor::zeros(&h.dims);
    for i in 0..n {
        let b = &payload[i * 8..(i + 1) * 8];
        re.data_mut()[i] = T::of_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        im.data_mut()[i] = T::of_f64(f32::from_le_bytes([b[4], b[5], b[6], b[7]]) as f64);
    }
    ComplexImage::new(re, im)
}
