//! Dense feature maps and the binary tensor file format.
//!
//! A tensor record is two little-endian `u32` dimensions (rows, cols)
//! followed by `rows * cols` row-major little-endian `f32` values. Files may
//! hold several records back to back.

use std::io::{self, Read, Write};

use ndarray::{s, Array2, Array3, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite entry in tensor")]
    NonFinite,
    #[error("tensor record truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `C x H x W` feature map produced by the pillar encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImage {
    pub data: Array3<f32>,
}

impl PseudoImage {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { data: Array3::zeros((channels, height, width)) }
    }

    pub fn from_array(data: Array3<f32>) -> Self {
        Self { data }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-channel spatial mean, in `f64`.
    pub fn channel_means(&self) -> Vec<f64> {
        let hw = (self.height() * self.width()).max(1) as f64;
        self.data
            .axis_iter(Axis(0))
            .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / hw)
            .collect()
    }

    /// Channel-wise concatenation `[self, other]`.
    pub fn concat(&self, other: &PseudoImage) -> Result<PseudoImage, TensorError> {
        if self.height() != other.height() || self.width() != other.width() {
            return Err(TensorError::Shape {
                expected: vec![other.channels(), self.height(), self.width()],
                got: vec![other.channels(), other.height(), other.width()],
            });
        }
        let c = self.channels();
        let mut out = Array3::zeros((c + other.channels(), self.height(), self.width()));
        out.slice_mut(s![..c, .., ..]).assign(&self.data);
        out.slice_mut(s![c.., .., ..]).assign(&other.data);
        Ok(PseudoImage { data: out })
    }
}

/// Writes one tensor record.
pub fn write_matrix<W: Write>(mut w: W, m: &Array2<f64>) -> io::Result<()> {
    let (rows, cols) = m.dim();
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(rows * cols * 4);
    for v in m.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one tensor record from the front of `bytes`, returning the matrix
/// and the number of bytes consumed.
pub fn decode_matrix(bytes: &[u8]) -> Result<(Array2<f64>, usize), TensorError> {
    if bytes.len() < 8 {
        return Err(TensorError::Truncated { needed: 8, available: bytes.len() });
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let needed = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(8))
        .ok_or(TensorError::Truncated { needed: usize::MAX, available: bytes.len() })?;
    if bytes.len() < needed {
        return Err(TensorError::Truncated { needed, available: bytes.len() });
    }
    let values: Vec<f64> = bytes[8..needed]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite);
    }
    let m = Array2::from_shape_vec((rows, cols), values).expect("length checked above");
    Ok((m, needed))
}

pub fn read_matrices<R: Read>(mut r: R) -> Result<Vec<Array2<f64>>, TensorError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut out = Vec::new();
    let mut off = 0;
    while off < buf.len() {
        let (m, used) = decode_matrix(&buf[off..])?;
        out.push(m);
        off += used;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_record_layout() {
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]];
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 8 + 6 * 4);
        assert_eq!(&buf[0..4], &2u32.to_le_bytes());
        assert_eq!(&buf[4..8], &3u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1.0f32.to_le_bytes());
        assert_eq!(&buf[28..32], &6.5f32.to_le_bytes());
        write_matrix(&mut buf, &array![[7.0]]).unwrap();
        let back = read_matrices(&buf[..]).unwrap();
        assert_eq!(back, vec![m, array![[7.0]]]);
    }

    #[test]
    fn truncated_record_rejected() {
        let mut buf = Vec::new();
        write_matrix(&mut buf, &array![[1.0, 2.0]]).unwrap();
        assert!(matches!(decode_matrix(&buf[..11]), Err(TensorError::Truncated { .. })));
        assert!(read_matrices(&buf[..5]).is_err());
    }

    #[test]
    fn concat_orders_channels() {
        let mut a = PseudoImage::zeros(2, 3, 4);
        a.data.fill(1.0);
        let b = PseudoImage::zeros(3, 3, 4);
        let c = a.concat(&b).unwrap();
        assert_eq!(c.dims(), (5, 3, 4));
        assert_eq!(c.sum(), 24.0);
        assert!(a.concat(&PseudoImage::zeros(1, 3, 5)).is_err());
    }
}
