//! Visual features: the binary feature-file format, the toy patch extractor,
//! and the `FeatureSequence` the encoder consumes.
//!
//! File layout (little-endian): magic `R2GF`, version u8 = 1, u32 patch
//! count S, u32 width d, then S*d IEEE-754 f32 values, row-major.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"R2GF";
pub const FEATURE_VERSION: u8 = 1;
/// Sanity cap on S*d so a corrupt header cannot ask for gigabytes.
const MAX_ELEMENTS: u64 = 1 << 28;

/// A `[s, width]` patch-feature sequence; the graph is kept alive so the
/// extractor projection can train through it.
#[derive(Clone, Debug)]
pub struct FeatureSequence<T: Scalar> {
    values: Tensor<T>,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        match *values.shape() {
            [s, w] if s >= 1 && w >= 1 => Ok(FeatureSequence { values }),
            _ => Err(Error::Contract(format!(
                "feature sequence must be [s >= 1, width >= 1], got {:?}",
                values.shape()
            ))),
        }
    }

    pub fn s(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// Concatenate along the patch axis (multi-image input).
    pub fn concat(parts: &[FeatureSequence<T>]) -> Result<FeatureSequence<T>> {
        let tensors: Vec<Tensor<T>> = parts.iter().map(|p| p.values.clone()).collect();
        FeatureSequence::new(Tensor::concat_rows(&tensors)?)
    }
}

/// Row-major grayscale grid.
#[derive(Clone, Debug)]
pub struct GrayImage<T: Scalar> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> GrayImage<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Geometry(format!(
                "image data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(GrayImage { h, w, data })
    }
}

/// Toy extractor: mean-pool each `patch x patch` cell, flatten row-major,
/// then apply the learned projection to the model width.
pub fn extract_features<T: Scalar>(
    image: &GrayImage<T>,
    patch: usize,
    proj: &Linear<T>,
) -> Result<FeatureSequence<T>> {
    if patch == 0 || image.h % patch != 0 || image.w % patch != 0 {
        return Err(Error::Geometry(format!(
            "image {}x{} is not divisible into {patch}x{patch} patches",
            image.h, image.w
        )));
    }
    if proj.d_in != 1 {
        return Err(Error::Config(format!(
            "patch extractor projection must take width 1, got {}",
            proj.d_in
        )));
    }
    let (rows, cols) = (image.h / patch, image.w / patch);
    let norm = T::from_f64((patch * patch) as f64);
    let mut pooled = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut acc = T::zero();
            for y in 0..patch {
                for x in 0..patch {
                    acc = acc + image.data[(pr * patch + y) * image.w + pc * patch + x];
                }
            }
            pooled.push(acc / norm);
        }
    }
    let pooled = Tensor::from_vec(pooled, &[rows * cols, 1])?;
    FeatureSequence::new(proj.forward(&pooled)?)
}

/// Write atomically (temp file + rename); values are stored as f32.
pub fn save_features<T: Scalar>(path: &Path, features: &FeatureSequence<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(13 + features.s() * features.width() * 4);
    bytes.extend_from_slice(&FEATURE_MAGIC);
    bytes.push(FEATURE_VERSION);
    bytes.extend_from_slice(&(features.s() as u32).to_le_bytes());
    bytes.extend_from_slice(&(features.width() as u32).to_le_bytes());
    for &v in features.values().data() {
        bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    crate::fsutil::write_atomic(path, &bytes)
}

pub fn load_features<T: Scalar>(path: &Path) -> Result<FeatureSequence<T>> {
    let bytes = std::fs::read(path)?;
    let mut cursor = crate::fsutil::ByteReader::new(&bytes);
    let magic = cursor.take(4)?;
    if magic != FEATURE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: FEATURE_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        }
        .into());
    }
    let version = cursor.u8()?;
    if version != FEATURE_VERSION {
        return Err(FormatError::Version { expected: FEATURE_VERSION, found: version }.into());
    }
    let s = cursor.u32()? as u64;
    let d = cursor.u32()? as u64;
    if s == 0 || d == 0 || s * d > MAX_ELEMENTS {
        return Err(FormatError::DimensionOverflow { s, d }.into());
    }
    let n = (s * d) as usize;
    let payload = cursor.take(n * 4)?;
    let data: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    FeatureSequence::new(Tensor::from_vec(data, &[s as usize, d as usize])?)
}
