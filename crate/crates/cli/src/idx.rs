//! IDX files: two zero bytes, a type code, the number of dimensions, one
//! big-endian u32 per dimension, then the big-endian payload.
//!
//! Images are `N x H x W` (one channel) or `N x C x H x W`; unsigned bytes
//! are scaled to [0, 1], float payloads are taken as they are. Labels are a
//! one-dimensional unsigned byte file.

use std::fs;
use std::path::Path;

use gradsparse::nn::Dataset;
use gradsparse::Tensor3;
use thiserror::Error;

use crate::error::{CliError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;
const TYPE_F64: u8 = 0x0E;

/// A malformed IDX file; `offset` is the byte where reading went wrong.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("byte {offset}: {message}")]
pub struct IdxError {
    pub offset: usize,
    pub message: String,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> std::result::Result<T, IdxError> {
    Err(IdxError {
        offset,
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl IdxData {
    fn type_code(&self) -> u8 {
        match self {
            IdxData::U8(_) => TYPE_U8,
            IdxData::F32(_) => TYPE_F32,
            IdxData::F64(_) => TYPE_F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            IdxData::U8(v) => v.len(),
            IdxData::F32(v) => v.len(),
            IdxData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values as f64; bytes are scaled by 1/255.
    pub fn normalized(&self) -> Vec<f64> {
        match self {
            IdxData::U8(v) => v.iter().map(|&b| f64::from(b) / 255.0).collect(),
            IdxData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            IdxData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        (u32::from(self.data.type_code()) << 8) | self.dims.len() as u32
    }
}

pub fn parse_idx(bytes: &[u8]) -> std::result::Result<IdxArray, IdxError> {
    if bytes.len() < 4 {
        return fail(
            bytes.len(),
            format!("header truncated: expected 4 bytes, found {}", bytes.len()),
        );
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return fail(
            0,
            format!(
                "bad magic {:02x}{:02x}{:02x}{:02x}",
                bytes[0], bytes[1], bytes[2], bytes[3]
            ),
        );
    }
    let width = match bytes[2] {
        TYPE_U8 => 1,
        TYPE_F32 => 4,
        TYPE_F64 => 8,
        t => return fail(2, format!("unsupported type code 0x{t:02x}")),
    };
    let ndims = usize::from(bytes[3]);
    if ndims == 0 {
        return fail(3, "zero dimensions");
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return fail(
            bytes.len(),
            format!(
                "header truncated: expected {header} bytes, found {}",
                bytes.len()
            ),
        );
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let Some(expected) = count.and_then(|n| n.checked_mul(width)) else {
        return fail(4, "dimensions overflow");
    };
    let payload = &bytes[header..];
    if payload.len() < expected {
        return fail(
            bytes.len(),
            format!(
                "payload truncated: expected {expected} bytes, found {}",
                payload.len()
            ),
        );
    }
    if payload.len() > expected {
        return fail(
            header + expected,
            format!("{} trailing bytes after payload", payload.len() - expected),
        );
    }
    let data = match bytes[2] {
        TYPE_U8 => IdxData::U8(payload.to_vec()),
        TYPE_F32 => IdxData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        _ => IdxData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(IdxArray { dims, data })
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * arr.dims.len() + arr.data.len() * 8);
    out.extend_from_slice(&arr.magic().to_be_bytes());
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    match &arr.data {
        IdxData::U8(v) => out.extend_from_slice(v),
        IdxData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
        IdxData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_be_bytes())),
    }
    out
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_idx(&bytes).map_err(|source| CliError::Idx {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(arr)).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn shape_error<T>(path: &Path, message: String) -> Result<T> {
    Err(CliError::Idx {
        path: path.to_path_buf(),
        source: IdxError { offset: 3, message },
    })
}

pub fn images_from(arr: &IdxArray) -> std::result::Result<Vec<Tensor3>, String> {
    let (n, c, h, w) = match arr.dims[..] {
        [n, h, w] => (n, 1, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(format!(
                "images need 3 or 4 dimensions, found {}",
                arr.dims.len()
            ))
        }
    };
    let values = arr.data.normalized();
    let per = c * h * w;
    Ok((0..n)
        .map(|i| {
            Tensor3::new(c, h, w, values[i * per..(i + 1) * per].to_vec())
                .expect("sizes checked by parse")
        })
        .collect())
}

pub fn load_images(path: &Path) -> Result<Vec<Tensor3>> {
    let arr = read_idx(path)?;
    images_from(&arr).or_else(|m| shape_error(path, m))
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let arr = read_idx(path)?;
    match (&arr.dims[..], &arr.data) {
        ([_], IdxData::U8(v)) => Ok(v.iter().map(|&b| usize::from(b)).collect()),
        _ => shape_error(
            path,
            "labels must be a one-dimensional unsigned byte file".into(),
        ),
    }
}

/// Images and labels as a dataset of `classes` classes.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    Ok(Dataset::new(
        load_images(images)?,
        load_labels(labels)?,
        classes,
    )?)
}

/// Writes images as f64 so that reading them back is exact.
pub fn write_images(path: &Path, images: &[Tensor3]) -> Result<()> {
    let (c, h, w) = images.first().map_or((1, 0, 0), Tensor3::shape);
    let dims = if c == 1 {
        vec![images.len(), h, w]
    } else {
        vec![images.len(), c, h, w]
    };
    let data = images
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    write_idx(
        path,
        &IdxArray {
            dims,
            data: IdxData::F64(data),
        },
    )
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let bytes = labels
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| CliError::Config(format!("label {l} does not fit a byte")))
        })
        .collect::<Result<Vec<u8>>>()?;
    write_idx(
        path,
        &IdxArray {
            dims: vec![labels.len()],
            data: IdxData::U8(bytes),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b
    }

    #[test]
    fn ten_images_of_eight_by_eight() {
        let mut b = header(IMAGES_MAGIC, &[10, 8, 8]);
        b.extend((0..640).map(|i| (i % 256) as u8));
        let arr = parse_idx(&b).unwrap();
        assert_eq!(arr.magic(), IMAGES_MAGIC);
        let imgs = images_from(&arr).unwrap();
        assert_eq!(imgs.len(), 10);
        assert_eq!(imgs[0].shape(), (1, 8, 8));
        assert_eq!(imgs[0].get(0, 0, 1), 1.0 / 255.0);
        assert_eq!(imgs[3].get(0, 7, 7), 1.0);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let mut b = header(IMAGES_MAGIC, &[10, 8, 8]);
        b.extend(std::iter::repeat_n(0u8, 600));
        let e = parse_idx(&b).unwrap_err();
        assert_eq!(e.offset, 616);
        assert_eq!(
            e.to_string(),
            "byte 616: payload truncated: expected 640 bytes, found 600"
        );
    }

    #[test]
    fn bad_magic_and_short_header() {
        let e = parse_idx(&[0, 1, 8, 1]).unwrap_err();
        assert_eq!(e.offset, 0);
        assert!(e.message.contains("bad magic"));
        let e = parse_idx(&[0, 0, 0x09, 1, 0, 0, 0, 0]).unwrap_err();
        assert_eq!(e.offset, 2);
        let e = parse_idx(&header(IMAGES_MAGIC, &[2, 2])).unwrap_err();
        assert_eq!(e.offset, 12);
        assert!(e.message.contains("expected 16 bytes, found 12"));
        let e = parse_idx(&[0, 0]).unwrap_err();
        assert_eq!(e.offset, 2);
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut b = header(LABELS_MAGIC, &[3]);
        b.extend([0, 1, 2, 9]);
        let e = parse_idx(&b).unwrap_err();
        assert_eq!(e.offset, 11);
    }

    #[test]
    fn float_payloads_are_big_endian() {
        let mut b = header(0x0000_0D01, &[2]);
        b.extend(1.5f32.to_be_bytes());
        b.extend((-2.0f32).to_be_bytes());
        let arr = parse_idx(&b).unwrap();
        assert_eq!(arr.data, IdxData::F32(vec![1.5, -2.0]));
        assert_eq!(encode_idx(&arr), b);
    }
}
