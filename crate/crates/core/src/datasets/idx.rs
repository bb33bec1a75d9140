//! Big-endian IDX files (the MNIST container format).
//!
//! Images use magic `0x00000803` with three dimensions, labels use
//! `0x00000801` with one. Gzipped files are detected by their header and
//! decompressed on the fly.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated file ({needed} bytes needed, {available} available)")]
    Truncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Raw image block: `count` images of `rows × cols` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_all(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn need(&self, n: usize) -> Result<(), IdxError> {
        if self.bytes.len() < n {
            return Err(IdxError::Truncated {
                path: self.path.to_path_buf(),
                needed: n,
                available: self.bytes.len(),
            });
        }
        Ok(())
    }

    fn header(&self, expected: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
        self.need(4)?;
        let word = |i: usize| u32::from_be_bytes(self.bytes[i..i + 4].try_into().unwrap());
        let magic = word(0);
        if magic != expected {
            return Err(IdxError::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                found: magic,
            });
        }
        self.need(4 + 4 * dims)?;
        Ok((0..dims).map(|d| word(4 + 4 * d) as usize).collect())
    }
}

pub fn read_images(path: &Path) -> Result<IdxImages, IdxError> {
    let bytes = read_all(path)?;
    let cur = Cursor {
        path,
        bytes: &bytes,
    };
    let dims = cur.header(IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = 16 + count * rows * cols;
    cur.need(body)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..body].to_vec(),
    })
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    let bytes = read_all(path)?;
    let cur = Cursor {
        path,
        bytes: &bytes,
    };
    let count = cur.header(LABELS_MAGIC, 1)?[0];
    cur.need(8 + count)?;
    Ok(bytes[8..8 + count].to_vec())
}

fn write_file(path: &Path, data: &[u8]) -> Result<(), IdxError> {
    let io = |source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(data).map_err(io)
}

/// Writes an uncompressed image file.
pub fn write_images(path: &Path, images: &IdxImages) -> Result<(), IdxError> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    write_file(path, &out)
}

/// Writes an uncompressed label file.
pub fn write_labels(path: &Path, labels: &[u8]) -> Result<(), IdxError> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_file(path, &out)
}
