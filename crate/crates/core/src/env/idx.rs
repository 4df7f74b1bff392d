//! IDX container format (the MNIST distribution format).
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for rank-3 unsigned-byte
//! image stacks, `0x00000801` for rank-1 label vectors), one big-endian `u32`
//! per dimension, then the raw bytes in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("bad magic at offset {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        offset: usize,
        expected: u32,
        found: u32,
    },
    #[error("truncated input at offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("{extra} trailing bytes after payload at offset {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("dimension product overflows at offset {offset}")]
    Overflow { offset: usize },
    #[error(
        "image count {images} does not match label count {labels} (label header offset {offset})"
    )]
    CountMismatch {
        offset: usize,
        images: usize,
        labels: usize,
    },
    #[error("label {label} at offset {offset} is outside 0..{classes}")]
    LabelRange {
        offset: usize,
        label: u8,
        classes: usize,
    },
}

impl IdxError {
    pub fn offset(&self) -> usize {
        match *self {
            IdxError::BadMagic { offset, .. }
            | IdxError::Truncated { offset, .. }
            | IdxError::Trailing { offset, .. }
            | IdxError::Overflow { offset }
            | IdxError::CountMismatch { offset, .. }
            | IdxError::LabelRange { offset, .. } => offset,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: IdxError,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Raw decoded image stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, index: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[index * size..(index + 1) * size]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32_be(&mut self) -> Result<u32, IdxError> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], IdxError> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(IdxError::Truncated {
                offset: self.bytes.len(),
                needed: len - available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<(), IdxError> {
        let offset = self.pos;
        let found = self.u32_be()?;
        if found != expected {
            return Err(IdxError::BadMagic {
                offset,
                expected,
                found,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), IdxError> {
        if self.pos != self.bytes.len() {
            return Err(IdxError::Trailing {
                offset: self.pos,
                extra: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let total = count
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .ok_or(IdxError::Overflow { offset: 4 })?;
    let pixels = r.take(total)?.to_vec();
    r.finish()?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32_be()? as usize;
    let labels = r.take(count)?.to_vec();
    r.finish()?;
    Ok(labels)
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for dim in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_two_by_two_image() {
        let img = IdxImages {
            count: 1,
            rows: 2,
            cols: 2,
            pixels: vec![0, 255, 0, 255],
        };
        let parsed = parse_images(&encode_images(&img)).unwrap();
        assert_eq!(parsed, img);
        assert_eq!(parse_labels(&encode_labels(&[7])).unwrap(), vec![7]);
    }

    #[test]
    fn labels_with_image_magic_fail_at_offset_zero() {
        let mut bytes = encode_labels(&[1, 2]);
        bytes[3] = 0x03;
        let err = parse_labels(&bytes).unwrap_err();
        assert_eq!(
            err,
            IdxError::BadMagic {
                offset: 0,
                expected: LABELS_MAGIC,
                found: IMAGES_MAGIC
            }
        );
        assert_eq!(err.offset(), 0);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let img = IdxImages {
            count: 2,
            rows: 3,
            cols: 3,
            pixels: vec![9; 18],
        };
        let bytes = encode_images(&img);
        let err = parse_images(&bytes[..bytes.len() - 5]).unwrap_err();
        assert_eq!(
            err,
            IdxError::Truncated {
                offset: 16 + 13,
                needed: 5
            }
        );
        let err = parse_images(&bytes[..6]).unwrap_err();
        assert_eq!(
            err,
            IdxError::Truncated {
                offset: 6,
                needed: 2
            }
        );
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_labels(&[1, 2, 3]);
        bytes.push(0);
        assert_eq!(
            parse_labels(&bytes),
            Err(IdxError::Trailing {
                offset: 11,
                extra: 1
            })
        );
    }

    #[test]
    fn huge_dimensions_do_not_allocate() {
        let mut bytes = IMAGES_MAGIC.to_be_bytes().to_vec();
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_be_bytes());
        }
        assert!(parse_images(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn images_roundtrip(count in 0usize..5, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = IdxImages { count, rows, cols, pixels };
            prop_assert_eq!(parse_images(&encode_images(&img)).unwrap(), img);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = parse_images(&bytes);
            let _ = parse_labels(&bytes);
        }
    }
}
