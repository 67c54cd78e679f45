//! IDX raster files (big-endian header, raw `u8` payload).

use std::fs;
use std::path::Path;

use super::{LabeledDataset, Provenance};
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            offset: at as u64,
            message: format!("truncated while reading {what}"),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad IDX magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    if bytes.len() < start + len {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated payload: expected {len} bytes from offset {start}"),
        });
    }
    Ok(&bytes[start..start + len])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let pixels = payload(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4, "label count")? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

pub fn write_idx_images(path: &Path, images: &IdxImages) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend_from_slice(&images.pixels);
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    fs::write(path, buf)?;
    Ok(())
}

/// Loads an image/label pair, maps pixels affinely onto `[-1, 1]`, mean-pools
/// each image to `side × side`, and tags items whose label satisfies
/// `is_contaminant`.
pub fn load_idx(
    images: &Path,
    labels: &Path,
    side: usize,
    is_contaminant: impl Fn(u8) -> bool,
) -> Result<LabeledDataset> {
    let img = parse_idx_images(&fs::read(images)?)?;
    let lab = parse_idx_labels(&fs::read(labels)?)?;
    if lab.len() != img.count {
        return Err(config_err!("{} images but {} labels", img.count, lab.len()));
    }
    if side == 0 || img.rows % side != 0 || img.cols % side != 0 {
        return Err(config_err!(
            "cannot pool {}x{} images to side {side}",
            img.rows,
            img.cols
        ));
    }
    let (fr, fc) = (img.rows / side, img.cols / side);
    let per = img.rows * img.cols;
    let mut data = Vec::with_capacity(img.count * side * side);
    for k in 0..img.count {
        let im = &img.pixels[k * per..(k + 1) * per];
        for bi in 0..side {
            for bj in 0..side {
                let mut acc = 0.0;
                for r in bi * fr..(bi + 1) * fr {
                    for c in bj * fc..(bj + 1) * fc {
                        acc += f64::from(im[r * img.cols + c]) / 255.0 * 2.0 - 1.0;
                    }
                }
                data.push(acc / (fr * fc) as f64);
            }
        }
    }
    let classes = lab.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let provenance = lab
        .iter()
        .map(|&l| {
            if is_contaminant(l) {
                Provenance::Contaminant
            } else {
                Provenance::Clean
            }
        })
        .collect();
    LabeledDataset::new(
        Tensor::matrix(img.count, side * side, data)?,
        lab.iter().map(|&l| l as usize).collect(),
        provenance,
        classes,
    )
}
