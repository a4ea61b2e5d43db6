//! IDX (MNIST) loading and patchification.
//!
//! Images: big-endian magic `0x00000803`, dims `(n, rows, cols)`, then
//! `n·rows·cols` unsigned bytes. Labels: magic `0x00000801`, dim `(n)`, then
//! `n` bytes. Either file may be gzip-compressed (detected by `1f 8b`).

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::datagen::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_DIGITS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct RawImageSet {
    pub rows: usize,
    pub cols: usize,
    /// `n·rows·cols` pixels, image-major.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let sz = self.rows * self.cols;
        &self.images[i * sz..(i + 1) * sz]
    }

    pub fn class_histogram(&self) -> [usize; NUM_DIGITS] {
        let mut h = [0; NUM_DIGITS];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

struct Reader<'a> {
    name: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.name.to_string(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.err(format!(
                "truncated: need {len} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

fn maybe_gunzip(bytes: Vec<u8>, name: &str) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse {
                source_name: name.to_string(),
                offset: 0,
                message: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Parses an IDX image file; returns `(rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = Reader { name, bytes, pos: 0 };
    let magic = r.u32_be()?;
    if magic != IMAGES_MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(n * rows * cols)?.to_vec();
    Ok((rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let mut r = Reader { name, bytes, pos: 0 };
    let magic = r.u32_be()?;
    if magic != LABELS_MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = r.u32_be()? as usize;
    let labels = r.take(n)?.to_vec();
    if let Some(pos) = labels.iter().position(|&l| l as usize >= NUM_DIGITS) {
        r.pos = 8 + pos;
        return Err(r.err(format!("label {} outside 0..=9", labels[pos])));
    }
    Ok(labels)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawImageSet> {
    let read = |p: &Path| -> Result<Vec<u8>> {
        if !p.exists() {
            return Err(Error::MissingFile(p.to_path_buf()));
        }
        let name = p.display().to_string();
        maybe_gunzip(fs::read(p)?, &name)
    };
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let (rows, cols, images) = parse_idx_images(&read(images_path)?, &img_name)?;
    let labels = parse_idx_labels(&read(labels_path)?, &lbl_name)?;
    let n_img = if rows * cols == 0 { 0 } else { images.len() / (rows * cols) };
    if n_img != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{n_img} images in {img_name} but {} labels in {lbl_name}",
            labels.len()
        )));
    }
    Ok(RawImageSet {
        rows,
        cols,
        images,
        labels,
    })
}

/// Serialises images in IDX layout (uncompressed).
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Patch geometry: `(patch_rows, patch_cols, grid_cols)`.
fn patch_layout(p: usize, rows: usize, cols: usize) -> Result<(usize, usize, usize)> {
    let (pr, pc, grid_cols) = match p {
        1 => (rows, cols, 1),
        2 => (rows, cols / 2, 2),
        4 => (rows / 2, cols / 2, 2),
        _ => return Err(Error::InvalidArgument(format!("P = {p} must be 1, 2 or 4"))),
    };
    if pr * pc * p != rows * cols {
        return Err(Error::InvalidArgument(format!("{rows}×{cols} image does not split into {p} equal patches")));
    }
    Ok((pr, pc, grid_cols))
}

/// Splits an image (row-major) into `P` flattened patches, concatenated.
/// `P = 2` gives left/right halves, `P = 4` quadrants in reading order.
pub fn patchify(image: &[f64], rows: usize, cols: usize, p: usize) -> Result<Vec<f64>> {
    let (pr, pc, grid_cols) = patch_layout(p, rows, cols)?;
    let mut out = Vec::with_capacity(rows * cols);
    for patch in 0..p {
        let (r0, c0) = ((patch / grid_cols) * pr, (patch % grid_cols) * pc);
        for r in r0..r0 + pr {
            out.extend_from_slice(&image[r * cols + c0..r * cols + c0 + pc]);
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn reassemble(patches: &[f64], rows: usize, cols: usize, p: usize) -> Result<Vec<f64>> {
    let (pr, pc, grid_cols) = patch_layout(p, rows, cols)?;
    let mut image = vec![0.0; rows * cols];
    let mut src = patches.chunks_exact(pc);
    for patch in 0..p {
        let (r0, c0) = ((patch / grid_cols) * pr, (patch % grid_cols) * pc);
        for r in r0..r0 + pr {
            let row = src.next().ok_or_else(|| Error::DimensionMismatch("patch data too short".into()))?;
            image[r * cols + c0..r * cols + c0 + pc].copy_from_slice(row);
        }
    }
    Ok(image)
}

/// Exactly `per_class` image ids per digit, sorted ascending. `None` keeps all.
pub fn stratified_ids(raw: &RawImageSet, per_class: Option<usize>, seed: u64) -> Result<Vec<usize>> {
    let Some(per_class) = per_class else {
        return Ok((0..raw.len()).collect());
    };
    let mut ids = Vec::with_capacity(per_class * NUM_DIGITS);
    for digit in 0..NUM_DIGITS {
        let mut members: Vec<usize> = (0..raw.len()).filter(|&i| raw.labels[i] as usize == digit).collect();
        if members.len() < per_class {
            return Err(Error::InvalidArgument(format!(
                "digit {digit} has {} images, cannot subsample {per_class}",
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(rng::derive_seed(seed, &["subsample", &digit.to_string()])));
        ids.extend_from_slice(&members[..per_class]);
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Builds a `P`-patch dataset from the given image ids, pixels scaled to [0, 1].
pub fn dataset_from_ids(raw: &RawImageSet, p: usize, ids: &[usize], seed: u64) -> Result<Dataset> {
    let (pr, pc, _) = patch_layout(p, raw.rows, raw.cols)?;
    let dim = pr * pc;
    let samples = ids
        .iter()
        .map(|&i| {
            let image: Vec<f64> = raw.image(i).iter().map(|&b| b as f64 / 255.0).collect();
            Ok(Sample {
                data: patchify(&image, raw.rows, raw.cols, p)?,
                dim,
                label: raw.labels[i] as usize,
                signal_pos: None,
                raw_zeta: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_samples(samples, NUM_DIGITS, dim, p, seed)
}

pub fn to_dataset(raw: &RawImageSet, p: usize, subsample_per_class: Option<usize>, seed: u64) -> Result<Dataset> {
    let ids = stratified_ids(raw, subsample_per_class, seed)?;
    dataset_from_ids(raw, p, &ids, seed)
}

/// 2×2 average pooling of a row-major image.
pub fn downsample_2x(image: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let (r2, c2) = (rows / 2, cols / 2);
    let mut out = Vec::with_capacity(r2 * c2);
    for r in 0..r2 {
        for c in 0..c2 {
            let at = |rr: usize, cc: usize| image[rr * cols + cc];
            out.push(0.25 * (at(2 * r, 2 * c) + at(2 * r, 2 * c + 1) + at(2 * r + 1, 2 * c) + at(2 * r + 1, 2 * c + 1)));
        }
    }
    out
}
