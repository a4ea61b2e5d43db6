//! Binary dataset / weight containers and the dataset JSON sidecar.
//!
//! Both containers are little-endian. Datasets: `"DPTL"`, version, `K`, `d`,
//! `P` (u32), `n` (u64), then per sample `label: u32`, `signal_pos: u32`
//! (`u32::MAX` when absent) and `P·d` f64 values. Weights: `"DPTW"`, version,
//! `K`, `m`, `d` (u32), then `K·m·d` f64 values in `(k, r, i)` order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{BaseDist, Dataset, NoiseModel, Sample, SignalSet};
use crate::error::{Error, Result};
use crate::model::ModelWeights;

pub const DATASET_MAGIC: &[u8; 4] = b"DPTL";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"DPTW";
pub const FORMAT_VERSION: u32 = 1;
const NO_SIGNAL: u32 = u32::MAX;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} = {v} does not fit in u32")))
}

struct Cursor<'a> {
    name: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.name.to_string(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.err(format!("truncated: need {len} bytes, {} remain", self.bytes.len() - self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            self.pos = 0;
            return Err(self.err(format!("bad magic {:?}", String::from_utf8_lossy(got))));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            self.pos -= 4;
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let per = data.num_patches * data.dim;
    let mut out = Vec::with_capacity(28 + data.len() * (8 + 8 * per));
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, to_u32(data.num_classes, "K")?);
    put_u32(&mut out, to_u32(data.dim, "d")?);
    put_u32(&mut out, to_u32(data.num_patches, "P")?);
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for s in &data.samples {
        put_u32(&mut out, to_u32(s.label, "label")?);
        put_u32(&mut out, s.signal_pos.map_or(Ok(NO_SIGNAL), |p| to_u32(p, "signal_pos"))?);
        put_f64s(&mut out, &s.data);
    }
    Ok(out)
}

/// Decodes a dataset container. The result carries `seed = 0`; the seed lives
/// in the sidecar.
pub fn decode_dataset(bytes: &[u8], name: &str) -> Result<Dataset> {
    let mut c = Cursor { name, bytes, pos: 0 };
    c.header(DATASET_MAGIC)?;
    let k = c.u32()? as usize;
    let d = c.u32()? as usize;
    let p = c.u32()? as usize;
    let n = c.u64()? as usize;
    if d == 0 || p == 0 {
        return Err(c.err("d and P must be positive"));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let label = c.u32()? as usize;
        let pos = c.u32()?;
        let signal_pos = (pos != NO_SIGNAL).then_some(pos as usize);
        if signal_pos.is_some_and(|q| q >= p) {
            c.pos -= 4;
            return Err(c.err(format!("signal_pos {pos} ≥ P = {p}")));
        }
        samples.push(Sample {
            data: c.f64s(p * d)?,
            dim: d,
            label,
            signal_pos,
            raw_zeta: None,
        });
    }
    c.finish()?;
    Dataset::from_samples(samples, k, d, p, 0)
}

pub fn encode_weights(w: &ModelWeights) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + 8 * w.w.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, to_u32(w.num_classes, "K")?);
    put_u32(&mut out, to_u32(w.width, "m")?);
    put_u32(&mut out, to_u32(w.dim, "d")?);
    put_f64s(&mut out, &w.w);
    Ok(out)
}

/// Decodes a weight checkpoint; `sigma0` is not stored and comes back as NaN.
pub fn decode_weights(bytes: &[u8], name: &str) -> Result<ModelWeights> {
    let mut c = Cursor { name, bytes, pos: 0 };
    c.header(WEIGHTS_MAGIC)?;
    let k = c.u32()? as usize;
    let m = c.u32()? as usize;
    let d = c.u32()? as usize;
    let w = c.f64s(k * m * d)?;
    c.finish()?;
    Ok(ModelWeights {
        num_classes: k,
        width: m,
        dim: d,
        w,
        sigma0: f64::NAN,
    })
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(data)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_dataset(&fs::read(path)?, &path.display().to_string())
}

pub fn write_weights(path: &Path, w: &ModelWeights) -> Result<()> {
    fs::write(path, encode_weights(w)?)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<ModelWeights> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_weights(&fs::read(path)?, &path.display().to_string())
}

/// Generator parameters sufficient to rebuild the signal set and noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub num_classes: usize,
    pub dim: usize,
    pub num_patches: usize,
    pub signal_seed: u64,
    pub sample_seed: u64,
    pub norms: Vec<f64>,
    pub spike_vals: Vec<f64>,
    pub base_eig: f64,
    pub dist: BaseDist,
    pub class_counts: Vec<usize>,
    pub ncr: Option<f64>,
    pub snr: Option<f64>,
}

impl DatasetSidecar {
    pub fn describe(sig: &SignalSet, noise: &NoiseModel, data: &Dataset, ncr: Option<f64>, snr: Option<f64>) -> Self {
        Self {
            num_classes: sig.num_classes,
            dim: sig.dim,
            num_patches: data.num_patches,
            signal_seed: sig.seed,
            sample_seed: data.seed,
            norms: sig.norms.clone(),
            spike_vals: noise.spike_vals.clone(),
            base_eig: noise.base_eig,
            dist: noise.base_dist,
            class_counts: data.class_counts.clone(),
            ncr,
            snr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let samples = (0..4)
            .map(|i| Sample {
                data: (0..6).map(|j| (i * 6 + j) as f64 * 0.25 - 1.0).collect(),
                dim: 3,
                label: i % 2,
                signal_pos: if i == 3 { None } else { Some(i % 2) },
                raw_zeta: None,
            })
            .collect();
        Dataset::from_samples(samples, 2, 3, 2, 0).unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let data = toy();
        let bytes = encode_dataset(&data).unwrap();
        assert_eq!(&bytes[..4], b"DPTL");
        assert_eq!(bytes.len(), 28 + 4 * (8 + 48));
        assert_eq!(decode_dataset(&bytes, "t").unwrap(), data);
    }

    #[test]
    fn weights_round_trip() {
        let w = ModelWeights {
            num_classes: 2,
            width: 3,
            dim: 2,
            w: (0..12).map(|v| v as f64 / 7.0).collect(),
            sigma0: 0.1,
        };
        let back = decode_weights(&encode_weights(&w).unwrap(), "w").unwrap();
        assert_eq!(back.w, w.w);
        assert!(back.sigma0.is_nan());
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let bytes = encode_dataset(&toy()).unwrap();
        match decode_dataset(&bytes[..40], "t") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 36),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad, "t"), Err(Error::Parse { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_dataset(&extra, "t").is_err());
    }
}
