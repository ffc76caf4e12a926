//! Binary dataset container.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! magic "LASCODS1" | version | n_tx | n_sc | n_samples
//! meta_len | meta (UTF-8 JSON: env_ids, array, environment)
//! n_samples * n_tx * n_sc * (re f32, im f32)   antenna-major, subcarrier-minor
//! n_train | train indices | n_val | val indices | n_test | test indices
//! ```

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{ArrayConfig, ChanSimError, CsiSample, Dataset, EnvironmentSpec, Result};
use crate::fsutil;

pub const DATASET_MAGIC: &[u8; 8] = b"LASCODS1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    env_ids: Vec<u32>,
    array: ArrayConfig,
    environment: Option<EnvironmentSpec>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| ChanSimError::Format(format!("{what} {v} exceeds u32")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        env_ids: ds.env_ids.clone(),
        array: ds.array,
        environment: ds.environment.clone(),
    })
    .map_err(|e| ChanSimError::Format(e.to_string()))?;

    let per_sample = ds.array.n_tx * ds.array.n_sc;
    let mut buf = Vec::with_capacity(64 + meta.len() + ds.samples.len() * per_sample * 8);
    buf.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut buf, DATASET_VERSION);
    put_u32(&mut buf, to_u32(ds.array.n_tx, "n_tx")?);
    put_u32(&mut buf, to_u32(ds.array.n_sc, "n_sc")?);
    put_u32(&mut buf, to_u32(ds.samples.len(), "n_samples")?);
    put_u32(&mut buf, to_u32(meta.len(), "metadata length")?);
    buf.extend_from_slice(&meta);
    for s in &ds.samples {
        for z in &s.h {
            buf.extend_from_slice(&(z.re as f32).to_le_bytes());
            buf.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
    }
    for split in [&ds.train, &ds.val, &ds.test] {
        put_u32(&mut buf, to_u32(split.len(), "split length")?);
        for &i in split.iter() {
            put_u32(&mut buf, i);
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                ChanSimError::Format(format!(
                    "truncated file at byte {} (wanted {n} more)",
                    self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != DATASET_MAGIC {
        return Err(ChanSimError::Format("bad magic, not a dataset file".into()));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(ChanSimError::Format(format!(
            "unsupported version {version} (expected {DATASET_VERSION})"
        )));
    }
    let n_tx = cur.u32()? as usize;
    let n_sc = cur.u32()? as usize;
    let n_samples = cur.u32()? as usize;
    let meta_len = cur.u32()? as usize;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| ChanSimError::Format(format!("metadata: {e}")))?;
    if meta.array.n_tx != n_tx || meta.array.n_sc != n_sc {
        return Err(ChanSimError::Format(
            "header shape disagrees with metadata".into(),
        ));
    }
    meta.array.validate()?;

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut h = Vec::with_capacity(n_tx * n_sc);
        for _ in 0..n_tx * n_sc {
            let re = cur.f32()?;
            let im = cur.f32()?;
            h.push(Complex64::new(f64::from(re), f64::from(im)));
        }
        samples.push(CsiSample { n_tx, n_sc, h });
    }
    let mut splits = Vec::with_capacity(3);
    for _ in 0..3 {
        let len = cur.u32()? as usize;
        let idx = (0..len).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        splits.push(idx);
    }
    if cur.pos != bytes.len() {
        return Err(ChanSimError::Format(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let ds = Dataset {
        env_ids: meta.env_ids,
        array: meta.array,
        environment: meta.environment,
        samples,
        train,
        val,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{generate_dataset, mix_datasets, sample_environment};

    #[test]
    fn file_round_trip_is_exact() {
        let cfg = ArrayConfig::desk();
        let env = sample_environment(12, 200.0, 3);
        let ds = generate_dataset(&env, 30, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("env12.lds");
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);

        let mixed = mix_datasets(
            &[
                ds.clone(),
                generate_dataset(&sample_environment(13, 200.0, 3), 20, &cfg).unwrap(),
            ],
            5,
        )
        .unwrap();
        assert_eq!(
            decode_dataset(&encode_dataset(&mixed).unwrap()).unwrap(),
            mixed
        );
    }

    #[test]
    fn header_layout() {
        let cfg = ArrayConfig::desk();
        let ds = generate_dataset(&sample_environment(1, 200.0, 3), 10, &cfg).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(&bytes[..8], b"LASCODS1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 10);
        let meta_len = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
        // First entry of the first sample is H[0][0].
        let off = 28 + meta_len;
        let re = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let im = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
        assert_eq!(f64::from(re), ds.samples[0].get(0, 0).re);
        assert_eq!(f64::from(im), ds.samples[0].get(0, 0).im);
        // Second entry is H[0][1] (subcarrier-minor).
        let re1 = f32::from_le_bytes(bytes[off + 8..off + 12].try_into().unwrap());
        assert_eq!(f64::from(re1), ds.samples[0].get(0, 1).re);
    }

    #[test]
    fn corrupt_files_rejected() {
        let cfg = ArrayConfig::desk();
        let ds = generate_dataset(&sample_environment(1, 200.0, 3), 10, &cfg).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert!(decode_dataset(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_dataset(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_dataset(&extra).is_err());
    }
}
