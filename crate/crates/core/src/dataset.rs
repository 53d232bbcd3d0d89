//! `DSNP` snapshot files.
//!
//! ```text
//! b"DSNP" | version: u32 | n_snapshots: u32 | n_grid: u32 |
//!   payload: f64 x (n_snapshots * n_grid), snapshot-major |
//!   meta_len: u32 | meta: utf8 JSON
//! ```
//! Little-endian throughout.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::field::Samples;

pub const MAGIC: &[u8; 4] = b"DSNP";
pub const VERSION: u32 = 1;

/// Identifies the producing build; stable across runs so that files are
/// byte-reproducible.
pub const PRODUCER: &str = concat!("dsk-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// `"hf"`, `"lf"`, `"hflr"`, `"lflr"`, `"samples"`, ...
    pub fidelity: String,
    pub length: f64,
    pub seed: u64,
    /// Echo of the configuration that produced the data.
    pub config: serde_json::Value,
    pub producer: String,
    /// Upstream artifacts and transforms, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl DatasetMeta {
    pub fn new(fidelity: &str, length: f64, seed: u64, config: serde_json::Value) -> Self {
        Self {
            fidelity: fidelity.into(),
            length,
            seed,
            config,
            producer: PRODUCER.into(),
            provenance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotDataset {
    pub samples: Samples,
    pub meta: DatasetMeta,
}

impl SnapshotDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_grid(&self) -> usize {
        self.samples.dim()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let n = u32::try_from(self.samples.len()).map_err(|_| CoreError::Format("too many snapshots".into()))?;
        let d = u32::try_from(self.samples.dim()).map_err(|_| CoreError::Format("grid too large".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.samples.data().len() * 8);
        for v in self.samples.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        let meta = serde_json::to_vec(&self.meta)?;
        let len = u32::try_from(meta.len()).map_err(|_| CoreError::Format("metadata too large".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::Format(format!("not a snapshot file (magic {magic:?})")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CoreError::Format(format!("unsupported snapshot version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let data = read_f64s(&mut r, n * d)?;
        let len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; len];
        r.read_exact(&mut meta)?;
        let meta: DatasetMeta = serde_json::from_slice(&meta)?;
        if d == 0 {
            return Err(CoreError::Format("zero grid size".into()));
        }
        Ok(Self {
            samples: Samples::new(d, data)?,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; count * 8];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}
