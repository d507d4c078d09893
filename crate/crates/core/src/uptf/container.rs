//! Directory container for one dataset.
//!
//! ```text
//! <dir>/meta.json   ContainerMeta: descriptor, trajectory count N, steps T
//! <dir>/data.bin    raw little-endian f64, trajectory-major
//! <dir>/stats.json  optional list of StatRecord (one per native channel)
//! ```
//!
//! Trajectory `n` occupies one contiguous block of `T * values_per_step`
//! values. Packed layouts store the native array slice `[n, ...]` in
//! row-major order; per-field layouts store each field's slice `[n, ...]`
//! back to back in field order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{to_uptf, DatasetDescriptor, NativeBatch, RevinStats, StatRecord, UptfTensor};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

const FORMAT: &str = "pdefm-uptf";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerMeta {
    pub format: String,
    pub version: u32,
    pub descriptor: DatasetDescriptor,
    pub trajectories: usize,
    pub steps: usize,
    pub dtype: String,
}

#[derive(Clone, Debug)]
pub struct Container {
    dir: PathBuf,
    meta: ContainerMeta,
    stats: Option<RevinStats>,
}

fn malformed(dir: &Path, reason: impl Into<String>) -> Error {
    Error::Container { path: dir.to_path_buf(), reason: reason.into() }
}

impl Container {
    /// Writes `batch` (all trajectories, all steps) to `dir`, creating it.
    pub fn write(dir: &Path, desc: &DatasetDescriptor, batch: &NativeBatch, stats: Option<&RevinStats>) -> Result<Self> {
        desc.validate()?;
        // shape check via the UPTF mapping
        let (n, t) = batch.batch_time();
        to_uptf(batch, desc)?;
        fs::create_dir_all(dir)?;
        let mut desc = desc.clone();
        desc.trajectories = n;
        let meta = ContainerMeta {
            format: FORMAT.into(),
            version: VERSION,
            descriptor: desc,
            trajectories: n,
            steps: t,
            dtype: "f64-le".into(),
        };
        let mut w = BufWriter::new(File::create(dir.join("data.bin"))?);
        let arrays = batch.arrays();
        for i in 0..n {
            for a in &arrays {
                let per = a.len() / n;
                for v in &a.data()[i * per..(i + 1) * per] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        let mut c = Self { dir: dir.to_path_buf(), meta, stats: None };
        if let Some(s) = stats {
            c.write_stats(s)?;
        }
        Ok(c)
    }

    /// Reads metadata and statistics; array payloads are read on demand.
    pub fn open(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("meta.json")).map_err(|e| malformed(dir, format!("meta.json: {e}")))?;
        let meta: ContainerMeta = serde_json::from_str(&text).map_err(|e| malformed(dir, format!("meta.json: {e}")))?;
        if meta.format != FORMAT || meta.version != VERSION || meta.dtype != "f64-le" {
            return Err(malformed(dir, format!("unsupported format {} v{} {}", meta.format, meta.version, meta.dtype)));
        }
        meta.descriptor.validate()?;
        let expect = (meta.trajectories * meta.steps * meta.descriptor.values_per_step() * 8) as u64;
        let got = fs::metadata(dir.join("data.bin")).map_err(|e| malformed(dir, format!("data.bin: {e}")))?.len();
        if got != expect {
            return Err(malformed(dir, format!("data.bin has {got} bytes, expected {expect}")));
        }
        let stats_path = dir.join("stats.json");
        let stats = if stats_path.exists() {
            let records: Vec<StatRecord> = serde_json::from_str(&fs::read_to_string(&stats_path)?)
                .map_err(|e| malformed(dir, format!("stats.json: {e}")))?;
            Some(RevinStats::from_records(&records, &meta.descriptor)?)
        } else {
            None
        };
        Ok(Self { dir: dir.to_path_buf(), meta, stats })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn meta(&self) -> &ContainerMeta {
        &self.meta
    }

    pub fn descriptor(&self) -> &DatasetDescriptor {
        &self.meta.descriptor
    }

    pub fn trajectories(&self) -> usize {
        self.meta.trajectories
    }

    pub fn steps(&self) -> usize {
        self.meta.steps
    }

    pub fn stats(&self) -> Option<&RevinStats> {
        self.stats.as_ref()
    }

    pub fn write_stats(&mut self, stats: &RevinStats) -> Result<()> {
        let records = stats.records(&self.meta.descriptor);
        fs::write(self.dir.join("stats.json"), serde_json::to_string_pretty(&records)?)?;
        self.stats = Some(stats.clone());
        Ok(())
    }

    /// Trajectories `range`, all time steps, in native layout.
    pub fn read_native(&self, range: Range<usize>) -> Result<NativeBatch> {
        if range.end > self.meta.trajectories || range.start > range.end {
            return Err(Error::invalid(format!("trajectory range {range:?} outside 0..{}", self.meta.trajectories)));
        }
        let desc = &self.meta.descriptor;
        let b = range.len();
        let block = self.meta.steps * desc.values_per_step();
        let mut f = BufReader::new(File::open(self.dir.join("data.bin"))?);
        f.seek(SeekFrom::Start((range.start * block * 8) as u64))?;
        let mut bytes = vec![0u8; b * block * 8];
        f.read_exact(&mut bytes)?;
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let shapes = desc.native_shapes(b, self.meta.steps);
        let per: Vec<usize> = shapes.iter().map(|s| s[1..].iter().product()).collect();
        let mut data: Vec<Vec<f64>> = per.iter().map(|p| Vec::with_capacity(p * b)).collect();
        let mut off = 0;
        for _ in 0..b {
            for (d, &p) in data.iter_mut().zip(&per) {
                d.extend_from_slice(&values[off..off + p]);
                off += p;
            }
        }
        let mut arrays = shapes.into_iter().zip(data).map(|(s, d)| DenseArray::new(s, d)).collect::<Result<Vec<_>>>()?;
        Ok(match desc.layout {
            super::NativeLayout::Packed { .. } => NativeBatch::Packed(arrays.remove(0)),
            super::NativeLayout::PerField => NativeBatch::Fields(arrays),
        })
    }

    /// Trajectories `range` converted to UPTF (not normalized).
    pub fn read_uptf(&self, range: Range<usize>) -> Result<UptfTensor> {
        to_uptf(&self.read_native(range)?, &self.meta.descriptor)
    }
}
