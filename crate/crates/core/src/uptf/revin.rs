use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use super::{DatasetDescriptor, UptfTensor};
use crate::error::{Error, Result};

/// Floor applied to every standard deviation.
pub const REVIN_EPS: f64 = 1e-8;

/// Cached per-(field, component) mean and standard deviation, laid out as
/// `F x C_max`. Broadcast entries repeat the statistics of their field's
/// canonical component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevinStats {
    pub fields: Vec<String>,
    pub components: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

/// One line of the stats sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub field: String,
    pub component: usize,
    pub mean: f64,
    pub std: f64,
}

/// Population mean/std of each native channel over every sample yielded by
/// `stream` (all trajectories, times and grid points).
pub fn compute_revin_stats<I, T>(stream: I, desc: &DatasetDescriptor) -> Result<RevinStats>
where
    I: IntoIterator<Item = T>,
    T: Borrow<UptfTensor>,
{
    let f = desc.num_fields();
    let c = desc.max_components();
    let mut count = vec![0.0f64; f * c];
    let mut mean = vec![0.0f64; f * c];
    let mut m2 = vec![0.0f64; f * c];
    let mut seen = false;
    for x in stream {
        let x = x.borrow();
        let s = x.shape();
        if s[2] != f || s[3] != c {
            return Err(Error::Descriptor(format!("{}: stats stream tensor has F={} C={}", desc.name, s[2], s[3])));
        }
        seen = true;
        let vol = s[4] * s[5] * s[6];
        let data = x.data().data();
        for ch in 0..f * c {
            // per-tensor moments, merged with Chan's pairwise update
            let (mut n, mut mu, mut acc) = (0.0f64, 0.0f64, 0.0f64);
            for bt in 0..s[0] * s[1] {
                let o = (bt * f * c + ch) * vol;
                for &v in &data[o..o + vol] {
                    n += 1.0;
                    let d = v - mu;
                    mu += d / n;
                    acc += d * (v - mu);
                }
            }
            let tot = count[ch] + n;
            let delta = mu - mean[ch];
            mean[ch] += delta * n / tot;
            m2[ch] += acc + delta * delta * count[ch] * n / tot;
            count[ch] = tot;
        }
    }
    if !seen {
        return Err(Error::Empty(format!("{}: no samples for normalization statistics", desc.name)));
    }
    let std: Vec<f64> = m2.iter().zip(&count).map(|(m, n)| (m / n).sqrt().max(REVIN_EPS)).collect();
    let mut stats = RevinStats { fields: desc.fields.iter().map(|s| s.name.clone()).collect(), components: c, mean, std, eps: REVIN_EPS };
    stats.copy_canonical(desc);
    Ok(stats)
}

impl RevinStats {
    /// Identity statistics (zero mean, unit std).
    pub fn identity(desc: &DatasetDescriptor) -> Self {
        let n = desc.num_fields() * desc.max_components();
        Self {
            fields: desc.fields.iter().map(|s| s.name.clone()).collect(),
            components: desc.max_components(),
            mean: vec![0.0; n],
            std: vec![1.0; n],
            eps: REVIN_EPS,
        }
    }

    fn copy_canonical(&mut self, desc: &DatasetDescriptor) {
        let c = self.components;
        for (f, spec) in desc.fields.iter().enumerate() {
            for j in spec.components..c {
                self.mean[f * c + j] = self.mean[f * c];
                self.std[f * c + j] = self.std[f * c];
            }
        }
    }

    /// Native channels only, for the sidecar.
    pub fn records(&self, desc: &DatasetDescriptor) -> Vec<StatRecord> {
        let c = self.components;
        desc.fields
            .iter()
            .enumerate()
            .flat_map(|(f, spec)| {
                (0..spec.components).map(move |j| StatRecord {
                    field: spec.name.clone(),
                    component: j,
                    mean: self.mean[f * c + j],
                    std: self.std[f * c + j],
                })
            })
            .collect()
    }

    pub fn from_records(records: &[StatRecord], desc: &DatasetDescriptor) -> Result<Self> {
        let mut s = Self::identity(desc);
        let c = s.components;
        if records.len() != desc.native_channels() {
            return Err(Error::Descriptor(format!("{}: {} stat records for {} channels", desc.name, records.len(), desc.native_channels())));
        }
        for r in records {
            let f = desc
                .fields
                .iter()
                .position(|x| x.name == r.field)
                .ok_or_else(|| Error::Descriptor(format!("stat record for unknown field '{}'", r.field)))?;
            if r.component >= desc.fields[f].components || !(r.std >= REVIN_EPS) || !r.mean.is_finite() {
                return Err(Error::Descriptor(format!("invalid stat record {r:?}")));
            }
            s.mean[f * c + r.component] = r.mean;
            s.std[f * c + r.component] = r.std;
        }
        s.copy_canonical(desc);
        Ok(s)
    }

    fn check(&self, x: &UptfTensor) -> Result<()> {
        let s = x.shape();
        if s[2] * s[3] != self.mean.len() || s[3] != self.components {
            return Err(Error::Descriptor(format!(
                "stats for {}x{} channels applied to F={} C={}",
                self.fields.len(),
                self.components,
                s[2],
                s[3]
            )));
        }
        Ok(())
    }

    fn apply(&self, x: &UptfTensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<UptfTensor> {
        self.check(x)?;
        let s = x.shape();
        let vol = s[4] * s[5] * s[6];
        let fc = s[2] * s[3];
        let mut out = x.clone();
        for (i, v) in out.data_mut().data_mut().iter_mut().enumerate() {
            let ch = (i / vol) % fc;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        Ok(out)
    }

    /// `(x - mean) / std` per channel.
    pub fn normalize(&self, x: &UptfTensor) -> Result<UptfTensor> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    /// `std * y + mean` per channel.
    pub fn denormalize(&self, y: &UptfTensor) -> Result<UptfTensor> {
        self.apply(y, |v, m, s| s * v + m)
    }
}
