use crate::error::{Error, Result};
use crate::tensor::DenseArray;
use crate::uptf::UptfTensor;

/// A snapshot whose spatial standard deviation is at most this fraction of
/// its RMS value counts as constant and is left out of VRMSE.
pub const CONSTANT_SNAPSHOT_REL: f64 = 1e-12;

/// Running per-field scores; each `(trajectory, time)` snapshot of a field
/// contributes one NRMSE and one VRMSE value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldScores {
    pub nrmse_sum: f64,
    pub nrmse_count: usize,
    pub nrmse_flagged: usize,
    pub vrmse_sum: f64,
    pub vrmse_count: usize,
    pub vrmse_flagged: usize,
}

impl FieldScores {
    /// Mean over snapshots, NaN when every snapshot was flagged.
    pub fn nrmse(&self) -> f64 {
        mean_or_nan(self.nrmse_sum, self.nrmse_count)
    }

    pub fn vrmse(&self) -> f64 {
        mean_or_nan(self.vrmse_sum, self.vrmse_count)
    }

    pub fn snapshots(&self) -> usize {
        self.nrmse_count + self.nrmse_flagged
    }

    fn merge(&mut self, o: &FieldScores) {
        self.nrmse_sum += o.nrmse_sum;
        self.nrmse_count += o.nrmse_count;
        self.nrmse_flagged += o.nrmse_flagged;
        self.vrmse_sum += o.vrmse_sum;
        self.vrmse_count += o.vrmse_count;
        self.vrmse_flagged += o.vrmse_flagged;
    }
}

fn mean_or_nan(sum: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Mean of the finite entries, NaN if there are none.
pub(crate) fn finite_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    mean_or_nan(s, n)
}

/// Accumulates snapshot metrics over canonical entries. Reduction order:
/// snapshot, then mean over snapshots per field, then mean over fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricAccumulator {
    fields: Vec<FieldScores>,
}

impl MetricAccumulator {
    pub fn new(num_fields: usize) -> Self {
        Self { fields: vec![FieldScores::default(); num_fields] }
    }

    pub fn fields(&self) -> &[FieldScores] {
        &self.fields
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (a, b) in self.fields.iter_mut().zip(&other.fields) {
            a.merge(b);
        }
    }

    pub fn add(&mut self, pred: &UptfTensor, truth: &UptfTensor) -> Result<()> {
        let s = truth.shape();
        if pred.shape() != s {
            return Err(Error::shape(format!("prediction {:?} vs truth {:?}", pred.shape(), s)));
        }
        if s[2] != self.fields.len() {
            return Err(Error::shape(format!("{} fields, accumulator has {}", s[2], self.fields.len())));
        }
        let vol = s[4] * s[5] * s[6];
        let c = s[3];
        let (p, u) = (pred.data().data(), truth.data().data());
        for bt in 0..s[0] * s[1] {
            for (f, &k) in truth.components().iter().enumerate() {
                let base = (bt * s[2] + f) * c * vol;
                let n = (k * vol) as f64;
                let (mut se, mut ss, mut dev) = (0.0, 0.0, 0.0);
                for j in 0..k {
                    let o = base + j * vol;
                    let (ps, us) = (&p[o..o + vol], &u[o..o + vol]);
                    let mu = us.iter().sum::<f64>() / vol as f64;
                    for (a, b) in ps.iter().zip(us) {
                        se += (a - b) * (a - b);
                        ss += b * b;
                        dev += (b - mu) * (b - mu);
                    }
                }
                let rmse = (se / n).sqrt();
                let rms = (ss / n).sqrt();
                let std = (dev / n).sqrt();
                let acc = &mut self.fields[f];
                if rms > 0.0 {
                    acc.nrmse_sum += rmse / rms;
                    acc.nrmse_count += 1;
                } else {
                    acc.nrmse_flagged += 1;
                }
                if std > CONSTANT_SNAPSHOT_REL * rms && std > 0.0 {
                    acc.vrmse_sum += rmse / std;
                    acc.vrmse_count += 1;
                } else {
                    acc.vrmse_flagged += 1;
                }
            }
        }
        Ok(())
    }

    /// Mean over fields of per-field NRMSE.
    pub fn nrmse(&self) -> f64 {
        finite_mean(self.fields.iter().map(|f| f.nrmse()))
    }

    pub fn vrmse(&self) -> f64 {
        finite_mean(self.fields.iter().map(|f| f.vrmse()))
    }
}

/// RMSE over the ground truth's RMS value, per snapshot and field, then
/// averaged. Zero-norm snapshots are excluded.
pub fn nrmse(pred: &UptfTensor, truth: &UptfTensor) -> Result<f64> {
    let mut a = MetricAccumulator::new(truth.shape()[2]);
    a.add(pred, truth)?;
    Ok(a.nrmse())
}

/// RMSE over the ground truth's spatial standard deviation (deviations
/// from each component's own spatial mean), per snapshot and field, then
/// averaged. Constant snapshots are excluded.
pub fn vrmse(pred: &UptfTensor, truth: &UptfTensor) -> Result<f64> {
    let mut a = MetricAccumulator::new(truth.shape()[2]);
    a.add(pred, truth)?;
    Ok(a.vrmse())
}

/// Each `(trajectory, time, field, component)` slab replaced by its
/// spatial mean.
pub fn snapshot_mean(truth: &UptfTensor) -> UptfTensor {
    let s = truth.shape();
    let vol = s[4] * s[5] * s[6];
    let mut out = truth.data().data().to_vec();
    for slab in out.chunks_mut(vol) {
        let mu = slab.iter().sum::<f64>() / vol as f64;
        slab.iter_mut().for_each(|v| *v = mu);
    }
    truth.with_data(DenseArray::new(s.to_vec(), out).expect("same shape")).expect("same composition")
}
