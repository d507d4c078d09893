//! NRMSE/VRMSE metrics, single-step test evaluation and autoregressive
//! rollouts. Metrics are always computed on denormalized data.

mod metrics;

pub use metrics::{nrmse, snapshot_mean, vrmse, FieldScores, MetricAccumulator, CONSTANT_SNAPSHOT_REL};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datapipe::StreamFile;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::uptf::{RevinStats, UptfTensor};
use metrics::finite_mean;

/// Something that maps a `(B, t, ...)` window to the next frame `(B, 1, ...)`.
pub trait Predictor {
    fn name(&self) -> String;
    fn predict_next(&self, x: &UptfTensor) -> Result<UptfTensor>;
}

impl Predictor for Model {
    fn name(&self) -> String {
        "model".into()
    }

    fn predict_next(&self, x: &UptfTensor) -> Result<UptfTensor> {
        let y = self.predict(x)?;
        let t = y.shape()[1];
        if t == 1 {
            Ok(y)
        } else {
            y.narrow_time(t - 1, 1)
        }
    }
}

/// The baseline `X_{t+1} = X_t`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl Predictor for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn predict_next(&self, x: &UptfTensor) -> Result<UptfTensor> {
        x.narrow_time(x.shape()[1] - 1, 1)
    }
}

/// Scores of one field of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub field: String,
    pub nrmse: f64,
    pub vrmse: f64,
    pub snapshots: usize,
    pub flagged_nrmse: usize,
    pub flagged_vrmse: usize,
}

/// Per-(dataset, field) metrics of one predictor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub predictor: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn from_accumulator(predictor: &str, dataset: &str, fields: &[String], acc: &MetricAccumulator) -> Self {
        let rows = fields
            .iter()
            .zip(acc.fields())
            .map(|(f, s)| MetricRow {
                dataset: dataset.to_string(),
                field: f.clone(),
                nrmse: s.nrmse(),
                vrmse: s.vrmse(),
                snapshots: s.snapshots(),
                flagged_nrmse: s.nrmse_flagged,
                flagged_vrmse: s.vrmse_flagged,
            })
            .collect();
        Self { predictor: predictor.to_string(), rows }
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.dataset) {
                out.push(r.dataset.clone());
            }
        }
        out
    }

    /// Mean over the dataset's fields.
    pub fn dataset_nrmse(&self, dataset: &str) -> f64 {
        finite_mean(self.rows.iter().filter(|r| r.dataset == dataset).map(|r| r.nrmse))
    }

    pub fn dataset_vrmse(&self, dataset: &str) -> f64 {
        finite_mean(self.rows.iter().filter(|r| r.dataset == dataset).map(|r| r.vrmse))
    }

    /// Mean over datasets of the per-dataset means.
    pub fn mean_nrmse(&self) -> f64 {
        finite_mean(self.datasets().iter().map(|d| self.dataset_nrmse(d)))
    }

    pub fn mean_vrmse(&self) -> f64 {
        finite_mean(self.datasets().iter().map(|d| self.dataset_vrmse(d)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("predictor,dataset,field,nrmse,vrmse,snapshots,flagged_nrmse,flagged_vrmse\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.10e},{:.10e},{},{},{}",
                self.predictor, r.dataset, r.field, r.nrmse, r.vrmse, r.snapshots, r.flagged_nrmse, r.flagged_vrmse
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("predictor: {}\n{:<16} {:<14} {:>12} {:>12} {:>10}\n", self.predictor, "dataset", "field", "NRMSE", "VRMSE", "snapshots");
        for r in &self.rows {
            let _ = writeln!(s, "{:<16} {:<14} {:>12.6} {:>12.6} {:>10}", r.dataset, r.field, r.nrmse, r.vrmse, r.snapshots);
        }
        for d in self.datasets() {
            let _ = writeln!(s, "{:<16} {:<14} {:>12.6} {:>12.6}", d, "(mean)", self.dataset_nrmse(&d), self.dataset_vrmse(&d));
        }
        let _ = writeln!(s, "{:<16} {:<14} {:>12.6} {:>12.6}", "(all)", "(mean)", self.mean_nrmse(), self.mean_vrmse());
        s
    }

    pub fn write(&self, csv: &Path, text: &Path) -> Result<()> {
        fs::write(csv, self.to_csv())?;
        fs::write(text, self.to_text())?;
        Ok(())
    }
}

/// Single-step predictions over every AR window of `files`, scored against
/// the raw data after denormalizing predictions with each file's stats.
/// Windows of one trajectory are predicted in batches of `batch`.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, dataset: &str, files: &[StreamFile], ar_order: usize, batch: usize) -> Result<MetricReport> {
    let first = files.first().ok_or_else(|| Error::Empty(format!("{dataset}: no test files")))?;
    let fields: Vec<String> = first.container().descriptor().fields.iter().map(|f| f.name.clone()).collect();
    let mut acc = MetricAccumulator::new(fields.len());
    let batch = batch.max(1);
    let mut windows = 0;
    for file in files {
        let stats = file.stats().ok_or_else(|| Error::invalid(format!("{dataset}: normalization stats missing for {}", file.container().dir().display())))?;
        let steps = file.steps();
        for traj in 0..file.trajectories() {
            let norm = file.load(traj..traj + 1)?;
            let raw = file.load_raw(traj..traj + 1)?;
            let starts: Vec<usize> = (0..steps.saturating_sub(ar_order)).collect();
            for group in starts.chunks(batch) {
                let xs = group.iter().map(|&t| norm.narrow_time(t, ar_order)).collect::<Result<Vec<_>>>()?;
                let ys = group.iter().map(|&t| raw.narrow_time(t + ar_order, 1)).collect::<Result<Vec<_>>>()?;
                let pred = stats.denormalize(&predictor.predict_next(&UptfTensor::concat_batch(&xs)?)?)?;
                acc.add(&pred, &UptfTensor::concat_batch(&ys)?)?;
                windows += group.len();
            }
        }
    }
    if windows == 0 {
        return Err(Error::Empty(format!("{dataset}: test split has no AR windows")));
    }
    Ok(MetricReport::from_accumulator(&predictor.name(), dataset, &fields, &acc))
}

/// Metrics of one rollout step (1-based).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetric {
    pub step: usize,
    pub nrmse: f64,
    pub vrmse: f64,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// Denormalized predictions `(1, k, F, C, D, H, W)`.
    pub frames: UptfTensor,
    /// One entry per step when ground truth was supplied.
    pub metrics: Vec<StepMetric>,
}

pub fn rollout_csv(metrics: &[StepMetric]) -> String {
    let mut s = String::from("step,nrmse,vrmse\n");
    for m in metrics {
        let _ = writeln!(s, "{},{:.10e},{:.10e}", m.step, m.nrmse, m.vrmse);
    }
    s
}

/// Feeds predictions back `k` times starting from the normalized window
/// `x0`. Frames are denormalized before scoring against `truth` (raw
/// frames for steps `1..=k`) and before being returned. `on_step` sees
/// each step's metrics as soon as they exist.
pub fn rollout_with<P: Predictor + ?Sized>(
    predictor: &P,
    x0: &UptfTensor,
    k: usize,
    stats: &RevinStats,
    truth: Option<&UptfTensor>,
    mut on_step: impl FnMut(&StepMetric),
) -> Result<Rollout> {
    if k == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    if let Some(t) = truth {
        if t.shape()[1] < k {
            return Err(Error::invalid(format!("ground truth holds {} frames, rollout asks for {k}", t.shape()[1])));
        }
    }
    let ar = x0.shape()[1];
    let mut window = x0.clone();
    let mut frames = Vec::with_capacity(k);
    let mut metrics = Vec::new();
    for step in 1..=k {
        let next = predictor.predict_next(&window)?;
        if !next.data().all_finite() {
            return Err(Error::NonFinite(format!("rollout state became non-finite at step {step}")));
        }
        let frame = stats.denormalize(&next)?;
        if let Some(t) = truth {
            let target = t.narrow_time(step - 1, 1)?;
            let m = StepMetric { step, nrmse: nrmse(&frame, &target)?, vrmse: vrmse(&frame, &target)? };
            on_step(&m);
            metrics.push(m);
        }
        frames.push(frame);
        window = if ar == 1 {
            next
        } else {
            UptfTensor::concat_time(&[window.narrow_time(1, ar - 1)?, next])?
        };
    }
    Ok(Rollout { frames: UptfTensor::concat_time(&frames)?, metrics })
}

pub fn rollout<P: Predictor + ?Sized>(predictor: &P, x0: &UptfTensor, k: usize, stats: &RevinStats, truth: Option<&UptfTensor>) -> Result<Rollout> {
    rollout_with(predictor, x0, k, stats, truth, |_| {})
}

/// Rollout of local trajectory `traj` of `file` from its first `ar_order`
/// frames, scored against the stored frames that follow.
pub fn rollout_trajectory<P: Predictor + ?Sized>(
    predictor: &P,
    file: &StreamFile,
    traj: usize,
    ar_order: usize,
    k: usize,
    on_step: impl FnMut(&StepMetric),
) -> Result<Rollout> {
    let stats = file.stats().ok_or_else(|| Error::invalid("normalization stats missing"))?;
    if ar_order + k > file.steps() {
        return Err(Error::invalid(format!("{} stored steps cannot cover {ar_order} input and {k} rollout frames", file.steps())));
    }
    let norm = file.load(traj..traj + 1)?;
    let raw = file.load_raw(traj..traj + 1)?;
    let truth = raw.narrow_time(ar_order, k)?;
    rollout_with(predictor, &norm.narrow_time(0, ar_order)?, k, stats, Some(&truth), on_step)
}

#[cfg(test)]
mod tests;
