use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::datapipe::Split;
use crate::tensor::{seeded_rng, DenseArray};
use crate::uptf::{compute_revin_stats, scalar_fields, Container, NativeBatch};

fn random(shape: &[usize], seed: u64) -> DenseArray {
    let mut rng = seeded_rng(seed);
    DenseArray::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

fn dense(shape: [usize; 7], seed: u64) -> UptfTensor {
    UptfTensor::dense(random(&shape, seed)).unwrap()
}

fn scaled(x: &UptfTensor, a: f64, b: f64) -> UptfTensor {
    x.with_data(x.data().map(|v| a * v + b)).unwrap()
}

#[test]
fn nrmse_examples() {
    let u = dense([2, 3, 2, 1, 1, 4, 5], 1);
    assert_eq!(nrmse(&u, &u).unwrap(), 0.0);
    assert!((nrmse(&scaled(&u, 2.0, 0.0), &u).unwrap() - 1.0).abs() < 1e-12);
    assert!((nrmse(&scaled(&u, 0.0, 0.0), &u).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn vrmse_examples() {
    let u = dense([2, 3, 2, 3, 2, 4, 5], 2);
    assert!((vrmse(&snapshot_mean(&u), &u).unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(vrmse(&u, &u).unwrap(), 0.0);
    let t = UptfTensor::dense(DenseArray::new(vec![1, 1, 1, 1, 1, 1, 2], vec![-1.0, 1.0]).unwrap()).unwrap();
    let p = t.with_data(DenseArray::zeros(&[1, 1, 1, 1, 1, 1, 2])).unwrap();
    assert!((vrmse(&p, &t).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn degenerate_snapshots_are_flagged() {
    let mut data = random(&[1, 2, 1, 1, 1, 1, 6], 3);
    for v in &mut data.data_mut()[..6] {
        *v = 0.0;
    }
    let u = UptfTensor::dense(data).unwrap();
    let p = dense([1, 2, 1, 1, 1, 1, 6], 4);
    let mut acc = MetricAccumulator::new(1);
    acc.add(&p, &u).unwrap();
    let f = &acc.fields()[0];
    assert_eq!((f.nrmse_count, f.nrmse_flagged, f.vrmse_count, f.vrmse_flagged), (1, 1, 1, 1));
    let c = UptfTensor::dense(DenseArray::full(&[1, 1, 1, 1, 1, 1, 7], 0.3)).unwrap();
    assert!(MetricAccumulator::new(1).add(&p, &c).is_err());
    let mut acc = MetricAccumulator::new(1);
    acc.add(&c.with_data(DenseArray::zeros(&[1, 1, 1, 1, 1, 1, 7])).unwrap(), &c).unwrap();
    assert_eq!(acc.fields()[0].vrmse_flagged, 1);
    assert!(acc.vrmse().is_nan());
    assert!((acc.nrmse() - 1.0).abs() < 1e-12);
}

#[test]
fn broadcast_duplicates_do_not_count() {
    let u = UptfTensor::new(random(&[1, 1, 2, 2, 1, 3, 3], 5), vec![1, 2]).unwrap();
    let mut p = u.clone();
    let before = nrmse(&p, &u).unwrap();
    // second component of the scalar field 0 is a broadcast copy
    for v in &mut p.data_mut().data_mut()[9..18] {
        *v += 100.0;
    }
    assert_eq!(nrmse(&p, &u).unwrap(), before);
    assert_eq!(vrmse(&p, &u).unwrap(), 0.0);
}

#[test]
fn normalized_space_nrmse_differs_when_mean_is_nonzero() {
    let truth = scaled(&dense([1, 1, 1, 1, 1, 1, 16], 6), 1.0, 5.0);
    let pred = scaled(&dense([1, 1, 1, 1, 1, 1, 16], 7), 1.0, 5.0);
    let (mu, sd) = (5.0, 2.0);
    let n = |x: &UptfTensor| scaled(x, 1.0 / sd, -mu / sd);
    let raw = nrmse(&pred, &truth).unwrap();
    let normed = nrmse(&n(&pred), &n(&truth)).unwrap();
    assert!((raw - normed).abs() > 0.1, "{raw} vs {normed}");
    // VRMSE is unaffected by the affine map
    assert!((vrmse(&pred, &truth).unwrap() - vrmse(&n(&pred), &n(&truth)).unwrap()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_ignore_spatial_relabeling(seed in 0u64..1000) {
        let u = dense([2, 2, 2, 2, 3, 4, 5], seed);
        let p = dense([2, 2, 2, 2, 3, 4, 5], seed + 1);
        let relabel = |x: &UptfTensor| {
            let d = x.data().permute(&[0, 1, 2, 3, 6, 4, 5]).unwrap();
            UptfTensor::dense(d).unwrap()
        };
        prop_assert!((nrmse(&p, &u).unwrap() - nrmse(&relabel(&p), &relabel(&u)).unwrap()).abs() < 1e-12);
        prop_assert!((vrmse(&p, &u).unwrap() - vrmse(&relabel(&p), &relabel(&u)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn vrmse_is_affine_invariant(seed in 0u64..1000, a in 0.01f64..50.0, b in -100.0f64..100.0) {
        let u = dense([1, 2, 1, 1, 1, 6, 6], seed);
        let p = dense([1, 2, 1, 1, 1, 6, 6], seed + 7);
        let v0 = vrmse(&p, &u).unwrap();
        let v1 = vrmse(&scaled(&p, a, b), &scaled(&u, a, b)).unwrap();
        prop_assert!((v0 - v1).abs() < 1e-8 * v0.max(1.0));
    }

    #[test]
    fn snapshot_mean_scores_one(seed in 0u64..1000) {
        let u = dense([2, 2, 3, 2, 2, 3, 4], seed);
        prop_assert!((vrmse(&snapshot_mean(&u), &u).unwrap() - 1.0).abs() < 1e-9);
    }
}

/// Profiles that shift one cell per step: `u(t, x) = p(x - t)`.
fn shifting_file(dir: &std::path::Path, n: usize, steps: usize, w: usize) -> StreamFile {
    let desc = scalar_fields("shift", &["u"], [1, 1, w], 1, n).unwrap();
    let mut rng = seeded_rng(9);
    let mut data = Vec::new();
    for _ in 0..n {
        let p: Vec<f64> = (0..w).map(|_| 3.0 + rng.random_range(-1.0..1.0)).collect();
        for t in 0..steps {
            data.extend((0..w).map(|i| p[(i + w * steps - t) % w]));
        }
    }
    let batch = NativeBatch::Packed(DenseArray::new(vec![n, steps, w], data).unwrap());
    let mut c = Container::write(&dir.join("shift"), &desc, &batch, None).unwrap();
    let stats = compute_revin_stats([c.read_uptf(0..n).unwrap()], &desc).unwrap();
    c.write_stats(&stats).unwrap();
    StreamFile::split(c, Split::Test).unwrap()
}

/// Shifts the last frame by one cell, the exact dynamics of `shifting_file`.
struct Shift;

impl Predictor for Shift {
    fn name(&self) -> String {
        "shift".into()
    }

    fn predict_next(&self, x: &UptfTensor) -> Result<UptfTensor> {
        let last = Persistence.predict_next(x)?;
        let s = last.shape();
        let w = s[6];
        let src = last.data().data();
        let out = DenseArray::from_fn(&s, |i| src[i - i % w + (i % w + w - 1) % w]);
        last.with_data(out)
    }
}

struct Exploding;

impl Predictor for Exploding {
    fn name(&self) -> String {
        "exploding".into()
    }

    fn predict_next(&self, x: &UptfTensor) -> Result<UptfTensor> {
        let last = Persistence.predict_next(x)?;
        last.with_data(last.data().map(|v| v * 1e200))
    }
}

#[test]
fn oracle_and_persistence_reports() {
    let dir = tempfile::tempdir().unwrap();
    let file = shifting_file(dir.path(), 20, 6, 8);
    let oracle = evaluate(&Shift, "shift", std::slice::from_ref(&file), 1, 4).unwrap();
    assert_eq!(oracle.rows.len(), 1);
    assert_eq!(oracle.rows[0].snapshots, 2 * 5);
    assert!(oracle.rows[0].nrmse < 1e-14 && oracle.rows[0].vrmse < 1e-13);
    let pers = evaluate(&Persistence, "shift", std::slice::from_ref(&file), 1, 3).unwrap();
    assert!(pers.mean_nrmse() > 0.05);
    let csv = pers.to_csv();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("predictor,dataset,field,nrmse,vrmse"));
    assert!(pers.to_text().contains("(all)"));
    // batch size does not change the result
    let pers1 = evaluate(&Persistence, "shift", std::slice::from_ref(&file), 1, 1).unwrap();
    assert_eq!(pers1, pers);
}

#[test]
fn evaluate_requires_stats() {
    let dir = tempfile::tempdir().unwrap();
    let f = shifting_file(dir.path(), 20, 4, 4);
    let bare = StreamFile::new(f.container().clone(), 0..2, None).unwrap();
    assert!(evaluate(&Persistence, "shift", &[bare], 1, 2).is_err());
}

#[test]
fn rollout_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let file = shifting_file(dir.path(), 20, 8, 8);
    let stats = file.stats().unwrap();
    let x0 = file.load(0..1).unwrap().narrow_time(0, 1).unwrap();
    let r = rollout(&Persistence, &x0, 4, stats, None).unwrap();
    assert_eq!(r.frames.shape()[1], 4);
    let first = stats.denormalize(&x0).unwrap();
    for t in 0..4 {
        assert_eq!(r.frames.narrow_time(t, 1).unwrap(), first);
    }
    assert!(r.metrics.is_empty());

    let mut seen = Vec::new();
    let r = rollout_trajectory(&Shift, &file, 1, 1, 7, |m| seen.push(m.step)).unwrap();
    assert_eq!(seen, (1..=7).collect::<Vec<_>>());
    assert_eq!(r.metrics.len(), 7);
    assert!(r.metrics.iter().all(|m| m.nrmse < 1e-13));

    let one = rollout_trajectory(&Persistence, &file, 0, 1, 1, |_| {}).unwrap();
    let mut acc = MetricAccumulator::new(1);
    acc.add(&stats.denormalize(&file.load(0..1).unwrap().narrow_time(0, 1).unwrap()).unwrap(), &file.load_raw(0..1).unwrap().narrow_time(1, 1).unwrap()).unwrap();
    assert!((one.metrics[0].nrmse - acc.nrmse()).abs() < 1e-15);

    let err = rollout_trajectory(&Exploding, &file, 0, 1, 5, |_| {}).unwrap_err();
    assert!(err.to_string().contains("step 2"), "{err}");
    assert!(rollout_trajectory(&Persistence, &file, 0, 1, 8, |_| {}).is_err());
    assert!(rollout_csv(&r.metrics).starts_with("step,nrmse,vrmse\n1,"));
}

#[test]
fn model_predictor_returns_last_frame() {
    let m = Model::new(crate::model::ModelConfig::nano(), 0).unwrap();
    let x = dense([1, 2, 1, 1, 1, 1, 8], 3);
    assert_eq!(m.predict_next(&x).unwrap().shape(), [1, 1, 1, 1, 1, 1, 8]);
}
