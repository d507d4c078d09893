use rand::Rng as _;

use super::gradcheck::check_gradients;
use super::*;
use crate::tensor::seeded_rng;

fn random(shape: &[usize], seed: u64) -> DenseArray {
    let mut rng = seeded_rng(seed);
    DenseArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn uptf(shape: [usize; 7], seed: u64) -> UptfTensor {
    UptfTensor::dense(random(&shape, seed)).unwrap()
}

fn nano() -> Model {
    Model::new(ModelConfig::nano(), 7).unwrap()
}

#[test]
fn output_shape_matches_input_in_every_dimensionality() {
    let m = nano();
    for shape in [[2, 1, 1, 1, 1, 1, 16], [1, 2, 3, 2, 1, 8, 8], [1, 1, 2, 3, 4, 4, 8]] {
        let x = uptf(shape, 1);
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), shape);
        assert!(y.data().all_finite());
    }
}

#[test]
fn rejects_bad_inputs() {
    let m = nano();
    assert!(m.predict(&uptf([1, 1, 1, 1, 1, 1, 6], 0)).is_err());
    assert!(m.predict(&uptf([1, 1, 4, 1, 1, 1, 8], 0)).is_err());
    assert!(m.predict(&uptf([1, 3, 1, 1, 1, 1, 8], 0)).is_err());
    assert!(m.predict(&uptf([1, 1, 1, 1, 1, 1, 4 * 65], 0)).is_err());
}

#[test]
fn broadcast_components_are_replicated_in_predictions() {
    let m = nano();
    let x = UptfTensor::new(random(&[1, 1, 2, 2, 1, 4, 4], 3), vec![1, 2]).unwrap();
    let y = m.predict(&x).unwrap();
    let d = y.data();
    for i in 0..16 {
        assert_eq!(d.data()[i], d.data()[16 + i]);
    }
}

#[test]
fn field_fusion_is_permutation_invariant() {
    let m = nano();
    let x = random(&[5, 3, 32], 11);
    let fused = |order: [usize; 3]| {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, m.params());
        let xv = g.constant(x.clone()).permute(&[1, 0, 2]).unwrap();
        let parts: Vec<DenseArray> = order.iter().map(|&f| xv.value().narrow(0, f, 1).unwrap()).collect();
        let refs: Vec<&DenseArray> = parts.iter().collect();
        let permuted = DenseArray::concat(&refs, 0).unwrap().permute(&[1, 0, 2]).unwrap();
        (*m.fuse(&ctx, g.constant(permuted)).unwrap().value()).clone()
    };
    let base = fused([0, 1, 2]);
    for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        assert!(fused(order).max_abs_diff(&base) < 1e-12);
    }
}

#[test]
fn axial_logit_counts() {
    let m = nano();
    let g = Graph::new();
    let ctx = Ctx::eval(&g, m.params());
    let grid = PatchGrid { t: 2, counts: [4, 4, 4], extent: [4, 4, 4] };
    let x = g.constant(random(&[1, 2, 64, 32], 5));
    g.reset_logit_count();
    m.axial_block(&ctx, 0, x, &grid).unwrap();
    assert_eq!(g.logit_count(), 128 * (2 + 4 + 4 + 4));
    assert_eq!(g.logit_count(), 1792);
    g.reset_logit_count();
    m.full_attention_reference(&ctx, 0, 1, x.reshape(&[1, 2, 4, 4, 4, 32]).unwrap()).unwrap();
    assert_eq!(g.logit_count(), 16384);
}

#[test]
fn single_axis_matches_full_attention() {
    let m = nano();
    for (shape, axis) in [([2, 1, 1, 1, 6, 32], 4), ([1, 3, 1, 1, 1, 32], 1), ([1, 1, 5, 1, 1, 32], 2)] {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, m.params());
        let u = g.constant(random(&shape, 9));
        let a = m.axis_attention(&ctx, 0, axis, u).unwrap().value();
        let f = m.full_attention_reference(&ctx, 0, axis, u).unwrap().value();
        assert!(a.max_abs_diff(&f) < 1e-10);
    }
}

#[test]
fn temporal_branch_skipped_for_single_frame() {
    let m = nano();
    let g = Graph::new();
    let ctx = Ctx::eval(&g, m.params());
    let grid = PatchGrid { t: 1, counts: [1, 2, 3], extent: [1, 4, 4] };
    g.reset_logit_count();
    m.axial_block(&ctx, 0, g.constant(random(&[1, 1, 6, 32], 2)), &grid).unwrap();
    assert_eq!(g.logit_count(), 6 * (1 + 2 + 3));
}

#[test]
fn lora_counts_and_zero_init_identity() {
    let mut m = nano();
    let x = uptf([1, 2, 2, 1, 1, 8, 8], 4);
    let before = m.predict(&x).unwrap();
    let base = m.params().total_count();
    m.set_lora_mode(4, 2, true, 3);
    for (name, i, o) in m.attn_linears() {
        assert_eq!(m.params().get(&format!("{name}.lora_a")).unwrap().len() + m.params().get(&format!("{name}.lora_b")).unwrap().len(), 4 * (i + o));
    }
    for (name, i, o) in m.mlp_linears() {
        assert_eq!(m.params().get(&format!("{name}.lora_a")).unwrap().len() + m.params().get(&format!("{name}.lora_b")).unwrap().len(), 2 * (i + o));
    }
    assert_eq!(m.params().count_in(ParamGroup::LoraAdapter), 16 * 4 * 64 + 2 * (2 * (32 + 64)));
    assert_eq!(m.params().total_count(), base + m.params().count_in(ParamGroup::LoraAdapter));
    assert!(!m.params().entry("blocks.0.attn_h.q.weight").unwrap().trainable);
    assert!(m.params().entry("decoder.weight").unwrap().trainable);
    assert_eq!(m.predict(&x).unwrap(), before);
    m.set_lora_mode(0, 0, false, 0);
    assert_eq!(m.params().count_in(ParamGroup::LoraAdapter), 0);
    assert_eq!(m.params().total_count(), base);
}

#[test]
fn nano_gradients_match_finite_differences() {
    let mut m = nano();
    m.set_lora_mode(2, 2, false, 1);
    // non-zero adapters so both LoRA factors receive gradient
    for (name, _, _) in m.attn_linears().into_iter().chain(m.mlp_linears()) {
        let b = m.params().get(&format!("{name}.lora_b")).unwrap().shape().to_vec();
        m.params_mut().set(&format!("{name}.lora_b"), random(&b, 21).scale(0.1)).unwrap();
    }
    let x = UptfTensor::new(random(&[1, 2, 2, 2, 1, 8, 4], 1), vec![2, 1]).unwrap();
    let y = UptfTensor::new(random(&[1, 1, 2, 2, 1, 8, 4], 2), vec![2, 1]).unwrap();
    let report = check_gradients(&m, &x, &y, 1e-5, Some(8), 0).unwrap();
    assert_eq!(report.len(), m.params().len());
    for r in report {
        assert!(r.worst() < 1e-4, "{r:?}");
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = nano();
    m.set_lora_mode(2, 0, true, 5);
    let x = uptf([1, 1, 1, 1, 1, 1, 32], 8);
    let mut optim = OptimState { step: 3, ..Default::default() };
    optim.m.insert("decoder.bias".into(), random(&[576], 1));
    optim.v.insert("decoder.bias".into(), random(&[576], 2));
    let mut rng = seeded_rng(4);
    rng.random::<u64>();
    let meta = CheckpointMeta { epoch: 4, best_val: Some(0.25), rng: Some(RngState::capture(&rng)), ..Default::default() };
    save_checkpoint(&path, &m, Some(&optim), &meta).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model.config(), m.config());
    assert_eq!(ck.model.predict(&x).unwrap(), m.predict(&x).unwrap());
    assert_eq!(ck.optim.unwrap(), optim);
    assert_eq!(ck.meta, meta);
    assert_eq!(ck.meta.rng.unwrap().restore().random::<u64>(), rng.random::<u64>());
    assert!(!ck.model.params().entry("blocks.0.attn_t.k.bias").unwrap().trainable);

    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn patch_grid_rules() {
    let c = ModelConfig::nano();
    let g = PatchGrid::new(&c, 2, [1, 8, 12]).unwrap();
    assert_eq!(g.counts, [1, 2, 3]);
    assert_eq!(g.extent, [1, 4, 4]);
    assert_eq!(g.tokens(), 12);
    assert!(PatchGrid::new(&c, 1, [2, 8, 8]).is_err());
}
