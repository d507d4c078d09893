use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::Result;

fn arr(shape: &[usize], data: &[f64]) -> DenseArray {
    DenseArray::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> DenseArray {
    let mut rng = seeded_rng(seed);
    DenseArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares reverse-mode gradients of `f` at `inputs` with central
/// differences, returning the worst per-input relative error
/// `|g - g_fd| / max(|g| + |g_fd|, 1e-12)` measured in the 2-norm.
fn grad_error<F>(inputs: &[DenseArray], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let h = 1e-5;
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let loss = f(&g, &vars).unwrap();
    g.backward(loss).unwrap();
    let eval = |xs: &[DenseArray]| {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vars).unwrap().value().item()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(*v);
        let mut numeric = DenseArray::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            numeric.data_mut()[j] = (up - down) / (2.0 * h);
        }
        let diff = DenseArray::new(analytic.shape().to_vec(), analytic.data().iter().zip(numeric.data()).map(|(a, b)| a - b).collect()).unwrap();
        let rel = diff.norm() / (analytic.norm() + numeric.norm()).max(1e-12);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn reshape_and_permute_examples() {
    let g = Graph::new();
    let x = g.leaf(arr(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
    let r = x.reshape(&[3, 2]).unwrap();
    assert_eq!(r.value().data(), &[1., 2., 3., 4., 5., 6.]);
    assert_eq!(r.shape(), vec![3, 2]);
    let t = x.permute(&[1, 0]).unwrap();
    assert_eq!(t.value().data(), &[1., 4., 2., 5., 3., 6.]);
    assert!(x.reshape(&[4]).is_err());
    assert!(x.permute(&[1, 1]).is_err());
    let s = t.sum();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), DenseArray::full(&[2, 3], 1.0));
}

#[test]
fn permute_gradient_matches_finite_differences() {
    let target = random(&[4, 2, 3], 2);
    let err = grad_error(&[random(&[2, 3, 4], 1)], |_, v| v[0].permute(&[2, 0, 1])?.mse_loss(&target));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn matmul_examples() {
    let g = Graph::new();
    let eye = g.constant(DenseArray::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let x = g.constant(random(&[3, 2], 3));
    assert_eq!(eye.matmul(x).unwrap().value().data(), x.value().data());
    let a = g.constant(arr(&[2, 2], &[1., 2., 3., 4.]));
    let b = g.constant(arr(&[2, 2], &[5., 6., 7., 8.]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[19., 22., 43., 50.]);
    assert!(a.matmul(x).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let target = random(&[4, 4], 9);
    let err = grad_error(&[random(&[4, 4], 7), random(&[4, 4], 8)], |_, v| v[0].matmul(v[1])?.mse_loss(&target));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let target = random(&[2, 3, 5], 13);
    let err = grad_error(&[random(&[2, 3, 4], 10), random(&[5, 4], 11), random(&[5], 12)], |_, v| {
        v[0].linear(v[1], Some(v[2]))?.mse_loss(&target)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv3d_examples() {
    let g = Graph::new();
    let mut x = DenseArray::zeros(&[1, 1, 3, 3, 3]);
    x.set(&[0, 0, 1, 1, 1], 2.5);
    let x = g.constant(x);
    let k = g.constant(DenseArray::full(&[1, 1, 3, 3, 3], 1.0));
    let y = x.conv3d(k, None, 1).unwrap().value();
    // the centre voxel of the output sees only the single non-zero input
    assert_eq!(y.get(&[0, 0, 1, 1, 1]), 2.5);
    assert_eq!(y.shape(), &[1, 1, 3, 3, 3]);

    let x = g.constant(random(&[1, 1, 2, 3, 3], 4));
    let w = g.constant(DenseArray::full(&[1, 1, 1, 1, 1], -1.5));
    let y = x.conv3d(w, None, 0).unwrap().value();
    assert_eq!(*y, x.value().scale(-1.5));

    let k2 = g.constant(DenseArray::zeros(&[1, 2, 3, 3, 3]));
    assert!(x.conv3d(k2, None, 1).is_err());
}

#[test]
fn conv3d_single_voxel_any_position() {
    let g = Graph::new();
    let mut x = DenseArray::zeros(&[1, 1, 1, 1, 1]);
    x.data_mut()[0] = -0.75;
    let y = g
        .constant(x)
        .conv3d(g.constant(DenseArray::full(&[1, 1, 3, 3, 3], 1.0)), None, 1)
        .unwrap()
        .value();
    assert_eq!(y.data(), &[-0.75]);
}

#[test]
fn conv3d_gradient_matches_finite_differences() {
    let target = random(&[1, 2, 2, 3, 3], 23);
    let err = grad_error(&[random(&[1, 1, 2, 3, 3], 20), random(&[2, 1, 3, 3, 3], 21), random(&[2], 22)], |_, v| {
        v[0].conv3d(v[1], Some(v[2]), 1)?.mse_loss(&target)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn softmax_examples() {
    let g = Graph::new();
    let s = g.constant(arr(&[2], &[0., 0.])).softmax(0).unwrap().value();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = g.constant(arr(&[1], &[3.7])).softmax(0).unwrap().value();
    assert_eq!(s.data(), &[1.0]);
    let s = g.constant(arr(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()])).softmax(0).unwrap().value();
    for (a, b) in s.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(g.constant(arr(&[1], &[0.])).softmax(1).is_err());
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let target = random(&[3, 4, 2], 31);
    let err = grad_error(&[random(&[3, 4, 2], 30)], |_, v| v[0].scale(3.0).softmax(1)?.mse_loss(&target));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn layer_norm_examples() {
    let g = Graph::new();
    let one = g.constant(DenseArray::full(&[2], 1.0));
    let zero = g.constant(DenseArray::zeros(&[2]));
    let y = g.constant(arr(&[2], &[1., -1.])).layer_norm(0, one, zero, 0.0).unwrap().value();
    assert_eq!(y.data(), &[1., -1.]);
    let one3 = g.constant(DenseArray::full(&[3], 1.0));
    let zero3 = g.constant(DenseArray::zeros(&[3]));
    let y = g.constant(DenseArray::full(&[3], 4.2)).layer_norm(0, one3, zero3, 1e-5).unwrap().value();
    assert!(y.data().iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let target = random(&[3, 4, 2], 43);
    let err = grad_error(&[random(&[3, 4, 2], 40), random(&[4], 41), random(&[4], 42)], |_, v| {
        v[0].layer_norm(1, v[1], v[2], 1e-5)?.mse_loss(&target)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn activation_examples() {
    let g = Graph::new();
    let x = g.constant(arr(&[1], &[-1.0]));
    assert_eq!(x.activation(Activation::LeakyRelu(0.2)).unwrap().value().item(), -0.2);
    assert_eq!(g.constant(arr(&[1], &[0.0])).gelu().value().item(), 0.0);
    assert!(x.leaky_relu(1.5).is_err());
    assert!("swish".parse::<Activation>().is_err());
    assert_eq!("leaky_relu(0.1)".parse::<Activation>().unwrap(), Activation::LeakyRelu(0.1));
    assert_eq!("gelu".parse::<Activation>().unwrap(), Activation::Gelu);
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    for x in [-2.0, -0.5, 0.5, 2.0] {
        let err = grad_error(&[arr(&[1], &[x])], |_, v| Ok(v[0].gelu().sum()));
        assert!(err < 1e-5, "x={x}: {err}");
    }
    let err = grad_error(&[arr(&[4], &[-2.0, -0.5, 0.5, 2.0])], |_, v| Ok(v[0].leaky_relu(0.2)?.sum()));
    assert!(err < 1e-8, "{err}");
}

#[test]
fn dropout_semantics() {
    let g = Graph::new();
    let mut rng = seeded_rng(5);
    let x = g.constant(DenseArray::full(&[10_000], 1.0));
    assert_eq!(x.dropout(0.0, &mut rng, true).unwrap().id(), x.id());
    assert_eq!(x.dropout(0.7, &mut rng, false).unwrap().id(), x.id());
    let y = x.dropout(0.5, &mut rng, true).unwrap().value();
    let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e4;
    assert!((survivors - 0.5).abs() < 0.03, "{survivors}");
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(x.dropout(1.0, &mut rng, true).is_err());
    assert!(x.dropout(-0.1, &mut rng, true).is_err());
}

#[test]
fn resample_examples() {
    let c = DenseArray::full(&[3, 5, 2], 0.25);
    let out = bilinear_resample(&c, 7, 2).unwrap();
    assert_eq!(out.shape(), &[7, 2, 2]);
    assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let t = arr(&[2, 1, 1], &[0.0, 1.0]);
    assert_eq!(bilinear_resample(&t, 3, 1).unwrap().data(), &[0.0, 0.5, 1.0]);

    let r = random(&[4, 6, 3], 50);
    assert_eq!(bilinear_resample(&r, 4, 6).unwrap(), r);
    assert!(bilinear_resample(&r, 0, 6).is_err());
}

#[test]
fn resample_gradient_matches_finite_differences() {
    let target = random(&[5, 3, 2], 52);
    let err = grad_error(&[random(&[3, 4, 2], 51)], |_, v| resample(v[0], 5, 3)?.mse_loss(&target));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn mse_examples() {
    let g = Graph::new();
    let t = random(&[3, 2], 60);
    assert_eq!(g.constant(t.clone()).mse_loss(&t).unwrap().value().item(), 0.0);
    let p = g.leaf(DenseArray::full(&[2], 1.0), true);
    let l = p.mse_loss(&DenseArray::zeros(&[2])).unwrap();
    assert_eq!(l.value().item(), 1.0);
    g.backward(l).unwrap();
    assert_eq!(g.grad(p).unwrap().data(), &[1.0, 1.0]);
    assert!(p.mse_loss(&DenseArray::zeros(&[3])).is_err());
}

#[test]
fn masked_mse_ignores_zero_weight_entries() {
    let g = Graph::new();
    let p = g.constant(arr(&[3], &[1.0, 5.0, 3.0]));
    let l = p.masked_mse_loss(&arr(&[3], &[0.0, 0.0, 0.0]), &arr(&[3], &[1.0, 0.0, 1.0])).unwrap();
    assert_eq!(l.value().item(), 5.0);
    let target = random(&[4], 62);
    let w = arr(&[4], &[1.0, 0.0, 1.0, 1.0]);
    let err = grad_error(&[random(&[4], 61)], |_, v| v[0].masked_mse_loss(&target, &w));
    assert!(err < 1e-8, "{err}");
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let target = random(&[2, 3, 4], 74);
    let err = grad_error(&[random(&[2, 3, 4], 70), random(&[2, 5, 4], 71), random(&[2, 5, 4], 72)], |_, v| {
        attention(v[0], v[1], v[2], 2)?.mse_loss(&target)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn attention_counts_logits() {
    let g = Graph::new();
    let q = g.constant(random(&[3, 2, 4], 1));
    let k = g.constant(random(&[3, 5, 4], 2));
    attention(q, k, k, 4).unwrap();
    assert_eq!(g.logit_count(), 3 * 2 * 5);
    assert!(attention(q, k, k, 3).is_err());
}

#[test]
fn structural_ops_gradients() {
    let target = random(&[3, 2, 2], 83);
    let err = grad_error(&[random(&[2, 4], 80), random(&[4], 81)], |_, v| {
        v[0].add_broadcast(v[1])?.expand(3)?.narrow(2, 1, 2)?.scale(0.5).mse_loss(&target)
    });
    assert!(err < 1e-8, "{err}");
    let t2 = random(&[2, 4], 84);
    let err = grad_error(&[random(&[2, 4], 85), random(&[2, 4], 86)], |_, v| v[0].add(v[1])?.mse_loss(&t2));
    assert!(err < 1e-8, "{err}");
}

#[test]
fn backward_semantics() {
    let g = Graph::new();
    let x = g.leaf(random(&[2, 2], 90), true);
    let unused = g.leaf(random(&[3], 91), true);
    let s = x.sum();
    assert!(g.backward(x).is_err());
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), DenseArray::full(&[2, 2], 1.0));
    assert_eq!(g.grad_or_zeros(unused), DenseArray::zeros(&[3]));
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), DenseArray::full(&[2, 2], 2.0));
}

#[test]
fn named_leaves_collect_grads_by_name() {
    let g = Graph::new();
    let w = std::rc::Rc::new(DenseArray::full(&[2], 3.0));
    let a = g.param("w", w.clone(), true);
    let b = g.param("w", w, true);
    let l = a.add(b).unwrap().sum();
    g.backward(l).unwrap();
    assert_eq!(g.named_grads()["w"].data(), &[2.0, 2.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let g = Graph::new();
        let mut rng = seeded_rng(17);
        let x = g.constant(random(&[2, 3, 8], 3));
        let w = g.constant(random(&[8, 8], 4));
        let y = x.linear(w, None).unwrap().gelu().dropout(0.3, &mut rng, true).unwrap();
        attention(y, y, y, 2).unwrap().value()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
        let g = Graph::new();
        let n = vals.len();
        let s = g.constant(DenseArray::new(vec![n], vals).unwrap()).softmax(0).unwrap().value();
        prop_assert!((s.sum() - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn resample_identity_is_exact(r in 1usize..6, c in 1usize..6, e in 1usize..4, seed in 0u64..1000) {
        let t = random(&[r, c, e], seed);
        prop_assert_eq!(bilinear_resample(&t, r, c).unwrap(), t);
    }

    #[test]
    fn elementwise_gradients_match(seed in 0u64..500) {
        let target = random(&[6], seed + 1);
        let err = grad_error(&[random(&[6], seed)], |_, v| v[0].gelu().leaky_relu(0.3)?.mse_loss(&target));
        prop_assert!(err < 1e-4);
    }
}
