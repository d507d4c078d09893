use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pdefm::model::{Model, ModelConfig};
use pdefm::tensor::{attention, DenseArray, Graph};
use pdefm::uptf::UptfTensor;

fn filled(shape: &[usize]) -> DenseArray {
    DenseArray::from_fn(shape, |i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5)
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b) = (filled(&[512, n]), filled(&[n, n]));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let gr = Graph::new();
                let out = gr.leaf(a.clone(), true).matmul(gr.constant(b.clone())).unwrap();
                gr.backward(out.sum()).unwrap();
            })
        });
    }
    g.finish();
}

fn conv3d(c: &mut Criterion) {
    let x = filled(&[2, 8, 16, 16, 16]);
    let k = filled(&[8, 8, 3, 3, 3]);
    c.bench_function("conv3d_8x8_16cubed", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let out = g.constant(x.clone()).conv3d(g.leaf(k.clone(), true), None, 1).unwrap();
            g.backward(out.sum()).unwrap();
        })
    });
}

fn attn(c: &mut Criterion) {
    let q = filled(&[64, 16, 256]);
    c.bench_function("attention_64x16_e256_h4", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let v = g.leaf(q.clone(), true);
            let out = attention(v, v, v, 4).unwrap();
            g.backward(out.sum()).unwrap();
        })
    });
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_and_grads");
    g.sample_size(10);
    let cases = [("nano_2d", ModelConfig::nano(), [2, 1, 2, 1, 1, 16, 16]), ("ti_p4_3d", ModelConfig { patch: 4, ..ModelConfig::ti() }, [2, 1, 1, 1, 16, 16, 16])];
    for (name, cfg, shape) in cases {
        let m = Model::new(cfg, 0).unwrap();
        let x = UptfTensor::new(filled(&shape), vec![1; shape[2]]).unwrap();
        g.bench_function(name, |bench| bench.iter(|| m.loss_and_grads(&x, &x, true, 0).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, matmul, conv3d, attn, forward);
criterion_main!(benches);
