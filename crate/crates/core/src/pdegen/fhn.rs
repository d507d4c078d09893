/// Cell-centred five-point Laplacian on `(-1, 1)^2` with zero-flux walls:
/// faces on the boundary carry no flux.
pub fn fhn_laplacian(f: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (dy, dx) = (2.0 / h as f64, 2.0 / w as f64);
    let (cy, cx) = (1.0 / (dy * dy), 1.0 / (dx * dx));
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let c = f[i];
            let mut s = 0.0;
            if x > 0 {
                s += cx * (f[i - 1] - c);
            }
            if x + 1 < w {
                s += cx * (f[i + 1] - c);
            }
            if y > 0 {
                s += cy * (f[i - w] - c);
            }
            if y + 1 < h {
                s += cy * (f[i + w] - c);
            }
            out[i] = s;
        }
    }
    out
}

/// State after one RK4 step, plus the summed reaction contribution to the
/// total of each field over that step.
#[derive(Clone, Debug)]
pub struct FhnStep {
    pub state: Vec<f64>,
    pub reaction: [f64; 2],
}

struct Stage {
    rate: Vec<f64>,
    reaction: [f64; 2],
}

fn stage(s: &[f64], h: usize, w: usize, du: f64, dv: f64, k: f64) -> Stage {
    let n = h * w;
    let (u, v) = s.split_at(n);
    let lu = fhn_laplacian(u, h, w);
    let lv = fhn_laplacian(v, h, w);
    let mut rate = vec![0.0; 2 * n];
    let mut reaction = [0.0; 2];
    for i in 0..n {
        let ru = u[i] - u[i] * u[i] * u[i] - k - v[i];
        let rv = u[i] - v[i];
        rate[i] = du * lu[i] + ru;
        rate[n + i] = dv * lv[i] + rv;
        reaction[0] += ru;
        reaction[1] += rv;
    }
    Stage { rate, reaction }
}

/// Classic RK4 on the stacked state `[u; v]`.
pub fn fhn_step(s: &[f64], h: usize, w: usize, dt: f64, du: f64, dv: f64, k: f64) -> FhnStep {
    let shifted = |base: &[f64], by: &[f64], c: f64| -> Vec<f64> { base.iter().zip(by).map(|(a, b)| a + c * b).collect() };
    let k1 = stage(s, h, w, du, dv, k);
    let k2 = stage(&shifted(s, &k1.rate, 0.5 * dt), h, w, du, dv, k);
    let k3 = stage(&shifted(s, &k2.rate, 0.5 * dt), h, w, du, dv, k);
    let k4 = stage(&shifted(s, &k3.rate, dt), h, w, du, dv, k);
    let state = (0..s.len())
        .map(|i| s[i] + dt / 6.0 * (k1.rate[i] + 2.0 * k2.rate[i] + 2.0 * k3.rate[i] + k4.rate[i]))
        .collect();
    let reaction = [0, 1].map(|f| dt / 6.0 * (k1.reaction[f] + 2.0 * k2.reaction[f] + 2.0 * k3.reaction[f] + k4.reaction[f]));
    FhnStep { state, reaction }
}
