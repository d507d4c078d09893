//! Finite-difference verification of the model's reverse-mode gradients.

use rand::seq::index::sample;
use rand::Rng as _;

use super::{Ctx, Model};
use crate::error::Result;
use crate::tensor::{seeded_rng, DenseArray, Graph};
use crate::uptf::UptfTensor;

/// Outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Entries compared one at a time.
    pub entries: usize,
    /// `||g - g_fd|| / max(||g||, ||g_fd||, GRAD_FLOOR)` over those entries.
    pub entry_error: f64,
    /// Relative error of one random unit-direction derivative over the
    /// whole tensor.
    pub directional_error: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.entry_error.max(self.directional_error)
    }
}

/// Gradient magnitudes below this are treated as zero when forming
/// relative errors; central differences carry roughly `1e-11` rounding
/// noise at unit loss, and some gradients (key biases under softmax) are
/// exactly zero.
pub const GRAD_FLOOR: f64 = 1e-6;

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(a.abs()).max(b.abs()).max(GRAD_FLOOR)
}

fn loss_value(model: &Model, x: &UptfTensor, y: &UptfTensor) -> Result<f64> {
    let g = Graph::new();
    let ctx = Ctx::eval(&g, model.params());
    Ok(model.ar_loss(&ctx, x, y)?.value().item())
}

/// Compares gradients of the autoregressive loss (dropout off) against
/// central differences with step `h` for every trainable tensor. With
/// `max_entries = None` every entry is perturbed; otherwise half the budget
/// goes to the largest-gradient entries and half to random ones.
pub fn check_gradients(
    model: &Model,
    x: &UptfTensor,
    y: &UptfTensor,
    h: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<Vec<GradCheck>> {
    let (_, grads) = model.loss_and_grads(x, y, false, 0)?;
    let mut rng = seeded_rng(seed);
    let mut work = model.clone();
    let mut out = Vec::new();
    for name in model.params().trainable_names() {
        let g = grads.get(&name).cloned().unwrap_or_else(|| DenseArray::zeros(model.params().get(&name).unwrap().shape()));
        let original = (**model.params().get(&name)?).clone();
        let n = original.len();
        let idx: Vec<usize> = match max_entries {
            Some(m) if m < n => {
                let mut by_mag: Vec<usize> = (0..n).collect();
                by_mag.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
                let mut chosen: Vec<usize> = by_mag[..m / 2].to_vec();
                chosen.extend(sample(&mut rng, n, m - m / 2));
                chosen.sort_unstable();
                chosen.dedup();
                chosen
            }
            _ => (0..n).collect(),
        };
        let (mut num, mut den_a, mut den_n) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let base = original.data()[i];
            work.params_mut().value_mut(&name)?.data_mut()[i] = base + h;
            let up = loss_value(&work, x, y)?;
            work.params_mut().value_mut(&name)?.data_mut()[i] = base - h;
            let down = loss_value(&work, x, y)?;
            work.params_mut().value_mut(&name)?.data_mut()[i] = base;
            let fd = (up - down) / (2.0 * h);
            let a = g.data()[i];
            num += (a - fd).powi(2);
            den_a += a * a;
            den_n += fd * fd;
        }
        let entry_error = num.sqrt() / den_a.max(den_n).sqrt().max(GRAD_FLOOR);

        let mut dir: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let norm = (n as f64).sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);
        let shifted = |s: f64| DenseArray::new(original.shape().to_vec(), original.data().iter().zip(&dir).map(|(v, d)| v + s * d).collect());
        work.params_mut().set(&name, shifted(h)?)?;
        let up = loss_value(&work, x, y)?;
        work.params_mut().set(&name, shifted(-h)?)?;
        let down = loss_value(&work, x, y)?;
        work.params_mut().set(&name, original)?;
        let fd = (up - down) / (2.0 * h);
        let analytic: f64 = g.data().iter().zip(&dir).map(|(a, d)| a * d).sum();
        let directional_error = rel(fd, analytic, g.norm() / norm);
        out.push(GradCheck { name, entries: idx.len(), entry_error, directional_error });
    }
    Ok(out)
}
