use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

/// Per-dataset sampling probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerWeights {
    weights: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl SamplerWeights {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `w_i = (1/N_i) / Σ_j (1/N_j)`.
pub fn balanced_weights(trajectory_counts: &[usize]) -> Result<SamplerWeights> {
    if trajectory_counts.is_empty() {
        return Err(Error::Empty("no datasets to weight".into()));
    }
    if let Some(i) = trajectory_counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("dataset {i} has zero trajectories")));
    }
    let inv: Vec<f64> = trajectory_counts.iter().map(|&n| 1.0 / n as f64).collect();
    let z: f64 = inv.iter().sum();
    let weights: Vec<f64> = inv.iter().map(|w| w / z).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(SamplerWeights { weights, dist })
}

/// Categorical draw of a dataset index.
pub fn sample_task<R: Rng + ?Sized>(weights: &SamplerWeights, rng: &mut R) -> usize {
    weights.dist.sample(rng)
}
