//! Chunked streaming of AR pairs with deterministic rank x worker sharding,
//! plus balanced multi-dataset task sampling.

mod sampler;
mod shard;

pub use sampler::{balanced_weights, sample_task, SamplerWeights};
pub use shard::{ar_samples, count_ar_samples, shard_indices, shard_stream, ArPair, SampleRef, ShardIndices, ShardPlan, ShardStream, StreamFile, WorkerInterleave};

use std::ops::Range;

use crate::error::{Error, Result};

/// Dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            o => Err(Error::invalid(format!("unknown split '{o}'"))),
        }
    }
}

/// Contiguous trajectory ranges for an 0.8/0.1/0.1 split of `n`
/// trajectories. Train and validation sizes are floors; test takes the rest.
pub fn split_range(n: usize, split: Split) -> Range<usize> {
    let train = n * 8 / 10;
    let val = n / 10;
    match split {
        Split::Train => 0..train,
        Split::Val => train..train + val,
        Split::Test => train + val..n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_partition_trajectories() {
        for n in [1, 7, 10, 20, 64, 101] {
            let (a, b, c) = (split_range(n, Split::Train), split_range(n, Split::Val), split_range(n, Split::Test));
            assert_eq!((a.start, a.end, b.end, c.end), (0, b.start, c.start, n));
        }
        assert_eq!(split_range(20, Split::Train), 0..16);
        assert_eq!(split_range(20, Split::Test), 18..20);
    }
}
