use std::collections::VecDeque;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{split_range, Split};
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Rng};
use crate::uptf::{Container, RevinStats, UptfTensor};

/// AR samples contributed by `n` trajectories of `steps` frames.
pub fn ar_samples(n: usize, steps: usize, ar_order: usize) -> usize {
    n * steps.saturating_sub(ar_order)
}

/// Total AR-sample count over containers, read from metadata only.
pub fn count_ar_samples<P: AsRef<Path>>(paths: &[P], ar_order: usize) -> Result<usize> {
    paths.iter().try_fold(0, |acc, p| {
        let c = Container::open(p.as_ref())?;
        Ok(acc + ar_samples(c.trajectories(), c.steps(), ar_order))
    })
}

/// A trajectory range of one container, streamed in order. Chunks are
/// normalized with `stats` (when present) as they are loaded.
#[derive(Clone, Debug)]
pub struct StreamFile {
    container: Container,
    range: Range<usize>,
    stats: Option<RevinStats>,
}

impl StreamFile {
    pub fn new(container: Container, range: Range<usize>, stats: Option<RevinStats>) -> Result<Self> {
        if range.end > container.trajectories() || range.start > range.end {
            return Err(Error::invalid(format!("trajectory range {range:?} outside 0..{}", container.trajectories())));
        }
        Ok(Self { container, range, stats })
    }

    /// One split of a container, normalized with the container's cached stats.
    pub fn split(container: Container, split: Split) -> Result<Self> {
        let range = split_range(container.trajectories(), split);
        let stats = container.stats().cloned();
        Self::new(container, range, stats)
    }

    pub fn container(&self) -> &Container {
        &self.container
    }

    pub fn stats(&self) -> Option<&RevinStats> {
        self.stats.as_ref()
    }

    pub fn trajectories(&self) -> usize {
        self.range.len()
    }

    pub fn steps(&self) -> usize {
        self.container.steps()
    }

    pub fn ar_samples(&self, ar_order: usize) -> usize {
        ar_samples(self.trajectories(), self.steps(), ar_order)
    }

    /// Local trajectories `range` (relative to this file's range), all
    /// steps, without normalization.
    pub fn load_raw(&self, range: Range<usize>) -> Result<UptfTensor> {
        if range.end > self.trajectories() {
            return Err(Error::invalid(format!("trajectories {range:?} outside 0..{}", self.trajectories())));
        }
        self.container.read_uptf(self.range.start + range.start..self.range.start + range.end)
    }

    /// Local trajectories `range` (relative to this file's range), all steps.
    pub fn load(&self, range: Range<usize>) -> Result<UptfTensor> {
        let raw = self.load_raw(range)?;
        match &self.stats {
            Some(s) => s.normalize(&raw),
            None => Ok(raw),
        }
    }
}

/// Deterministic assignment of AR samples to `world_size x workers`
/// sub-workers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardPlan {
    pub total: usize,
    pub world_size: usize,
    pub workers: usize,
    pub group: usize,
    pub t_star: usize,
    pub quota: usize,
    pub ar_order: usize,
    /// Trajectories per chunk.
    pub chunk_size: usize,
    pub base_seed: u64,
    pub epoch: u64,
}

impl ShardPlan {
    pub fn new(total: usize, world_size: usize, workers: usize, ar_order: usize, chunk_size: usize, base_seed: u64, epoch: u64) -> Result<Self> {
        if world_size == 0 || workers == 0 || chunk_size == 0 || ar_order == 0 {
            return Err(Error::invalid("world size, workers, chunk size and AR order must be positive"));
        }
        let group = world_size * workers;
        let t_star = total - total % group;
        Ok(Self { total, world_size, workers, group, t_star, quota: t_star / group, ar_order, chunk_size, base_seed, epoch })
    }

    pub fn for_files(files: &[StreamFile], world_size: usize, workers: usize, ar_order: usize, chunk_size: usize, base_seed: u64, epoch: u64) -> Result<Self> {
        let total = files.iter().map(|f| f.ar_samples(ar_order)).sum();
        Self::new(total, world_size, workers, ar_order, chunk_size, base_seed, epoch)
    }

    pub fn with_epoch(&self, epoch: u64) -> Self {
        Self { epoch, ..self.clone() }
    }

    pub fn sub_worker_id(&self, rank: usize, worker: usize) -> Result<usize> {
        if rank >= self.world_size || worker >= self.workers {
            return Err(Error::invalid(format!(
                "rank {rank} / worker {worker} outside world size {} x {} workers",
                self.world_size, self.workers
            )));
        }
        Ok(rank * self.workers + worker)
    }
}

/// Location of one AR sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub file: usize,
    pub chunk_start: usize,
    pub chunk_len: usize,
    /// Trajectory index local to the file's range.
    pub trajectory: usize,
    /// First input step.
    pub t: usize,
    pub global: usize,
}

/// Metadata-only walk of one sub-worker's share of the global sample order:
/// files in order, chunks in order, candidates within a chunk shuffled by a
/// generator seeded with `base_seed + epoch`.
pub struct ShardIndices {
    sizes: Vec<(usize, usize)>,
    plan: ShardPlan,
    my_id: usize,
    rng: Rng,
    file: usize,
    chunk_start: usize,
    queue: VecDeque<SampleRef>,
    g: usize,
    yielded: usize,
    done: bool,
}

/// Index walk over files given as `(trajectories, steps)`.
pub fn shard_indices(sizes: &[(usize, usize)], plan: &ShardPlan, rank: usize, worker: usize) -> Result<ShardIndices> {
    let my_id = plan.sub_worker_id(rank, worker)?;
    let total: usize = sizes.iter().map(|&(n, s)| ar_samples(n, s, plan.ar_order)).sum();
    if total != plan.total {
        return Err(Error::invalid(format!("plan counts {} samples but files hold {total}", plan.total)));
    }
    Ok(ShardIndices {
        sizes: sizes.to_vec(),
        plan: plan.clone(),
        my_id,
        rng: seeded_rng(plan.base_seed.wrapping_add(plan.epoch)),
        file: 0,
        chunk_start: 0,
        queue: VecDeque::new(),
        g: 0,
        yielded: 0,
        done: false,
    })
}

impl ShardIndices {
    fn refill(&mut self) -> bool {
        while self.queue.is_empty() {
            let Some(&(n, steps)) = self.sizes.get(self.file) else { return false };
            if self.chunk_start >= n {
                self.file += 1;
                self.chunk_start = 0;
                continue;
            }
            let len = self.plan.chunk_size.min(n - self.chunk_start);
            let per = steps.saturating_sub(self.plan.ar_order);
            let mut cands: Vec<SampleRef> = (0..len * per)
                .map(|i| SampleRef {
                    file: self.file,
                    chunk_start: self.chunk_start,
                    chunk_len: len,
                    trajectory: self.chunk_start + i / per,
                    t: i % per,
                    global: 0,
                })
                .collect();
            cands.shuffle(&mut self.rng);
            self.queue.extend(cands);
            self.chunk_start += len;
        }
        true
    }
}

impl Iterator for ShardIndices {
    type Item = SampleRef;

    fn next(&mut self) -> Option<SampleRef> {
        while !self.done && self.yielded < self.plan.quota {
            if !self.refill() {
                self.done = true;
                break;
            }
            let mut s = self.queue.pop_front().expect("refilled");
            if self.g >= self.plan.t_star {
                self.done = true;
                break;
            }
            s.global = self.g;
            self.g += 1;
            if s.global % self.plan.group == self.my_id {
                self.yielded += 1;
                return Some(s);
            }
        }
        None
    }
}

/// One AR training pair.
#[derive(Clone, Debug)]
pub struct ArPair {
    /// `(1, ar_order, F, C, D, H, W)`
    pub x: UptfTensor,
    /// `(1, 1, F, C, D, H, W)`
    pub y: UptfTensor,
    pub sample: SampleRef,
}

/// A sub-worker's stream of AR pairs. Holds at most one chunk in memory and
/// loads a chunk only if it contributes a sample to this sub-worker.
pub struct ShardStream<'a> {
    files: &'a [StreamFile],
    indices: ShardIndices,
    ar_order: usize,
    chunk: Option<((usize, usize), UptfTensor)>,
}

/// Yields exactly `plan.quota` pairs for sub-worker `rank * workers + worker`.
pub fn shard_stream<'a>(files: &'a [StreamFile], plan: &ShardPlan, rank: usize, worker: usize) -> Result<ShardStream<'a>> {
    let sizes: Vec<(usize, usize)> = files.iter().map(|f| (f.trajectories(), f.steps())).collect();
    Ok(ShardStream { files, indices: shard_indices(&sizes, plan, rank, worker)?, ar_order: plan.ar_order, chunk: None })
}

impl Iterator for ShardStream<'_> {
    type Item = Result<ArPair>;

    fn next(&mut self) -> Option<Result<ArPair>> {
        let s = self.indices.next()?;
        let key = (s.file, s.chunk_start);
        if self.chunk.as_ref().map(|c| c.0) != Some(key) {
            self.chunk = None;
            match self.files[s.file].load(s.chunk_start..s.chunk_start + s.chunk_len) {
                Ok(t) => self.chunk = Some((key, t)),
                Err(e) => return Some(Err(e)),
            }
        }
        let chunk = &self.chunk.as_ref().expect("loaded").1;
        let pair = chunk.narrow_batch(s.trajectory - s.chunk_start, 1).and_then(|traj| {
            Ok(ArPair { x: traj.narrow_time(s.t, self.ar_order)?, y: traj.narrow_time(s.t + self.ar_order, 1)?, sample: s })
        });
        Some(pair)
    }
}

/// Round-robin merge of one rank's worker streams, as a data loader with
/// several workers would deliver them.
pub struct WorkerInterleave<'a> {
    streams: Vec<ShardStream<'a>>,
    next: usize,
}

impl<'a> WorkerInterleave<'a> {
    pub fn new(files: &'a [StreamFile], plan: &ShardPlan, rank: usize) -> Result<Self> {
        let streams = (0..plan.workers).map(|w| shard_stream(files, plan, rank, w)).collect::<Result<Vec<_>>>()?;
        Ok(Self { streams, next: 0 })
    }
}

impl Iterator for WorkerInterleave<'_> {
    type Item = Result<ArPair>;

    fn next(&mut self) -> Option<Result<ArPair>> {
        for _ in 0..self.streams.len() {
            let i = self.next;
            self.next = (self.next + 1) % self.streams.len();
            if let Some(item) = self.streams[i].next() {
                return Some(item);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::tensor::DenseArray;
    use crate::uptf::{scalar_fields, NativeBatch};

    /// Brute-force global order: every chunk's candidates materialized,
    /// shuffled with one generator seeded `base_seed + epoch`, concatenated.
    fn oracle_order(sizes: &[(usize, usize)], plan: &ShardPlan) -> Vec<(usize, usize, usize)> {
        let mut rng = seeded_rng(plan.base_seed + plan.epoch);
        let mut order = Vec::new();
        for (f, &(n, steps)) in sizes.iter().enumerate() {
            let mut start = 0;
            while start < n {
                let end = (start + plan.chunk_size).min(n);
                let mut chunk = Vec::new();
                for tr in start..end {
                    for t in 0..steps.saturating_sub(plan.ar_order) {
                        chunk.push((f, tr, t));
                    }
                }
                chunk.shuffle(&mut rng);
                order.extend(chunk);
                start = end;
            }
        }
        order
    }

    #[test]
    fn counting_examples() {
        assert_eq!(ar_samples(2, 5, 1), 8);
        assert_eq!(ar_samples(4, 3, 3), 0);
        assert_eq!(ar_samples(4, 3, 7), 0);
        assert_eq!(ar_samples(2, 5, 1) + ar_samples(3, 3, 1), 14);
    }

    #[test]
    fn hand_enumerated_plan() {
        let plan = ShardPlan::new(10, 2, 2, 1, 4, 0, 0).unwrap();
        assert_eq!((plan.group, plan.t_star, plan.quota), (4, 8, 2));
        let sizes = [(2, 6)];
        let got: Vec<usize> = shard_indices(&sizes, &plan, 1, 1).unwrap().map(|s| s.global).collect();
        assert_eq!(got, vec![3, 7]);
        let mut all: Vec<usize> = (0..2).flat_map(|r| (0..2).map(move |w| (r, w))).flat_map(|(r, w)| shard_indices(&sizes, &plan, r, w).unwrap().map(|s| s.global)).collect();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert!(shard_indices(&sizes, &plan, 2, 0).is_err());
        assert!(shard_indices(&sizes, &plan, 0, 2).is_err());
    }

    #[test]
    fn single_worker_passthrough_in_stream_order() {
        let sizes = [(3, 4), (2, 2)];
        let plan = ShardPlan::new(11, 1, 1, 1, 2, 9, 1).unwrap();
        let got: Vec<(usize, usize, usize)> = shard_indices(&sizes, &plan, 0, 0).unwrap().map(|s| (s.file, s.trajectory, s.t)).collect();
        assert_eq!(got, oracle_order(&sizes, &plan));
    }

    #[test]
    fn partition_matches_oracle_for_many_plans() {
        for total in [0usize, 1, 5, 37, 64, 113] {
            let k = total / 4;
            let sizes = [(k, 3), (2, 1), (1, total - 2 * k + 1)];
            for (wd, kw) in [(1, 1), (2, 3), (4, 4), (3, 1)] {
                for epoch in 0..2 {
                    let plan = ShardPlan::new(total, wd, kw, 1, 3, 5, epoch).unwrap();
                    let order = oracle_order(&sizes, &plan);
                    let mut union = HashSet::new();
                    for r in 0..wd {
                        for w in 0..kw {
                            let got: Vec<SampleRef> = shard_indices(&sizes, &plan, r, w).unwrap().collect();
                            assert_eq!(got.len(), plan.quota);
                            for s in &got {
                                assert_eq!(order[s.global], (s.file, s.trajectory, s.t));
                                assert_eq!(s.global % plan.group, r * kw + w);
                                assert!(union.insert(s.global));
                            }
                        }
                    }
                    assert_eq!(union.len(), plan.t_star);
                }
            }
        }
    }

    #[test]
    fn epochs_reshuffle_within_chunks_only() {
        let sizes = [(6, 5)];
        let p0 = ShardPlan::new(24, 1, 1, 1, 2, 3, 0).unwrap();
        let a: Vec<SampleRef> = shard_indices(&sizes, &p0, 0, 0).unwrap().collect();
        let b: Vec<SampleRef> = shard_indices(&sizes, &p0, 0, 0).unwrap().collect();
        let c: Vec<SampleRef> = shard_indices(&sizes, &p0.with_epoch(1), 0, 0).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (x, y) in a.iter().zip(&c) {
            assert_eq!(x.chunk_start, y.chunk_start);
        }
    }

    #[test]
    fn stream_yields_consecutive_frames_of_one_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let desc = scalar_fields("ramp", &["u"], [1, 1, 4], 1, 5).unwrap();
        // value encodes (trajectory, step, x)
        let data = DenseArray::from_fn(&[5, 6, 4], |i| i as f64);
        let c = Container::write(dir.path(), &desc, &NativeBatch::Packed(data), None).unwrap();
        let files = [StreamFile::new(c, 1..5, None).unwrap()];
        let plan = ShardPlan::for_files(&files, 1, 2, 2, 3, 11, 0).unwrap();
        assert_eq!(plan.total, 16);
        let pairs: Vec<ArPair> = WorkerInterleave::new(&files, &plan, 0).unwrap().map(|p| p.unwrap()).collect();
        assert_eq!(pairs.len(), 16);
        for p in &pairs {
            assert_eq!(p.x.shape()[1], 2);
            assert_eq!(p.y.shape()[1], 1);
            let traj = p.sample.trajectory + 1;
            let first = p.x.data().data()[0];
            assert_eq!(first, ((traj * 6 + p.sample.t) * 4) as f64);
            assert_eq!(p.y.data().data()[0], first + 8.0);
        }
        // worker streams alternate
        assert_eq!(pairs[0].sample.global % 2, 0);
        assert_eq!(pairs[1].sample.global % 2, 1);
    }
}
