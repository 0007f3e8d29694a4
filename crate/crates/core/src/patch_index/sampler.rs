//! Epoch planning and batch streams.
//!
//! Both samplers share one plan: a seeded shuffle of index positions split
//! into `K` near-equal partitions, each cut into consecutive batches (the
//! last one may be short). The indexed sampler resolves positions through
//! the precomputed [`PatchIndex`]; the naive sampler re-derives the valid
//! centers from the label maps for every batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_patch_size, PatchBatch, PatchIndex, PatchStore, Triplet};
use crate::error::{Error, Result};

/// Shuffles `0..n` with `seed` and splits it into `partitions` contiguous
/// runs whose sizes differ by at most one.
pub fn plan_positions(n: usize, seed: u64, partitions: usize) -> Result<Vec<Vec<usize>>> {
    if partitions == 0 {
        return Err(Error::Config("partition count must be >= 1".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / partitions, n % partitions);
    let mut out = Vec::with_capacity(partitions);
    let mut start = 0;
    for k in 0..partitions {
        let len = base + usize::from(k < extra);
        out.push(perm[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

fn batch_ranges(plan: &[Vec<usize>], batch_size: usize) -> Vec<(usize, std::ops::Range<usize>)> {
    plan.iter()
        .enumerate()
        .flat_map(|(k, part)| {
            (0..part.len())
                .step_by(batch_size)
                .map(move |s| (k, s..(s + batch_size).min(part.len())))
        })
        .collect()
}

/// Stream of `(partition, batch)` pairs resolved through the index.
pub struct IndexedBatches<'a> {
    store: &'a PatchStore,
    index: &'a PatchIndex,
    plan: Vec<Vec<usize>>,
    ranges: std::vec::IntoIter<(usize, std::ops::Range<usize>)>,
}

impl Iterator for IndexedBatches<'_> {
    type Item = Result<(usize, PatchBatch)>;

    fn next(&mut self) -> Option<Self::Item> {
        let (k, r) = self.ranges.next()?;
        let triplets: Vec<Triplet> = self.plan[k][r]
            .iter()
            .map(|&p| self.index.triplets()[p])
            .collect();
        Some(
            self.store
                .assemble(&triplets, self.index.patch_size())
                .map(|b| (k, b)),
        )
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.ranges.size_hint()
    }
}

pub fn sample_batches<'a>(
    store: &'a PatchStore,
    index: &'a PatchIndex,
    batch_size: usize,
    seed: u64,
    partitions: usize,
) -> Result<IndexedBatches<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if index.is_empty() {
        return Err(Error::Empty("patch index has no entries".into()));
    }
    let plan = plan_positions(index.len(), seed, partitions)?;
    let ranges = batch_ranges(&plan, batch_size).into_iter();
    Ok(IndexedBatches {
        store,
        index,
        plan,
        ranges,
    })
}

/// Mask search over all label maps: every finite, boundary-safe center in
/// `(f, y, x)` order.
fn scan_valid_centers(store: &PatchStore, half: usize) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (f, l) in store.labels().iter().enumerate() {
        for y in 0..l.height() {
            for x in 0..l.width() {
                let inside = y >= half && y + half < l.height() && x >= half && x + half < l.width();
                if inside && l.get(y, x).is_finite() {
                    out.push(Triplet::new(f, y, x));
                }
            }
        }
    }
    out
}

/// Baseline stream that rescans the label maps on every batch.
pub struct NaiveBatches<'a> {
    store: &'a PatchStore,
    patch_size: usize,
    half: usize,
    plan: Vec<Vec<usize>>,
    ranges: std::vec::IntoIter<(usize, std::ops::Range<usize>)>,
}

impl Iterator for NaiveBatches<'_> {
    type Item = Result<(usize, PatchBatch)>;

    fn next(&mut self) -> Option<Self::Item> {
        let (k, r) = self.ranges.next()?;
        let valid = scan_valid_centers(self.store, self.half);
        let triplets: Vec<Triplet> = self.plan[k][r].iter().map(|&p| valid[p]).collect();
        Some(self.store.assemble(&triplets, self.patch_size).map(|b| (k, b)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.ranges.size_hint()
    }
}

pub fn naive_sample_batches(
    store: &PatchStore,
    patch_size: usize,
    batch_size: usize,
    seed: u64,
    partitions: usize,
) -> Result<NaiveBatches<'_>> {
    let half = check_patch_size(patch_size)?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let n = scan_valid_centers(store, half).len();
    let plan = plan_positions(n, seed, partitions)?;
    let ranges = batch_ranges(&plan, batch_size).into_iter();
    Ok(NaiveBatches {
        store,
        patch_size,
        half,
        plan,
        ranges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granule_io::{Granule, LabelMap};

    fn store(h: usize, w: usize) -> PatchStore {
        let g = Granule::new(h, w, 2, (0..h * w * 2).map(|i| i as f32).collect()).unwrap();
        let mut labels = vec![0.25; h * w];
        labels[w + 2] = f32::NAN;
        PatchStore::from_parts(vec![g], vec![LabelMap::new(h, w, labels).unwrap()]).unwrap()
    }

    #[test]
    fn partition_sizes() {
        let p = plan_positions(10, 3, 5).unwrap();
        assert!(p.iter().all(|v| v.len() == 2));
        let mut sizes: Vec<_> = plan_positions(11, 3, 5).unwrap().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        let mut all: Vec<_> = plan_positions(11, 3, 5).unwrap().concat();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert!(plan_positions(4, 0, 0).is_err());
    }

    #[test]
    fn deterministic_and_covering() {
        let s = store(9, 8);
        let idx = PatchIndex::from_labels(s.labels(), 3).unwrap();
        let run = || -> Vec<Triplet> {
            sample_batches(&s, &idx, 4, 11, 3)
                .unwrap()
                .flat_map(|b| b.unwrap().1.triplets)
                .collect()
        };
        let a = run();
        assert_eq!(a, run());
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, idx.triplets());
    }

    #[test]
    fn short_final_batch_kept() {
        let s = store(9, 8);
        let idx = PatchIndex::from_labels(s.labels(), 3).unwrap();
        let sizes: Vec<_> = sample_batches(&s, &idx, 5, 1, 1)
            .unwrap()
            .map(|b| b.unwrap().1.len())
            .collect();
        assert_eq!(sizes.iter().sum::<usize>(), idx.len());
        assert!(sizes[..sizes.len() - 1].iter().all(|&n| n == 5));
    }

    #[test]
    fn naive_matches_indexed() {
        let s = store(10, 7);
        let idx = PatchIndex::from_labels(s.labels(), 3).unwrap();
        let indexed: Vec<_> = sample_batches(&s, &idx, 6, 5, 2).unwrap().map(|b| b.unwrap()).collect();
        let naive: Vec<_> = naive_sample_batches(&s, 3, 6, 5, 2).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(indexed, naive);
    }

    #[test]
    fn empty_inputs() {
        let s = PatchStore::from_parts(vec![], vec![]).unwrap();
        assert_eq!(naive_sample_batches(&s, 5, 4, 0, 5).unwrap().count(), 0);
        let idx = PatchIndex::from_parts(5, vec![]).unwrap();
        assert!(matches!(sample_batches(&s, &idx, 4, 0, 5), Err(Error::Empty(_))));
    }
}
