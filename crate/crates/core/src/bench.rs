//! Memory and sampling benchmarks.
//!
//! Memory runs happen in child processes (the hidden `bench stream`
//! subcommand) so each measurement starts from a fresh peak-RSS counter.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::Hasher;
use std::io::Read;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granule_io::DatasetManifest;
use crate::patch_index::{
    build_index, naive_sample_batches, sample_batches, AccessMode, PatchIndex, PatchStore, Triplet,
};

/// Slack added to the batch footprint when comparing mmap peaks.
pub const MEMORY_SLACK_BYTES: u64 = 64 << 20;
/// Patches assembled between page releases on the streaming mmap path.
pub const RELEASE_EVERY: usize = 16;

/// Bytes of one batch: `B * C * P^2` f32 inputs plus `B` f32 targets.
pub fn r_batch(batch: usize, channels: usize, patch_size: usize) -> u64 {
    let b = batch as u64;
    b * channels as u64 * (patch_size * patch_size) as u64 * 4 + b * 4
}

fn status_field(name: &str) -> Option<u64> {
    let text = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = text.lines().find(|l| l.starts_with(name))?;
    let kb: u64 = line[name.len()..].trim().trim_end_matches("kB").trim().parse().ok()?;
    Some(kb * 1024)
}

/// Peak resident set size of this process, when the platform reports it.
pub fn peak_rss_bytes() -> Option<u64> {
    status_field("VmHWM:")
}

pub fn current_rss_bytes() -> Option<u64> {
    status_field("VmRSS:")
}

/// Content hash of every file a manifest references.
pub fn manifest_checksum(manifest: &DatasetManifest) -> Result<u64> {
    let mut h = DefaultHasher::new();
    let mut buf = vec![0u8; 1 << 20];
    for e in &manifest.entries {
        for path in [&e.granule, &e.labels] {
            let mut f = File::open(path).map_err(|err| Error::io_at(path, err))?;
            loop {
                let n = f.read(&mut buf).map_err(|err| Error::io_at(path, err))?;
                if n == 0 {
                    break;
                }
                h.write(&buf[..n]);
            }
        }
    }
    Ok(h.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    Mmap,
    Load,
}

impl std::str::FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmap" => Ok(Self::Mmap),
            "load" => Ok(Self::Load),
            other => Err(Error::Config(format!("unknown stream mode {other:?} (mmap|load)"))),
        }
    }
}

impl StreamMode {
    fn as_str(self) -> &'static str {
        match self {
            Self::Mmap => "mmap",
            Self::Load => "load",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamStats {
    pub mode: StreamMode,
    pub batches: u64,
    pub samples: u64,
    pub dataset_bytes: u64,
    pub peak_rss_bytes: Option<u64>,
    pub seconds: f64,
    /// Sum of all finite streamed inputs, so the work cannot be skipped.
    pub checksum: f64,
}

/// Streams one shuffled epoch of `B`-patch batches and reports this
/// process's peak resident memory afterwards.
pub fn stream_epoch(
    manifest: &DatasetManifest,
    batch: usize,
    patch_size: usize,
    mode: StreamMode,
    seed: u64,
) -> Result<StreamStats> {
    let start = Instant::now();
    let access = match mode {
        StreamMode::Mmap => AccessMode::MapReleasing(RELEASE_EVERY),
        StreamMode::Load => AccessMode::Load,
    };
    let store = PatchStore::open(manifest, access)?;
    let index = PatchIndex::from_labels(store.labels(), patch_size)?;
    let (mut batches, mut samples, mut checksum) = (0u64, 0u64, 0f64);
    for b in sample_batches(&store, &index, batch, seed, 1)? {
        let (_, b) = b?;
        batches += 1;
        samples += b.len() as u64;
        checksum += b.inputs.iter().filter(|v| v.is_finite()).map(|&v| v as f64).sum::<f64>();
    }
    Ok(StreamStats {
        mode,
        batches,
        samples,
        dataset_bytes: store.dataset_bytes(),
        peak_rss_bytes: peak_rss_bytes(),
        seconds: start.elapsed().as_secs_f64(),
        checksum,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryReport {
    pub batch: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub r_batch: u64,
    pub slack: u64,
    pub small_bytes: u64,
    pub large_bytes: u64,
    pub mmap_small: StreamStats,
    pub mmap_large: StreamStats,
    pub load_small: StreamStats,
    pub load_large: StreamStats,
    /// Available memory reported by the platform, if any.
    pub available_bytes: Option<u64>,
    /// Steady-state overhead estimate: mmap peak on the small set minus `R_batch`.
    pub overhead_estimate: Option<u64>,
    pub mmap_growth: Option<i64>,
    pub load_growth: Option<i64>,
    /// Resident-memory accounting was unavailable; no assertion was evaluated.
    pub partial: bool,
    pub notice: Option<String>,
    /// mmap growth < R_batch + slack.
    pub mmap_bounded: Option<bool>,
    /// Full-load peak on the small set >= its dataset bytes.
    pub load_covers_small: Option<bool>,
    /// Full-load growth >= the added dataset bytes.
    pub load_tracks_size: Option<bool>,
    pub files_unchanged: bool,
}

impl MemoryReport {
    /// True when every evaluated assertion holds (vacuously true if partial).
    pub fn passed(&self) -> bool {
        self.files_unchanged
            && [self.mmap_bounded, self.load_covers_small, self.load_tracks_size]
                .iter()
                .all(|a| a.unwrap_or(self.partial))
    }
}

fn available_memory() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line["MemAvailable:".len()..].trim().trim_end_matches("kB").trim().parse().ok()?;
    Some(kb * 1024)
}

fn run_child(
    exe: &Path,
    manifest: &Path,
    batch: usize,
    patch_size: usize,
    mode: StreamMode,
    seed: u64,
) -> Result<StreamStats> {
    let out = Command::new(exe)
        .args(["bench", "stream", "--manifest"])
        .arg(manifest)
        .args(["--batch", &batch.to_string()])
        .args(["--patch-size", &patch_size.to_string()])
        .args(["--mode", mode.as_str()])
        .args(["--seed", &seed.to_string()])
        .output()
        .map_err(|e| Error::io_at(exe, e))?;
    if !out.status.success() {
        return Err(Error::Config(format!(
            "stream child ({}) failed: {}",
            mode.as_str(),
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(serde_json::from_slice(&out.stdout)?)
}

/// Streams both manifests through the mmap and full-load paths, each in a
/// fresh child process of `exe`, and compares peak resident memory.
pub fn bench_memory(
    exe: &Path,
    small: &Path,
    large: &Path,
    batch: usize,
    patch_size: usize,
    seed: u64,
) -> Result<MemoryReport> {
    let small_m = DatasetManifest::load(small)?;
    let large_m = DatasetManifest::load(large)?;
    let small_bytes = PatchStore::open(&small_m, AccessMode::Map)?.dataset_bytes();
    let large_store = PatchStore::open(&large_m, AccessMode::Map)?;
    let (large_bytes, channels) = (large_store.dataset_bytes(), large_store.channels());
    drop(large_store);
    if large_bytes < 4 * small_bytes {
        return Err(Error::Config(format!(
            "large dataset ({large_bytes} B) must be at least 4x the small one ({small_bytes} B)"
        )));
    }
    let before = (manifest_checksum(&small_m)?, manifest_checksum(&large_m)?);
    let mmap_small = run_child(exe, small, batch, patch_size, StreamMode::Mmap, seed)?;
    let mmap_large = run_child(exe, large, batch, patch_size, StreamMode::Mmap, seed)?;
    let load_small = run_child(exe, small, batch, patch_size, StreamMode::Load, seed)?;
    let load_large = run_child(exe, large, batch, patch_size, StreamMode::Load, seed)?;
    let after = (manifest_checksum(&small_m)?, manifest_checksum(&large_m)?);

    let rb = r_batch(batch, channels, patch_size);
    let peaks = [&mmap_small, &mmap_large, &load_small, &load_large].map(|s| s.peak_rss_bytes);
    let partial = peaks.iter().any(Option::is_none);
    let growth = |a: Option<u64>, b: Option<u64>| Some(b? as i64 - a? as i64);
    let mmap_growth = growth(peaks[0], peaks[1]);
    let load_growth = growth(peaks[2], peaks[3]);
    let added = large_bytes as i64 - small_bytes as i64;
    Ok(MemoryReport {
        batch,
        channels,
        patch_size,
        r_batch: rb,
        slack: MEMORY_SLACK_BYTES,
        small_bytes,
        large_bytes,
        available_bytes: available_memory(),
        overhead_estimate: peaks[0].map(|p| p.saturating_sub(rb)),
        mmap_growth,
        load_growth,
        partial,
        notice: partial.then(|| "peak resident memory is not reported on this platform; assertions skipped".into()),
        mmap_bounded: mmap_growth.map(|g| g < (rb + MEMORY_SLACK_BYTES) as i64),
        load_covers_small: peaks[2].map(|p| p >= small_bytes),
        load_tracks_size: load_growth.map(|g| g >= added),
        files_unchanged: before == after,
        mmap_small,
        mmap_large,
        load_small,
        load_large,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplingReport {
    pub batch: usize,
    pub patch_size: usize,
    pub index_len: usize,
    pub dataset_bytes: u64,
    pub r_batch: u64,
    pub indexed_batches: u64,
    pub indexed_seconds: f64,
    pub indexed_batches_per_second: f64,
    pub naive_batches: u64,
    pub naive_seconds: f64,
    pub naive_batches_per_second: f64,
    /// Indexed over naive throughput.
    pub ratio: f64,
    /// Wall-clock of one indexed epoch (one sub-epoch with a single partition).
    pub seconds_per_epoch: f64,
    pub same_epoch_multiset: bool,
    pub files_unchanged: bool,
}

fn epoch_multiset<I>(batches: I) -> Result<Vec<Triplet>>
where
    I: Iterator<Item = Result<(usize, crate::patch_index::PatchBatch)>>,
{
    let mut all = Vec::new();
    for b in batches {
        all.extend(b?.1.triplets);
    }
    all.sort_unstable();
    Ok(all)
}

fn timed<F: FnMut() -> Result<u64>>(duration: Duration, mut epoch: F) -> Result<(u64, f64)> {
    let start = Instant::now();
    let mut batches = 0;
    while start.elapsed() < duration {
        batches += epoch()?;
    }
    Ok((batches, start.elapsed().as_secs_f64()))
}

/// Batches per second of indexed versus mask-scan sampling over the same
/// data, each measured for at least `duration`.
pub fn bench_sampling(
    manifest: &DatasetManifest,
    batch: usize,
    patch_size: usize,
    seed: u64,
    duration: Duration,
) -> Result<SamplingReport> {
    if duration.is_zero() {
        return Err(Error::Config("sampling duration is too short for one batch".into()));
    }
    let before = manifest_checksum(manifest)?;
    let store = PatchStore::open(manifest, AccessMode::Map)?;
    let index = build_index(manifest, patch_size)?;
    if index.is_empty() {
        return Err(Error::Empty("dataset has no valid patch centers".into()));
    }

    // one full epoch of each, also warming the page cache
    let t = Instant::now();
    let indexed = epoch_multiset(sample_batches(&store, &index, batch, seed, 1)?)?;
    let seconds_per_epoch = t.elapsed().as_secs_f64();
    let naive = epoch_multiset(naive_sample_batches(&store, patch_size, batch, seed, 1)?)?;
    let same_epoch_multiset = indexed == naive && indexed.len() == index.len();

    // time slices of a few batches so each run sees the same data mix
    const SLICE: usize = 8;
    let mut round = 0u64;
    let (indexed_batches, indexed_seconds) = timed(duration, || {
        round += 1;
        let mut n = 0;
        for b in sample_batches(&store, &index, batch, seed.wrapping_add(round), 1)?.take(SLICE) {
            std::hint::black_box(b?);
            n += 1;
        }
        Ok(n)
    })?;
    let mut round = 0u64;
    let (naive_batches, naive_seconds) = timed(duration, || {
        round += 1;
        let mut n = 0;
        for b in naive_sample_batches(&store, patch_size, batch, seed.wrapping_add(round), 1)?.take(SLICE) {
            std::hint::black_box(b?);
            n += 1;
        }
        Ok(n)
    })?;
    let ips = indexed_batches as f64 / indexed_seconds;
    let nps = naive_batches as f64 / naive_seconds;
    Ok(SamplingReport {
        batch,
        patch_size,
        index_len: index.len(),
        dataset_bytes: store.dataset_bytes(),
        r_batch: r_batch(batch, store.channels(), patch_size),
        indexed_batches,
        indexed_seconds,
        indexed_batches_per_second: ips,
        naive_batches,
        naive_seconds,
        naive_batches_per_second: nps,
        ratio: ips / nps,
        seconds_per_epoch,
        same_epoch_multiset,
        files_unchanged: manifest_checksum(manifest)? == before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granule_io::{generate_synthetic_dataset, SynthConfig};

    #[test]
    fn batch_footprint_formula() {
        assert_eq!(r_batch(256, 38, 5), 973_824);
        assert_eq!(r_batch(1, 1, 1), 8);
        // three 64x64x38 granules
        assert_eq!(3 * 64 * 64 * 38 * 4, 1_867_776);
    }

    #[test]
    fn rss_probes() {
        if let (Some(peak), Some(now)) = (peak_rss_bytes(), current_rss_bytes()) {
            assert!(peak >= now && now > 0);
        }
    }

    #[test]
    fn stream_and_sampling_on_small_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            count: 2,
            height: 24,
            width: 20,
            channels: 4,
            ..SynthConfig::default()
        };
        let m = generate_synthetic_dataset(dir.path(), &cfg).unwrap();
        let s = stream_epoch(&m, 16, 5, StreamMode::Mmap, 0).unwrap();
        let l = stream_epoch(&m, 16, 5, StreamMode::Load, 0).unwrap();
        assert_eq!(s.samples, 2 * 20 * 16);
        assert_eq!(s.batches, s.samples.div_ceil(16));
        assert_eq!(s.checksum, l.checksum);
        assert_eq!(s.dataset_bytes, 2 * 24 * 20 * 4 * 4);

        let r = bench_sampling(&m, 16, 5, 1, Duration::from_millis(50)).unwrap();
        assert!(r.same_epoch_multiset && r.files_unchanged);
        assert!(r.indexed_batches > 0 && r.naive_batches > 0);
        assert!(bench_sampling(&m, 16, 5, 1, Duration::ZERO).is_err());
        assert!("mmap".parse::<StreamMode>().is_ok() && "disk".parse::<StreamMode>().is_err());
    }
}
