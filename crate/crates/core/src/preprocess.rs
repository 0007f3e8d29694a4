//! Per-band min-max normalization and local column-window NaN imputation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::granule_io::{finite_range, read_granule, write_granule, DatasetManifest, Granule, ManifestEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fallback {
    /// Mean of the band's finite values; 0 when the band has none.
    #[default]
    BandMean,
    Zero,
}

impl std::str::FromStr for Fallback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "band-mean" => Ok(Fallback::BandMean),
            "zero" => Ok(Fallback::Zero),
            other => Err(Error::Config(format!(
                "unknown fallback {other:?} (expected band-mean or zero)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocessConfig {
    /// Rows scanned above and below a missing value in its column.
    pub impute_window: usize,
    pub rng_seed: u64,
    pub fallback: Fallback,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            impute_window: 5,
            rng_seed: 0,
            fallback: Fallback::BandMean,
        }
    }
}

impl PreprocessConfig {
    /// Config for folder `f` of a dataset: same settings, seed decorrelated per granule.
    pub fn for_granule(&self, f: usize) -> Self {
        let mixed = self.rng_seed ^ (f as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Self {
            rng_seed: mixed,
            ..*self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.impute_window == 0 {
            return Err(Error::Config("impute window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of [`normalize_bands`]; bands without a single finite value are
/// left all-NaN and listed in `all_nan_bands`.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub granule: Granule,
    pub all_nan_bands: Vec<usize>,
}

pub fn normalize_bands(mut g: Granule) -> Normalized {
    let channels = g.channels();
    let all_nan_bands = (0..channels)
        .filter_map(|c| {
            let band = g.band_mut(c);
            let (Some(lo), Some(hi)) = finite_range(band) else {
                return Some(c);
            };
            let span = hi - lo;
            for v in band.iter_mut().filter(|v| !v.is_nan()) {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
            None
        })
        .collect();
    Normalized {
        granule: g,
        all_nan_bands,
    }
}

/// Uniform draw in `[0, 1)` keyed by position, so the fill for a pixel does
/// not depend on traversal order or thread count.
fn position_uniform(seed: u64, c: usize, y: usize, x: usize) -> f64 {
    let mut key = [0u8; 32];
    for (i, word) in [seed, c as u64, y as u64, x as u64].iter().enumerate() {
        key[8 * i..8 * i + 8].copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key).random::<f64>()
}

/// Replaces every NaN with a draw between the min and max of the finite
/// values within `impute_window` rows above and below in the same column.
/// Only the input snapshot is consulted, so fills never cascade.
pub fn impute_granule(g: &Granule, cfg: &PreprocessConfig) -> Result<Granule> {
    cfg.validate()?;
    let (h, w) = (g.height(), g.width());
    let win = cfg.impute_window;
    let mut out = g.clone();
    let plane = h * w;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(c, band_out)| {
            let band = g.band(c);
            if !band.iter().any(|v| v.is_nan()) {
                return;
            }
            let fallback = match cfg.fallback {
                Fallback::Zero => 0.0,
                Fallback::BandMean => {
                    let (sum, n) = band
                        .iter()
                        .filter(|v| v.is_finite())
                        .fold((0f64, 0usize), |(s, n), &v| (s + v as f64, n + 1));
                    if n == 0 {
                        0.0
                    } else {
                        (sum / n as f64) as f32
                    }
                }
            };
            for y in 0..h {
                for x in 0..w {
                    if !band[y * w + x].is_nan() {
                        continue;
                    }
                    let lo_row = y.saturating_sub(win);
                    let hi_row = (y + win).min(h - 1);
                    let mut range: Option<(f32, f32)> = None;
                    for r in lo_row..=hi_row {
                        let v = band[r * w + x];
                        if v.is_finite() {
                            range = Some(range.map_or((v, v), |(m, mx)| (m.min(v), mx.max(v))));
                        }
                    }
                    band_out[y * w + x] = match range {
                        Some((m, mx)) => {
                            let u = position_uniform(cfg.rng_seed, c, y, x);
                            let v = m as f64 + u * (mx as f64 - m as f64);
                            (v as f32).clamp(m, mx)
                        }
                        None => fallback,
                    };
                }
            }
        });
    Ok(out)
}

/// Normalize, then impute. The result is finite and within `[0, 1]`.
pub fn preprocess_pipeline(g: Granule, cfg: &PreprocessConfig) -> Result<Granule> {
    let normalized = normalize_bands(g);
    let out = impute_granule(&normalized.granule, cfg)?;
    if let Some(v) = out.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::NonFinite(format!("preprocessed value {v} outside [0, 1]")));
    }
    Ok(out)
}

/// Preprocesses every granule of a manifest into `out_dir`, copying label
/// files unchanged, and writes `out_dir/manifest.json`.
pub fn preprocess_manifest(
    manifest: &DatasetManifest,
    out_dir: impl AsRef<Path>,
    cfg: &PreprocessConfig,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let mut entries = Vec::with_capacity(manifest.len());
    for (f, e) in manifest.entries.iter().enumerate() {
        let g = read_granule(&e.granule)?;
        let processed = preprocess_pipeline(g, &cfg.for_granule(f))?;
        let granule = out_dir.join(format!("granule_{f:04}.dgr"));
        let labels = out_dir.join(format!("labels_{f:04}.dlb"));
        write_granule(&processed, &granule)?;
        std::fs::copy(&e.labels, &labels).map_err(|err| Error::io_at(&e.labels, err))?;
        entries.push(ManifestEntry { granule, labels });
    }
    let out = DatasetManifest::new(entries);
    out.save(out_dir.join("manifest.json"))?;
    Ok(out)
}
