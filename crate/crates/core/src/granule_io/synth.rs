//! Deterministic synthetic granules with planted elliptical dust plumes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_granule, write_labels, DatasetManifest, Granule, LabelMap, ManifestEntry};
use crate::error::{Error, Result};

/// Shape and strength of the planted plumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PlumeParams {
    pub min_count: usize,
    pub max_count: usize,
    /// Semi-axis range as a fraction of `min(H, W)`.
    pub min_radius: f32,
    pub max_radius: f32,
    /// Normalized radius inside which intensity is 1; it falls linearly to 0 at the rim.
    pub core_fraction: f32,
    /// Radiance shift at full intensity, in units of the noise sigma.
    pub amplitude: f32,
}

impl Default for PlumeParams {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_count: 3,
            min_radius: 0.2,
            max_radius: 0.45,
            core_fraction: 0.6,
            amplitude: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub plume: PlumeParams,
    /// Channels carrying the plume signature; `None` picks an evenly spaced subset.
    pub plume_channels: Option<Vec<usize>>,
    pub noise_sigma: f32,
    /// Probability that any single granule entry is NaN.
    pub nan_fraction: f64,
    /// Probability that a label pixel is NaN (unlabeled).
    pub label_nan_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 3,
            height: 64,
            width: 64,
            channels: super::DEFAULT_CHANNELS,
            patch_size: 5,
            plume: PlumeParams::default(),
            plume_channels: None,
            noise_sigma: 1.0,
            nan_fraction: 0.05,
            label_nan_fraction: 0.0,
        }
    }
}

pub fn default_plume_channels(channels: usize) -> Vec<usize> {
    let n = (channels * 8 / 38).max(1);
    (0..n).map(|k| (2 * k + 1) * channels / (2 * n)).collect()
}

impl SynthConfig {
    fn validate(&self) -> Result<Vec<usize>> {
        if self.patch_size.is_multiple_of(2) {
            return Err(Error::InvalidPatchSize(self.patch_size));
        }
        let min_side = 2 * (self.patch_size / 2) + 1;
        if self.height < min_side || self.width < min_side {
            return Err(Error::Geometry(format!(
                "synthetic granules must be at least {min_side}x{min_side} for patch size {}, got {}x{}",
                self.patch_size, self.height, self.width
            )));
        }
        if self.count == 0 || self.channels == 0 {
            return Err(Error::Geometry("count and channels must be >= 1".into()));
        }
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(self.nan_fraction) || !frac_ok(self.label_nan_fraction) {
            return Err(Error::Config("NaN fractions must lie in [0, 1]".into()));
        }
        let p = &self.plume;
        if p.min_count > p.max_count
            || !(p.min_radius > 0.0 && p.min_radius <= p.max_radius)
            || !(0.0..1.0).contains(&p.core_fraction)
            || p.amplitude < 0.0
        {
            return Err(Error::Config(format!("invalid plume parameters {p:?}")));
        }
        let chans = self
            .plume_channels
            .clone()
            .unwrap_or_else(|| default_plume_channels(self.channels));
        if let Some(&c) = chans.iter().find(|&&c| c >= self.channels) {
            return Err(Error::Config(format!(
                "plume channel {c} outside 0..{}",
                self.channels
            )));
        }
        Ok(chans)
    }
}

struct Plume {
    cy: f32,
    cx: f32,
    a: f32,
    b: f32,
    cos: f32,
    sin: f32,
}

impl Plume {
    fn intensity(&self, y: f32, x: f32, core: f32) -> f32 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let rho = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        if rho <= core {
            1.0
        } else if rho >= 1.0 {
            0.0
        } else {
            (1.0 - rho) / (1.0 - core)
        }
    }
}

struct Background {
    base: Vec<f32>,
    gain: Vec<f32>,
}

fn background(cfg: &SynthConfig) -> Background {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let base = (0..cfg.channels).map(|_| rng.random_range(20.0..80.0)).collect();
    let gain = (0..cfg.channels).map(|_| rng.random_range(0.5..1.5)).collect();
    Background { base, gain }
}

/// Generates granule `index` of the dataset described by `cfg` in memory.
pub fn synthesize_granule(cfg: &SynthConfig, index: usize) -> Result<(Granule, LabelMap)> {
    let chans = cfg.validate()?;
    Ok(synthesize(cfg, &background(cfg), &chans, index))
}

fn synthesize(cfg: &SynthConfig, bg: &Background, plume_chans: &[usize], index: usize) -> (Granule, LabelMap) {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let p = &cfg.plume;

    let n_plumes = rng.random_range(p.min_count..=p.max_count);
    let side = h.min(w) as f32;
    let plumes: Vec<Plume> = (0..n_plumes)
        .map(|_| {
            let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
            Plume {
                cy: rng.random_range(0.0..h as f32),
                cx: rng.random_range(0.0..w as f32),
                a: rng.random_range(p.min_radius..=p.max_radius) * side,
                b: rng.random_range(p.min_radius..=p.max_radius) * side,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();

    let mut intensity = vec![0f32; h * w];
    if p.amplitude > 0.0 {
        for y in 0..h {
            for x in 0..w {
                intensity[y * w + x] = plumes
                    .iter()
                    .map(|pl| pl.intensity(y as f32, x as f32, p.core_fraction))
                    .fold(0.0, f32::max);
            }
        }
    }

    let two_pi = 2.0 * std::f32::consts::PI;
    let (fy, fx): (f32, f32) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (py, px): (f32, f32) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let surface_amp = 2.0 * cfg.noise_sigma;
    let surface: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32 / h as f32, (i % w) as f32 / w as f32);
            surface_amp * (two_pi * (y * fy + py)).sin() * (two_pi * (x * fx + px)).cos()
        })
        .collect();

    let mut shift = vec![0f32; c];
    for (k, &ch) in plume_chans.iter().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        shift[ch] = sign * p.amplitude * cfg.noise_sigma;
    }

    let noise = Normal::new(0.0f32, cfg.noise_sigma.max(0.0)).expect("sigma >= 0");
    let mut data = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        for i in 0..h * w {
            let v = bg.base[ch] + bg.gain[ch] * surface[i] + shift[ch] * intensity[i] + noise.sample(&mut rng);
            data.push(v);
        }
    }
    if cfg.nan_fraction > 0.0 {
        for v in data.iter_mut() {
            if rng.random_bool(cfg.nan_fraction) {
                *v = f32::NAN;
            }
        }
    }
    let mut labels = intensity;
    if cfg.label_nan_fraction > 0.0 {
        for v in labels.iter_mut() {
            if rng.random_bool(cfg.label_nan_fraction) {
                *v = f32::NAN;
            }
        }
    }
    (
        Granule::new(h, w, c, data).expect("dimensions validated"),
        LabelMap::new(h, w, labels).expect("dimensions validated"),
    )
}

/// Writes `cfg.count` granule/label pairs plus `manifest.json` into `out_dir`.
pub fn generate_synthetic_dataset(out_dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let chans = cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let bg = background(cfg);
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let (g, l) = synthesize(cfg, &bg, &chans, i);
        let granule = out_dir.join(format!("granule_{i:04}.dgr"));
        let labels = out_dir.join(format!("labels_{i:04}.dlb"));
        write_granule(&g, &granule)?;
        write_labels(&l, &labels)?;
        entries.push(ManifestEntry { granule, labels });
    }
    let manifest = DatasetManifest::new(entries);
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
