//! Full-scene sliding-window inference and detection-map files.
//!
//! Every pixel whose `P x P` window lies inside the scene gets the model's
//! eval-mode probability; the border band of width `P / 2` holds NaN.
//! Binary maps use magic `DMP1`, u32 height, u32 width, then row-major f32.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::granule_io::{BandSource, LabelMap};
use crate::model3d::Model;
use crate::training::{compute_metrics, LossConfig, MetricsReport};

pub const MAP_MAGIC: [u8; 4] = *b"DMP1";
pub const DEFAULT_INFER_BATCH: usize = 512;
/// Label-gradient magnitude above which a pixel counts as plume boundary.
pub const DEFAULT_BOUNDARY_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl DetectionMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height.checked_mul(width) != Some(values.len()) {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Runs the model on every interior pixel, `batch_size` patches at a time.
/// The result does not depend on `batch_size`.
pub fn infer_scene<S: BandSource>(model: &Model<f32>, scene: &S, batch_size: usize) -> Result<DetectionMap> {
    let cfg = &model.config;
    if scene.channels() != cfg.channels {
        return Err(Error::ShapeMismatch(format!(
            "scene has {} channels, model expects {}",
            scene.channels(),
            cfg.channels
        )));
    }
    let (h, w, p) = (scene.height(), scene.width(), cfg.patch_size);
    let half = p / 2;
    let mut values = vec![f32::NAN; h * w];
    if h < p || w < p {
        return DetectionMap::new(h, w, values);
    }
    let centers: Vec<(usize, usize)> = (half..h - half)
        .flat_map(|y| (half..w - half).map(move |x| (y, x)))
        .collect();
    let plen = cfg.input_len();
    let mut buf = Vec::new();
    for chunk in centers.chunks(batch_size.max(1)) {
        buf.clear();
        buf.resize(chunk.len() * plen, 0.0);
        for (patch, &(y, x)) in buf.chunks_exact_mut(plen).zip(chunk) {
            for (c, band) in patch.chunks_exact_mut(p * p).enumerate() {
                for (r, row) in band.chunks_exact_mut(p).enumerate() {
                    scene.copy_row(c, y - half + r, x - half, row);
                }
            }
            if let Some(v) = patch.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::NonFinite(format!(
                    "scene value {v} near ({y}, {x}) is not a finite value in [0, 1]; preprocess first"
                )));
            }
        }
        let preds = model.predict(&buf, chunk.len())?;
        for (&(y, x), v) in chunk.iter().zip(preds) {
            values[y * w + x] = v;
        }
    }
    DetectionMap::new(h, w, values)
}

pub fn write_map(map: &DetectionMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(12 + 4 * map.values.len());
    bytes.extend_from_slice(&MAP_MAGIC);
    bytes.extend_from_slice(&(map.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.width as u32).to_le_bytes());
    for v in &map.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}

pub fn read_map(path: impl AsRef<Path>) -> Result<DetectionMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io_at(path, e))?;
    let mut found = [0u8; 4];
    let n = bytes.len().min(4);
    found[..n].copy_from_slice(&bytes[..n]);
    if found != MAP_MAGIC {
        return Err(Error::BadMagic {
            expected: MAP_MAGIC,
            found,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            actual: bytes.len() as u64,
        });
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as u64;
    let (h, w) = (word(4), word(8));
    let expected = 12 + 4 * h * w;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    DetectionMap::new(h as usize, w as usize, values)
}

/// Gray level of a map value: NaN is 0, otherwise `round(v * 255)`.
pub fn pgm_level(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// Plain (ASCII) PGM rendering, one image row per text line.
pub fn pgm_string(map: &DetectionMap) -> String {
    let mut s = format!("P2\n{} {}\n255\n", map.width, map.height);
    for row in map.values.chunks(map.width.max(1)) {
        let line: Vec<String> = row.iter().map(|&v| pgm_level(v).to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_pgm(map: &DetectionMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(pgm_string(map).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io_at(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreReport {
    pub all: MetricsReport,
    /// Pixels whose label-gradient magnitude exceeds the threshold.
    pub boundary: Option<MetricsReport>,
    pub core: Option<MetricsReport>,
    pub boundary_threshold: f64,
}

/// Central-difference label gradient magnitude, one-sided at the edges.
/// `None` when a needed neighbour is NaN.
pub fn label_gradient(labels: &LabelMap, y: usize, x: usize) -> Option<f64> {
    let (h, w) = (labels.height(), labels.width());
    let at = |yy: usize, xx: usize| {
        let v = labels.get(yy, xx);
        (!v.is_nan()).then_some(v as f64)
    };
    let diff = |a: Option<f64>, b: Option<f64>, span: usize| Some((b? - a?) / span.max(1) as f64);
    let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
    let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
    let gx = diff(at(y, x0), at(y, x1), x1 - x0)?;
    let gy = diff(at(y0, x), at(y1, x), y1 - y0)?;
    Some(gx.hypot(gy))
}

/// Metrics over pixels where both the map and the labels are finite, split
/// into boundary and core bands by label-gradient magnitude.
pub fn score_map(map: &DetectionMap, labels: &LabelMap, loss: &LossConfig, threshold: f64) -> Result<ScoreReport> {
    if (map.height, map.width) != (labels.height(), labels.width()) {
        return Err(Error::ShapeMismatch(format!(
            "map is {}x{}, labels are {}x{}",
            map.height,
            map.width,
            labels.height(),
            labels.width()
        )));
    }
    let mut all = (Vec::new(), Vec::new());
    let mut edge = (Vec::new(), Vec::new());
    let mut core = (Vec::new(), Vec::new());
    for y in 0..map.height {
        for x in 0..map.width {
            let (p, l) = (map.get(y, x), labels.get(y, x));
            if !p.is_finite() || !l.is_finite() {
                continue;
            }
            all.0.push(p);
            all.1.push(l);
            match label_gradient(labels, y, x) {
                Some(g) if g > threshold => {
                    edge.0.push(p);
                    edge.1.push(l);
                }
                Some(_) => {
                    core.0.push(p);
                    core.1.push(l);
                }
                None => {}
            }
        }
    }
    if all.0.is_empty() {
        return Err(Error::Empty("map and labels share no finite pixels".into()));
    }
    let part = |(p, l): &(Vec<f32>, Vec<f32>)| {
        if p.is_empty() {
            Ok(None)
        } else {
            compute_metrics(p, l, loss).map(Some)
        }
    };
    Ok(ScoreReport {
        all: compute_metrics(&all.0, &all.1, loss)?,
        boundary: part(&edge)?,
        core: part(&core)?,
        boundary_threshold: threshold,
    })
}
