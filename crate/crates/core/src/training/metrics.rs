use serde::{Serialize, Serializer};

use super::loss::{LossConfig, WmseAccumulator};
use crate::error::Result;
use crate::model3d::Real;

/// Coefficient of determination. Undefined when the targets have zero
/// variance and the predictions are not exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RSquared {
    Value(f64),
    Undefined,
}

impl RSquared {
    pub fn value(self) -> Option<f64> {
        match self {
            RSquared::Value(v) => Some(v),
            RSquared::Undefined => None,
        }
    }
}

impl Serialize for RSquared {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RSquared::Value(v) => s.serialize_f64(*v),
            RSquared::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl std::fmt::Display for RSquared {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RSquared::Value(v) => write!(f, "{v:.6}"),
            RSquared::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mse: f64,
    pub wmse: f64,
    pub mae: f64,
    pub r2: RSquared,
    /// Share of samples where `pred >= 0.5` agrees with `target >= 0.5`.
    pub accuracy: f64,
    pub mean_label: f64,
    pub alpha: f64,
}

pub fn compute_metrics<T: Real>(preds: &[T], targets: &[T], cfg: &LossConfig) -> Result<MetricsReport> {
    super::loss::check_pairs(preds, targets)?;
    let n = preds.len();
    let nf = n as f64;
    let mut wmse = WmseAccumulator::default();
    wmse.add(preds, targets, cfg);
    let (mut sq, mut abs, mut hits, mut sum_y) = (0.0, 0.0, 0usize, 0.0);
    for (p, y) in preds.iter().zip(targets) {
        let (p, y) = (p.as_f64(), y.as_f64());
        sq += (y - p).powi(2);
        abs += (y - p).abs();
        hits += usize::from((p >= 0.5) == (y >= 0.5));
        sum_y += y;
    }
    let mean_label = sum_y / nf;
    let ss_tot: f64 = targets.iter().map(|y| (y.as_f64() - mean_label).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        RSquared::Value(1.0 - sq / ss_tot)
    } else if sq == 0.0 {
        RSquared::Value(1.0)
    } else {
        RSquared::Undefined
    };
    Ok(MetricsReport {
        n,
        mse: sq / nf,
        wmse: wmse.value(),
        mae: abs / nf,
        r2,
        accuracy: hits as f64 / nf,
        mean_label,
        alpha: cfg.alpha,
    })
}
