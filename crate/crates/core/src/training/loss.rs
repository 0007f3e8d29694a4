use crate::error::{Error, Result};
use crate::model3d::Real;

/// Weighted MSE with per-sample weight `w = 1 + alpha * y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn weight(&self, y: f64) -> f64 {
        1.0 + self.alpha * y
    }
}

/// Running sums for a WMSE over several batches.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WmseAccumulator {
    pub weighted_sq: f64,
    pub weight: f64,
}

impl WmseAccumulator {
    pub fn add<T: Real>(&mut self, preds: &[T], targets: &[T], cfg: &LossConfig) {
        for (p, y) in preds.iter().zip(targets) {
            let (p, y) = (p.as_f64(), y.as_f64());
            let w = cfg.weight(y);
            self.weighted_sq += w * (y - p).powi(2);
            self.weight += w;
        }
    }

    pub fn value(&self) -> f64 {
        self.weighted_sq / self.weight
    }
}

pub(crate) fn check_pairs<T: Real>(preds: &[T], targets: &[T]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    Ok(())
}

/// Returns `sum w (y - p)^2 / sum w` and its gradient with respect to each
/// prediction, `-2 w_i (y_i - p_i) / sum w`.
pub fn wmse_loss<T: Real>(preds: &[T], targets: &[T], cfg: &LossConfig) -> Result<(f64, Vec<T>)> {
    check_pairs(preds, targets)?;
    if let Some(y) = targets.iter().find(|y| !(y.as_f64() >= 0.0 && y.as_f64() <= 1.0)) {
        return Err(Error::OutOfBounds(format!("target {y:?} outside [0, 1]")));
    }
    let mut acc = WmseAccumulator::default();
    acc.add(preds, targets, cfg);
    let loss = acc.value();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {loss}")));
    }
    let grad = preds
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let (p, y) = (p.as_f64(), y.as_f64());
            T::of(-2.0 * cfg.weight(y) * (y - p) / acc.weight)
        })
        .collect();
    Ok((loss, grad))
}
