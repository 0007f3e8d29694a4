use crate::error::{Error, Result};
use crate::model3d::checkpoint::AdamMoments;
use crate::model3d::Params;

pub type AdamState = AdamMoments;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient as `weight_decay * theta`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(
    params: &mut Params<f32>,
    grads: &Params<f32>,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    let shapes = |p: &Params<f32>| p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
    let want = shapes(params);
    if shapes(grads) != want || shapes(&state.m) != want || shapes(&state.v) != want {
        return Err(Error::ShapeMismatch("parameter, gradient and moment shapes differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().into_iter().zip(state.v.tensors_mut()));
    for ((theta, g), (m, v)) in tensors {
        for i in 0..theta.len() {
            let th = theta[i] as f64;
            let g = g[i] as f64 + cfg.weight_decay * th;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            theta[i] = (th - lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Absolute decrease that counts as an improvement.
    pub threshold: f64,
    best: Option<f64>,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr: lr.max(min_lr),
            factor,
            patience,
            min_lr,
            threshold: 1e-8,
            best: None,
            bad: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one validation loss; returns the learning rate to use next.
    pub fn step(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if !(loss < b - self.threshold) => {
                self.bad += 1;
                if self.bad >= self.patience {
                    self.lr = (self.lr * self.factor).max(self.min_lr);
                    self.bad = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying a whole validation history.
pub fn plateau_lr(history: &[f64], lr: f64, factor: f64, patience: usize, min_lr: f64) -> f64 {
    let mut s = PlateauScheduler::new(lr, factor, patience, min_lr);
    history.iter().fold(s.lr(), |_, &l| s.step(l))
}
