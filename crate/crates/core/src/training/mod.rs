//! Weighted-MSE training of the 3D CNN over indexed patches.
//!
//! Each pass reshuffles the index (seed `seed + pass`) into `partitions`
//! contiguous groups; each group is swept `sub_epochs` times in the same
//! order. Every sub-epoch ends with a full validation sweep whose WMSE feeds
//! the plateau scheduler and the log.

pub mod loss;
pub mod metrics;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::granule_io::DatasetManifest;
use crate::model3d::checkpoint::{load_checkpoint, save_checkpoint, AdamMoments};
use crate::model3d::{Model, ModelConfig};
use crate::patch_index::{build_index, plan_positions, AccessMode, PatchBatch, PatchIndex, PatchStore, Triplet};

pub use loss::{wmse_loss, LossConfig, WmseAccumulator};
pub use metrics::{compute_metrics, MetricsReport, RSquared};
pub use optim::{adam_step, plateau_lr, AdamConfig, AdamState, PlateauScheduler};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam: AdamConfig,
    pub patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub passes: usize,
    pub partitions: usize,
    pub sub_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub filters: [usize; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            adam: AdamConfig::default(),
            patience: 2,
            plateau_factor: 0.5,
            min_lr: 1e-7,
            passes: 3,
            partitions: 5,
            sub_epochs: 3,
            batch_size: 256,
            seed: 0,
            filters: [32, 64, 128],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.adam.eps, self.plateau_factor, self.min_lr];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("lr, eps, plateau factor and min-lr must be positive".into()));
        }
        if !(self.adam.weight_decay >= 0.0 && self.adam.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.plateau_factor >= 1.0 {
            return Err(Error::Config("plateau factor must be below 1".into()));
        }
        let counts = [self.passes, self.partitions, self.sub_epochs, self.batch_size, self.patience];
        if counts.contains(&0) {
            return Err(Error::Config(
                "passes, partitions, sub-epochs, batch size and patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub pass: usize,
    pub partition: usize,
    pub sub_epoch: usize,
    pub train_wmse: f64,
    pub val_wmse: f64,
    /// Learning rate in effect during the sub-epoch.
    pub lr: f64,
}

pub const LOG_HEADER: &str = "pass,partition,sub_epoch,train_wmse,val_wmse,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.8e},{:.8e},{:e}",
            self.pass, self.partition, self.sub_epoch, self.train_wmse, self.val_wmse, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: AdamMoments,
    pub best_model: Model<f32>,
    pub best_val_wmse: f64,
    pub log: Vec<LogRow>,
    pub steps: u64,
    /// Training samples consumed, counting repeats.
    pub samples_seen: u64,
}

/// A labelled patch dataset: patches come from `store`, positions from `index`.
#[derive(Clone, Copy)]
pub struct Split<'a> {
    pub store: &'a PatchStore,
    pub index: &'a PatchIndex,
}

impl Split<'_> {
    fn batch(&self, positions: &[usize]) -> Result<PatchBatch> {
        let triplets: Vec<Triplet> = positions.iter().map(|&p| self.index.triplets()[p]).collect();
        self.store.assemble(&triplets, self.index.patch_size())
    }
}

/// Anything that can score a batch of patches.
pub trait Predictor {
    fn predict_batch(&self, batch: &PatchBatch) -> Result<Vec<f32>>;
}

impl Predictor for Model<f32> {
    fn predict_batch(&self, batch: &PatchBatch) -> Result<Vec<f32>> {
        self.predict(&batch.inputs, batch.len())
    }
}

/// Predicts the same value everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f32);

impl Predictor for ConstantPredictor {
    fn predict_batch(&self, batch: &PatchBatch) -> Result<Vec<f32>> {
        Ok(vec![self.0; batch.len()])
    }
}

/// Replays the ground-truth labels.
#[derive(Debug, Clone, Copy)]
pub struct LabelPlayback;

impl Predictor for LabelPlayback {
    fn predict_batch(&self, batch: &PatchBatch) -> Result<Vec<f32>> {
        Ok(batch.targets.clone())
    }
}

/// Predictions and targets for every triplet of a split, in index order.
pub fn predict_split(p: &dyn Predictor, split: Split<'_>, batch_size: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    if split.index.is_empty() {
        return Err(Error::Empty("evaluation index has no triplets".into()));
    }
    let positions: Vec<usize> = (0..split.index.len()).collect();
    let mut preds = Vec::with_capacity(positions.len());
    let mut targets = Vec::with_capacity(positions.len());
    for chunk in positions.chunks(batch_size.max(1)) {
        let batch = split.batch(chunk)?;
        preds.extend(p.predict_batch(&batch)?);
        targets.extend_from_slice(&batch.targets);
    }
    Ok((preds, targets))
}

pub fn evaluate_predictor(
    p: &dyn Predictor,
    split: Split<'_>,
    loss: &LossConfig,
    batch_size: usize,
) -> Result<MetricsReport> {
    let (preds, targets) = predict_split(p, split, batch_size)?;
    compute_metrics(&preds, &targets, loss)
}

fn validation_wmse(model: &Model<f32>, split: Split<'_>, loss: &LossConfig, batch_size: usize) -> Result<f64> {
    let (preds, targets) = predict_split(model, split, batch_size)?;
    let mut acc = WmseAccumulator::default();
    acc.add(&preds, &targets, loss);
    Ok(acc.value())
}

/// Runs the full pass / partition / sub-epoch schedule. `init` resumes from
/// an existing model and optimizer state instead of a fresh initialization.
pub fn train_on(
    train: Split<'_>,
    val: Split<'_>,
    cfg: &TrainConfig,
    loss: &LossConfig,
    init: Option<(Model<f32>, AdamMoments)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    if train.index.is_empty() {
        return Err(Error::Empty("training index has no triplets".into()));
    }
    if val.index.is_empty() {
        return Err(Error::Empty("validation index has no triplets".into()));
    }
    if train.index.patch_size() != val.index.patch_size() || train.store.channels() != val.store.channels() {
        return Err(Error::ShapeMismatch("training and validation patches differ in shape".into()));
    }
    let model_cfg = ModelConfig {
        channels: train.store.channels(),
        patch_size: train.index.patch_size(),
        filters: cfg.filters,
    };
    let (mut model, mut opt) = match init {
        Some((m, o)) if m.config == model_cfg => (m, o),
        Some((m, _)) => {
            return Err(Error::ShapeMismatch(format!(
                "initial model {:?} does not fit the data {model_cfg:?}",
                m.config
            )))
        }
        None => (Model::init(model_cfg, cfg.seed)?, AdamMoments::zeros(&model_cfg)),
    };
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.patience, cfg.min_lr);
    let mut best: Option<(f64, Model<f32>)> = None;
    let mut log = Vec::new();
    let (mut steps, mut seen) = (0u64, 0u64);

    for pass in 1..=cfg.passes {
        let plan = plan_positions(train.index.len(), cfg.seed.wrapping_add(pass as u64), cfg.partitions)?;
        for (k, part) in plan.iter().enumerate() {
            for sub in 1..=cfg.sub_epochs {
                let lr = sched.lr();
                let mut acc = WmseAccumulator::default();
                for (bi, chunk) in part.chunks(cfg.batch_size).enumerate() {
                    let batch = train.batch(chunk)?;
                    let trace = model.forward_train(&batch.inputs, batch.len())?;
                    let (l, dpred) = wmse_loss(&trace.preds, &batch.targets, loss).map_err(|e| {
                        Error::NonFinite(format!(
                            "pass {pass} partition {} sub-epoch {sub} batch {bi}: {e}",
                            k + 1
                        ))
                    })?;
                    if !l.is_finite() {
                        return Err(Error::NonFinite(format!("loss {l} at pass {pass}")));
                    }
                    acc.add(&trace.preds, &batch.targets, loss);
                    let grads = model.backward(&trace, &dpred)?;
                    adam_step(&mut model.params, &grads, &mut opt, &cfg.adam, lr)?;
                    steps += 1;
                    seen += batch.len() as u64;
                }
                if !model.params.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "parameters diverged at pass {pass} partition {} sub-epoch {sub}",
                        k + 1
                    )));
                }
                let val_wmse = validation_wmse(&model, val, loss, cfg.batch_size)?;
                if best.as_ref().is_none_or(|(b, _)| val_wmse < *b) {
                    best = Some((val_wmse, model.clone()));
                }
                sched.step(val_wmse);
                log.push(LogRow {
                    pass,
                    partition: k + 1,
                    sub_epoch: sub,
                    train_wmse: if acc.weight > 0.0 { acc.value() } else { f64::NAN },
                    val_wmse,
                    lr,
                });
            }
        }
    }
    let (best_val_wmse, best_model) = best.expect("at least one sub-epoch ran");
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        best_model,
        best_val_wmse,
        log,
        steps,
        samples_seen: seen,
    })
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log: PathBuf,
    pub outcome: TrainOutcome,
}

pub fn write_log(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io_at(path, e))
}

/// Trains from manifests of preprocessed granules and writes `final.dck`,
/// `best.dck` and `train_log.csv` into `out_dir`.
pub fn train(
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    out_dir: impl AsRef<Path>,
    patch_size: usize,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainArtifacts> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let train_index = build_index(train_manifest, patch_size)?;
    let val_index = build_index(val_manifest, patch_size)?;
    let train_store = PatchStore::open(train_manifest, AccessMode::Map)?;
    let val_store = PatchStore::open(val_manifest, AccessMode::Map)?;
    let outcome = train_on(
        Split {
            store: &train_store,
            index: &train_index,
        },
        Split {
            store: &val_store,
            index: &val_index,
        },
        cfg,
        loss,
        None,
    )?;
    let final_checkpoint = out_dir.join("final.dck");
    let best_checkpoint = out_dir.join("best.dck");
    let log = out_dir.join("train_log.csv");
    save_checkpoint(&final_checkpoint, &outcome.model, Some(&outcome.optimizer))?;
    save_checkpoint(&best_checkpoint, &outcome.best_model, None)?;
    write_log(&outcome.log, &log)?;
    Ok(TrainArtifacts {
        final_checkpoint,
        best_checkpoint,
        log,
        outcome,
    })
}

/// Eval-mode metrics of a checkpoint over every triplet of a manifest.
pub fn evaluate(
    checkpoint: impl AsRef<Path>,
    manifest: &DatasetManifest,
    loss: &LossConfig,
    batch_size: usize,
) -> Result<MetricsReport> {
    let model = load_checkpoint(checkpoint)?.model;
    let index = build_index(manifest, model.config.patch_size)?;
    let store = PatchStore::open(manifest, AccessMode::Map)?;
    if store.channels() != model.config.channels {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects {} channels, data has {}",
            model.config.channels,
            store.channels()
        )));
    }
    evaluate_predictor(
        &model,
        Split {
            store: &store,
            index: &index,
        },
        loss,
        batch_size,
    )
}
