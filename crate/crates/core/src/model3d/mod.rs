//! Three-block 3D CNN over `C x P x P` patches with hand-written forward and
//! backward passes.
//!
//! The spectral axis is the convolution depth, so the input of one sample
//! is a single-channel `C x P x P` volume. Each block is
//! `conv3x3x3 (padding 1) -> ReLU -> batch norm`; blocks 1 and 2 are followed
//! by 2x2x2 max pooling (floor mode; an axis shorter than 2 is pooled with
//! window 1). Block 3 is averaged over its volume and fed to a linear head
//! with a sigmoid.
//!
//! Shape ledger for the default configuration (per sample):
//!
//! | layer   | shape          |
//! |---------|----------------|
//! | input   | 1 x 38 x 5 x 5 |
//! | block1  | 32 x 38 x 5 x 5|
//! | pool1   | 32 x 19 x 2 x 2|
//! | block2  | 64 x 19 x 2 x 2|
//! | pool2   | 64 x 9 x 1 x 1 |
//! | block3  | 128 x 9 x 1 x 1|
//! | avgpool | 128 x 1 x 1 x 1|
//! | output  | 1              |

pub mod checkpoint;
pub mod kernels;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use kernels::{col2im, gemm_acc, im2col, max_pool, max_unpool, pooled_dims, transpose, volume, Dims};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Floating-point element type of the network (`f32` for training and
/// inference, `f64` for reference gradient checks).
pub trait Real: Float + FromPrimitive + Default + Send + Sync + Debug + Sum + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Spectral channels of the input patch (the convolution depth).
    pub channels: usize,
    pub patch_size: usize,
    pub filters: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: crate::granule_io::DEFAULT_CHANNELS,
            patch_size: 5,
            filters: [32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub layer: &'static str,
    pub shape: Vec<usize>,
}

const LAYER_NAMES: [&str; 8] = [
    "input", "block1", "pool1", "block2", "pool2", "block3", "avgpool", "output",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        crate::patch_index::check_patch_size(self.patch_size)?;
        if self.channels == 0 || self.filters.contains(&0) {
            return Err(Error::Config(format!("degenerate model configuration {self:?}")));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Spatial dims at the input of each block.
    pub fn block_dims(&self) -> [Dims; 3] {
        let d1 = [self.channels, self.patch_size, self.patch_size];
        let d2 = pooled_dims(d1);
        [d1, d2, pooled_dims(d2)]
    }

    pub fn block_in_channels(&self) -> [usize; 3] {
        [1, self.filters[0], self.filters[1]]
    }

    pub fn shape_ledger(&self) -> Vec<LedgerEntry> {
        let [d1, d2, d3] = self.block_dims();
        let [f1, f2, f3] = self.filters;
        let s = |c: usize, d: Dims| vec![c, d[0], d[1], d[2]];
        let shapes = [
            s(1, d1),
            s(f1, d1),
            s(f1, d2),
            s(f2, d2),
            s(f2, d3),
            s(f3, d3),
            vec![f3, 1, 1, 1],
            vec![1],
        ];
        LAYER_NAMES
            .iter()
            .zip(shapes)
            .map(|(&layer, shape)| LedgerEntry { layer, shape })
            .collect()
    }
}

/// Convolution and batch-norm parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    /// `out x in x 3 x 3 x 3`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub bn_weight: Vec<T>,
    pub bn_bias: Vec<T>,
}

/// Trainable parameters; the same type carries gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub blocks: [ConvBlock<T>; 3],
    /// `1 x filters[2]`
    pub head_weight: Vec<T>,
    pub head_bias: Vec<T>,
}

impl<T: Real> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let cin = cfg.block_in_channels();
        let block = |i: usize| {
            let cout = cfg.filters[i];
            ConvBlock {
                weight: vec![T::zero(); cout * cin[i] * 27],
                bias: vec![T::zero(); cout],
                bn_weight: vec![T::zero(); cout],
                bn_bias: vec![T::zero(); cout],
            }
        };
        Self {
            blocks: [block(0), block(1), block(2)],
            head_weight: vec![T::zero(); cfg.filters[2]],
            head_bias: vec![T::zero()],
        }
    }

    /// Canonical tensor names and shapes, in the order of [`Params::tensors`].
    pub fn specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let cin = cfg.block_in_channels();
        let mut out = Vec::new();
        for i in 0..3 {
            let cout = cfg.filters[i];
            let b = i + 1;
            out.push((format!("block{b}.conv.weight"), vec![cout, cin[i], 3, 3, 3]));
            out.push((format!("block{b}.conv.bias"), vec![cout]));
            out.push((format!("block{b}.bn.weight"), vec![cout]));
            out.push((format!("block{b}.bn.bias"), vec![cout]));
        }
        out.push(("head.weight".into(), vec![1, cfg.filters[2]]));
        out.push(("head.bias".into(), vec![1]));
        out
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::with_capacity(14);
        for b in &self.blocks {
            out.extend([&b.weight[..], &b.bias, &b.bn_weight, &b.bn_bias]);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(14);
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.bn_weight);
            out.push(&mut b.bn_bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        let block = |b: &ConvBlock<T>| ConvBlock {
            weight: conv(&b.weight),
            bias: conv(&b.bias),
            bn_weight: conv(&b.bn_weight),
            bn_bias: conv(&b.bn_bias),
        };
        Params {
            blocks: [block(&self.blocks[0]), block(&self.blocks[1]), block(&self.blocks[2])],
            head_weight: conv(&self.head_weight),
            head_bias: conv(&self.head_bias),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Batch-norm running statistics of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone)]
struct PoolTrace {
    argmax: Vec<u32>,
}

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    cols: Vec<T>,
    relu: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    pool: Option<PoolTrace>,
}

/// Activations cached by [`Model::forward`] for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub mode: Mode,
    pub batch: usize,
    /// Per-sample shape of every layer output, as computed.
    pub shapes: Vec<LedgerEntry>,
    pub preds: Vec<T>,
    config: ModelConfig,
    blocks: Vec<BlockTrace<T>>,
    features: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub running: [BnStats<T>; 3],
}

fn sigmoid<T: Real>(z: T) -> T {
    let p = T::one() / (T::one() + (-z).exp());
    // keep the output strictly inside (0, 1)
    let hi = T::one() - T::epsilon() / T::of(2.0);
    p.max(T::min_positive_value()).min(hi)
}

impl<T: Real> Model<T> {
    /// Uniform `(-sqrt(1/fan_in), sqrt(1/fan_in))` weights, zero biases,
    /// unit batch-norm gain and `(0, 1)` running statistics.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::<T>::zeros(&config);
        let cin = config.block_in_channels();
        for (i, b) in params.blocks.iter_mut().enumerate() {
            let bound = (1.0 / (cin[i] * 27) as f64).sqrt();
            for w in b.weight.iter_mut() {
                *w = T::of(rng.random_range(-bound..bound));
            }
            b.bn_weight.fill(T::one());
        }
        let bound = (1.0 / config.filters[2] as f64).sqrt();
        for w in params.head_weight.iter_mut() {
            *w = T::of(rng.random_range(-bound..bound));
        }
        let running = config.filters.map(|c| BnStats {
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        Ok(Self {
            config,
            params,
            running,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        Model {
            config: self.config,
            params: self.params.cast(),
            running: [0, 1, 2].map(|i| BnStats {
                mean: conv(&self.running[i].mean),
                var: conv(&self.running[i].var),
            }),
        }
    }

    fn check_input(&self, input: &[T], batch: usize) -> Result<()> {
        if batch == 0 {
            return Err(Error::Empty("batch of zero samples".into()));
        }
        let need = batch * self.config.input_len();
        if input.len() != need {
            return Err(Error::ShapeMismatch(format!(
                "input holds {} values, {batch} x 1 x {} x {} x {} needs {need}",
                input.len(),
                self.config.channels,
                self.config.patch_size,
                self.config.patch_size
            )));
        }
        if let Some(i) = input.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input element {i} is not finite")));
        }
        Ok(())
    }

    /// Runs the network on `batch` samples laid out `B x C x P x P`.
    /// Does not touch the running statistics; see [`Model::forward_train`].
    pub fn forward(&self, input: &[T], batch: usize, mode: Mode) -> Result<ForwardTrace<T>> {
        self.check_input(input, batch)?;
        let cfg = &self.config;
        let dims = cfg.block_dims();
        let cins = cfg.block_in_channels();
        let eps = T::of(BN_EPS);
        let mut shapes = vec![LedgerEntry {
            layer: LAYER_NAMES[0],
            shape: vec![1, dims[0][0], dims[0][1], dims[0][2]],
        }];
        // [1][B][vol] is the same memory as [B][C][P][P]
        let mut act = input.to_vec();
        let mut blocks = Vec::with_capacity(3);
        for i in 0..3 {
            let (cin, cout, d) = (cins[i], cfg.filters[i], dims[i]);
            let vol = volume(d);
            let n = batch * vol;
            let k = cin * 27;
            let p = &self.params.blocks[i];

            let cols = im2col(&act, cin, batch, d);
            let mut z = vec![T::zero(); cout * n];
            gemm_acc(cout, k, n, &p.weight, &cols, &mut z);
            for (row, &b) in z.chunks_exact_mut(n).zip(&p.bias) {
                for v in row.iter_mut() {
                    *v = (*v + b).max(T::zero());
                }
            }
            let relu = z;

            let mut xhat = vec![T::zero(); cout * n];
            let mut out = vec![T::zero(); cout * n];
            let mut inv_std = vec![T::zero(); cout];
            let mut batch_mean = vec![0f64; cout];
            let mut batch_var = vec![0f64; cout];
            for c in 0..cout {
                let x = &relu[c * n..(c + 1) * n];
                let (mean, istd) = match mode {
                    Mode::Train => {
                        let m = x.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
                        let var = x.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n as f64;
                        batch_mean[c] = m;
                        batch_var[c] = var;
                        (T::of(m), T::of(1.0 / (var + BN_EPS).sqrt()))
                    }
                    Mode::Eval => {
                        let rs = &self.running[i];
                        (rs.mean[c], T::one() / (rs.var[c] + eps).sqrt())
                    }
                };
                inv_std[c] = istd;
                let (g, b) = (p.bn_weight[c], p.bn_bias[c]);
                let xh = &mut xhat[c * n..(c + 1) * n];
                let o = &mut out[c * n..(c + 1) * n];
                for j in 0..n {
                    xh[j] = (x[j] - mean) * istd;
                    o[j] = g * xh[j] + b;
                }
            }
            shapes.push(LedgerEntry {
                layer: LAYER_NAMES[1 + 2 * i],
                shape: vec![cout, d[0], d[1], d[2]],
            });

            let pool = if i < 2 {
                let (pooled, argmax) = max_pool(&out, cout * batch, d);
                let pd = pooled_dims(d);
                shapes.push(LedgerEntry {
                    layer: LAYER_NAMES[2 + 2 * i],
                    shape: vec![cout, pd[0], pd[1], pd[2]],
                });
                act = pooled;
                Some(PoolTrace { argmax })
            } else {
                act = out;
                None
            };
            blocks.push(BlockTrace {
                cols,
                relu,
                xhat,
                inv_std,
                batch_mean,
                batch_var,
                pool,
            });
        }

        let f3 = cfg.filters[2];
        let vol3 = volume(dims[2]);
        let scale = T::one() / T::of(vol3 as f64);
        let features: Vec<T> = act
            .chunks_exact(vol3)
            .map(|s| s.iter().fold(T::zero(), |a, &v| a + v) * scale)
            .collect();
        shapes.push(LedgerEntry {
            layer: LAYER_NAMES[6],
            shape: vec![f3, 1, 1, 1],
        });
        let w = &self.params.head_weight;
        let preds = (0..batch)
            .map(|b| {
                let z = (0..f3).fold(T::zero(), |a, c| a + w[c] * features[c * batch + b]);
                sigmoid(z + self.params.head_bias[0])
            })
            .collect();
        shapes.push(LedgerEntry {
            layer: LAYER_NAMES[7],
            shape: vec![1],
        });
        Ok(ForwardTrace {
            mode,
            batch,
            shapes,
            preds,
            config: *cfg,
            blocks,
            features,
        })
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// running statistics (momentum [`BN_MOMENTUM`], unbiased variance).
    pub fn forward_train(&mut self, input: &[T], batch: usize) -> Result<ForwardTrace<T>> {
        let trace = self.forward(input, batch, Mode::Train)?;
        let dims = self.config.block_dims();
        for (i, bt) in trace.blocks.iter().enumerate() {
            let n = (batch * volume(dims[i])) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rs = &mut self.running[i];
            for c in 0..rs.mean.len() {
                let m = rs.mean[c].as_f64();
                let v = rs.var[c].as_f64();
                rs.mean[c] = T::of((1.0 - BN_MOMENTUM) * m + BN_MOMENTUM * bt.batch_mean[c]);
                rs.var[c] = T::of((1.0 - BN_MOMENTUM) * v + BN_MOMENTUM * bt.batch_var[c] * unbias);
            }
        }
        Ok(trace)
    }

    /// Eval-mode predictions.
    pub fn predict(&self, input: &[T], batch: usize) -> Result<Vec<T>> {
        Ok(self.forward(input, batch, Mode::Eval)?.preds)
    }

    /// Gradients of `sum_b dpred[b] * pred[b]` with respect to every parameter.
    pub fn backward(&self, trace: &ForwardTrace<T>, dpred: &[T]) -> Result<Params<T>> {
        if trace.config != self.config {
            return Err(Error::ShapeMismatch(format!(
                "trace was recorded for {:?}, model is {:?}",
                trace.config, self.config
            )));
        }
        let batch = trace.batch;
        if dpred.len() != batch {
            return Err(Error::ShapeMismatch(format!(
                "{} upstream gradients for a batch of {batch}",
                dpred.len()
            )));
        }
        let cfg = &self.config;
        let dims = cfg.block_dims();
        let cins = cfg.block_in_channels();
        let mut grads = Params::<T>::zeros(cfg);

        let f3 = cfg.filters[2];
        let dz: Vec<T> = trace
            .preds
            .iter()
            .zip(dpred)
            .map(|(&p, &g)| g * p * (T::one() - p))
            .collect();
        for c in 0..f3 {
            grads.head_weight[c] = (0..batch).fold(T::zero(), |a, b| a + dz[b] * trace.features[c * batch + b]);
        }
        grads.head_bias[0] = dz.iter().fold(T::zero(), |a, &v| a + v);

        let vol3 = volume(dims[2]);
        let inv_vol3 = T::one() / T::of(vol3 as f64);
        let mut dy = vec![T::zero(); f3 * batch * vol3];
        for c in 0..f3 {
            let g = self.params.head_weight[c];
            for b in 0..batch {
                let v = g * dz[b] * inv_vol3;
                dy[(c * batch + b) * vol3..(c * batch + b + 1) * vol3].fill(v);
            }
        }

        for i in (0..3).rev() {
            let bt = &trace.blocks[i];
            let (cin, cout, d) = (cins[i], cfg.filters[i], dims[i]);
            let n = batch * volume(d);
            let k = cin * 27;
            let p = &self.params.blocks[i];
            let g = &mut grads.blocks[i];
            if let Some(pool) = &bt.pool {
                dy = max_unpool(&dy, &pool.argmax, cout * n);
            }

            let nf = T::of(n as f64);
            for c in 0..cout {
                let r = c * n..(c + 1) * n;
                let (dyc, xh) = (&mut dy[r.clone()], &bt.xhat[r.clone()]);
                let mut dbeta = T::zero();
                let mut dgamma = T::zero();
                for j in 0..n {
                    dbeta = dbeta + dyc[j];
                    dgamma = dgamma + dyc[j] * xh[j];
                }
                g.bn_bias[c] = dbeta;
                g.bn_weight[c] = dgamma;
                let gamma = p.bn_weight[c];
                let istd = bt.inv_std[c];
                let relu = &bt.relu[r];
                match trace.mode {
                    Mode::Train => {
                        // dx = istd / N * (N*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                        let (s1, s2) = (gamma * dbeta, gamma * dgamma);
                        let scale = istd / nf;
                        for j in 0..n {
                            let dxh = dyc[j] * gamma;
                            let dx = scale * (nf * dxh - s1 - xh[j] * s2);
                            dyc[j] = if relu[j] > T::zero() { dx } else { T::zero() };
                        }
                    }
                    Mode::Eval => {
                        let s = gamma * istd;
                        for j in 0..n {
                            dyc[j] = if relu[j] > T::zero() { dyc[j] * s } else { T::zero() };
                        }
                    }
                }
                g.bias[c] = dyc.iter().fold(T::zero(), |a, &v| a + v);
            }

            let cols_t = transpose(k, n, &bt.cols);
            gemm_acc(cout, n, k, &dy, &cols_t, &mut g.weight);
            if i > 0 {
                let w_t = transpose(cout, k, &p.weight);
                let mut dcols = vec![T::zero(); k * n];
                gemm_acc(k, cout, n, &w_t, &dy, &mut dcols);
                dy = col2im(&dcols, cin, batch, d);
            }
        }
        Ok(grads)
    }
}
