//! The 3D-CNN drag regressor: model assembly, standard scaling, training
//! with online augmentation, prediction and checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc;

use dragsdf_nn::{
    dropout, stochastic_depth, BatchNorm1d, Conv3d, ConvGeom, CyclicLr, ForwardCtx, GroupNorm, Graph, Linear, Mode,
    MultiHeadAttention, ParamStore, RAdam, RAdamConfig, Scse, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_policy, AugError, AugPolicy};
use crate::geometry::DomainSpec;
use crate::voxelizer::SdfGrid;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AEROCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ENCODER_BLOCKS: usize = 6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] dragsdf_nn::Error),
    #[error(transparent)]
    Augment(#[from] AugError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("need at least 2 training samples, got {0}")]
    TooFewSamples(usize),
    #[error("grid dims {got:?} do not match model input dims {expected:?}")]
    DimsMismatch { expected: [usize; 3], got: [usize; 3] },
    #[error("model has no fitted scaler")]
    MissingScaler,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training failed at epoch {epoch}, batch {batch}: {source}")]
    TrainStep {
        epoch: usize,
        batch: usize,
        #[source]
        source: dragsdf_nn::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("checkpoint version mismatch: file has {found}, expected {CHECKPOINT_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint tensor {name} has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
}

/// Layer plan. `input_dims` is `[nx, ny, nz]`, matching [`SdfGrid::dims`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dims: [usize; 3],
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub norm_groups: usize,
    pub attention_heads: usize,
    /// Hidden widths of the fully connected head; a final width-1 layer is
    /// implied.
    pub fc_hidden: Vec<usize>,
    pub se_reduction: usize,
    pub dropout: f64,
    pub survival_first: f64,
    pub survival_last: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = |out_channels, stride, dilation| BlockSpec {
            out_channels,
            stride,
            dilation,
        };
        Self {
            input_dims: [128, 32, 32],
            stem_channels: 16,
            blocks: vec![b(32, 2, 1), b(48, 2, 1), b(64, 2, 1), b(96, 2, 2), b(144, 1, 2), b(192, 1, 4)],
            norm_groups: 8,
            attention_heads: 4,
            fc_hidden: vec![128],
            se_reduction: 2,
            dropout: 0.1,
            survival_first: 1.0,
            survival_last: 0.8,
        }
    }
}

impl ModelConfig {
    pub fn with_input_dims(mut self, dims: [usize; 3]) -> Self {
        self.input_dims = dims;
        self
    }

    /// Half-width plan on a 16 x 8 x 8 input, for gradient checks.
    pub fn miniature() -> Self {
        let mut c = Self::default();
        c.input_dims = [16, 8, 8];
        c.stem_channels /= 2;
        for b in c.blocks.iter_mut() {
            b.out_channels /= 2;
        }
        c.fc_hidden = vec![64];
        c
    }

    pub fn embed_dim(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.out_channels)
    }

    pub fn survival(&self, block: usize) -> f64 {
        let n = self.blocks.len();
        if n <= 1 {
            return self.survival_first;
        }
        self.survival_first + (self.survival_last - self.survival_first) * block as f64 / (n - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.blocks.len() != ENCODER_BLOCKS {
            return bad(format!("expected {ENCODER_BLOCKS} encoder blocks, got {}", self.blocks.len()));
        }
        if self.input_dims.iter().any(|&d| d == 0) {
            return bad(format!("input dims {:?} must be positive", self.input_dims));
        }
        let mut ch = vec![self.stem_channels];
        ch.extend(self.blocks.iter().map(|b| b.out_channels));
        for (i, &c) in ch.iter().enumerate() {
            if c == 0 || self.norm_groups == 0 || c % self.norm_groups != 0 {
                return bad(format!(
                    "stage {i}: {c} channels not divisible by {} normalization groups",
                    self.norm_groups
                ));
            }
            if c < self.se_reduction || self.se_reduction == 0 {
                return bad(format!("stage {i}: {c} channels below SE reduction {}", self.se_reduction));
            }
        }
        if self.attention_heads == 0 || self.embed_dim() % self.attention_heads != 0 {
            return bad(format!(
                "embedding dim {} not divisible by {} heads",
                self.embed_dim(),
                self.attention_heads
            ));
        }
        for b in &self.blocks {
            if !(b.stride == 1 || b.stride == 2) || b.dilation == 0 {
                return bad(format!("block {b:?}: stride must be 1 or 2 and dilation >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for s in [self.survival_first, self.survival_last] {
            if !(s > 0.0 && s <= 1.0) {
                return bad(format!("survival probability {s} outside (0, 1]"));
            }
        }
        if self.fc_hidden.iter().any(|&w| w == 0) {
            return bad("fully connected widths must be positive".into());
        }
        Ok(())
    }
}

/// Global standardization of SDF inputs and drag targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub input_mean: f64,
    pub input_std: f64,
    pub output_mean: f64,
    pub output_std: f64,
}

impl Scaler {
    pub fn standardize_target(&self, y: f64) -> f64 {
        (y - self.output_mean) / self.output_std
    }

    pub fn destandardize_target(&self, z: f64) -> f64 {
        z * self.output_std + self.output_mean
    }

    pub fn standardize_input(&self, v: f32) -> f64 {
        (v as f64 - self.input_mean) / self.input_std
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population mean and standard deviation over every training cell and
/// every training label.
pub fn fit_scalers(grids: &[&SdfGrid], targets: &[f64]) -> Result<Scaler> {
    if targets.len() < 2 || grids.len() < 2 {
        return Err(ModelError::TooFewSamples(targets.len().min(grids.len())));
    }
    let (input_mean, input_std) = mean_std(grids.iter().flat_map(|g| g.values.iter().map(|&v| v as f64)));
    let (output_mean, output_std) = mean_std(targets.iter().copied());
    if !(input_std > 0.0) {
        return Err(ModelError::ZeroVariance("training inputs"));
    }
    if !(output_std > 0.0) {
        return Err(ModelError::ZeroVariance("training targets"));
    }
    Ok(Scaler {
        input_mean,
        input_std,
        output_mean,
        output_std,
    })
}

struct EncoderBlock {
    scse: Scse,
    conv: Conv3d,
    norm: GroupNorm,
    skip: Option<Conv3d>,
    survival: f64,
}

pub struct SurrogateModel {
    config: ModelConfig,
    store: ParamStore,
    stem: Conv3d,
    blocks: Vec<EncoderBlock>,
    attention: MultiHeadAttention,
    head: Vec<(BatchNorm1d, Linear)>,
    scaler: Option<Scaler>,
}

impl SurrogateModel {
    /// Deterministic Kaiming-uniform initialization from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = Conv3d::new(&mut store, "stem", ConvGeom::same(1, config.stem_channels, 3, 1, 1)?, true, &mut rng);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut ch = config.stem_channels;
        for (i, b) in config.blocks.iter().enumerate() {
            let name = format!("block{}", i + 1);
            let scse = Scse::new(&mut store, &format!("{name}.scse"), ch, config.se_reduction, &mut rng)?;
            let conv = Conv3d::new(
                &mut store,
                &format!("{name}.conv"),
                ConvGeom::same(ch, b.out_channels, 3, b.stride, b.dilation)?,
                false,
                &mut rng,
            );
            let norm = GroupNorm::new(&mut store, &format!("{name}.norm"), b.out_channels, config.norm_groups)?;
            let skip = (b.stride != 1 || b.out_channels != ch).then(|| {
                Conv3d::new(
                    &mut store,
                    &format!("{name}.skip"),
                    ConvGeom {
                        in_channels: ch,
                        out_channels: b.out_channels,
                        kernel: 1,
                        stride: b.stride,
                        dilation: 1,
                        padding: 0,
                    },
                    false,
                    &mut rng,
                )
            });
            blocks.push(EncoderBlock {
                scse,
                conv,
                norm,
                skip,
                survival: config.survival(i),
            });
            ch = b.out_channels;
        }
        let attention = MultiHeadAttention::new(&mut store, "attention", ch, config.attention_heads, &mut rng)?;
        let mut head = Vec::new();
        let mut width = ch;
        for (i, &out) in config.fc_hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let bn = BatchNorm1d::new(&mut store, &format!("fc{}.norm", i + 1), width);
            let lin = Linear::new(&mut store, &format!("fc{}.linear", i + 1), width, out, &mut rng);
            head.push((bn, lin));
            width = out;
        }
        Ok(Self {
            config,
            store,
            stem,
            blocks,
            attention,
            head,
            scaler: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn scaler(&self) -> Option<&Scaler> {
        self.scaler.as_ref()
    }

    pub fn set_scaler(&mut self, scaler: Scaler) {
        self.scaler = Some(scaler);
    }

    /// Raw network output `[N, 1]` (standardized units) for input
    /// `[N, 1, nz, ny, nx]`, with parameters bound through `p`.
    pub fn forward(&self, g: &mut Graph, p: &dragsdf_nn::Bound<'_>, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let mut z = self.encode(g, p, ctx, x)?;
        for (bn, lin) in &self.head {
            z = g.relu(z);
            z = bn.forward(g, p, ctx, z)?;
            z = lin.forward(g, p, z)?;
        }
        Ok(z)
    }

    /// Encoder, attention and token pooling: `[N, embed]`.
    fn encode(&self, g: &mut Graph, p: &dragsdf_nn::Bound<'_>, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(g, p, x)?;
        for b in &self.blocks {
            let rate = self.config.dropout;
            h = stochastic_depth(
                g,
                ctx,
                h,
                b.survival,
                |g, _, x| match &b.skip {
                    Some(c) => c.forward(g, p, x),
                    None => Ok(x),
                },
                |g, ctx, x| {
                    let y = b.scse.forward(g, p, x)?;
                    let y = g.relu(y);
                    let y = b.conv.forward(g, p, y)?;
                    let y = b.norm.forward(g, p, y)?;
                    dropout(g, ctx, y, rate)
                },
            )?;
        }
        let tokens = g.to_tokens(h)?;
        let attended = self.attention.forward(g, p, tokens)?;
        Ok(g.mean_tokens(attended)?)
    }

    fn standardized_input(&self, graph: &mut Graph, grids: &[&SdfGrid], scaler: &Scaler) -> Result<Var> {
        let data: Vec<f64> = grids
            .iter()
            .flat_map(|g| g.values.iter().map(|&v| scaler.standardize_input(v)))
            .collect();
        Ok(graph.constant(Tensor::new(&self.input_shape(grids.len()), data)?))
    }

    /// Re-estimates the head's batch-norm running statistics from `grids`
    /// with the current weights (population mean, unbiased variance).
    /// Moving averages collected during training trail the weights and can
    /// be far off when the pooled features barely vary within a batch.
    pub fn recalibrate_batch_norm(&mut self, grids: &[&SdfGrid], batch_size: usize) -> Result<()> {
        let scaler = self.scaler.ok_or(ModelError::MissingScaler)?;
        if grids.len() < 2 {
            return Ok(());
        }
        for g in grids {
            self.check_dims(g)?;
        }
        let width = self.config.embed_dim();
        let mut rows: Vec<f64> = Vec::with_capacity(grids.len() * width);
        for chunk in grids.chunks(batch_size.max(1)) {
            let mut graph = Graph::new();
            let x = self.standardized_input(&mut graph, chunk, &scaler)?;
            let p = self.store.bind(&mut graph, false);
            let z = self.encode(&mut graph, &p, &mut ForwardCtx::eval(), x)?;
            rows.extend_from_slice(graph.value(z).data());
        }
        let n = grids.len();
        let mut z = Tensor::new(&[n, width], rows)?;
        for li in 0..self.head.len() {
            let f = z.shape()[1];
            let act: Vec<f64> = z.data().iter().map(|v| v.max(0.0)).collect();
            let mut mean = vec![0.0; f];
            for r in act.chunks(f) {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v / n as f64;
                }
            }
            let mut var = vec![0.0; f];
            for r in act.chunks(f) {
                for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                    *s += (v - m).powi(2) / (n as f64 - 1.0);
                }
            }
            let (bn, lin) = self.head[li].clone();
            let store = &mut self.store;
            store.buffer_mut(bn.running_mean).values = mean.iter().map(|&v| v as f32).collect();
            store.buffer_mut(bn.running_var).values = var.iter().map(|&v| v as f32).collect();
            let mut graph = Graph::new();
            let x = graph.constant(Tensor::new(&[n, f], act)?);
            let p = self.store.bind(&mut graph, false);
            let y = bn.forward(&mut graph, &p, &mut ForwardCtx::eval(), x)?;
            let y = lin.forward(&mut graph, &p, y)?;
            z = graph.value(y).clone();
        }
        Ok(())
    }

    fn check_dims(&self, grid: &SdfGrid) -> Result<()> {
        if grid.dims != self.config.input_dims {
            return Err(ModelError::DimsMismatch {
                expected: self.config.input_dims,
                got: grid.dims,
            });
        }
        Ok(())
    }

    fn input_shape(&self, n: usize) -> [usize; 5] {
        let [nx, ny, nz] = self.config.input_dims;
        [n, 1, nz, ny, nx]
    }

    /// Evaluation-mode predictions, in drag-coefficient units.
    pub fn predict_batch(&self, grids: &[&SdfGrid]) -> Result<Vec<f64>> {
        let scaler = self.scaler.ok_or(ModelError::MissingScaler)?;
        for g in grids {
            self.check_dims(g)?;
        }
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let mut graph = Graph::new();
        let x = self.standardized_input(&mut graph, grids, &scaler)?;
        let p = self.store.bind(&mut graph, false);
        let out = self.forward(&mut graph, &p, &mut ForwardCtx::eval(), x)?;
        Ok(graph
            .value(out)
            .data()
            .iter()
            .map(|&z| scaler.destandardize_target(z))
            .collect())
    }

    pub fn predict(&self, grid: &SdfGrid) -> Result<f64> {
        Ok(self.predict_batch(&[grid])?[0])
    }
}

/// Single-sample prediction, in drag-coefficient units.
pub fn predict(model: &SurrogateModel, grid: &SdfGrid) -> Result<f64> {
    model.predict(grid)
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half cycle of the learning-rate triangle, in epochs.
    pub step_size_epochs: usize,
    pub weight_decay: f64,
    /// Set from the run seed, not from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Fraction of each project held out for model selection; 0 trains on
    /// everything and keeps the last epoch.
    pub validation_fraction: f64,
    /// Configured in its own config section.
    #[serde(skip)]
    pub augment: AugPolicy,
    /// Prepared batches buffered ahead of the optimizer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 300,
            base_lr: 1e-4,
            max_lr: 1e-3,
            step_size_epochs: 4,
            weight_decay: 1e-4,
            seed: 0,
            validation_fraction: 0.0,
            augment: AugPolicy::default(),
            queue_depth: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidTrainConfig(m));
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.step_size_epochs == 0 {
            return bad("step size must be >= 1 epoch".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr) {
            return bad(format!("need 0 < base_lr ({}) <= max_lr ({})", self.base_lr, self.max_lr));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction {} outside [0, 1)", self.validation_fraction));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be >= 0".into());
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// One training example. `key` seeds its augmentation stream.
#[derive(Clone, Debug)]
pub struct TrainSample<'a> {
    pub key: u64,
    pub project: String,
    pub grid: &'a SdfGrid,
    pub cd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean absolute error on standardized targets over the epoch's batches.
    pub train_loss: f64,
    /// Held-out MAE in drag-coefficient units, when validating.
    pub val_mae: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights the model holds.
    pub selected_epoch: usize,
    pub validation_ids: Vec<u64>,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn loss_curve_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mae,lr\n");
        for e in &self.epochs {
            let v = e.val_mae.map_or(String::new(), |v| v.to_string());
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, v, e.lr));
        }
        s
    }
}

/// Splits `n` indices into batches of `size`; a trailing batch of one joins
/// the previous batch.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().map_or(false, |r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

fn keyed_rng(seed: u64, a: u64, b: u64, tag: &[u8; 8]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..].copy_from_slice(tag);
    ChaCha8Rng::from_seed(key)
}

/// Per-project holdout: `round(fraction * n_project)` samples each, chosen
/// by a seeded shuffle.
fn validation_split(samples: &[TrainSample<'_>], fraction: f64, seed: u64) -> Vec<bool> {
    let mut held = vec![false; samples.len()];
    if fraction <= 0.0 {
        return held;
    }
    let mut by_project: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_project.entry(s.project.as_str()).or_default().push(i);
    }
    let mut rng = keyed_rng(seed, 0, 0, b"validate");
    for idx in by_project.values_mut() {
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
        for &i in idx.iter().take(k) {
            held[i] = true;
        }
    }
    held
}

struct PreparedBatch {
    epoch: usize,
    batch: usize,
    input: Vec<f64>,
    targets: Vec<f64>,
}

/// Trains in place. Augmented batches are produced on a separate thread and
/// handed over through a bounded queue; all randomness is keyed by seed,
/// sample and epoch, so results do not depend on scheduling.
pub fn train(
    model: &mut SurrogateModel,
    samples: &[TrainSample<'_>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    let scaler = model.scaler.ok_or(ModelError::MissingScaler)?;
    for s in samples {
        model.check_dims(s.grid)?;
    }
    let held = validation_split(samples, cfg.validation_fraction, cfg.seed);
    let train_idx: Vec<usize> = (0..samples.len()).filter(|&i| !held[i]).collect();
    let val_idx: Vec<usize> = (0..samples.len()).filter(|&i| held[i]).collect();
    if train_idx.is_empty() {
        return Err(ModelError::TooFewSamples(0));
    }
    let batches = batch_ranges(train_idx.len(), cfg.batch_size);
    let per_epoch = batches.len() as u64;
    let schedule = CyclicLr::new(cfg.base_lr, cfg.max_lr, cfg.step_size_epochs as u64 * per_epoch)?;
    let mut optim = RAdam::new(
        RAdamConfig {
            weight_decay: cfg.weight_decay,
            ..RAdamConfig::default()
        },
        &model.store,
    );
    let [nx, ny, nz] = model.config.input_dims;
    let shape = move |n: usize| [n, 1, nz, ny, nx];
    let cell_count: usize = model.config.input_dims.iter().product();

    let train_grids: Vec<&SdfGrid> = train_idx.iter().map(|&i| samples[i].grid).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut iteration = 0u64;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<PreparedBatch>(cfg.queue_depth.max(1));
        let train_idx = &train_idx;
        let batches = &batches;
        scope.spawn(move || {
            for epoch in 0..cfg.epochs {
                let mut order = train_idx.clone();
                order.shuffle(&mut keyed_rng(cfg.seed, epoch as u64, 0, b"shuffle\0"));
                for (bi, r) in batches.iter().enumerate() {
                    let members = &order[r.clone()];
                    let parts: Vec<Vec<f64>> = members
                        .par_iter()
                        .map(|&i| {
                            let s = &samples[i];
                            let g = apply_policy(s.grid, &cfg.augment, s.key, epoch as u64);
                            g.values.iter().map(|&v| scaler.standardize_input(v)).collect()
                        })
                        .collect();
                    let mut input = Vec::with_capacity(members.len() * cell_count);
                    for p in parts {
                        input.extend(p);
                    }
                    let targets = members.iter().map(|&i| scaler.standardize_target(samples[i].cd)).collect();
                    let batch = PreparedBatch {
                        epoch,
                        batch: bi,
                        input,
                        targets,
                    };
                    if tx.send(batch).is_err() {
                        return;
                    }
                }
            }
        });

        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut lr = cfg.base_lr;
        while let Ok(b) = rx.recv() {
            let n = b.targets.len();
            lr = schedule.lr(iteration);
            let step_err = |source| ModelError::TrainStep {
                epoch: b.epoch + 1,
                batch: b.batch + 1,
                source,
            };
            let mut graph = Graph::new();
            let x = graph.constant(Tensor::new(&shape(n), b.input).map_err(step_err)?);
            let mut ctx = ForwardCtx::with_rng(Mode::Train, keyed_rng(cfg.seed, b.epoch as u64, b.batch as u64, b"forward\0"));
            let (loss_value, grads) = {
                let p = model.store.bind(&mut graph, true);
                let pred = model.forward(&mut graph, &p, &mut ctx, x)?;
                let loss = graph.mae_loss(pred, &b.targets).map_err(step_err)?;
                let value = graph.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(ModelError::NonFiniteLoss {
                        epoch: b.epoch + 1,
                        batch: b.batch + 1,
                    });
                }
                let mut grads = graph.backward(loss).map_err(step_err)?;
                (value, p.collect_grads(&mut grads))
            };
            optim.step(&mut model.store, &grads, lr).map_err(step_err)?;
            ctx.apply_updates(&mut model.store);
            iteration += 1;
            loss_sum += loss_value * n as f64;
            loss_n += n;

            if b.batch + 1 == batches.len() {
                let val_mae = if val_idx.is_empty() {
                    None
                } else {
                    model.recalibrate_batch_norm(&train_grids, cfg.batch_size)?;
                    let grids: Vec<&SdfGrid> = val_idx.iter().map(|&i| samples[i].grid).collect();
                    let preds = model.predict_batch(&grids)?;
                    let err: f64 = preds.iter().zip(&val_idx).map(|(p, &i)| (p - samples[i].cd).abs()).sum();
                    Some(err / val_idx.len() as f64)
                };
                let stats = EpochStats {
                    epoch: b.epoch + 1,
                    train_loss: loss_sum / loss_n as f64,
                    val_mae,
                    lr,
                };
                if !stats.train_loss.is_finite() {
                    return Err(ModelError::NonFiniteLoss {
                        epoch: b.epoch + 1,
                        batch: b.batch + 1,
                    });
                }
                if let Some(v) = val_mae {
                    if best.as_ref().map_or(true, |(bv, _, _)| v < *bv) {
                        best = Some((v, stats.epoch, model.store.clone()));
                    }
                }
                on_epoch(&stats);
                epochs.push(stats);
                loss_sum = 0.0;
                loss_n = 0;
            }
        }
        let _ = lr;
        Ok(())
    })?;

    let selected_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => epochs.len(),
    };
    model.recalibrate_batch_norm(&train_grids, cfg.batch_size)?;
    Ok(TrainReport {
        epochs,
        selected_epoch,
        validation_ids: val_idx.iter().map(|&i| samples[i].key).collect(),
    })
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub selected_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload that follows the metadata.
    pub offset: u64,
    pub buffer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub scaler: Scaler,
    /// Voxelization domain the model was trained on.
    pub domain: Option<DomainSpec>,
    pub encoder_blocks: usize,
    pub parameter_count: usize,
    pub training: Option<TrainingMeta>,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub model: SurrogateModel,
    pub meta: CheckpointMeta,
}

pub fn encode_checkpoint(
    model: &SurrogateModel,
    domain: Option<DomainSpec>,
    training: Option<TrainingMeta>,
) -> Result<Vec<u8>> {
    let scaler = model.scaler.ok_or(ModelError::MissingScaler)?;
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let all = model
        .store
        .params()
        .iter()
        .map(|p| (p, false))
        .chain(model.store.buffers().iter().map(|b| (b, true)));
    for (p, buffer) in all {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset: payload.len() as u64,
            buffer,
        });
        for v in &p.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        config: model.config.clone(),
        scaler,
        domain,
        encoder_blocks: model.blocks.len(),
        parameter_count: model.num_parameters(),
        training,
        tensors,
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| ModelError::Parse(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let parse = |m: &str| ModelError::Parse(m.to_string());
    if bytes.len() < 20 {
        return Err(parse("file shorter than the 20-byte preamble"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(parse("bad magic, expected AEROCKPT"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch { found: version });
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let meta_end = 20u64
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| parse("truncated metadata"))? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes[20..meta_end]).map_err(|e| ModelError::Parse(e.to_string()))?;
    let payload = &bytes[meta_end..];

    let mut model = SurrogateModel::build(meta.config.clone(), 0)?;
    model.scaler = Some(meta.scaler);
    let by_name: BTreeMap<&str, &TensorEntry> = meta.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let expected: Vec<(String, Vec<usize>)> = model
        .store
        .params()
        .iter()
        .chain(model.store.buffers())
        .map(|p| (p.name.clone(), p.shape.clone()))
        .collect();
    for (name, shape) in expected {
        let entry = by_name.get(name.as_str()).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        if entry.shape != shape {
            return Err(ModelError::TensorShape {
                name,
                expected: shape,
                got: entry.shape.clone(),
            });
        }
        let n: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(4 * n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| parse(&format!("truncated payload for tensor {name}")))?;
        let values = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        model.store.set_by_name(&name, &shape, values)?;
    }
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint(
    model: &SurrogateModel,
    domain: Option<DomainSpec>,
    training: Option<TrainingMeta>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, domain, training)?;
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_budget() {
        let m = SurrogateModel::build(ModelConfig::default(), 0).unwrap();
        let n = m.num_parameters();
        assert!((1_500_000..=2_500_000).contains(&n), "{n}");
        assert_eq!(m.blocks.len(), 6);
    }

    #[test]
    fn survival_is_linear() {
        let c = ModelConfig::default();
        assert_eq!(c.survival(0), 1.0);
        assert!((c.survival(5) - 0.8).abs() < 1e-15);
        assert!((c.survival(2) - 0.92).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.blocks.pop();
        assert!(SurrogateModel::build(c, 0).is_err());
        let mut c = ModelConfig::default();
        c.blocks[2].out_channels = 60;
        let err = SurrogateModel::build(c, 0).err().unwrap();
        assert!(err.to_string().contains("divisible"), "{err}");
        let mut c = ModelConfig::default();
        c.attention_heads = 5;
        assert!(SurrogateModel::build(c, 0).is_err());
    }

    #[test]
    fn scaler_example() {
        let g1 = SdfGrid::new([2, 1, 1], [0.0; 3], [1.0; 3], vec![0.0, 1.0], true).unwrap();
        let g2 = SdfGrid::new([2, 1, 1], [0.0; 3], [1.0; 3], vec![2.0, 3.0], true).unwrap();
        let s = fit_scalers(&[&g1, &g2], &[0.25, 0.27]).unwrap();
        assert!((s.output_mean - 0.26).abs() < 1e-15);
        assert!((s.output_std - 0.01).abs() < 1e-15);
        assert_eq!(s.input_mean, 1.5);
        assert!((s.input_std - 1.25f64.sqrt()).abs() < 1e-15);
        let y = 0.2731;
        assert!((s.destandardize_target(s.standardize_target(y)) - y).abs() < 1e-9);
        let flat = SdfGrid::new([2, 1, 1], [0.0; 3], [1.0; 3], vec![1.0, 1.0], true).unwrap();
        assert!(matches!(fit_scalers(&[&flat, &flat], &[0.25, 0.27]), Err(ModelError::ZeroVariance(_))));
        assert!(matches!(fit_scalers(&[&g1, &g2], &[0.25, 0.25]), Err(ModelError::ZeroVariance(_))));
    }

    #[test]
    fn batches_merge_trailing_single() {
        let r = batch_ranges(33, 16);
        assert_eq!(r, vec![0..16, 16..33]);
        assert_eq!(batch_ranges(34, 16), vec![0..16, 16..32, 32..34]);
        assert_eq!(batch_ranges(1, 16), vec![0..1]);
    }
}
