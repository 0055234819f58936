//! Losses, Adam, the plateau schedule and the epoch loop.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{Mode, Param, Tensor, Unet};
use crate::patchwork::{build_mask, extract, PatchGrid};
use crate::seisdata::{Gather, SampleMask};

/// Smallest relative drop in validation loss that counts as progress.
pub const MIN_REL_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Denoise,
    Interpolate,
    Joint,
}

impl Task {
    /// Interpolation trains and validates on missing samples only.
    pub fn masked(self) -> bool {
        self == Task::Interpolate
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Interpolate => "interpolate",
            Task::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "denoise" => Ok(Task::Denoise),
            "interpolate" => Ok(Task::Interpolate),
            "joint" => Ok(Task::Joint),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub lr0: f64,
    pub patience0: usize,
    pub max_epochs: usize,
    pub gain: f32,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Interpolate,
            lr0: 0.01,
            patience0: 10,
            max_epochs: 100,
            gain: 2000.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.patience0 == 0 {
            return Err(Error::Config("patience0 must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.gain.is_finite() && self.gain != 0.0) {
            return Err(Error::Config(format!("gain must be finite and non-zero, got {}", self.gain)));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("Adam constants out of range".into()));
        }
        Ok(())
    }
}

/// `||P - Q||_F^2`.
pub fn mse_loss(p: &Array2<f32>, q: &Array2<f32>) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", p.dim(), q.dim())));
    }
    Ok(p.iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
}

/// `||(P - Q) * M||_F^2` with a binary mask.
pub fn masked_mse_loss(p: &Array2<f32>, q: &Array2<f32>, m: &Array2<u8>) -> Result<f64> {
    if p.dim() != q.dim() || p.dim() != m.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?} vs {:?}", p.dim(), q.dim(), m.dim())));
    }
    Ok(p.iter()
        .zip(q)
        .zip(m)
        .filter(|(_, &mk)| mk != 0)
        .map(|((&a, &b), _)| (a as f64 - b as f64).powi(2))
        .sum())
}

/// First and second moments for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[Param<f32>]) -> Self {
        let zeros = |p: &Param<f32>| vec![0.0f32; if p.trainable { p.value.len() } else { 0 }];
        AdamState {
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(state: &mut AdamState, params: &mut [Param<f32>], lr: f64, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape("Adam state does not match the parameter list".into()));
    }
    for p in params.iter().filter(|p| p.trainable) {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { name: p.name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let step_size = (lr / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    let eps = cfg.eps as f32;
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        for ((w, &g), (mi, vi)) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *w -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

/// One training or validation example: aligned clean/corrupted gathers and
/// the mask of missing samples (empty for pure noise).
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub clean: Gather,
    pub corrupted: Gather,
    pub mask: SampleMask,
}

impl TrainPair {
    pub fn new(clean: Gather, corrupted: Gather, mask: Option<SampleMask>) -> Result<Self> {
        if clean.shape() != corrupted.shape() {
            return Err(Error::Shape(format!(
                "clean {:?} and corrupted {:?} gathers differ",
                clean.shape(),
                corrupted.shape()
            )));
        }
        let (n_t, n_x) = clean.shape();
        let mask = mask.unwrap_or_else(|| SampleMask::empty(n_t, n_x));
        if mask.shape() != clean.shape() {
            return Err(Error::Shape("mask shape differs from gather".into()));
        }
        Ok(TrainPair { clean, corrupted, mask })
    }
}

/// Gained network inputs, gained targets and (for masked tasks) loss
/// weights of every patch of one gather.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub weight: Option<Vec<f32>>,
}

fn stack(patches: impl Iterator<Item = Array2<f32>>, k: usize, n: usize, gain: f32) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(k * n * n);
    for p in patches {
        data.extend(p.iter().map(|&v| v * gain));
    }
    Tensor::from_channel_major(k, 1, n, n, data)
}

/// Builds the batch for one gather.
pub fn make_batch(pair: &TrainPair, grid: &PatchGrid, gain: f32, masked: bool) -> Result<Batch> {
    let k = grid.len();
    let n = grid.n;
    let input = stack(extract(&pair.corrupted, grid)?.into_iter().map(|p| p.values), k, n, gain)?;
    let target = stack(extract(&pair.clean, grid)?.into_iter().map(|p| p.values), k, n, gain)?;
    let weight = if masked {
        let mut w = Vec::with_capacity(k * n * n);
        for i in 0..k {
            w.extend(build_mask(&pair.mask, grid, i)?.values.iter().map(|&m| m as f32));
        }
        Some(w)
    } else {
        None
    };
    Ok(Batch { input, target, weight })
}

/// Mean per-patch loss of `y` and its gradient w.r.t. `y`.
pub fn batch_loss(y: &Tensor<f32>, batch: &Batch) -> (f64, Tensor<f32>) {
    let k = y.batch() as f64;
    let mut dy = Tensor::zeros(y.batch(), 1, y.height(), y.width());
    let mut loss = 0.0f64;
    let scale = (2.0 / k) as f32;
    let tgt = batch.target.data();
    for (i, (g, &yv)) in dy.data_mut().iter_mut().zip(y.data()).enumerate() {
        let w = batch.weight.as_ref().map_or(1.0, |w| w[i]);
        let r = w * (yv - tgt[i]);
        loss += (r as f64) * (r as f64);
        *g = scale * w * r;
    }
    (loss / k, dy)
}

/// Mean patch loss of `model` (inference mode) over `pairs`.
pub fn evaluate_loss(model: &Unet<f32>, pairs: &[TrainPair], grid: &PatchGrid, cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        let batch = make_batch(pair, grid, cfg.gain, cfg.task.masked())?;
        let y = model.infer(&batch.input)?.y;
        let (loss, _) = batch_loss(&y, &batch);
        total += loss * grid.len() as f64;
        count += grid.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub patience: usize,
}

/// Learning-rate / patience bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub patience: usize,
    pub best: f64,
    pub stalled: usize,
    pub decimations: usize,
}

/// What the schedule decided after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Waiting,
    Decimated,
    Stop,
}

impl Schedule {
    pub fn new(lr0: f64, patience0: usize, baseline: f64) -> Self {
        Schedule {
            lr: lr0,
            patience: patience0,
            best: baseline,
            stalled: 0,
            decimations: 0,
        }
    }

    /// Feeds one validation loss. A plateau decimates the learning rate
    /// and halves patience; a plateau at patience 1 after two decimations
    /// stops training.
    pub fn observe(&mut self, val: f64) -> Verdict {
        if val < self.best - MIN_REL_IMPROVEMENT * self.best.abs() {
            self.best = val;
            self.stalled = 0;
            return Verdict::Improved;
        }
        self.stalled += 1;
        if self.stalled < self.patience {
            return Verdict::Waiting;
        }
        if self.patience == 1 && self.decimations >= 2 {
            return Verdict::Stop;
        }
        self.lr *= 0.1;
        self.patience = (self.patience / 2).max(1);
        self.decimations += 1;
        self.stalled = 0;
        Verdict::Decimated
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the initial model if no
    /// epoch improved on it).
    pub model: Unet<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_val_loss: f64,
}

fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rand::Rng::random(&mut rng)
}

/// Trains `model` on `train`, selecting the epoch with minimum loss on `val`.
pub fn train(model: Unet<f32>, train: &[TrainPair], val: &[TrainPair], grid: &PatchGrid, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(model, train, val, grid, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_observer(
    mut model: Unet<f32>,
    train: &[TrainPair],
    val: &[TrainPair],
    grid: &PatchGrid,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    if model.spec().n != grid.n {
        return Err(Error::Shape(format!(
            "model patch side {} differs from grid patch side {}",
            model.spec().n,
            grid.n
        )));
    }
    for p in train.iter().chain(val) {
        if p.clean.shape() != grid.gather_shape {
            return Err(Error::Shape(format!(
                "gather {:?} does not match grid {:?}",
                p.clean.shape(),
                grid.gather_shape
            )));
        }
    }

    let initial = evaluate_loss(&model, val, grid, cfg)?;
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut schedule = Schedule::new(cfg.lr0, cfg.patience0, initial);
    let mut adam = AdamState::new(model.params());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let lr = schedule.lr;
        let mut train_loss = 0.0;
        for (b, &gi) in order.iter().enumerate() {
            let batch = make_batch(&train[gi], grid, cfg.gain, cfg.task.masked())?;
            model.zero_grad();
            let y = model.forward(&batch.input, Mode::Train, batch_seed(cfg.seed, epoch, b))?.y;
            let (loss, dy) = batch_loss(&y, &batch);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            model.backward(&dy)?;
            adam_step(&mut adam, model.params_mut(), lr, &cfg.adam)?;
            train_loss += loss;
        }
        train_loss /= train.len() as f64;
        let val_loss = evaluate_loss(&model, val, grid, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            patience: schedule.patience,
        };
        history.push(record);
        observer(&record);
        match schedule.observe(val_loss) {
            Verdict::Improved => {
                best_model = model.clone();
                best_epoch = epoch;
            }
            Verdict::Stop => break,
            Verdict::Waiting | Verdict::Decimated => {}
        }
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        best_val_loss: schedule.best,
        initial_val_loss: initial,
    })
}

/// History as CSV: `epoch,train_loss,val_loss,lr,patience`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr,patience\n");
    for r in history {
        let _ = writeln!(s, "{},{:e},{:e},{:e},{}", r.epoch, r.train_loss, r.val_loss, r.lr, r.patience);
    }
    s
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
