//! Desk-scale experiments: synthetic data, label noise, training with
//! per-epoch checkpoints, and the two ways of condensing a fused ensemble
//! back into one model.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, TrainError};
use crate::fusion::{FusedProbs, FusionPlan};
use crate::log::{PredictionLog, SplitTag};
use crate::models::{
    self, blend_weights, ema_update, mean_weights, Activation, Architecture, Batch, LossKind, ModelWeights,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub dim: usize,
    /// Class means are `mean_scale * (e_c - 1/C)` in the first `C` coordinates.
    pub mean_scale: f64,
    /// Standard deviation of the shared isotropic covariance.
    pub noise_std: f64,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    None,
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub kind: NoiseKind,
    #[serde(default)]
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub step_decay: Option<StepDecay>,
    /// Track an exponential moving average of the weights with this decay.
    #[serde(default)]
    pub ema_decay: Option<f64>,
}

fn default_batch() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub model: ModelSpec,
    pub training: TrainingSpec,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        let d = &self.dataset;
        if d.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", d.classes));
        }
        if d.dim < d.classes {
            return bad(format!("dim {} must be at least the class count {}", d.dim, d.classes));
        }
        if d.train == 0 || d.validation == 0 || d.test == 0 {
            return bad("split sizes must be at least 1".into());
        }
        if !(d.noise_std >= 0.0) || !d.mean_scale.is_finite() {
            return bad("noise_std must be non-negative and mean_scale finite".into());
        }
        let p = self.noise.fraction;
        if !(0.0..1.0).contains(&p) {
            return bad(format!("noise fraction {p} outside [0, 1)"));
        }
        if self.noise.kind != NoiseKind::None && p == 0.0 {
            return bad("label noise requested with fraction 0".into());
        }
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return bad("need lr > 0 and momentum in [0, 1)".into());
        }
        if let Some(decay) = t.ema_decay {
            if !(0.0..=1.0).contains(&decay) {
                return bad(format!("ema decay {decay} outside [0, 1]"));
            }
        }
        if let Some(s) = t.step_decay {
            if s.every == 0 || !(s.factor > 0.0) {
                return bad("step decay needs every >= 1 and factor > 0".into());
            }
        }
        self.architecture().validate()?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        let mut sizes = vec![self.dataset.dim];
        sizes.extend_from_slice(&self.model.hidden);
        sizes.push(self.dataset.classes);
        Architecture { sizes, activation: self.model.activation, bias: self.model.bias }
    }

    /// Parses TOML or JSON, picking by extension (`.json` is JSON, anything
    /// else TOML).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.extension().is_some_and(|e| e == "json"))
    }

    /// Parses and validates config text, as JSON when `json` is set and
    /// TOML otherwise.
    pub fn parse(text: &str, json: bool) -> Result<Self, TrainError> {
        let cfg: Self = if json {
            serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Inputs `[n][d]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_u32(&self) -> Vec<u32> {
        self.labels.iter().map(|&l| l as u32).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    /// Training inputs with the labels the model sees (possibly corrupted).
    pub train: Dataset,
    pub clean_train_labels: Vec<usize>,
    pub noise_mask: Vec<bool>,
    pub validation: Dataset,
    pub test: Dataset,
}

const DATA_STREAM: u64 = 0x5eed_da7a;
const NOISE_STREAM: u64 = 0x5eed_0015;
const INIT_STREAM: u64 = 0x5eed_1417;
const ORDER_STREAM: u64 = 0x5eed_0dde;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag)
}

fn gaussian_mixture(spec: &DatasetSpec, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let c = spec.classes;
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(rng);
    let mut inputs = Array2::zeros((n, spec.dim));
    for (mut row, &label) in inputs.rows_mut().into_iter().zip(&labels) {
        for (j, v) in row.iter_mut().enumerate() {
            let mean = if j < c { spec.mean_scale * (f64::from(u8::from(j == label)) - 1.0 / c as f64) } else { 0.0 };
            let z: f64 = rng.sample(StandardNormal);
            *v = mean + spec.noise_std * z;
        }
    }
    Dataset { inputs, labels }
}

/// Draws the three splits and corrupts the training labels.
pub fn synthesize(cfg: &ExperimentConfig) -> Result<Splits, TrainError> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, DATA_STREAM);
    let train = gaussian_mixture(&cfg.dataset, cfg.dataset.train, &mut rng);
    let validation = gaussian_mixture(&cfg.dataset, cfg.dataset.validation, &mut rng);
    let test = gaussian_mixture(&cfg.dataset, cfg.dataset.test, &mut rng);
    let (noisy, noise_mask) =
        inject_noise(&train.labels, cfg.noise.kind, cfg.noise.fraction, cfg.dataset.classes, cfg.seed ^ NOISE_STREAM)?;
    let clean_train_labels = train.labels.clone();
    Ok(Splits {
        train: Dataset { inputs: train.inputs, labels: noisy },
        clean_train_labels,
        noise_mask,
        validation,
        test,
    })
}

/// Corrupts exactly `floor(p N)` labels.
///
/// Symmetric noise replaces each chosen label with a uniformly drawn different
/// class; asymmetric noise maps class `c` to `(c + 1) mod C`.
pub fn inject_noise(
    labels: &[usize],
    kind: NoiseKind,
    p: f64,
    classes: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<bool>), TrainError> {
    if classes < 2 {
        return Err(TrainError::Config(format!("noise injection needs C >= 2, got {classes}")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(TrainError::Config(format!("noise fraction {p} outside [0, 1)")));
    }
    if kind != NoiseKind::None && p == 0.0 {
        return Err(TrainError::Config("label noise requested with fraction 0".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::Config(format!("label {bad} outside [0, {classes})")));
    }
    let mut out = labels.to_vec();
    let mut mask = vec![false; labels.len()];
    if kind == NoiseKind::None {
        return Ok((out, mask));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flips = (p * labels.len() as f64).floor() as usize;
    for i in index::sample(&mut rng, labels.len(), flips) {
        out[i] = match kind {
            NoiseKind::Symmetric => (labels[i] + 1 + rng.random_range(0..classes - 1)) % classes,
            NoiseKind::Asymmetric => (labels[i] + 1) % classes,
            NoiseKind::None => unreachable!(),
        };
        mask[i] = true;
    }
    Ok((out, mask))
}

/// Everything one training run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub splits: Splits,
    pub train_log: PredictionLog,
    pub validation_log: PredictionLog,
    pub test_log: PredictionLog,
    /// Weights after each epoch, aligned with log epochs.
    pub snapshots: Vec<ModelWeights>,
    pub ema: Option<ModelWeights>,
}

impl RunArtifacts {
    /// Early-stopping epoch: best validation accuracy, earliest on ties.
    pub fn best_validation_epoch(&self) -> usize {
        crate::fusion::best_accuracy_epoch(&self.validation_log)
    }
}

/// Class probabilities `[n][C]` of a model.
pub fn predict_probs(w: &ModelWeights, inputs: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
    Ok(models::softmax(models::forward(w, inputs)?.view()))
}

pub fn accuracy(w: &ModelWeights, data: &Dataset) -> Result<f64, ModelError> {
    let probs = predict_probs(w, data.inputs.view())?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(&data.labels)
        .filter(|(row, &l)| crate::log::argmax(row.as_slice().unwrap()) == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

struct Optimizer {
    lr: f64,
    momentum: f64,
    velocity: Vec<f64>,
    step_decay: Option<StepDecay>,
    ema_decay: Option<f64>,
}

impl Optimizer {
    fn new(spec: &TrainingSpec, params: usize) -> Self {
        Self {
            lr: spec.lr,
            momentum: spec.momentum,
            velocity: vec![0.0; params],
            step_decay: spec.step_decay,
            ema_decay: spec.ema_decay,
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.step_decay {
            Some(s) => self.lr * s.factor.powi((epoch / s.every) as i32),
            None => self.lr,
        }
    }
}

/// Runs minibatch SGD for `spec.epochs` epochs, calling `on_epoch` with the
/// weights after every epoch. Returns the final EMA weights when tracked.
fn sgd_loop(
    weights: &mut ModelWeights,
    spec: &TrainingSpec,
    data: &Dataset,
    teacher: Option<&Array2<f64>>,
    distill: Option<(f64, f64)>,
    order_seed: u64,
    mut on_epoch: impl FnMut(usize, &ModelWeights) -> Result<(), TrainError>,
) -> Result<Option<ModelWeights>, TrainError> {
    let mut opt = Optimizer::new(spec, weights.params().len());
    let mut ema = opt.ema_decay.map(|_| weights.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..spec.epochs {
        let lr = opt.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            let inputs = data.inputs.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let teacher_rows = teacher.map(|t| t.select(Axis(0), chunk));
            let batch = Batch::new(inputs.view(), &labels)?;
            let kind = match (distill, &teacher_rows) {
                (Some((temperature, alpha)), Some(t)) => LossKind::Distill { temperature, alpha, teacher: t.view() },
                _ => LossKind::CrossEntropy,
            };
            let (loss, g) = models::loss_and_grad(weights, &batch, &kind)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            if opt.momentum > 0.0 {
                let mu = opt.momentum;
                opt.velocity.iter_mut().zip(&g).for_each(|(v, &d)| *v = mu * *v + d);
                models::sgd_step_in_place(weights, &opt.velocity, lr)?;
            } else {
                models::sgd_step_in_place(weights, &g, lr)?;
            }
            if let (Some(e), Some(decay)) = (ema.as_mut(), opt.ema_decay) {
                *e = ema_update(e, weights, decay)?;
            }
        }
        let mean_loss = epoch_loss / data.len() as f64;
        if !mean_loss.is_finite() || weights.params().iter().any(|p| !p.is_finite()) {
            return Err(TrainError::Diverged { epoch, loss: mean_loss });
        }
        on_epoch(epoch, weights)?;
    }
    Ok(ema)
}

fn probs_table(w: &ModelWeights, data: &Dataset) -> Result<Vec<f64>, ModelError> {
    Ok(predict_probs(w, data.inputs.view())?.into_raw_vec_and_offset().0)
}

/// Trains the configured model and records per-epoch predictions on all
/// three splits. Validation and test labels are always clean.
pub fn run(cfg: &ExperimentConfig) -> Result<RunArtifacts, TrainError> {
    let splits = synthesize(cfg)?;
    let mut weights = ModelWeights::init(cfg.architecture(), cfg.seed ^ INIT_STREAM)?;
    let epochs = cfg.training.epochs;
    let mut tables: [Vec<Vec<f64>>; 3] = Default::default();
    let mut snapshots = Vec::with_capacity(epochs);
    let ema = sgd_loop(&mut weights, &cfg.training, &splits.train, None, None, cfg.seed ^ ORDER_STREAM, |_, w| {
        for (table, data) in tables.iter_mut().zip([&splits.train, &splits.validation, &splits.test]) {
            table.push(probs_table(w, data)?);
        }
        snapshots.push(w.clone());
        Ok(())
    })?;
    let classes = cfg.dataset.classes;
    let [train_t, val_t, test_t] = tables;
    let train_log = PredictionLog::from_epoch_tables(
        &train_t,
        classes,
        splits.train.labels_u32(),
        Some(splits.noise_mask.clone()),
        SplitTag::Train,
    )?;
    let validation_log =
        PredictionLog::from_epoch_tables(&val_t, classes, splits.validation.labels_u32(), None, SplitTag::Validation)?;
    let test_log = PredictionLog::from_epoch_tables(&test_t, classes, splits.test.labels_u32(), None, SplitTag::Test)?;
    Ok(RunArtifacts { config: cfg.clone(), splits, train_log, validation_log, test_log, snapshots, ema })
}

/// Distillation settings for a fresh student.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub architecture: Architecture,
    pub training: TrainingSpec,
    pub temperature: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl DistillConfig {
    /// Student shaped and trained like the run's own model, with `T = 2.5`
    /// and `alpha = 0.9`.
    pub fn like(cfg: &ExperimentConfig) -> Self {
        Self {
            architecture: cfg.architecture(),
            training: TrainingSpec { ema_decay: None, ..cfg.training.clone() },
            temperature: 2.5,
            alpha: 0.9,
            seed: cfg.seed,
        }
    }
}

/// Teacher targets as log-probabilities `[n][C]`, the form the distillation
/// loss consumes when the teacher only exists as probabilities.
pub fn teacher_from_probs(probs: &FusedProbs) -> Array2<f64> {
    Array2::from_shape_vec((probs.examples, probs.classes), probs.probs.iter().map(|&p| p.ln()).collect())
        .expect("fused shape")
}

pub fn teacher_from_log(log: &PredictionLog, epoch: usize) -> Array2<f64> {
    Array2::from_shape_vec(
        (log.examples(), log.classes()),
        log.epoch_slice(epoch).iter().map(|&p| f64::from(p).ln()).collect(),
    )
    .expect("log shape")
}

/// Trains a fresh student on `data` against teacher log-probabilities.
///
/// The student is initialised and shuffled from `cfg.seed` exactly as
/// [`run`] would, so `alpha = 0` reproduces plain cross-entropy training.
pub fn distill(teacher: &Array2<f64>, data: &Dataset, cfg: &DistillConfig) -> Result<ModelWeights, TrainError> {
    if teacher.nrows() != data.len() || teacher.ncols() != cfg.architecture.outputs() {
        return Err(TrainError::Config(format!(
            "teacher is {:?} but student trains on {} examples with {} outputs",
            teacher.dim(),
            data.len(),
            cfg.architecture.outputs()
        )));
    }
    if !(cfg.temperature > 0.0) || !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(TrainError::Config(format!(
            "need T > 0 and alpha in [0, 1], got T={}, alpha={}",
            cfg.temperature, cfg.alpha
        )));
    }
    let mut weights = ModelWeights::init(cfg.architecture.clone(), cfg.seed ^ INIT_STREAM)?;
    sgd_loop(
        &mut weights,
        &cfg.training,
        data,
        Some(teacher),
        Some((cfg.temperature, cfg.alpha)),
        cfg.seed ^ ORDER_STREAM,
        |_, _| Ok(()),
    )?;
    Ok(weights)
}

/// Replays a fusion plan in weight space: starting from the reference
/// snapshot, `w <- eps * mean(window) + (1 - eps) * w` for each pair.
pub fn average_weights(snapshots: &[ModelWeights], plan: &FusionPlan) -> Result<ModelWeights, TrainError> {
    plan.validate()?;
    let epochs = snapshots.len();
    let check = |epoch: usize| {
        if epoch < epochs {
            Ok(())
        } else {
            Err(crate::error::FusionError::EpochOutOfRange { epoch, epochs })
        }
    };
    check(plan.reference_epoch)?;
    let mut current = snapshots[plan.reference_epoch].clone();
    for pair in &plan.pairs {
        check(pair.epoch)?;
        let lo = pair.epoch.saturating_sub(plan.window);
        let hi = (pair.epoch + plan.window).min(epochs - 1);
        let window: Vec<&ModelWeights> = snapshots[lo..=hi].iter().collect();
        let mean = mean_weights(&window)?;
        current = blend_weights(&mean, &current, pair.epsilon)?;
    }
    Ok(current)
}
