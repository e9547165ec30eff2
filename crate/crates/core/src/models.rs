//! Small dense classifiers with hand-derived gradients.
//!
//! A model is an [`Architecture`] plus one flat `f64` parameter vector. Layer
//! `l` stores its weight matrix row-major as `[out][in]`, followed by its bias
//! when the architecture has biases. Hidden layers apply the activation; the
//! output layer is linear and produces logits.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

pub const MAX_LAYERS: usize = 5;
pub const MAX_UNITS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input width followed by each layer's output width.
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: Option<usize>,
}

impl Architecture {
    /// Bias-free identity stack, the deep linear network.
    pub fn linear_stack(sizes: Vec<usize>) -> Self {
        Self { sizes, activation: Activation::Identity, bias: false }
    }

    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Self { sizes, activation: Activation::Relu, bias: true }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let layers = self.sizes.len().saturating_sub(1);
        if layers == 0 || layers > MAX_LAYERS {
            return Err(ModelError::InvalidArchitecture(format!("need 1..={MAX_LAYERS} layers, got {layers}")));
        }
        if let Some(&bad) = self.sizes.iter().find(|&&s| s == 0 || s > MAX_UNITS) {
            return Err(ModelError::InvalidArchitecture(format!("layer width {bad} outside 1..={MAX_UNITS}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.spans().last().map_or(0, |s| s.bias.map_or(s.weight + s.inputs * s.outputs, |b| b + s.outputs))
    }

    fn spans(&self) -> Vec<LayerSpan> {
        let mut offset = 0;
        self.sizes
            .windows(2)
            .map(|pair| {
                let (inputs, outputs) = (pair[0], pair[1]);
                let weight = offset;
                offset += inputs * outputs;
                let bias = self.bias.then(|| {
                    let b = offset;
                    offset += outputs;
                    b
                });
                LayerSpan { inputs, outputs, weight, bias }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    architecture: Architecture,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    architecture: Architecture,
    param_count: usize,
}

impl ModelWeights {
    pub fn new(architecture: Architecture, params: Vec<f64>) -> Result<Self, ModelError> {
        architecture.validate()?;
        let expected = architecture.param_count();
        if params.len() != expected {
            return Err(ModelError::Shape(format!(
                "{} parameters for an architecture needing {expected}",
                params.len()
            )));
        }
        Ok(Self { architecture, params })
    }

    pub fn zeros(architecture: Architecture) -> Result<Self, ModelError> {
        let p = architecture.param_count();
        Self::new(architecture, vec![0.0; p])
    }

    /// Uniform `[-a, a]` weights with `a = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn init(architecture: Architecture, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(architecture)?;
        for span in w.architecture.spans() {
            let a = (6.0 / (span.inputs + span.outputs) as f64).sqrt();
            for p in &mut w.params[span.weight..span.weight + span.inputs * span.outputs] {
                *p = rng.random_range(-a..=a);
            }
        }
        Ok(w)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight matrix of layer `l` as `[out][in]`.
    pub fn layer_matrix(&self, l: usize) -> ArrayView2<'_, f64> {
        let s = self.architecture.spans()[l];
        ArrayView2::from_shape((s.outputs, s.inputs), &self.params[s.weight..s.weight + s.inputs * s.outputs])
            .expect("span matches shape")
    }

    pub fn layer_bias(&self, l: usize) -> Option<&[f64]> {
        let s = self.architecture.spans()[l];
        s.bias.map(|b| &self.params[b..b + s.outputs])
    }

    /// Builds a bias-free model from per-layer `[out][in]` matrices.
    pub fn from_matrices(activation: Activation, matrices: &[Array2<f64>]) -> Result<Self, ModelError> {
        let first = matrices.first().ok_or_else(|| ModelError::InvalidArchitecture("no layers".into()))?;
        let mut sizes = vec![first.ncols()];
        for (l, m) in matrices.iter().enumerate() {
            if m.ncols() != *sizes.last().unwrap() {
                return Err(ModelError::Shape(format!(
                    "layer {l} expects {} inputs, previous layer gives {}",
                    m.ncols(),
                    sizes.last().unwrap()
                )));
            }
            sizes.push(m.nrows());
        }
        let params = matrices.iter().flat_map(|m| m.iter().copied()).collect();
        Self::new(Architecture { sizes, activation, bias: false }, params)
    }

    pub fn ensure_compatible(&self, other: &ModelWeights) -> Result<(), ModelError> {
        if self.architecture != other.architecture {
            return Err(ModelError::ArchitectureMismatch(format!(
                "{:?} vs {:?}",
                self.architecture, other.architecture
            )));
        }
        Ok(())
    }

    /// Raw little-endian `f64` parameter bytes.
    pub fn params_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(|p| p.to_le_bytes()).collect()
    }

    pub fn header_json(&self) -> String {
        serde_json::to_string_pretty(&WeightsHeader {
            architecture: self.architecture.clone(),
            param_count: self.params.len(),
        })
        .expect("header serializes")
    }

    /// Decodes a descriptor JSON plus raw parameter bytes.
    pub fn from_parts(header_json: &str, raw: &[u8]) -> Result<Self, ModelError> {
        let header: WeightsHeader = serde_json::from_str(header_json)?;
        header.architecture.validate()?;
        if header.param_count != header.architecture.param_count() {
            return Err(ModelError::Shape(format!(
                "descriptor declares {} parameters, architecture implies {}",
                header.param_count,
                header.architecture.param_count()
            )));
        }
        if raw.len() != header.param_count * 8 {
            return Err(ModelError::Shape(format!(
                "expected {} parameter bytes, found {}",
                header.param_count * 8,
                raw.len()
            )));
        }
        let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(header.architecture, params)
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<(), ModelError> {
        let stem = stem.as_ref();
        std::fs::write(stem.with_extension("json"), self.header_json())?;
        std::fs::write(stem.with_extension("bin"), self.params_bytes())?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self, ModelError> {
        let stem = stem.as_ref();
        let header = std::fs::read_to_string(stem.with_extension("json"))?;
        let raw = std::fs::read(stem.with_extension("bin"))?;
        Self::from_parts(&header, &raw)
    }
}

/// Inputs with their class labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self, ModelError> {
        if inputs.nrows() == 0 || inputs.nrows() != labels.len() {
            return Err(ModelError::Shape(format!("{} input rows for {} labels", inputs.nrows(), labels.len())));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Training objective; every kind is averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub enum LossKind<'a> {
    /// `1/(2B) sum ||z - t||^2`. One-hot targets for multi-output models; a
    /// single-output model uses `+1` for class 0 and `-1` for class 1.
    Squared,
    CrossEntropy,
    /// `alpha T^2 KL(p_T || p_S) + (1 - alpha) CE(z, y)`, where both
    /// distributions are temperature softmaxes. `teacher` holds teacher logits
    /// (log-probabilities work too: softmax is shift invariant per row).
    Distill {
        temperature: f64,
        alpha: f64,
        teacher: ArrayView2<'a, f64>,
    },
}

fn check_input(w: &ModelWeights, inputs: &ArrayView2<f64>) -> Result<(), ModelError> {
    if inputs.ncols() != w.architecture.inputs() {
        return Err(ModelError::Shape(format!(
            "input width {} for a model expecting {}",
            inputs.ncols(),
            w.architecture.inputs()
        )));
    }
    Ok(())
}

fn forward_layers(w: &ModelWeights, inputs: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let spans = w.architecture.spans();
    let mut acts = Vec::with_capacity(spans.len() + 1);
    acts.push(inputs.to_owned());
    for (l, span) in spans.iter().enumerate() {
        let matrix = w.layer_matrix(l);
        let mut z = acts[l].dot(&matrix.t());
        if let Some(b) = span.bias {
            let bias = ndarray::ArrayView1::from(&w.params[b..b + span.outputs]);
            z += &bias;
        }
        if l + 1 < spans.len() && w.architecture.activation == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(z);
    }
    acts
}

/// Logits `[B][C]`.
pub fn forward(w: &ModelWeights, inputs: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
    check_input(w, &inputs)?;
    Ok(forward_layers(w, inputs).pop().unwrap())
}

/// Row-wise `softmax(z / T)`; `-inf` logits get probability 0.
pub fn softmax_t(logits: ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = Array2::from_shape_fn(logits.dim(), |ix| logits[ix] / temperature);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    softmax_t(logits, 1.0)
}

/// Row-wise `log softmax(z / T)`.
pub fn log_softmax_t(logits: ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = Array2::from_shape_fn(logits.dim(), |ix| logits[ix] / temperature);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// `sum_c p_c (ln p_c - ln q_c)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], log_p: &[f64], log_q: &[f64]) -> f64 {
    p.iter().zip(log_p).zip(log_q).filter(|((&pc, _), _)| pc > 0.0).map(|((&pc, &lp), &lq)| pc * (lp - lq)).sum()
}

/// Soft-target loss `T^2 KL(softmax(t/T) || softmax(s/T))` per row.
pub fn soft_target_loss(student: ArrayView2<f64>, teacher: ArrayView2<f64>, temperature: f64) -> Vec<f64> {
    let p_t = softmax_t(teacher, temperature);
    let log_p_t = log_softmax_t(teacher, temperature);
    let log_p_s = log_softmax_t(student, temperature);
    (0..student.nrows())
        .map(|i| {
            temperature
                * temperature
                * kl_divergence(
                    p_t.row(i).as_slice().unwrap(),
                    log_p_t.row(i).as_slice().unwrap(),
                    log_p_s.row(i).as_slice().unwrap(),
                )
        })
        .collect()
}

fn squared_target(label: usize, class: usize, outputs: usize) -> f64 {
    if outputs == 1 {
        if label == 0 {
            1.0
        } else {
            -1.0
        }
    } else if label == class {
        1.0
    } else {
        0.0
    }
}

fn check_batch(w: &ModelWeights, batch: &Batch, kind: &LossKind) -> Result<(), ModelError> {
    check_input(w, &batch.inputs)?;
    let outputs = w.architecture.outputs();
    let classes = outputs.max(2);
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::Shape(format!("label {bad} for {classes} classes")));
    }
    if !matches!(kind, LossKind::Squared) && outputs < 2 {
        return Err(ModelError::Shape("softmax losses need at least 2 outputs".into()));
    }
    if let LossKind::Distill { teacher, temperature, alpha } = kind {
        if teacher.dim() != (batch.len(), outputs) {
            return Err(ModelError::Shape(format!(
                "teacher is {:?}, student batch is {:?}",
                teacher.dim(),
                (batch.len(), outputs)
            )));
        }
        if !(*temperature > 0.0) || !(0.0..=1.0).contains(alpha) {
            return Err(ModelError::Shape(format!(
                "need T > 0 and alpha in [0, 1], got T={temperature}, alpha={alpha}"
            )));
        }
    }
    Ok(())
}

/// Batch-mean loss and its gradient with respect to the logits.
fn loss_and_logit_grad(logits: &Array2<f64>, batch: &Batch, kind: &LossKind) -> (f64, Array2<f64>) {
    let b = batch.len() as f64;
    let outputs = logits.ncols();
    match kind {
        LossKind::Squared => {
            let mut g = logits.clone();
            let mut loss = 0.0;
            for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    let r = *v - squared_target(batch.labels[i], c, outputs);
                    loss += 0.5 * r * r;
                    *v = r / b;
                }
            }
            (loss / b, g)
        }
        LossKind::CrossEntropy => {
            let logp = log_softmax_t(logits.view(), 1.0);
            let mut g = logp.mapv(f64::exp);
            let mut loss = 0.0;
            for (i, &label) in batch.labels.iter().enumerate() {
                loss -= logp[[i, label]];
                g[[i, label]] -= 1.0;
            }
            g /= b;
            (loss / b, g)
        }
        LossKind::Distill { temperature, alpha, teacher } => {
            let t = *temperature;
            let soft = soft_target_loss(logits.view(), *teacher, t);
            let p_t = softmax_t(*teacher, t);
            let p_s = softmax_t(logits.view(), t);
            let logp = log_softmax_t(logits.view(), 1.0);
            let mut g = Array2::zeros(logits.dim());
            let mut loss = 0.0;
            for (i, &label) in batch.labels.iter().enumerate() {
                loss += alpha * soft[i] - (1.0 - alpha) * logp[[i, label]];
                for c in 0..outputs {
                    let hard = logp[[i, c]].exp() - f64::from(u8::from(c == label));
                    g[[i, c]] = (alpha * t * (p_s[[i, c]] - p_t[[i, c]]) + (1.0 - alpha) * hard) / b;
                }
            }
            (loss / b, g)
        }
    }
}

pub fn loss(w: &ModelWeights, batch: &Batch, kind: &LossKind) -> Result<f64, ModelError> {
    check_batch(w, batch, kind)?;
    let logits = forward_layers(w, batch.inputs).pop().unwrap();
    Ok(loss_and_logit_grad(&logits, batch, kind).0)
}

/// Exact gradient of the batch-mean loss with respect to every parameter.
pub fn grad(w: &ModelWeights, batch: &Batch, kind: &LossKind) -> Result<Vec<f64>, ModelError> {
    Ok(loss_and_grad(w, batch, kind)?.1)
}

pub fn loss_and_grad(w: &ModelWeights, batch: &Batch, kind: &LossKind) -> Result<(f64, Vec<f64>), ModelError> {
    check_batch(w, batch, kind)?;
    let acts = forward_layers(w, batch.inputs);
    let (loss, mut delta) = loss_and_logit_grad(acts.last().unwrap(), batch, kind);
    let spans = w.architecture.spans();
    let mut g = vec![0.0; w.params.len()];
    for l in (0..spans.len()).rev() {
        let span = spans[l];
        let gw = delta.t().dot(&acts[l]);
        g[span.weight..span.weight + span.inputs * span.outputs]
            .iter_mut()
            .zip(gw.iter())
            .for_each(|(dst, &v)| *dst = v);
        if let Some(bias) = span.bias {
            for (dst, v) in g[bias..bias + span.outputs].iter_mut().zip(delta.sum_axis(Axis(0))) {
                *dst = v;
            }
        }
        if l > 0 {
            let mut back = delta.dot(&w.layer_matrix(l));
            if w.architecture.activation == Activation::Relu {
                back.zip_mut_with(&acts[l], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = back;
        }
    }
    Ok((loss, g))
}

/// `w - lr * g`
pub fn sgd_step(w: &ModelWeights, gradient: &[f64], lr: f64) -> Result<ModelWeights, ModelError> {
    let mut out = w.clone();
    sgd_step_in_place(&mut out, gradient, lr)?;
    Ok(out)
}

pub fn sgd_step_in_place(w: &mut ModelWeights, gradient: &[f64], lr: f64) -> Result<(), ModelError> {
    if gradient.len() != w.params.len() {
        return Err(ModelError::Shape(format!(
            "gradient has {} entries for {} parameters",
            gradient.len(),
            w.params.len()
        )));
    }
    w.params.iter_mut().zip(gradient).for_each(|(p, &d)| *p -= lr * d);
    Ok(())
}

/// `decay * ema + (1 - decay) * w`
pub fn ema_update(ema: &ModelWeights, w: &ModelWeights, decay: f64) -> Result<ModelWeights, ModelError> {
    ema.ensure_compatible(w)?;
    let params = ema.params.iter().zip(&w.params).map(|(&e, &x)| decay * e + (1.0 - decay) * x).collect();
    ModelWeights::new(ema.architecture.clone(), params)
}

/// Elementwise mean of compatible snapshots.
pub fn mean_weights(snapshots: &[&ModelWeights]) -> Result<ModelWeights, ModelError> {
    let first = snapshots.first().ok_or_else(|| ModelError::Shape("no snapshots to average".into()))?;
    let mut params = vec![0.0; first.params.len()];
    for s in snapshots {
        first.ensure_compatible(s)?;
        params.iter_mut().zip(&s.params).for_each(|(m, &p)| *m += p);
    }
    let k = snapshots.len() as f64;
    params.iter_mut().for_each(|m| *m /= k);
    ModelWeights::new(first.architecture.clone(), params)
}

/// Convex blend `eps * a + (1 - eps) * b`.
pub fn blend_weights(a: &ModelWeights, b: &ModelWeights, eps: f64) -> Result<ModelWeights, ModelError> {
    a.ensure_compatible(b)?;
    let params = a.params.iter().zip(&b.params).map(|(&x, &y)| eps * x + (1.0 - eps) * y).collect();
    ModelWeights::new(a.architecture.clone(), params)
}
