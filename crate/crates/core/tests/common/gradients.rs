use kfusion::models::{grad, loss, Batch, LossKind};
use kfusion::{Activation, Architecture, ModelWeights};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub weights: ModelWeights,
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub teacher: Array2<f64>,
    pub temperature: f64,
    pub alpha: f64,
}

pub fn instance(rng: &mut ChaCha8Rng, min_outputs: usize) -> Instance {
    let layers = rng.random_range(1..=3);
    let mut sizes: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=6)).collect();
    sizes.push(rng.random_range(min_outputs..=5));
    let arch = Architecture {
        sizes: sizes.clone(),
        activation: if rng.random_bool(0.5) { Activation::Relu } else { Activation::Identity },
        bias: rng.random_bool(0.5),
    };
    let mut weights = ModelWeights::init(arch, rng.random()).unwrap();
    for p in weights.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let b = rng.random_range(1..=6);
    let outputs = *sizes.last().unwrap();
    let classes = outputs.max(2);
    Instance {
        weights,
        inputs: Array2::from_shape_fn((b, sizes[0]), |_| rng.random_range(-2.0..2.0)),
        labels: (0..b).map(|_| rng.random_range(0..classes)).collect(),
        teacher: Array2::from_shape_fn((b, outputs), |_| rng.random_range(-3.0..3.0)),
        temperature: rng.random_range(0.5..5.0),
        alpha: rng.random_range(0.0..=1.0),
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error of the analytic gradient against central differences.
fn fd_error(w: &ModelWeights, batch: &Batch, kind: &LossKind) -> f64 {
    const H: f64 = 1e-5;
    let analytic = grad(w, batch, kind).unwrap();
    let mut numeric = vec![0.0; analytic.len()];
    for (k, slot) in numeric.iter_mut().enumerate() {
        let mut plus = w.clone();
        plus.params_mut()[k] += H;
        let mut minus = w.clone();
        minus.params_mut()[k] -= H;
        *slot = (loss(&plus, batch, kind).unwrap() - loss(&minus, batch, kind).unwrap()) / (2.0 * H);
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8)
}

pub fn gradient_check(kind_name: &str, instances: usize, seed: u64) -> f64 {
    let mut rng = super::rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let min_outputs = if kind_name == "squared" { 1 } else { 2 };
        let inst = instance(&mut rng, min_outputs);
        let labels: Vec<usize> = if inst.weights.architecture().outputs() == 1 {
            inst.labels.iter().map(|l| l % 2).collect()
        } else {
            inst.labels.clone()
        };
        let batch = Batch::new(inst.inputs.view(), &labels).unwrap();
        let kind = match kind_name {
            "squared" => LossKind::Squared,
            "cross_entropy" => LossKind::CrossEntropy,
            _ => LossKind::Distill { temperature: inst.temperature, alpha: inst.alpha, teacher: inst.teacher.view() },
        };
        worst = worst.max(fd_error(&inst.weights, &batch, &kind));
    }
    worst
}
