#![allow(dead_code)]

pub mod fixtures;
pub mod gradients;

use kfusion::{PredictionLog, SplitTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One probability row. Roughly a third of rows are quantized to quarters
/// so that argmax ties show up regularly.
pub fn random_row(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f32> {
    let quantized = rng.random_range(0..3) == 0;
    let mut raw: Vec<f64> = (0..classes)
        .map(|_| if quantized { f64::from(rng.random_range(0..4u8)) } else { rng.random::<f64>().powi(3) })
        .collect();
    if raw.iter().sum::<f64>() == 0.0 {
        raw[rng.random_range(0..classes)] = 1.0;
    }
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

pub struct LogShape {
    pub epochs: usize,
    pub examples: usize,
    pub classes: usize,
}

pub fn random_shape(rng: &mut ChaCha8Rng) -> LogShape {
    LogShape { epochs: rng.random_range(1..=12), examples: rng.random_range(1..=40), classes: rng.random_range(2..=6) }
}

pub fn random_log_with(rng: &mut ChaCha8Rng, shape: &LogShape, split: SplitTag) -> PredictionLog {
    let (epochs, examples, classes) = (shape.epochs, shape.examples, shape.classes);
    let labels: Vec<u32> = (0..examples).map(|_| rng.random_range(0..classes as u32)).collect();
    let mask = rng.random_bool(0.5).then(|| (0..examples).map(|_| rng.random_bool(0.3)).collect());
    let probs: Vec<f32> = (0..epochs * examples).flat_map(|_| random_row(rng, classes)).collect();
    PredictionLog::new(epochs, examples, classes, probs, labels, mask, split).expect("generated log is valid")
}

pub fn random_log(seed: u64) -> PredictionLog {
    let mut r = rng(seed);
    let shape = random_shape(&mut r);
    let split = [SplitTag::Train, SplitTag::Validation, SplitTag::Test][r.random_range(0..3)];
    random_log_with(&mut r, &shape, split)
}

/// Lowest index among the maximal entries, written without the library.
pub fn first_max(row: &[f64]) -> usize {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row.iter().position(|&v| v == max).unwrap()
}

pub fn correct_bits(log: &PredictionLog, epoch: usize) -> Vec<bool> {
    (0..log.examples())
        .map(|i| {
            let row: Vec<f64> = log.row(epoch, i).iter().map(|&p| f64::from(p)).collect();
            first_max(&row) == log.labels()[i] as usize
        })
        .collect()
}

pub fn accuracy_of(probs: &[f64], classes: usize, labels: &[u32]) -> usize {
    probs.chunks_exact(classes).zip(labels).filter(|(row, &l)| first_max(row) == l as usize).count()
}
