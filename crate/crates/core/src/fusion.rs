//! Knowledge Fusion: validation-driven blending of checkpoint predictions.
//!
//! [`fit_plan`] selects alternative epochs one round at a time. Each round
//! picks the explorable epoch that classifies correctly the most examples the
//! current fused predictor gets wrong, averages the checkpoints in a window
//! around it, and searches a blend weight on a grid. [`fuse`] replays a fitted
//! plan on any log from the same run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::FusionError;
use crate::log::{argmax, PredictionLog};

/// One selected epoch and its blend weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionPair {
    pub epoch: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub reference_epoch: usize,
    pub window: usize,
    pub pairs: Vec<FusionPair>,
}

impl FusionPlan {
    pub fn alternative_epochs(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.epoch).collect()
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.epsilon).collect()
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        for (i, a) in self.pairs.iter().enumerate() {
            if !(0.0..=1.0).contains(&a.epsilon) {
                return Err(FusionError::BadEpsilon(a.epsilon));
            }
            for b in &self.pairs[i + 1..] {
                if a.epoch.abs_diff(b.epoch) < 2 {
                    return Err(FusionError::EpochsTooClose(a.epoch, b.epoch));
                }
            }
        }
        Ok(())
    }

    /// Epochs whose probabilities carry nonzero weight in the fused output.
    pub fn checkpoints(&self, epochs: usize) -> Vec<usize> {
        let mut used = vec![false; epochs];
        if self.reference_epoch < epochs {
            used[self.reference_epoch] = true;
        }
        for pair in self.pairs.iter().filter(|p| p.epsilon > 0.0) {
            for e in window_range(pair.epoch, self.window, epochs) {
                used[e] = true;
            }
        }
        used.iter().enumerate().filter(|(_, &u)| u).map(|(e, _)| e).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FusionError> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

/// Which checkpoint plays the role of the final model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceChoice {
    #[default]
    Last,
    /// Epoch with the highest accuracy on the log being fit (earliest on ties).
    BestAccuracy,
    Epoch(usize),
}

impl ReferenceChoice {
    pub fn resolve(self, log: &PredictionLog) -> Result<usize, FusionError> {
        match self {
            ReferenceChoice::Last => Ok(log.epochs() - 1),
            ReferenceChoice::BestAccuracy => Ok(best_accuracy_epoch(log)),
            ReferenceChoice::Epoch(e) if e < log.epochs() => Ok(e),
            ReferenceChoice::Epoch(e) => Err(FusionError::EpochOutOfRange { epoch: e, epochs: log.epochs() }),
        }
    }
}

/// Earliest epoch with maximal accuracy.
pub fn best_accuracy_epoch(log: &PredictionLog) -> usize {
    let counts: Vec<usize> =
        (0..log.epochs()).map(|e| correct_count(log.epoch_slice(e), log.labels(), log.classes())).collect();
    let mut best = 0;
    for (e, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = e;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Half-width of the checkpoint window around each selected epoch.
    pub window: usize,
    pub eps_step: f64,
    pub max_rounds: usize,
    /// Stop after this many consecutive rounds that chose epsilon = 0.
    pub patience: usize,
    pub reference: ReferenceChoice,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { window: 1, eps_step: 0.01, max_rounds: 20, patience: 3, reference: ReferenceChoice::Last }
    }
}

/// Whether windows reaching past the recorded history are truncated or refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowEdges {
    #[default]
    Clamp,
    Strict,
}

/// Fused class probabilities, `N*C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedProbs {
    pub examples: usize,
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl FusedProbs {
    pub fn row(&self, example: usize) -> &[f64] {
        &self.probs[example * self.classes..(example + 1) * self.classes]
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.chunks_exact(self.classes).map(argmax).collect()
    }

    pub fn correct_count(&self, labels: &[u32]) -> usize {
        correct_count(&self.probs, labels, self.classes)
    }

    pub fn accuracy(&self, labels: &[u32]) -> f64 {
        self.correct_count(labels) as f64 / labels.len() as f64
    }
}

fn correct_count<T: PartialOrd + Copy>(probs: &[T], labels: &[u32], classes: usize) -> usize {
    probs.chunks_exact(classes).zip(labels).filter(|(row, &label)| argmax(row) == label as usize).count()
}

fn window_range(center: usize, window: usize, epochs: usize) -> std::ops::RangeInclusive<usize> {
    center.saturating_sub(window)..=(center + window).min(epochs - 1)
}

fn window_mean(log: &PredictionLog, center: usize, window: usize) -> Vec<f64> {
    let range = window_range(center, window, log.epochs());
    let count = range.clone().count() as f64;
    let mut mean = vec![0.0; log.examples() * log.classes()];
    for e in range {
        for (m, &p) in mean.iter_mut().zip(log.epoch_slice(e)) {
            *m += f64::from(p);
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    mean
}

fn blend_into(out: &mut [f64], alt: &[f64], current: &[f64], eps: f64) {
    for ((o, &a), &c) in out.iter_mut().zip(alt).zip(current) {
        *o = eps * a + (1.0 - eps) * c;
    }
}

/// Ascending grid `{0, step, 2 step, ..., 1}`; 1 is always included.
pub fn epsilon_grid(step: f64) -> Result<Vec<f64>, FusionError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(FusionError::BadEpsStep(step));
    }
    let steps = (1.0 / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=steps).map(|k| (k as f64 * step).min(1.0)).collect();
    if 1.0 - grid[grid.len() - 1] > 1e-12 {
        grid.push(1.0);
    } else {
        *grid.last_mut().unwrap() = 1.0;
    }
    Ok(grid)
}

/// Fits a fusion plan on a validation log.
///
/// The epsilon chosen each round maximizes validation accuracy; among several
/// maximizers the largest wins, and a round that cannot strictly beat the
/// current predictor records epsilon = 0. Fused accuracy therefore never drops
/// below the reference epoch's accuracy on `val_log`.
pub fn fit_plan(val_log: &PredictionLog, options: &FitOptions) -> Result<FusionPlan, FusionError> {
    let epochs = val_log.epochs();
    if epochs < 2 {
        return Err(FusionError::TooFewEpochs(epochs));
    }
    let grid = epsilon_grid(options.eps_step)?;
    let reference = options.reference.resolve(val_log)?;
    let labels = val_log.labels();
    let classes = val_log.classes();

    let checkpoint_bits: Vec<Vec<bool>> = (0..epochs)
        .map(|e| {
            val_log
                .epoch_slice(e)
                .chunks_exact(classes)
                .zip(labels)
                .map(|(row, &l)| argmax(row) == l as usize)
                .collect()
        })
        .collect();

    let mut current = val_log.epoch_f64(reference);
    let mut current_correct = correct_count(&current, labels, classes);
    let mut explore = vec![true; epochs];
    let mut pairs = Vec::new();
    let mut zero_streak = 0;
    let mut scratch = vec![0.0; current.len()];

    while explore.iter().any(|&x| x) && pairs.len() < options.max_rounds {
        let fused_bits: Vec<bool> =
            current.chunks_exact(classes).zip(labels).map(|(row, &l)| argmax(row) == l as usize).collect();
        let forget = checkpoint_bits.iter().map(|bits| bits.iter().zip(&fused_bits).filter(|(&b, &f)| b && !f).count());
        let mut alt = None;
        for (e, f) in forget.enumerate() {
            if explore[e] && alt.is_none_or(|(_, best)| f > best) {
                alt = Some((e, f));
            }
        }
        let (alt, _) = alt.expect("explore set is non-empty");
        explore[alt.saturating_sub(1)..=(alt + 1).min(epochs - 1)].fill(false);

        let alt_probs = window_mean(val_log, alt, options.window);
        let mut best_eps = 0.0;
        let mut best_correct = current_correct;
        for &eps in grid.iter().skip(1) {
            blend_into(&mut scratch, &alt_probs, &current, eps);
            let correct = correct_count(&scratch, labels, classes);
            if correct > current_correct && correct >= best_correct {
                best_eps = eps;
                best_correct = correct;
            }
        }
        if best_eps > 0.0 {
            blend_into(&mut scratch, &alt_probs, &current, best_eps);
            std::mem::swap(&mut current, &mut scratch);
            current_correct = best_correct;
            zero_streak = 0;
        } else {
            zero_streak += 1;
        }
        pairs.push(FusionPair { epoch: alt, epsilon: best_eps });
        if zero_streak >= options.patience {
            break;
        }
    }

    Ok(FusionPlan { reference_epoch: reference, window: options.window, pairs })
}

/// Applies a plan to a log, truncating windows at the history boundaries.
pub fn fuse(plan: &FusionPlan, log: &PredictionLog) -> Result<FusedProbs, FusionError> {
    fuse_with(plan, log, WindowEdges::Clamp)
}

pub fn fuse_with(plan: &FusionPlan, log: &PredictionLog, edges: WindowEdges) -> Result<FusedProbs, FusionError> {
    plan.validate()?;
    let epochs = log.epochs();
    let check = |epoch: usize| {
        if epoch < epochs {
            Ok(())
        } else {
            Err(FusionError::EpochOutOfRange { epoch, epochs })
        }
    };
    check(plan.reference_epoch)?;
    for pair in &plan.pairs {
        check(pair.epoch)?;
        if edges == WindowEdges::Strict && (pair.epoch < plan.window || pair.epoch + plan.window >= epochs) {
            return Err(FusionError::WindowOutOfRange { center: pair.epoch, window: plan.window, epochs });
        }
    }
    let mut prob = log.epoch_f64(plan.reference_epoch);
    let mut next = vec![0.0; prob.len()];
    for pair in &plan.pairs {
        let alt = window_mean(log, pair.epoch, plan.window);
        blend_into(&mut next, &alt, &prob, pair.epsilon);
        std::mem::swap(&mut prob, &mut next);
    }
    Ok(FusedProbs { examples: log.examples(), classes: log.classes(), probs: prob })
}

fn uniform_mean(log: &PredictionLog, epochs: &[usize]) -> FusedProbs {
    let mut probs = vec![0.0; log.examples() * log.classes()];
    for &e in epochs {
        for (m, &p) in probs.iter_mut().zip(log.epoch_slice(e)) {
            *m += f64::from(p);
        }
    }
    let k = epochs.len() as f64;
    probs.iter_mut().for_each(|m| *m /= k);
    FusedProbs { examples: log.examples(), classes: log.classes(), probs }
}

/// Uniform mean of the last `k` epochs.
pub fn horizontal_ensemble(log: &PredictionLog, k: usize) -> Result<FusedProbs, FusionError> {
    let epochs = log.epochs();
    if k == 0 || k > epochs {
        return Err(FusionError::BadCount { k, max: epochs });
    }
    Ok(uniform_mean(log, &(epochs - k..epochs).collect::<Vec<_>>()))
}

/// Epochs `round(j (E-1) / (k-1))` for `j = 0..k`, or just the last epoch
/// when `k = 1`. Halves round up.
pub fn fixed_jump_epochs(epochs: usize, k: usize) -> Result<Vec<usize>, FusionError> {
    if k == 0 || k > epochs {
        return Err(FusionError::BadCount { k, max: epochs });
    }
    if k == 1 {
        return Ok(vec![epochs - 1]);
    }
    let span = epochs - 1;
    let gaps = k - 1;
    Ok((0..k).map(|j| (2 * j * span + gaps) / (2 * gaps)).collect())
}

/// Uniform mean of `k` checkpoints equally spaced through training.
pub fn fixed_jumps_ensemble(log: &PredictionLog, k: usize) -> Result<FusedProbs, FusionError> {
    Ok(uniform_mean(log, &fixed_jump_epochs(log.epochs(), k)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::SplitTag;

    fn two_class(epochs: &[&[[f32; 2]]], labels: Vec<u32>) -> PredictionLog {
        let probs = epochs.iter().flat_map(|e| e.iter().flatten().copied()).collect();
        PredictionLog::new(epochs.len(), labels.len(), 2, probs, labels, None, SplitTag::Validation).unwrap()
    }

    #[test]
    fn grid_is_ascending_and_closed() {
        let g = epsilon_grid(0.01).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[100], 1.0);
        assert_eq!(epsilon_grid(0.3).unwrap(), vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
        assert!(epsilon_grid(0.0).is_err());
        assert!(epsilon_grid(1.5).is_err());
    }

    #[test]
    fn identical_epochs_give_zero_epsilons() {
        let e: &[[f32; 2]] = &[[0.7, 0.3], [0.6, 0.4], [0.2, 0.8]];
        let log = two_class(&[e, e, e, e], vec![0, 1, 1]);
        let plan = fit_plan(&log, &FitOptions::default()).unwrap();
        assert!(plan.pairs.iter().all(|p| p.epsilon == 0.0));
        let fused = fuse(&plan, &log).unwrap();
        assert_eq!(fused.correct_count(log.labels()), 2);
    }

    #[test]
    fn degenerate_log_refused() {
        let log = two_class(&[&[[0.5, 0.5]]], vec![0]);
        assert!(matches!(fit_plan(&log, &FitOptions::default()), Err(FusionError::TooFewEpochs(1))));
    }

    #[test]
    fn endpoints_of_the_blend() {
        let log =
            two_class(&[&[[0.9, 0.1], [0.4, 0.6]], &[[0.2, 0.8], [0.3, 0.7]], &[[0.6, 0.4], [0.1, 0.9]]], vec![0, 1]);
        let full = FusionPlan { reference_epoch: 2, window: 0, pairs: vec![FusionPair { epoch: 0, epsilon: 1.0 }] };
        assert_eq!(fuse(&full, &log).unwrap().probs, log.epoch_f64(0));
        let none = FusionPlan { pairs: vec![FusionPair { epoch: 0, epsilon: 0.0 }], ..full.clone() };
        assert_eq!(fuse(&none, &log).unwrap().probs, log.epoch_f64(2));
    }

    #[test]
    fn strict_edges_refuse_overhang() {
        let log = two_class(&[&[[0.9, 0.1]], &[[0.2, 0.8]], &[[0.6, 0.4]]], vec![0]);
        let plan = FusionPlan { reference_epoch: 2, window: 1, pairs: vec![FusionPair { epoch: 0, epsilon: 0.5 }] };
        assert!(fuse_with(&plan, &log, WindowEdges::Strict).is_err());
        let fused = fuse_with(&plan, &log, WindowEdges::Clamp).unwrap();
        // window over epochs {0, 1}
        let alt0 = (0.9 + 0.2) / 2.0;
        assert!((fused.probs[0] - (0.5 * alt0 + 0.5 * 0.6)).abs() < 1e-7);
    }

    #[test]
    fn plan_json_round_trip_and_validation() {
        let plan = FusionPlan {
            reference_epoch: 9,
            window: 1,
            pairs: vec![FusionPair { epoch: 3, epsilon: 0.25 }, FusionPair { epoch: 6, epsilon: 0.0 }],
        };
        assert_eq!(FusionPlan::from_json(&plan.to_json()).unwrap(), plan);
        let close = r#"{"reference_epoch":5,"window":1,"pairs":[{"epoch":2,"epsilon":0.1},{"epoch":3,"epsilon":0.1}]}"#;
        assert!(matches!(FusionPlan::from_json(close), Err(FusionError::EpochsTooClose(2, 3))));
        let bad = r#"{"reference_epoch":5,"window":1,"pairs":[{"epoch":2,"epsilon":1.5}]}"#;
        assert!(matches!(FusionPlan::from_json(bad), Err(FusionError::BadEpsilon(_))));
    }

    #[test]
    fn baselines() {
        let log = two_class(&[&[[0.9, 0.1]], &[[0.2, 0.8]], &[[0.6, 0.4]]], vec![0]);
        assert_eq!(horizontal_ensemble(&log, 1).unwrap().probs, log.epoch_f64(2));
        assert!(horizontal_ensemble(&log, 0).is_err());
        assert!(horizontal_ensemble(&log, 4).is_err());
        assert_eq!(fixed_jump_epochs(10, 1).unwrap(), vec![9]);
        assert_eq!(fixed_jump_epochs(10, 2).unwrap(), vec![0, 9]);
        assert_eq!(fixed_jump_epochs(10, 4).unwrap(), vec![0, 3, 6, 9]);
        assert_eq!(fixed_jump_epochs(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        let two = two_class(&[&[[0.9, 0.1]], &[[0.2, 0.8]]], vec![0]);
        let mean = horizontal_ensemble(&two, 2).unwrap();
        assert!((mean.probs[0] - 0.55).abs() < 1e-7);
    }

    #[test]
    fn checkpoints_used_by_plan() {
        let plan = FusionPlan {
            reference_epoch: 9,
            window: 1,
            pairs: vec![
                FusionPair { epoch: 0, epsilon: 0.4 },
                FusionPair { epoch: 5, epsilon: 0.0 },
                FusionPair { epoch: 8, epsilon: 0.1 },
            ],
        };
        assert_eq!(plan.checkpoints(10), vec![0, 1, 7, 8, 9]);
    }
}
