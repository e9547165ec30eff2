//! Forget and learn fractions, forget times and large-loss diagnostics.
//!
//! For a reference epoch `R` (the "final model", by default the last epoch):
//!
//! * `F_e` is the fraction of examples correct at epoch `e` but wrong at `R`;
//! * `L_e` is the fraction wrong at `e` but correct at `R`.
//!
//! Counting both gives `acc(R) - acc(e) = L_e - F_e` exactly, which the report
//! keeps available as integer counts.

use std::io::Write;

use crate::error::MetricsError;
use crate::log::{CorrectnessMatrix, PredictionLog};

#[derive(Debug, Clone, PartialEq)]
pub struct ForgetReport {
    pub reference_epoch: usize,
    pub examples: usize,
    pub f_curve: Vec<f64>,
    pub l_curve: Vec<f64>,
    pub acc_curve: Vec<f64>,
    /// `|{i : correct at e, wrong at R}|`
    pub forget_counts: Vec<usize>,
    /// `|{i : wrong at e, correct at R}|`
    pub learn_counts: Vec<usize>,
    pub correct_counts: Vec<usize>,
    pub forget_time: Vec<ForgetTime>,
    /// Smallest epoch maximizing `F_e`.
    pub argmax_forget_epoch: usize,
}

/// Per-example forget time relative to the reference epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForgetTime {
    /// Correct at the reference epoch, so nothing was forgotten.
    NotForgotten,
    /// Wrong at the reference epoch and at every other epoch.
    NeverCorrect,
    /// Last epoch at which the example was classified correctly.
    LastCorrect(usize),
}

impl ForgetTime {
    pub fn epoch(self) -> Option<usize> {
        match self {
            ForgetTime::LastCorrect(e) => Some(e),
            _ => None,
        }
    }
}

pub fn forget_report(log: &PredictionLog) -> ForgetReport {
    forget_report_at(log, log.epochs() - 1).expect("last epoch is always in range")
}

/// Like [`forget_report`] but against an arbitrary reference epoch, e.g. an
/// early-stopped checkpoint.
pub fn forget_report_at(log: &PredictionLog, reference: usize) -> Result<ForgetReport, MetricsError> {
    let matrix = CorrectnessMatrix::from_log(log);
    report_from_matrix(&matrix, reference)
}

pub(crate) fn report_from_matrix(matrix: &CorrectnessMatrix, reference: usize) -> Result<ForgetReport, MetricsError> {
    let epochs = matrix.epochs();
    if reference >= epochs {
        return Err(MetricsError::ReferenceOutOfRange { epoch: reference, epochs });
    }
    let n = matrix.examples();
    let final_bits = matrix.epoch(reference);
    let mut forget_counts = Vec::with_capacity(epochs);
    let mut learn_counts = Vec::with_capacity(epochs);
    let mut correct_counts = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let bits = matrix.epoch(e);
        let (mut forgot, mut learned, mut correct) = (0, 0, 0);
        for (&now, &fin) in bits.iter().zip(final_bits) {
            forgot += usize::from(now && !fin);
            learned += usize::from(!now && fin);
            correct += usize::from(now);
        }
        forget_counts.push(forgot);
        learn_counts.push(learned);
        correct_counts.push(correct);
    }
    let frac = |counts: &[usize]| counts.iter().map(|&c| c as f64 / n as f64).collect::<Vec<_>>();
    let argmax_forget_epoch = first_argmax(&forget_counts);
    Ok(ForgetReport {
        reference_epoch: reference,
        examples: n,
        f_curve: frac(&forget_counts),
        l_curve: frac(&learn_counts),
        acc_curve: frac(&correct_counts),
        forget_time: times_from_matrix(matrix, reference),
        argmax_forget_epoch,
        forget_counts,
        learn_counts,
        correct_counts,
    })
}

fn first_argmax(counts: &[usize]) -> usize {
    let mut best = 0;
    for (e, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = e;
        }
    }
    best
}

/// Forget time of every example against the last epoch.
pub fn forget_times(log: &PredictionLog) -> Vec<ForgetTime> {
    times_from_matrix(&CorrectnessMatrix::from_log(log), log.epochs() - 1)
}

fn times_from_matrix(matrix: &CorrectnessMatrix, reference: usize) -> Vec<ForgetTime> {
    (0..matrix.examples())
        .map(|i| {
            if matrix.get(reference, i) {
                return ForgetTime::NotForgotten;
            }
            (0..matrix.epochs())
                .rev()
                .find(|&e| matrix.get(e, i))
                .map_or(ForgetTime::NeverCorrect, ForgetTime::LastCorrect)
        })
        .collect()
}

/// Per-epoch counts of examples whose cross-entropy exceeds a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLossReport {
    pub threshold: f64,
    pub clean: Vec<usize>,
    pub noisy: Vec<usize>,
    /// `clean[e] - noisy[e]`
    pub difference: Vec<i64>,
}

/// Default large-loss threshold: the loss of a uniform guess, `ln C`.
pub fn default_loss_threshold(classes: usize) -> f64 {
    (classes as f64).ln()
}

pub fn noise_loss_counts(log: &PredictionLog, threshold: f64) -> Result<NoiseLossReport, MetricsError> {
    let mask = log.noise_mask().ok_or(MetricsError::MissingNoiseMask)?;
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(MetricsError::BadThreshold(threshold));
    }
    let mut clean = Vec::with_capacity(log.epochs());
    let mut noisy = Vec::with_capacity(log.epochs());
    for e in 0..log.epochs() {
        let (mut c, mut z) = (0usize, 0usize);
        for (i, &label) in log.labels().iter().enumerate() {
            let loss = -f64::from(log.row(e, i)[label as usize]).ln();
            if loss > threshold {
                if mask[i] {
                    z += 1;
                } else {
                    c += 1;
                }
            }
        }
        clean.push(c);
        noisy.push(z);
    }
    let difference = clean.iter().zip(&noisy).map(|(&c, &z)| c as i64 - z as i64).collect();
    Ok(NoiseLossReport { threshold, clean, noisy, difference })
}

impl ForgetReport {
    /// `epoch,acc,F,L`
    pub fn write_curves_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "acc", "F", "L"])?;
        for e in 0..self.f_curve.len() {
            w.write_record([
                e.to_string(),
                self.acc_curve[e].to_string(),
                self.f_curve[e].to_string(),
                self.l_curve[e].to_string(),
            ])?;
        }
        w.flush()
    }

    /// `example,forget_time` for examples wrong at the reference epoch; the
    /// time column is empty for examples that were never correct.
    pub fn write_forget_times_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["example", "forget_time"])?;
        for (i, t) in self.forget_time.iter().enumerate() {
            match t {
                ForgetTime::NotForgotten => {}
                ForgetTime::NeverCorrect => w.write_record([i.to_string(), String::new()])?,
                ForgetTime::LastCorrect(e) => w.write_record([i.to_string(), e.to_string()])?,
            }
        }
        w.flush()
    }
}

impl NoiseLossReport {
    /// `epoch,clean,noisy,difference`
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "clean", "noisy", "difference"])?;
        for e in 0..self.clean.len() {
            w.write_record([
                e.to_string(),
                self.clean[e].to_string(),
                self.noisy[e].to_string(),
                self.difference[e].to_string(),
            ])?;
        }
        w.flush()
    }
}
