//! Deep linear network dynamics.
//!
//! Binary data is rotated into the eigenbasis of its second-moment matrix
//! `X^T X / n`, whose eigenvalues `s_j` (descending) set the per-component
//! contraction `lambda_j = 1 - gamma s_j L`. A depth-`L` bias-free linear stack
//! is trained by full-batch gradient descent on `1/(2n) sum (w x_i - y_i)^2`
//! and its collapsed separator `w = W_L ... W_1` is compared with
//!
//! ```text
//! w_j(n) = lambda_j^n w0_j + (1 - lambda_j^n) wopt_j
//! ```
//!
//! which is exact for `L = 1` and first-order accurate in `gamma` for deeper
//! stacks initialised in the aligned regime (hidden layers at identity, the
//! top layer equal to a unit-norm `w0`).

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::LabError;
use crate::models::{self, Activation, Batch, LossKind, ModelWeights};

/// Data rotated into its eigenbasis with labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigenbasis {
    /// Columns are eigenvectors, ordered by descending eigenvalue.
    pub basis: Array2<f64>,
    pub spectrum: Vec<f64>,
    pub rotated: Array2<f64>,
}

impl Eigenbasis {
    pub fn of(data: ArrayView2<f64>) -> Result<Self, LabError> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(LabError::Input("empty data matrix".into()));
        }
        let x = DMatrix::from_row_iterator(n, d, data.iter().copied());
        let moment = x.transpose() * &x / n as f64;
        let eig = SymmetricEigen::new(moment);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = Array2::zeros((d, d));
        for (col, &k) in order.iter().enumerate() {
            // deterministic sign: largest-magnitude entry positive
            let v = eig.eigenvectors.column(k);
            let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for row in 0..d {
                basis[[row, col]] = sign * v[row];
            }
        }
        let spectrum = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        let rotated = data.dot(&basis);
        Ok(Self { basis, spectrum, rotated })
    }

    /// Expresses points given in the original coordinates in this basis.
    pub fn project(&self, points: ArrayView2<f64>) -> Array2<f64> {
        points.dot(&self.basis)
    }
}

/// Minimum-norm least-squares separator in the eigenbasis: `b_j / s_j` where
/// `b = X^T y / n`, and 0 on numerically null directions.
pub fn optimal_separator(rotated: ArrayView2<f64>, y: &[f64], spectrum: &[f64]) -> Vec<f64> {
    let n = rotated.nrows() as f64;
    let b = rotated.t().dot(&ArrayView1::from(y)) / n;
    let cutoff = spectrum.first().copied().unwrap_or(0.0) * 1e-12;
    b.iter().zip(spectrum).map(|(&bj, &s)| if s > cutoff { bj / s } else { 0.0 }).collect()
}

fn check_stable(spectrum: &[f64], gamma: f64, depth: usize) -> Result<(), LabError> {
    let s_max = spectrum.iter().copied().fold(0.0, f64::max);
    let product = gamma * s_max * depth as f64;
    if !(gamma > 0.0) || product >= 1.0 {
        return Err(LabError::Unstable(product));
    }
    Ok(())
}

/// `lambda_j^n w0_j + (1 - lambda_j^n) wopt_j` with `lambda_j = 1 - gamma s_j L`.
pub fn closed_form(
    w0: &[f64],
    w_opt: &[f64],
    spectrum: &[f64],
    gamma: f64,
    depth: usize,
    n: u64,
) -> Result<Vec<f64>, LabError> {
    if w0.len() != spectrum.len() || w_opt.len() != spectrum.len() {
        return Err(LabError::Input("w0, w_opt and spectrum lengths differ".into()));
    }
    check_stable(spectrum, gamma, depth)?;
    Ok(closed_form_unchecked(w0, w_opt, spectrum, gamma, depth, n))
}

fn closed_form_unchecked(w0: &[f64], w_opt: &[f64], s: &[f64], gamma: f64, depth: usize, n: u64) -> Vec<f64> {
    s.iter()
        .zip(w0.iter().zip(w_opt))
        .map(|(&sj, (&a, &b))| {
            let lambda = 1.0 - gamma * sj * depth as f64;
            let pow = match i32::try_from(n) {
                Ok(k) => lambda.powi(k),
                Err(_) => lambda.powf(n as f64),
            };
            pow * a + (1.0 - pow) * b
        })
        .collect()
}

/// Separator at initialization.
#[derive(Debug, Clone, PartialEq)]
pub enum LabInit {
    /// Uniformly random unit vector in the eigenbasis.
    Random { seed: u64 },
    /// Explicit `w0`, in the eigenbasis.
    Given(Vec<f64>),
    /// Random vector at `angle` radians from the optimum, with the
    /// optimum's norm.
    Near { seed: u64, angle: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLabRun {
    pub eigen: Eigenbasis,
    pub labels: Vec<f64>,
    pub depth: usize,
    pub gamma: f64,
    pub steps: usize,
    /// Collapsed separator after each GD step, `steps + 1` rows.
    pub trajectory: Vec<Vec<f64>>,
    pub closed_form: Vec<Vec<f64>>,
    pub w0: Vec<f64>,
    pub w_opt: Vec<f64>,
}

impl LinearLabRun {
    pub fn spectrum(&self) -> &[f64] {
        &self.eigen.spectrum
    }

    /// Largest `|gd_j - cf_j|` over all steps and components, divided by the
    /// largest `|cf_j|` on the closed-form track.
    /// Largest `|gd - cf|` over every step and component, relative to the
    /// largest closed-form magnitude.
    pub fn max_component_error(&self) -> f64 {
        let scale = self.closed_form.iter().flatten().fold(0.0f64, |m, &v| m.max(v.abs()));
        let err = self
            .trajectory
            .iter()
            .zip(&self.closed_form)
            .flat_map(|(g, c)| g.iter().zip(c).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        err / scale
    }

    /// Largest per-step `||gd - cf|| / ||cf||`.
    pub fn max_relative_deviation(&self) -> f64 {
        self.trajectory
            .iter()
            .zip(&self.closed_form)
            .map(|(g, c)| {
                let diff: f64 = g.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                diff / norm(c)
            })
            .fold(0.0, f64::max)
    }

    /// `(step, component, gd_value, closed_form_value)`
    pub fn write_trajectory_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "component", "gd_value", "closed_form_value"])?;
        for (step, (g, c)) in self.trajectory.iter().zip(&self.closed_form).enumerate() {
            for (j, (a, b)) in g.iter().zip(c).enumerate() {
                w.write_record([step.to_string(), j.to_string(), a.to_string(), b.to_string()])?;
            }
        }
        w.flush()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_unit(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let len = norm(&v);
        if len > 1e-12 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

/// Product `W_L ... W_1` as a row vector.
pub fn collapse(w: &ModelWeights) -> Vec<f64> {
    let layers = w.architecture().layers();
    let mut prod = w.layer_matrix(layers - 1).to_owned();
    for l in (0..layers - 1).rev() {
        prod = prod.dot(&w.layer_matrix(l));
    }
    prod.into_raw_vec_and_offset().0
}

/// Identity hidden layers under a top layer equal to `w0`, so the stack
/// collapses to `w0` exactly.
pub fn aligned_stack(w0: &[f64], depth: usize) -> Result<ModelWeights, LabError> {
    if depth == 0 {
        return Err(LabError::Input("depth must be at least 1".into()));
    }
    let d = w0.len();
    let mut layers: Vec<Array2<f64>> = (0..depth - 1).map(|_| Array2::eye(d)).collect();
    layers.push(Array2::from_shape_vec((1, d), w0.to_vec()).expect("row vector"));
    Ok(ModelWeights::from_matrices(Activation::Identity, &layers)?)
}

pub fn gd_trajectory(
    data: ArrayView2<f64>,
    y: &[f64],
    depth: usize,
    gamma: f64,
    steps: usize,
    seed: u64,
) -> Result<LinearLabRun, LabError> {
    gd_trajectory_with(data, y, depth, gamma, steps, LabInit::Random { seed })
}

fn rotate_toward_random(w: &[f64], angle: f64, seed: u64) -> Result<Vec<f64>, LabError> {
    let size = norm(w);
    if !(size > 0.0) || w.len() < 2 || !angle.is_finite() {
        return Err(LabError::Input("near init needs a nonzero optimum in >= 2 dimensions and a finite angle".into()));
    }
    let unit: Vec<f64> = w.iter().map(|v| v / size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ortho, mut len) = (Vec::new(), 0.0);
    while !(len > 1e-6) {
        let z: Vec<f64> = (0..w.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let along = dot(&z, &unit);
        ortho = z.iter().zip(&unit).map(|(a, u)| a - along * u).collect();
        len = norm(&ortho);
    }
    Ok(unit.iter().zip(&ortho).map(|(u, o)| size * (angle.cos() * u + angle.sin() * o / len)).collect())
}

/// Full-batch GD on the layered squared loss, recording the collapsed
/// separator after every step alongside the closed-form prediction.
pub fn gd_trajectory_with(
    data: ArrayView2<f64>,
    y: &[f64],
    depth: usize,
    gamma: f64,
    steps: usize,
    init: LabInit,
) -> Result<LinearLabRun, LabError> {
    if y.len() != data.nrows() {
        return Err(LabError::Input(format!("{} labels for {} points", y.len(), data.nrows())));
    }
    if let Some(bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(LabError::Input(format!("label {bad} is not +1 or -1")));
    }
    let eigen = Eigenbasis::of(data)?;
    let d = eigen.spectrum.len();
    check_stable(&eigen.spectrum, gamma, depth)?;
    let w_opt = optimal_separator(eigen.rotated.view(), y, &eigen.spectrum);
    let w0 = match init {
        LabInit::Random { seed } => random_unit(d, seed),
        LabInit::Given(w) if w.len() == d => w,
        LabInit::Given(w) => return Err(LabError::Input(format!("w0 has {} entries for {d} dimensions", w.len()))),
        LabInit::Near { seed, angle } => rotate_toward_random(&w_opt, angle, seed)?,
    };
    let classes: Vec<usize> = y.iter().map(|&v| usize::from(v < 0.0)).collect();
    let batch = Batch::new(eigen.rotated.view(), &classes)?;
    let mut weights = aligned_stack(&w0, depth)?;
    let initial = norm(&w0);
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(collapse(&weights));
    for step in 1..=steps {
        let g = models::grad(&weights, &batch, &LossKind::Squared)?;
        models::sgd_step_in_place(&mut weights, &g, gamma)?;
        let w = collapse(&weights);
        let size = norm(&w);
        if !size.is_finite() || size > 10.0 * initial {
            return Err(LabError::Diverged { step, norm: size, initial });
        }
        trajectory.push(w);
    }
    let closed_form =
        (0..=steps as u64).map(|n| closed_form_unchecked(&w0, &w_opt, &eigen.spectrum, gamma, depth, n)).collect();
    Ok(LinearLabRun { eigen, labels: y.to_vec(), depth, gamma, steps, trajectory, closed_form, w0, w_opt })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgetTimePrediction {
    /// Correct at initialization and wrong after the last step.
    pub forgotten: bool,
    /// First step whose margin is `<= 0`, with all earlier margins positive.
    pub forget_time: Option<usize>,
    pub initial_margin: f64,
    pub final_margin: f64,
    /// First-order `dF/dn = -gamma y L sum_j (w0_j - wopt_j) s_j x_j`.
    pub rate: f64,
    /// `F(0) / |rate|` when the margin is shrinking.
    pub predicted_crossing: Option<f64>,
}

/// Margin `w(n) . y x` along the recorded GD trajectory.
pub fn margins(run: &LinearLabRun, point: &[f64], label: f64) -> Vec<f64> {
    run.trajectory.iter().map(|w| label * dot(w, point)).collect()
}

/// Per-point forgetting analysis; `points` must already be in the run's
/// eigenbasis (see [`Eigenbasis::project`]).
pub fn forget_analysis(run: &LinearLabRun, points: ArrayView2<f64>, labels: &[f64]) -> Vec<ForgetTimePrediction> {
    let delta: Vec<f64> = run.w0.iter().zip(&run.w_opt).map(|(a, b)| a - b).collect();
    points
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let x = row.to_vec();
            let m = margins(run, &x, y);
            let initial = m[0];
            let last = *m.last().unwrap();
            let forgotten = initial > 0.0 && last < 0.0;
            let forget_time = if forgotten { m.iter().position(|&v| v <= 0.0) } else { None };
            let rate = -run.gamma
                * y
                * run.depth as f64
                * delta.iter().zip(run.spectrum()).zip(&x).map(|((dj, sj), xj)| dj * sj * xj).sum::<f64>();
            ForgetTimePrediction {
                forgotten,
                forget_time,
                initial_margin: initial,
                final_margin: last,
                rate,
                predicted_crossing: (rate < 0.0).then(|| initial / rate.abs()),
            }
        })
        .collect()
}

/// One-step margin change on the closed-form track at step `n`.
pub fn closed_form_margin_step(run: &LinearLabRun, point: &[f64], label: f64, n: usize) -> f64 {
    label * (dot(&run.closed_form[n + 1], point) - dot(&run.closed_form[n], point))
}

/// `(point, forgotten, empirical_forget_time, rate, predicted_crossing)`
pub fn write_forget_csv<W: Write>(predictions: &[ForgetTimePrediction], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["point", "forgotten", "empirical_forget_time", "rate", "predicted_crossing"])?;
    for (i, p) in predictions.iter().enumerate() {
        w.write_record([
            i.to_string(),
            p.forgotten.to_string(),
            p.forget_time.map(|t| t.to_string()).unwrap_or_default(),
            p.rate.to_string(),
            p.predicted_crossing.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
}

/// Synthetic binary data for the lab.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabDataSpec {
    pub points: usize,
    pub dim: usize,
    /// Standard deviation of axis `j` is `decay^j` before a random rotation.
    pub spectrum_decay: f64,
    /// Fraction of labels flipped after labelling by a random hyperplane.
    pub label_flip: f64,
    /// Rescale the data so the optimal separator has unit norm.
    #[serde(default = "yes")]
    pub unit_optimum: bool,
}

fn yes() -> bool {
    true
}

pub fn synthetic_data(spec: &LabDataSpec, seed: u64) -> Result<(Array2<f64>, Vec<f64>), LabError> {
    if spec.points == 0 || spec.dim == 0 || !(spec.spectrum_decay > 0.0) {
        return Err(LabError::Input("need points, dim >= 1 and a positive decay".into()));
    }
    if !(0.0..0.5).contains(&spec.label_flip) {
        return Err(LabError::Input(format!("label flip {} outside [0, 0.5)", spec.label_flip)));
    }
    let (n, d) = (spec.points, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array2::from_shape_fn((n, d), |(_, j)| {
        let z: f64 = rng.sample(StandardNormal);
        z * spec.spectrum_decay.powi(j as i32)
    });
    // random orthogonal rotation via QR of a Gaussian matrix
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let rot = Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)]);
    data = data.dot(&rot);
    let normal = random_unit(d, rng.random());
    let mut y: Vec<f64> = data
        .rows()
        .into_iter()
        .map(|r| if r.dot(&ndarray::ArrayView1::from(&normal[..])) >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    let flips = (spec.label_flip * n as f64).floor() as usize;
    for i in rand::seq::index::sample(&mut rng, n, flips) {
        y[i] = -y[i];
    }
    if spec.unit_optimum {
        let eigen = Eigenbasis::of(data.view())?;
        let size = norm(&optimal_separator(eigen.rotated.view(), &y, &eigen.spectrum));
        if size > 0.0 {
            // scaling X by c scales the optimum by 1/c
            data *= size;
        }
    }
    Ok((data, y))
}

/// How the lab picks `w0`.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    #[default]
    Random,
    Near {
        angle: f64,
    },
}

/// A complete lab experiment: synthetic data, network depth and GD schedule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub seed: u64,
    pub data: LabDataSpec,
    pub depth: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub steps: usize,
    #[serde(default)]
    pub init: InitSpec,
}

fn default_gamma() -> f64 {
    1e-3
}

/// Trajectory plus the forgetting analysis of every training point.
#[derive(Debug, Clone)]
pub struct LabOutcome {
    pub run: LinearLabRun,
    pub predictions: Vec<ForgetTimePrediction>,
}

impl LabConfig {
    /// Parses TOML, or JSON when `json` is set.
    pub fn parse(text: &str, json: bool) -> Result<Self, LabError> {
        let cfg: Self = if json {
            serde_json::from_str(text).map_err(|e| LabError::Input(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| LabError::Input(e.to_string()))?
        };
        if cfg.depth == 0 || cfg.steps == 0 {
            return Err(LabError::Input("depth and steps must be at least 1".into()));
        }
        if !(cfg.gamma > 0.0) || !cfg.gamma.is_finite() {
            return Err(LabError::Input(format!("gamma must be positive, got {}", cfg.gamma)));
        }
        Ok(cfg)
    }

    pub fn run(&self) -> Result<LabOutcome, LabError> {
        let (x, y) = synthetic_data(&self.data, self.seed)?;
        let init = match self.init {
            InitSpec::Random => LabInit::Random { seed: self.seed },
            InitSpec::Near { angle } => LabInit::Near { seed: self.seed, angle },
        };
        let run = gd_trajectory_with(x.view(), &y, self.depth, self.gamma, self.steps, init)?;
        let predictions = forget_analysis(&run, run.eigen.rotated.view(), &y);
        Ok(LabOutcome { run, predictions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_steps_is_w0() {
        let w = closed_form(&[0.3, -2.0], &[1.0, 1.0], &[2.0, 1.0], 0.01, 2, 0).unwrap();
        assert_eq!(w, vec![0.3, -2.0]);
    }

    #[test]
    fn long_horizon_reaches_optimum() {
        // gamma s L = 0.1, so lambda = 0.9
        let w = closed_form(&[5.0], &[-1.0], &[1.0], 0.1, 1, 1_000_000).unwrap();
        assert!((w[0] + 1.0).abs() <= 1e-40 * 6.0);
    }

    #[test]
    fn scalar_recurrence() {
        let mut w = 1.0f64;
        for _ in 0..100 {
            w -= 0.01 * (w - -1.0);
        }
        let cf = closed_form(&[1.0], &[-1.0], &[1.0], 0.01, 1, 100).unwrap();
        assert!((cf[0] - w).abs() < 1e-12);
        assert!((cf[0] - (2.0 * 0.99f64.powi(100) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn instability_reports_product() {
        match closed_form(&[1.0], &[0.0], &[100.0], 0.01, 2, 3) {
            Err(LabError::Unstable(p)) => assert!((p - 2.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eigenbasis_sorted_and_whitening() {
        let x = array![[2.0, 0.0], [0.0, 1.0], [-2.0, 0.0], [0.0, -1.0]];
        let e = Eigenbasis::of(x.view()).unwrap();
        assert!((e.spectrum[0] - 2.0).abs() < 1e-12);
        assert!((e.spectrum[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aligned_stack_collapses_to_w0() {
        let w0 = [0.6, -0.8, 0.0];
        for depth in 1..=3 {
            let w = aligned_stack(&w0, depth).unwrap();
            assert_eq!(collapse(&w), w0.to_vec());
        }
    }

    #[test]
    fn whitened_components_share_a_rate() {
        // second moment is the identity, so every lambda_j is equal
        let x = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        let y = [1.0, 1.0, -1.0, 1.0];
        let run = gd_trajectory_with(x.view(), &y, 1, 0.01, 50, LabInit::Given(vec![0.5, 0.5])).unwrap();
        let e = &run.eigen;
        assert!((e.spectrum[0] - e.spectrum[1]).abs() < 1e-12);
        let gap0: Vec<f64> = run.w0.iter().zip(&run.w_opt).map(|(a, b)| a - b).collect();
        let last = &run.trajectory[50];
        let ratios: Vec<f64> = (0..2).map(|j| (last[j] - run.w_opt[j]) / gap0[j]).collect();
        assert!((ratios[0] - ratios[1]).abs() < 1e-12);
        assert!((ratios[0] - 0.995f64.powi(50)).abs() < 1e-12);
    }

    #[test]
    fn lab_data_optimum_is_unit() {
        let spec = LabDataSpec { points: 200, dim: 5, spectrum_decay: 0.7, label_flip: 0.1, unit_optimum: true };
        let (x, y) = synthetic_data(&spec, 9).unwrap();
        let e = Eigenbasis::of(x.view()).unwrap();
        let w = optimal_separator(e.rotated.view(), &y, &e.spectrum);
        assert!((norm(&w) - 1.0).abs() < 1e-9);
        assert!(e.spectrum.windows(2).all(|p| p[0] >= p[1]));
    }
}
