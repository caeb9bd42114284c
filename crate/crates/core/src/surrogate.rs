//! Gaussian-process regression with a Matérn-5/2 ARD kernel, fitted by
//! maximizing the log marginal likelihood, and the expected-improvement
//! acquisition value for minimization.
//!
//! Inputs are expected in `[0, 1]^d`. Targets are standardized internally;
//! [`GpModel::predict`] answers on the original scale.

use argmin::core::{CostFunction, Error as ArgminError, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::rng::rng_from;

pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-2;
pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-3, 10.0);
pub const SIGNAL_BOUNDS: (f64, f64) = (1e-3, 1e3);
pub const NOISE_BOUNDS: (f64, f64) = (1e-6, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("at least 2 training points required, got {0}")]
    TooFewPoints(usize),
    #[error("training inputs must be non-empty rows of equal length")]
    Shape,
    #[error("training data contains non-finite values")]
    NonFinite,
    #[error("covariance not positive definite even with jitter {0:e}")]
    NotPositiveDefinite(f64),
}

/// Kernel hyperparameters, on the standardized target scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub starts: usize,
    pub iterations: u64,
    /// Replaces the fixed central start point, e.g. with a previous optimum.
    pub initial: Option<Hyperparameters>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            iterations: 200,
            initial: None,
        }
    }
}

impl FitOptions {
    /// One local search from `previous`.
    pub fn warm(previous: &Hyperparameters, iterations: u64) -> Self {
        Self {
            starts: 1,
            iterations,
            initial: Some(previous.clone()),
        }
    }
}

/// Matérn-5/2 correlation at scaled distance `r`.
fn matern52(r: f64) -> f64 {
    let s = 5f64.sqrt() * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

fn scaled_distance(a: &[f64], b: &[f64], lengthscales: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Squared per-dimension differences for every pair `i < j`.
struct PairDiffs {
    n: usize,
    d: usize,
    sq: Vec<f64>,
}

impl PairDiffs {
    fn new(x: &[Vec<f64>]) -> Self {
        let n = x.len();
        let d = x[0].len();
        let mut sq = Vec::with_capacity(n * (n - 1) / 2 * d);
        for i in 0..n {
            for j in 0..i {
                sq.extend(x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)));
            }
        }
        Self { n, d, sq }
    }

    fn covariance(&self, h: &Hyperparameters, diag_extra: f64) -> DMatrix<f64> {
        let inv: Vec<f64> = h.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let mut k = DMatrix::zeros(self.n, self.n);
        let mut off = 0;
        for i in 0..self.n {
            for j in 0..i {
                let r2: f64 = self.sq[off..off + self.d]
                    .iter()
                    .zip(&inv)
                    .map(|(a, b)| a * b)
                    .sum();
                off += self.d;
                let v = h.signal_variance * matern52(r2.sqrt());
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] = h.signal_variance + h.noise_variance + diag_extra;
        }
        k
    }
}

/// Lower Cholesky factor, escalating the jitter ×10 from `JITTER_START`.
fn factorize(
    diffs: &PairDiffs,
    h: &Hyperparameters,
) -> Result<(DMatrix<f64>, f64), SurrogateError> {
    if let Some(c) = diffs.covariance(h, 0.0).cholesky() {
        return Ok((c.unpack(), 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        if let Some(c) = diffs.covariance(h, jitter).cholesky() {
            return Ok((c.unpack(), jitter));
        }
        jitter *= 10.0;
    }
    Err(SurrogateError::NotPositiveDefinite(JITTER_MAX))
}

fn log_likelihood(l: &DMatrix<f64>, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let z = l.solve_lower_triangular(y).expect("non-singular factor");
    let alpha = l
        .tr_solve_lower_triangular(&z)
        .expect("non-singular factor");
    let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
    let n = y.len() as f64;
    let lml = -0.5 * z.dot(&z) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    (lml, alpha)
}

#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    hyper: Hyperparameters,
    jitter: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    lml: f64,
    constant: bool,
    notes: Vec<String>,
}

fn validate(inputs: &[Vec<f64>], targets: &[f64]) -> Result<(), SurrogateError> {
    if inputs.len() != targets.len() {
        return Err(SurrogateError::Shape);
    }
    if inputs.len() < 2 {
        return Err(SurrogateError::TooFewPoints(inputs.len()));
    }
    let d = inputs[0].len();
    if d == 0 || inputs.iter().any(|r| r.len() != d) {
        return Err(SurrogateError::Shape);
    }
    if inputs
        .iter()
        .flatten()
        .chain(targets)
        .any(|v| !v.is_finite())
    {
        return Err(SurrogateError::NonFinite);
    }
    Ok(())
}

fn pack(h: &Hyperparameters) -> Vec<f64> {
    let mut v: Vec<f64> = h.lengthscales.iter().map(|l| l.ln()).collect();
    v.push(h.signal_variance.ln());
    v.push(h.noise_variance.ln());
    v
}

fn unpack(theta: &[f64]) -> Hyperparameters {
    let d = theta.len() - 2;
    let clamp = |v: f64, (lo, hi): (f64, f64)| v.exp().clamp(lo, hi);
    Hyperparameters {
        lengthscales: theta[..d]
            .iter()
            .map(|v| clamp(*v, LENGTHSCALE_BOUNDS))
            .collect(),
        signal_variance: clamp(theta[d], SIGNAL_BOUNDS),
        noise_variance: clamp(theta[d + 1], NOISE_BOUNDS),
    }
}

struct NegLml<'a> {
    diffs: &'a PairDiffs,
    y: &'a DVector<f64>,
}

impl CostFunction for NegLml<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Vec<f64>) -> Result<f64, ArgminError> {
        let h = unpack(theta);
        Ok(match self.diffs.covariance(&h, 0.0).cholesky() {
            Some(c) => -log_likelihood(&c.unpack(), self.y).0,
            None => 1e300,
        })
    }
}

fn start_points(d: usize, options: &FitOptions, seed: u64) -> Vec<Vec<f64>> {
    let starts = options.starts;
    let mut rng = rng_from(seed, &[0x6770]);
    let first = match &options.initial {
        Some(h) if h.lengthscales.len() == d => pack(h),
        _ => pack(&Hyperparameters {
            lengthscales: vec![0.5; d],
            signal_variance: 1.0,
            noise_variance: 1e-3,
        }),
    };
    let mut out = vec![first];
    while out.len() < starts.max(1) {
        let mut v: Vec<f64> = (0..d)
            .map(|_| rng.random_range((1e-2f64).ln()..(10f64).ln()))
            .collect();
        v.push(rng.random_range((0.1f64).ln()..(10f64).ln()));
        v.push(rng.random_range(NOISE_BOUNDS.0.ln()..(0.1f64).ln()));
        out.push(v);
    }
    out
}

impl GpModel {
    /// Fits hyperparameters by multi-start Nelder–Mead on the negative log
    /// marginal likelihood.
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], seed: u64) -> Result<Self, SurrogateError> {
        Self::fit_with_options(inputs, targets, seed, FitOptions::default())
    }

    pub fn fit_with_options(
        inputs: &[Vec<f64>],
        targets: &[f64],
        seed: u64,
        options: FitOptions,
    ) -> Result<Self, SurrogateError> {
        validate(inputs, targets)?;
        let d = inputs[0].len();
        let (mean, scale) = standardization(targets);
        if scale == 0.0 {
            let mut m = Self::fit_fixed(
                inputs,
                targets,
                Hyperparameters {
                    lengthscales: vec![0.5; d],
                    signal_variance: 1.0,
                    noise_variance: NOISE_BOUNDS.0,
                },
            )?;
            m.notes
                .push("all targets equal; constant-mean model with fixed hyperparameters".into());
            return Ok(m);
        }
        let y = DVector::from_iterator(targets.len(), targets.iter().map(|t| (t - mean) / scale));
        let diffs = PairDiffs::new(inputs);
        let problem = NegLml {
            diffs: &diffs,
            y: &y,
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        for start in start_points(d, &options, seed) {
            let mut simplex = vec![start.clone()];
            for k in 0..start.len() {
                let mut v = start.clone();
                v[k] += if k < d { 0.7 } else { 1.0 };
                simplex.push(v);
            }
            let start_cost = problem.cost(&start).unwrap_or(f64::INFINITY);
            let mut candidate = (start_cost, start);
            if options.iterations > 0 {
                let solver = NelderMead::new(simplex)
                    .with_sd_tolerance(1e-7)
                    .expect("valid tolerance");
                if let Ok(res) = Executor::new(
                    NegLml {
                        diffs: &diffs,
                        y: &y,
                    },
                    solver,
                )
                .configure(|s| s.max_iters(options.iterations))
                .run()
                {
                    let state = res.state();
                    if let Some(p) = state.get_best_param() {
                        let c = state.get_best_cost();
                        if c < candidate.0 {
                            candidate = (c, p.clone());
                        }
                    }
                }
            }
            if best.as_ref().is_none_or(|b| candidate.0 < b.0) {
                best = Some(candidate);
            }
        }
        let (_, theta) = best.expect("at least one start");
        Self::fit_fixed(inputs, targets, unpack(&theta))
    }

    /// Conditions on the data at the given hyperparameters (no search).
    pub fn fit_fixed(
        inputs: &[Vec<f64>],
        targets: &[f64],
        hyper: Hyperparameters,
    ) -> Result<Self, SurrogateError> {
        validate(inputs, targets)?;
        if hyper.lengthscales.len() != inputs[0].len() {
            return Err(SurrogateError::Shape);
        }
        let (y_mean, mut y_scale) = standardization(targets);
        let constant = y_scale == 0.0;
        if constant {
            y_scale = 1.0;
        }
        let y = DVector::from_iterator(
            targets.len(),
            targets.iter().map(|t| (t - y_mean) / y_scale),
        );
        let diffs = PairDiffs::new(inputs);
        let (chol, jitter) = factorize(&diffs, &hyper)?;
        let (lml, alpha) = log_likelihood(&chol, &y);
        let mut notes = Vec::new();
        if jitter > 0.0 {
            notes.push(format!("covariance repaired with jitter {jitter:e}"));
        }
        Ok(Self {
            inputs: inputs.to_vec(),
            targets: y.iter().copied().collect(),
            y_mean,
            y_scale,
            hyper,
            jitter,
            chol,
            alpha,
            lml,
            constant,
            notes,
        })
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    /// Log marginal likelihood of arbitrary hyperparameters on this model's
    /// data (standardized scale); `None` if not factorizable.
    pub fn log_marginal_likelihood_at(&self, hyper: &Hyperparameters) -> Option<f64> {
        let diffs = PairDiffs::new(&self.inputs);
        let y = DVector::from_vec(self.targets.clone());
        diffs
            .covariance(hyper, 0.0)
            .cholesky()
            .map(|c| log_likelihood(&c.unpack(), &y).0)
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Posterior mean and variance on the standardized scale.
    pub fn predict_standardized(&self, x: &[f64]) -> (f64, f64) {
        let h = &self.hyper;
        let kx = DVector::from_iterator(
            self.inputs.len(),
            self.inputs
                .iter()
                .map(|xi| h.signal_variance * matern52(scaled_distance(x, xi, &h.lengthscales))),
        );
        let mean = kx.dot(&self.alpha);
        let v = self
            .chol
            .solve_lower_triangular(&kx)
            .expect("non-singular factor");
        let var = (h.signal_variance - v.dot(&v)).max(0.0);
        (mean, var)
    }

    /// Posterior mean and variance on the original target scale.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_standardized(x);
        (
            self.y_mean + self.y_scale * m,
            v * self.y_scale * self.y_scale,
        )
    }

    /// Expected improvement below `best` (original scale).
    pub fn expected_improvement(&self, x: &[f64], best: f64) -> f64 {
        let (m, v) = self.predict(x);
        expected_improvement(m, v.sqrt(), best)
    }
}

fn standardization(targets: &[f64]) -> (f64, f64) {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt();
    // Relative test so tiny float noise around a constant still counts as constant.
    if scale <= 1e-12 * mean.abs().max(1e-300) || scale == 0.0 {
        (mean, 0.0)
    } else {
        (mean, scale)
    }
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn standard_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Closed-form expected improvement for minimization:
/// `(best − μ)·Φ(z) + σ·φ(z)` with `z = (best − μ)/σ`.
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    if sd.is_nan() || sd <= 0.0 {
        return (best - mean).max(0.0);
    }
    let gap = best - mean;
    let z = gap / sd;
    (gap * standard_normal_cdf(z) + sd * standard_normal_pdf(z)).max(0.0)
}
