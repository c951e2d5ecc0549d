//! Binary Gaussian-process classifier over spectrum vectors.
//!
//! Zero-mean GP prior with a squared-exponential kernel, logistic
//! likelihood, and a Laplace approximation of the latent posterior. The
//! mode is found by damped Newton iteration written in terms of the
//! well-conditioned matrix `B = I + W^½ K W^½` (its eigenvalues are ≥ 1),
//! and hyperparameters are picked from a fixed grid by the Laplace
//! approximation of the log marginal likelihood.
//!
//! Labels are `{0, 1}` at the API and `{-1, +1}` internally.

use std::fs;
use std::path::Path;

use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, dot, reconstruct_from_cholesky, solve_lower, solve_lower_transpose, Matrix,
};
use crate::parallel::ordered_map;
use crate::quadrature::GaussHermite;

pub const DEFAULT_JITTER: f64 = 1e-8;
pub const NEWTON_TOLERANCE: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 100;
/// `σ_f` values of the default grid (the kernel stores `σ_f²`).
pub const GRID_SIGNAL_STD: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const GRID_LENGTHSCALE: [f64; 6] = [0.1, 0.3, 1.0, 3.0, 10.0, 30.0];
const FACTOR_TOLERANCE: f64 = 1e-8;
const MODEL_FORMAT: &str = "sguq-gpc-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// `σ_f²`
    pub signal_variance: f64,
    pub lengthscale: f64,
    pub jitter: f64,
}

impl KernelSpec {
    pub fn squared_exponential(signal_std: f64, lengthscale: f64) -> Self {
        Self {
            family: KernelFamily::SquaredExponential,
            signal_variance: signal_std * signal_std,
            lengthscale,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if pos(self.signal_variance) && pos(self.lengthscale) && pos(self.jitter) {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid kernel {self:?}")))
        }
    }

    #[inline]
    fn from_sq_dist(&self, d2: f64) -> f64 {
        self.signal_variance * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.from_sq_dist(sq_dist(a, b))
    }
}

/// The default 5 × 6 grid, `σ_f` outer and `ℓ` inner.
pub fn default_grid() -> Vec<KernelSpec> {
    GRID_SIGNAL_STD
        .iter()
        .flat_map(|&s| {
            GRID_LENGTHSCALE
                .iter()
                .map(move |&l| KernelSpec::squared_exponential(s, l))
        })
        .collect()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cross-covariance between the rows of `a` and `b`.
pub fn kernel_matrix(a: &Matrix, b: &Matrix, spec: &KernelSpec) -> Matrix {
    let mut k = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            k[(i, j)] = spec.eval(a.row(i), b.row(j));
        }
    }
    k
}

/// Covariance of a set with itself, jitter on the diagonal.
pub fn kernel_matrix_self(a: &Matrix, spec: &KernelSpec) -> Matrix {
    kernel_from_sq_dists(&pairwise_sq_dists(a), spec)
}

fn pairwise_sq_dists(a: &Matrix) -> Matrix {
    let m = a.rows();
    let mut d = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..i {
            let v = sq_dist(a.row(i), a.row(j));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

fn kernel_from_sq_dists(d2: &Matrix, spec: &KernelSpec) -> Matrix {
    let m = d2.rows();
    let mut k = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..i {
            let v = spec.from_sq_dist(d2[(i, j)]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = spec.signal_variance + spec.jitter;
    }
    k
}

/// Logistic sigmoid, evaluated without overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log s(x)`
#[inline]
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn log_likelihood(f: &[f64], y: &[f64]) -> f64 {
    f.iter().zip(y).map(|(fi, yi)| log_sigmoid(yi * fi)).sum()
}

/// Gradient and negative Hessian diagonal of `log p(y|f)`.
fn likelihood_derivatives(f: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    f.iter()
        .zip(y)
        .map(|(&fi, &yi)| {
            let pi = sigmoid(fi);
            let t = 0.5 * (yi + 1.0);
            (t - pi, pi * (1.0 - pi))
        })
        .unzip()
}

/// `B = I + W^½ K W^½`
fn b_matrix(k: &Matrix, sqrt_w: &[f64]) -> Matrix {
    let m = k.rows();
    let mut b = Matrix::zeros(m, m);
    for i in 0..m {
        let si = sqrt_w[i];
        let krow = k.row(i);
        let brow = b.row_mut(i);
        for j in 0..=i {
            brow[j] = si * krow[j] * sqrt_w[j];
        }
        brow[i] += 1.0;
    }
    for i in 0..m {
        for j in 0..i {
            b[(j, i)] = b[(i, j)];
        }
    }
    b
}

struct LaplaceMode {
    f: Vec<f64>,
    gradient: Vec<f64>,
    w: Vec<f64>,
    factor: Matrix,
    log_marginal: f64,
    converged: bool,
}

/// Damped Newton search for the posterior mode.
fn laplace_mode(k: &Matrix, y: &[f64]) -> Result<LaplaceMode> {
    let m = y.len();
    let mut a = vec![0.0; m];
    let mut f = vec![0.0; m];
    let objective = |a: &[f64], f: &[f64]| -0.5 * dot(a, f) + log_likelihood(f, y);
    let mut psi = objective(&a, &f);
    let mut converged = false;

    for _ in 0..NEWTON_MAX_ITER {
        let (grad, w) = likelihood_derivatives(&f, y);
        let sqrt_w: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
        let l = cholesky(&b_matrix(k, &sqrt_w))?;
        let b: Vec<f64> = w.iter().zip(&f).zip(&grad).map(|((wi, fi), gi)| wi * fi + gi).collect();
        let kb = k.matvec(&b);
        let rhs: Vec<f64> = sqrt_w.iter().zip(&kb).map(|(s, x)| s * x).collect();
        let c = solve_lower_transpose(&l, &solve_lower(&l, &rhs));
        let a_newton: Vec<f64> = b
            .iter()
            .zip(&sqrt_w)
            .zip(&c)
            .map(|((bi, si), ci)| bi - si * ci)
            .collect();

        // Step halving until the objective does not decrease.
        let mut step = 1.0;
        let (a_next, f_next, psi_next) = loop {
            let a_try: Vec<f64> = a
                .iter()
                .zip(&a_newton)
                .map(|(ai, ni)| ai + step * (ni - ai))
                .collect();
            let f_try = k.matvec(&a_try);
            let psi_try = objective(&a_try, &f_try);
            if psi_try >= psi || step < 1e-8 {
                break (a_try, f_try, psi_try);
            }
            step *= 0.5;
        };
        if !psi_next.is_finite() {
            return Err(Error::Numerical("Laplace objective became non-finite".into()));
        }
        let change = (psi_next - psi).abs();
        a = a_next;
        f = f_next;
        psi = psi_next;
        if change < NEWTON_TOLERANCE {
            converged = true;
            break;
        }
    }

    let (gradient, w) = likelihood_derivatives(&f, y);
    let sqrt_w: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let factor = cholesky(&b_matrix(k, &sqrt_w))?;
    let log_det_half: f64 = (0..m).map(|i| factor[(i, i)].ln()).sum();
    Ok(LaplaceMode {
        f,
        gradient,
        w,
        factor,
        log_marginal: psi - log_det_half,
        converged,
    })
}

/// A fitted classifier. Immutable; prediction is read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct GpcModel {
    pub kernel: KernelSpec,
    /// M×N, one spectrum per row.
    pub training_features: Matrix,
    /// `±1`
    pub training_labels: Vec<f64>,
    pub posterior_mode: Vec<f64>,
    /// `∇ log p(l|f)` at the mode.
    pub mode_gradient: Vec<f64>,
    pub likelihood_curvature: Vec<f64>,
    /// Lower Cholesky factor of `B = I + W^½ K W^½`.
    pub cholesky_factor: Matrix,
    pub log_marginal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// `p(l = 1 | λ, D)`
    pub probability: f64,
    pub latent_mean: f64,
    pub latent_variance: f64,
    /// Standard deviation of `s(f)` on the probability scale.
    pub probability_std: f64,
    #[serde(rename = "unsafe")]
    pub unsafe_: bool,
}

/// `0.5 ∈ [p − σ/2, p + σ/2]`
pub fn is_unsafe(probability: f64, probability_std: f64) -> bool {
    (probability - 0.5).abs() <= 0.5 * probability_std
}

/// Mean and standard deviation of `s(F)` for `F ~ N(mean, variance)`.
pub fn sigmoid_moments(mean: f64, variance: f64, rule: &GaussHermite) -> (f64, f64) {
    let p = rule.expect(mean, variance, sigmoid).clamp(0.0, 1.0);
    let second = rule.expect(mean, variance, |f| {
        let s = sigmoid(f);
        s * s
    });
    (p, (second - p * p).max(0.0).sqrt())
}

fn check_training_set(features: &Matrix, labels: &[u8]) -> Result<Vec<f64>> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if features.rows() < 2 {
        return Err(Error::Precondition("need at least 2 training points".into()));
    }
    if features.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(Error::Precondition("training features must be finite".into()));
    }
    if let Some(bad) = labels.iter().find(|l| **l > 1) {
        return Err(Error::Precondition(format!("label {bad} is not 0 or 1")));
    }
    let positives = labels.iter().filter(|l| **l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Precondition("degenerate training set: single class".into()));
    }
    Ok(labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect())
}

impl GpcModel {
    /// Fits with one fixed kernel.
    pub fn fit_fixed(features: &Matrix, labels: &[u8], kernel: KernelSpec) -> Result<Self> {
        Self::fit(features, labels, &[kernel])
    }

    /// Fits every grid candidate and keeps the one with the highest Laplace
    /// log marginal likelihood; ties go to the earlier candidate.
    pub fn fit(features: &Matrix, labels: &[u8], grid: &[KernelSpec]) -> Result<Self> {
        Self::fit_with_workers(features, labels, grid, 1)
    }

    /// [`GpcModel::fit`] with grid candidates spread over `workers` threads.
    /// The selection runs over the grid in order, so the result does not
    /// depend on `workers`.
    pub fn fit_with_workers(
        features: &Matrix,
        labels: &[u8],
        grid: &[KernelSpec],
        workers: usize,
    ) -> Result<Self> {
        let y = check_training_set(features, labels)?;
        if grid.is_empty() {
            return Err(Error::Argument("empty kernel grid".into()));
        }
        for spec in grid {
            spec.validate()?;
        }
        let d2 = pairwise_sq_dists(features);
        let modes = ordered_map(grid, workers, |spec| {
            laplace_mode(&kernel_from_sq_dists(&d2, spec), &y)
        });
        let mut best: Option<(KernelSpec, LaplaceMode)> = None;
        let mut failures = Vec::new();
        for (spec, outcome) in grid.iter().zip(modes) {
            match outcome {
                Ok(mode) if mode.converged && mode.log_marginal.is_finite() => {
                    let better = best
                        .as_ref()
                        .map_or(true, |(_, b)| mode.log_marginal > b.log_marginal);
                    if better {
                        best = Some((*spec, mode));
                    }
                }
                Ok(_) => failures.push(format!("{spec:?}: no convergence")),
                Err(e) => failures.push(format!("{spec:?}: {e}")),
            }
        }
        let (kernel, mode) = best.ok_or_else(|| {
            Error::Numerical(format!(
                "Laplace mode search failed on every grid point: {}",
                failures.join("; ")
            ))
        })?;
        Ok(Self {
            kernel,
            training_features: features.clone(),
            training_labels: y,
            posterior_mode: mode.f,
            mode_gradient: mode.gradient,
            likelihood_curvature: mode.w,
            cholesky_factor: mode.factor,
            log_marginal: mode.log_marginal,
        })
    }

    pub fn m(&self) -> usize {
        self.training_features.rows()
    }

    pub fn n(&self) -> usize {
        self.training_features.cols()
    }

    /// Training covariance matrix, jitter included.
    pub fn training_kernel(&self) -> Matrix {
        kernel_matrix_self(&self.training_features, &self.kernel)
    }

    /// Laplace posterior mean and variance of the latent at `x`.
    pub fn latent(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.n() {
            return Err(Error::Dimension(format!(
                "model expects spectra of length N={}, got N={}",
                self.n(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("spectrum must be finite".into()));
        }
        let k_star: Vec<f64> = self
            .training_features
            .row_iter()
            .map(|r| self.kernel.eval(r, x))
            .collect();
        let mean = dot(&k_star, &self.mode_gradient);
        let scaled: Vec<f64> = k_star
            .iter()
            .zip(&self.likelihood_curvature)
            .map(|(k, w)| k * w.sqrt())
            .collect();
        let v = solve_lower(&self.cholesky_factor, &scaled);
        let variance = (self.kernel.signal_variance - dot(&v, &v)).max(0.0);
        Ok((mean, variance))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.predict_with_rule(x, GaussHermite::n32())
    }

    pub fn predict_with_rule(&self, x: &[f64], rule: &GaussHermite) -> Result<Prediction> {
        let (mean, variance) = self.latent(x)?;
        let (p, std) = sigmoid_moments(mean, variance, rule);
        Ok(Prediction {
            probability: p,
            latent_mean: mean,
            latent_variance: variance,
            probability_std: std,
            unsafe_: is_unsafe(p, std),
        })
    }

    /// Largest absolute entry of `L·Lᵀ − B` for the stored factor.
    pub fn factor_residual(&self) -> f64 {
        let sqrt_w: Vec<f64> = self.likelihood_curvature.iter().map(|w| w.sqrt()).collect();
        let b = b_matrix(&self.training_kernel(), &sqrt_w);
        let back = reconstruct_from_cholesky(&self.cholesky_factor);
        b.as_slice()
            .iter()
            .zip(back.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry of `f̂ − K·∇log p(l|f̂)`.
    pub fn stationarity_residual(&self) -> f64 {
        let kg = self.training_kernel().matvec(&self.mode_gradient);
        kg.iter()
            .zip(&self.posterior_mode)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let m = self.m();
        let lens = [
            self.training_labels.len(),
            self.posterior_mode.len(),
            self.mode_gradient.len(),
            self.likelihood_curvature.len(),
            self.cholesky_factor.rows(),
        ];
        if lens.iter().any(|&l| l != m) || !self.cholesky_factor.is_square() {
            return Err(Error::Validation("model vectors disagree with M".into()));
        }
        if self.training_labels.iter().any(|y| *y != 1.0 && *y != -1.0) {
            return Err(Error::Validation("training labels must be ±1".into()));
        }
        if self
            .likelihood_curvature
            .iter()
            .any(|w| !(0.0..=0.25).contains(w))
        {
            return Err(Error::Validation("curvature outside [0, 0.25]".into()));
        }
        let residual = self.factor_residual();
        if !(residual <= FACTOR_TOLERANCE) {
            return Err(Error::Validation(format!(
                "stored Cholesky factor does not reconstruct B (residual {residual:e})"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ModelFileOut {
            format: MODEL_FORMAT,
            kernel: KernelOut {
                family: self.kernel.family,
                signal_variance: R17(self.kernel.signal_variance),
                lengthscale: R17(self.kernel.lengthscale),
                jitter: R17(self.kernel.jitter),
            },
            m: self.m(),
            n: self.n(),
            training_features: self.training_features.row_iter().map(Reals).collect(),
            training_labels: self.training_labels.iter().map(|y| *y as i8).collect(),
            posterior_mode: Reals(&self.posterior_mode),
            mode_gradient: Reals(&self.mode_gradient),
            likelihood_curvature: Reals(&self.likelihood_curvature),
            cholesky_factor: (0..self.m())
                .map(|i| Reals(&self.cholesky_factor.row(i)[..=i]))
                .collect(),
            log_marginal: R17(self.log_marginal),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFileIn = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if f.format != MODEL_FORMAT {
            return Err(Error::Validation(format!("unknown model format {:?}", f.format)));
        }
        if f.training_features.len() != f.m || f.cholesky_factor.len() != f.m {
            return Err(Error::Validation("model arrays disagree with M".into()));
        }
        let features = Matrix::from_rows(&f.training_features)?;
        if f.m > 0 && features.cols() != f.n {
            return Err(Error::Validation("model features disagree with N".into()));
        }
        let mut factor = Matrix::zeros(f.m, f.m);
        for (i, row) in f.cholesky_factor.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Validation(format!("factor row {i} has {} entries", row.len())));
            }
            factor.row_mut(i)[..=i].copy_from_slice(row);
        }
        let model = Self {
            kernel: KernelSpec {
                family: f.kernel.family,
                signal_variance: f.kernel.signal_variance,
                lengthscale: f.kernel.lengthscale,
                jitter: f.kernel.jitter,
            },
            training_features: features,
            training_labels: f.training_labels.iter().map(|&y| f64::from(y)).collect(),
            posterior_mode: f.posterior_mode,
            mode_gradient: f.mode_gradient,
            likelihood_curvature: f.likelihood_curvature,
            cholesky_factor: factor,
            log_marginal: f.log_marginal,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// A real written as a JSON number with 17 significant digits.
struct R17(f64);

impl Serialize for R17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = serde_json::value::RawValue::from_string(format!("{:.16e}", self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

struct Reals<'a>(&'a [f64]);

impl Serialize for Reals<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for &x in self.0 {
            seq.serialize_element(&R17(x))?;
        }
        seq.end()
    }
}

#[derive(Serialize)]
struct KernelOut {
    family: KernelFamily,
    signal_variance: R17,
    lengthscale: R17,
    jitter: R17,
}

#[derive(Serialize)]
struct ModelFileOut<'a> {
    format: &'a str,
    kernel: KernelOut,
    m: usize,
    n: usize,
    training_features: Vec<Reals<'a>>,
    training_labels: Vec<i8>,
    posterior_mode: Reals<'a>,
    mode_gradient: Reals<'a>,
    likelihood_curvature: Reals<'a>,
    cholesky_factor: Vec<Reals<'a>>,
    log_marginal: R17,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFileIn {
    format: String,
    kernel: KernelSpec,
    m: usize,
    n: usize,
    training_features: Vec<Vec<f64>>,
    training_labels: Vec<i8>,
    posterior_mode: Vec<f64>,
    mode_gradient: Vec<f64>,
    likelihood_curvature: Vec<f64>,
    cholesky_factor: Vec<Vec<f64>>,
    log_marginal: f64,
}
