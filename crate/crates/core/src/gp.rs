//! Exact Gaussian-process regression over scalar time inputs.
//!
//! Kernels are expression trees of squared-exponential, rational-quadratic
//! and periodic base kernels combined by sums and products. Hyperparameters
//! are fitted by maximizing the log marginal likelihood with a log-spaced grid
//! followed by a derivative-free coordinate search; no analytic gradients are
//! computed, so there is no gradient check to run against finite differences.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Variance added to the diagonal when the Gram matrix fails to factor.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

#[derive(Debug, Error)]
pub enum GpError {
    #[error("invalid hyperparameter {name} = {value}")]
    InvalidHyper { name: &'static str, value: f64 },
    #[error("kernel evaluated to a non-finite value at distance {distance}")]
    NonFinite { distance: f64 },
    #[error("covariance is not positive definite even with {jitter:e} added jitter; increase the noise level")]
    NotPositiveDefinite { jitter: f64 },
    #[error("training inputs must be non-empty, finite and strictly increasing")]
    BadInputs,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("every hyperparameter candidate failed")]
    NoCandidate,
    #[error("series of length {len} is too short; need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<GpError>,
    },
    #[error("kernel config: {0}")]
    Config(String),
}

/// A hyperparameter value and whether fitting may move it.
///
/// Deserializes from either a bare number (trainable) or
/// `{ value = .., fixed = true }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "HyperRepr")]
pub struct Hyper {
    pub value: f64,
    #[serde(default)]
    pub fixed: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum HyperRepr {
    Bare(f64),
    Full {
        value: f64,
        #[serde(default)]
        fixed: bool,
    },
}

impl From<HyperRepr> for Hyper {
    fn from(r: HyperRepr) -> Self {
        match r {
            HyperRepr::Bare(value) => Hyper { value, fixed: false },
            HyperRepr::Full { value, fixed } => Hyper { value, fixed },
        }
    }
}

impl Hyper {
    pub fn free(value: f64) -> Self {
        Self { value, fixed: false }
    }

    pub fn fixed(value: f64) -> Self {
        Self { value, fixed: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelExpr {
    /// `σ² exp(-d² / 2ℓ²)`
    SquaredExponential { sigma: Hyper, length: Hyper },
    /// `σ² (1 + d² / 2αℓ²)^-α`
    RationalQuadratic {
        sigma: Hyper,
        alpha: Hyper,
        length: Hyper,
    },
    /// `σ² exp(-2 sin²(π d / p) / ℓ²)`
    Periodic {
        sigma: Hyper,
        period: Hyper,
        length: Hyper,
    },
    Sum { terms: Vec<KernelExpr> },
    Product { terms: Vec<KernelExpr> },
}

impl KernelExpr {
    pub fn se(sigma: f64, length: f64) -> Self {
        Self::SquaredExponential {
            sigma: Hyper::free(sigma),
            length: Hyper::free(length),
        }
    }

    pub fn rq(sigma: f64, alpha: f64, length: f64) -> Self {
        Self::RationalQuadratic {
            sigma: Hyper::free(sigma),
            alpha: Hyper::free(alpha),
            length: Hyper::free(length),
        }
    }

    /// Periodic kernel with the period frozen.
    pub fn periodic(sigma: f64, period: f64, length: f64) -> Self {
        Self::Periodic {
            sigma: Hyper::free(sigma),
            period: Hyper::fixed(period),
            length: Hyper::free(length),
        }
    }

    pub fn sum(terms: Vec<KernelExpr>) -> Self {
        Self::Sum { terms }
    }

    pub fn product(terms: Vec<KernelExpr>) -> Self {
        Self::Product { terms }
    }

    /// Quasi-periodic `RQ × SP` kernel with a single overall amplitude.
    ///
    /// The periodic factor's amplitude is frozen at 1 so that `σ` is carried
    /// by the RQ factor alone; the period is frozen at `period`.
    pub fn quasi_periodic(period: f64) -> Self {
        Self::product(vec![
            Self::rq(1.0, 1.0, 1.0),
            Self::Periodic {
                sigma: Hyper::fixed(1.0),
                period: Hyper::fixed(period),
                length: Hyper::free(1.0),
            },
        ])
    }

    pub fn from_toml_str(s: &str) -> Result<Self, GpError> {
        let k: KernelExpr = toml::from_str(s).map_err(|e| GpError::Config(e.to_string()))?;
        k.validate()?;
        Ok(k)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("kernel expressions always serialize")
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let mut err = None;
        self.visit(&mut |name, h| {
            if err.is_none() && !(h.value > 0.0 && h.value.is_finite()) {
                err = Some(GpError::InvalidHyper {
                    name,
                    value: h.value,
                });
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.visit_nodes(&mut |k| match k {
            KernelExpr::Sum { terms } | KernelExpr::Product { terms } if terms.is_empty() => {
                err = Some(GpError::Config("empty sum or product".into()))
            }
            _ => {}
        });
        err.map_or(Ok(()), Err)
    }

    fn visit_nodes(&self, f: &mut impl FnMut(&KernelExpr)) {
        f(self);
        if let KernelExpr::Sum { terms } | KernelExpr::Product { terms } = self {
            for t in terms {
                t.visit_nodes(f);
            }
        }
    }

    fn visit(&self, f: &mut impl FnMut(&'static str, &Hyper)) {
        match self {
            KernelExpr::SquaredExponential { sigma, length } => {
                f("sigma_se", sigma);
                f("length_se", length);
            }
            KernelExpr::RationalQuadratic {
                sigma,
                alpha,
                length,
            } => {
                f("sigma_rq", sigma);
                f("alpha_rq", alpha);
                f("length_rq", length);
            }
            KernelExpr::Periodic {
                sigma,
                period,
                length,
            } => {
                f("sigma_sp", sigma);
                f("period_sp", period);
                f("length_sp", length);
            }
            KernelExpr::Sum { terms } | KernelExpr::Product { terms } => {
                for t in terms {
                    t.visit(f);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut Hyper)) {
        match self {
            KernelExpr::SquaredExponential { sigma, length } => {
                f(sigma);
                f(length);
            }
            KernelExpr::RationalQuadratic {
                sigma,
                alpha,
                length,
            } => {
                f(sigma);
                f(alpha);
                f(length);
            }
            KernelExpr::Periodic {
                sigma,
                period,
                length,
            } => {
                f(sigma);
                f(period);
                f(length);
            }
            KernelExpr::Sum { terms } | KernelExpr::Product { terms } => {
                for t in terms {
                    t.visit_mut(f);
                }
            }
        }
    }

    /// Values of the trainable hyperparameters, in tree order.
    pub fn trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, h| {
            if !h.fixed {
                out.push(h.value)
            }
        });
        out
    }

    /// Names of the trainable hyperparameters, in tree order.
    pub fn trainable_names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        self.visit(&mut |name, h| {
            if !h.fixed {
                out.push(name)
            }
        });
        out
    }

    /// Copy with the trainable hyperparameters replaced, in tree order.
    pub fn with_trainable(&self, values: &[f64]) -> Self {
        let mut k = self.clone();
        let mut it = values.iter();
        k.visit_mut(&mut |h| {
            if !h.fixed {
                h.value = *it.next().expect("one value per trainable hyperparameter");
            }
        });
        k
    }

    fn value_at(&self, d: f64) -> f64 {
        match self {
            KernelExpr::SquaredExponential { sigma, length } => {
                let l = length.value;
                sigma.value.powi(2) * (-d * d / (2.0 * l * l)).exp()
            }
            KernelExpr::RationalQuadratic {
                sigma,
                alpha,
                length,
            } => {
                let (a, l) = (alpha.value, length.value);
                sigma.value.powi(2) * (1.0 + d * d / (2.0 * a * l * l)).powf(-a)
            }
            KernelExpr::Periodic {
                sigma,
                period,
                length,
            } => {
                let s = (PI * d / period.value).sin();
                sigma.value.powi(2) * (-2.0 * s * s / length.value.powi(2)).exp()
            }
            KernelExpr::Sum { terms } => terms.iter().map(|t| t.value_at(d)).sum(),
            KernelExpr::Product { terms } => terms.iter().map(|t| t.value_at(d)).product(),
        }
    }

    /// Kernel value at a pair of inputs; depends only on `|x - x̂|`.
    pub fn eval(&self, x: f64, x_hat: f64) -> Result<f64, GpError> {
        let d = (x - x_hat).abs();
        let v = self.value_at(d);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GpError::NonFinite { distance: d })
        }
    }

    /// Cross-covariance matrix `K[i][j] = k(a_i, b_j)`.
    pub fn cross(&self, a: &[f64], b: &[f64]) -> Result<DMatrix<f64>, GpError> {
        let mut m = DMatrix::zeros(a.len(), b.len());
        for (j, &bj) in b.iter().enumerate() {
            for (i, &ai) in a.iter().enumerate() {
                m[(i, j)] = self.eval(ai, bj)?;
            }
        }
        Ok(m)
    }
}

fn uniform_step(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let step = xs[1] - xs[0];
    let uniform = xs
        .windows(2)
        .all(|w| (w[1] - w[0] - step).abs() <= 1e-12 * step.abs().max(1.0));
    uniform.then_some(step)
}

/// Gram matrix `K + σ_n² I` on `xs`.
pub fn gram(k: &KernelExpr, xs: &[f64], noise_std: f64) -> Result<DMatrix<f64>, GpError> {
    let n = xs.len();
    let mut m = DMatrix::zeros(n, n);
    if let Some(step) = uniform_step(xs) {
        // Toeplitz: one kernel evaluation per lag.
        let lags: Vec<f64> = (0..n)
            .map(|lag| k.eval(0.0, lag as f64 * step))
            .collect::<Result<_, _>>()?;
        for j in 0..n {
            for i in 0..n {
                m[(i, j)] = lags[i.abs_diff(j)];
            }
        }
    } else {
        for j in 0..n {
            for i in 0..=j {
                let v = k.eval(xs[i], xs[j])?;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    for i in 0..n {
        m[(i, i)] += noise_std * noise_std;
    }
    Ok(m)
}

/// Cholesky factorization with the jitter ladder; returns the added jitter.
fn factor(mut m: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let mut added = 0.0;
    for &j in &JITTER_LADDER {
        for i in 0..m.nrows() {
            m[(i, i)] += j - added;
        }
        added = j;
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok((c, j));
        }
    }
    Err(GpError::NotPositiveDefinite { jitter: added })
}

/// Predictive distribution over a set of test inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub inputs: Vec<f64>,
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl Forecast {
    pub fn horizon(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().copied().collect()
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance().into_iter().map(f64::sqrt).collect()
    }

    /// Gaussian image under `x ↦ scale·x + offset`.
    pub fn affine(&self, scale: f64, offset: f64) -> Forecast {
        Forecast {
            inputs: self.inputs.clone(),
            mean: self.mean.iter().map(|m| scale * m + offset).collect(),
            covariance: &self.covariance * (scale * scale),
        }
    }

    /// Writes `slot,mean,std` rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["slot", "mean", "std"])?;
        for ((x, m), s) in self.inputs.iter().zip(&self.mean).zip(self.std()) {
            w.write_record(&[x.to_string(), m.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A zero-mean GP conditioned on training data.
///
/// The factorization of `K + σ_n² I` is computed at construction and is
/// immutable afterwards, so prediction is safe from many threads.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: KernelExpr,
    noise_std: f64,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    pub fn new(
        kernel: KernelExpr,
        noise_std: f64,
        inputs: Vec<f64>,
        targets: Vec<f64>,
    ) -> Result<Self, GpError> {
        kernel.validate()?;
        if inputs.len() != targets.len() {
            return Err(GpError::LengthMismatch(inputs.len(), targets.len()));
        }
        let increasing = inputs.windows(2).all(|w| w[1] > w[0]);
        if inputs.is_empty()
            || !increasing
            || inputs.iter().chain(&targets).any(|v| !v.is_finite())
        {
            return Err(GpError::BadInputs);
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(GpError::InvalidHyper {
                name: "noise_std",
                value: noise_std,
            });
        }
        let (chol, jitter) = factor(gram(&kernel, &inputs, noise_std)?)?;
        let weights = chol.solve(&DVector::from_column_slice(&targets));
        Ok(Self {
            kernel,
            noise_std,
            inputs,
            targets,
            chol,
            weights,
            jitter,
        })
    }

    pub fn kernel(&self) -> &KernelExpr {
        &self.kernel
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Diagonal jitter that had to be added to factor the Gram matrix.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Same data and noise, different kernel.
    pub fn with_kernel(&self, kernel: KernelExpr) -> Result<Self, GpError> {
        Self::new(kernel, self.noise_std, self.inputs.clone(), self.targets.clone())
    }

    /// `log N(r; 0, K + σ_n² I)` from the cached Cholesky factor.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.inputs.len() as f64;
        let r = DVector::from_column_slice(&self.targets);
        let fit = r.dot(&self.weights);
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * fit - log_det - 0.5 * n * (2.0 * PI).ln()
    }

    pub fn predict(&self, test_inputs: &[f64]) -> Result<Forecast, GpError> {
        let k_star = self.kernel.cross(&self.inputs, test_inputs)?;
        let k_ss = self.kernel.cross(test_inputs, test_inputs)?;
        let mean = k_star.tr_mul(&self.weights);
        let v = self
            .chol
            .l_dirty()
            .lower_triangle()
            .solve_lower_triangular(&k_star)
            .expect("Cholesky factor has a positive diagonal");
        let mut cov = k_ss - v.tr_mul(&v);
        let n = cov.nrows();
        for j in 0..n {
            for i in 0..j {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
            if cov[(j, j)] < 0.0 && cov[(j, j)] >= -1e-8 {
                cov[(j, j)] = 0.0;
            }
        }
        Ok(Forecast {
            inputs: test_inputs.to_vec(),
            mean: mean.iter().copied().collect(),
            covariance: cov,
        })
    }

    /// Posterior operator at `test_inputs` for these training inputs,
    /// reusable with any target vector.
    pub fn predictor(&self, test_inputs: &[f64]) -> Result<Predictor, GpError> {
        let k_star = self.kernel.cross(&self.inputs, test_inputs)?;
        let gain = self.chol.solve(&k_star).transpose();
        let template = self.predict(test_inputs)?;
        Ok(Predictor {
            gain,
            covariance: template.covariance,
            inputs: template.inputs,
        })
    }

    /// Maximizes the log marginal likelihood over the trainable
    /// hyperparameters.
    ///
    /// Every point of the cartesian grid (`options.grid` per trainable
    /// hyperparameter) is scored, then the best is refined by coordinate
    /// search in log space. Deterministic given the grid and data.
    pub fn fit(&self, options: &FitOptions) -> Result<GpModel, GpError> {
        let names = self.kernel.trainable_names();
        if names.is_empty() {
            return Ok(self.clone());
        }
        let grid = if options.grid.is_empty() {
            vec![self.kernel.trainable()]
        } else {
            cartesian(&options.grid, names.len())
        };
        let mut best: Option<(f64, GpModel)> = None;
        for point in grid {
            if let Ok(m) = self.with_kernel(self.kernel.with_trainable(&point)) {
                let score = m.log_marginal_likelihood();
                if score.is_finite() && best.as_ref().map_or(true, |(b, _)| score > *b) {
                    best = Some((score, m));
                }
            }
        }
        let (_, seed) = best.ok_or(GpError::NoCandidate)?;
        if options.refine {
            seed.refine(options)
        } else {
            Ok(seed)
        }
    }

    /// Coordinate search in log space starting from the current
    /// hyperparameters. Never returns a worse model than `self`.
    pub fn refine(&self, options: &FitOptions) -> Result<GpModel, GpError> {
        let mut current = self.clone();
        let mut score = current.log_marginal_likelihood();
        let mut logs: Vec<f64> = current.kernel.trainable().iter().map(|v| v.ln()).collect();
        if logs.is_empty() {
            return Ok(current);
        }
        let (lo, hi) = (options.bounds.0.ln(), options.bounds.1.ln());
        let mut step = options.initial_step;
        let mut evals = 0;
        while step >= options.min_step && evals < options.max_evals {
            let mut improved = false;
            for i in 0..logs.len() {
                for dir in [1.0, -1.0] {
                    let mut trial = logs.clone();
                    trial[i] = (trial[i] + dir * step).clamp(lo, hi);
                    if trial[i] == logs[i] {
                        continue;
                    }
                    evals += 1;
                    let values: Vec<f64> = trial.iter().map(|l| l.exp()).collect();
                    if let Ok(m) = self.with_kernel(self.kernel.with_trainable(&values)) {
                        let s = m.log_marginal_likelihood();
                        if s.is_finite() && s > score + 1e-12 * score.abs().max(1.0) {
                            score = s;
                            logs = trial;
                            current = m;
                            improved = true;
                            break;
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        Ok(current)
    }
}

fn cartesian(values: &[f64], dims: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::with_capacity(dims)];
    for _ in 0..dims {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Seed values tried for every trainable hyperparameter.
    pub grid: Vec<f64>,
    /// Run the coordinate search after the grid.
    pub refine: bool,
    /// Initial coordinate step in natural-log units.
    pub initial_step: f64,
    pub min_step: f64,
    /// Budget of likelihood evaluations for the coordinate search.
    pub max_evals: usize,
    /// Box for every trainable hyperparameter.
    pub bounds: (f64, f64),
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            grid: vec![1e-2, 1e-1, 1.0, 1e1, 1e2],
            refine: true,
            initial_step: 1.0,
            min_step: 0.05,
            max_evals: 200,
            bounds: (1e-3, 1e3),
        }
    }
}

/// Linear map from training targets to the posterior at fixed test inputs.
#[derive(Debug, Clone)]
pub struct Predictor {
    gain: DMatrix<f64>,
    covariance: DMatrix<f64>,
    inputs: Vec<f64>,
}

impl Predictor {
    pub fn training_len(&self) -> usize {
        self.gain.ncols()
    }

    pub fn predict(&self, targets: &[f64]) -> Result<Forecast, GpError> {
        if targets.len() != self.gain.ncols() {
            return Err(GpError::LengthMismatch(self.gain.ncols(), targets.len()));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(GpError::BadInputs);
        }
        let mean = &self.gain * DVector::from_column_slice(targets);
        Ok(Forecast {
            inputs: self.inputs.clone(),
            mean: mean.iter().copied().collect(),
            covariance: self.covariance.clone(),
        })
    }
}

pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64, GpError> {
    if predicted.len() != actual.len() {
        return Err(GpError::LengthMismatch(predicted.len(), actual.len()));
    }
    if predicted.is_empty() {
        return Err(GpError::LengthMismatch(0, 0));
    }
    let sse: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    Ok((sse / predicted.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RollingOptions {
    /// Training window length `N`.
    pub window: usize,
    /// Forecast horizon `N*`.
    pub horizon: usize,
    /// Re-train every this many steps; `None` trains only once, up front.
    pub refit_every: Option<usize>,
    pub noise_std: f64,
    pub fit: FitOptions,
}

impl Default for RollingOptions {
    fn default() -> Self {
        Self {
            window: 336,
            horizon: 24,
            refit_every: None,
            noise_std: 1e-5,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RollingStep {
    /// 1-based step index; the window covers `t-1 .. t-1+N`.
    pub t: usize,
    pub forecast: Forecast,
    pub truth: Vec<f64>,
    pub rmse: f64,
}

/// Sliding-window multi-step forecasting of a series.
///
/// The pre-training fit (grid + refinement) uses the first `N` points and
/// yields `θ0`. At every step `t = 1 ..= T-(N+N*)` the model is conditioned on
/// the `N` points starting at `t-1` and predicts the following `N*`. When
/// `(t-1) mod S == 0` the hyperparameters are first re-optimized by coordinate
/// search starting from `θ0`; otherwise the previous ones are reused.
pub fn rolling_forecast(
    series: &[f64],
    kernel: &KernelExpr,
    options: &RollingOptions,
) -> Result<Vec<RollingStep>, GpError> {
    let (n, h) = (options.window, options.horizon);
    let needed = n + h + 1;
    if n == 0 || h == 0 || series.len() < needed {
        return Err(GpError::SeriesTooShort {
            len: series.len(),
            needed,
        });
    }
    let xs: Vec<f64> = (0..series.len()).map(|i| i as f64).collect();
    let window = |start: usize| (xs[start..start + n].to_vec(), series[start..start + n].to_vec());

    let (x0, r0) = window(0);
    let pretrained = GpModel::new(kernel.clone(), options.noise_std, x0, r0)
        .and_then(|m| m.fit(&options.fit))
        .map_err(|e| GpError::AtStep {
            step: 0,
            source: Box::new(e),
        })?;
    let theta0 = pretrained.kernel().clone();
    let mut theta = theta0.clone();

    let steps = series.len() - (n + h);
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let at = |e| GpError::AtStep {
            step: t,
            source: Box::new(e),
        };
        let (x, r) = window(t - 1);
        let refit = options.refit_every.is_some_and(|s| s > 0 && (t - 1) % s == 0);
        let model = if refit {
            let m = GpModel::new(theta0.clone(), options.noise_std, x, r)
                .and_then(|m| m.refine(&options.fit))
                .map_err(at)?;
            theta = m.kernel().clone();
            m
        } else {
            GpModel::new(theta.clone(), options.noise_std, x, r).map_err(at)?
        };
        let test = &xs[t - 1 + n..t - 1 + n + h];
        let truth = series[t - 1 + n..t - 1 + n + h].to_vec();
        let forecast = model.predict(test).map_err(at)?;
        let e = rmse(&forecast.mean, &truth).map_err(at)?;
        out.push(RollingStep {
            t,
            forecast,
            truth,
            rmse: e,
        });
    }
    Ok(out)
}

pub fn mean_rmse(steps: &[RollingStep]) -> f64 {
    steps.iter().map(|s| s.rmse).sum::<f64>() / steps.len().max(1) as f64
}
