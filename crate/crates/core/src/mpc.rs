//! Receding-horizon control of the buffer levels.
//!
//! Each BS follows the mean dynamics `z̄_{k+1} = z̄_k + u_k + w̄_k`, where
//! `u > 0` means the BS receives energy and `w̄` is the forecast of harvest
//! minus consumption. The controller minimizes
//!
//! ```text
//! α Σ_k u_k² + (1 − α) Σ_k (z̄_{k+1} − B_ref)²
//! ```
//!
//! over the horizon subject to box bounds on `u` and `B_low ≤ z̄ ≤ B_max`.
//! Variance terms of the expected cost do not depend on `u` and are dropped.
//! The problem decouples across BSs, so one small QP is solved per BS.
//! Energies are divided by `B_max` before solving.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::Forecast;
use crate::qp::{Qp, QpError, QpSettings};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("QP for BS column {column} failed: {source}")]
    Solver {
        column: usize,
        #[source]
        source: QpError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Horizon length M (slots).
    pub horizon: usize,
    pub alpha: f64,
    pub b_ref: f64,
    pub b_low: f64,
    pub b_max: f64,
    /// Multiplier `c` of the state back-off `c·√(cumulative Σ_W)`.
    pub backoff: f64,
    /// Penalty on softened state bounds, multiplied by `1 − α`.
    pub soft_penalty: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let b_max = 360e3;
        Self {
            horizon: 24,
            alpha: 0.5,
            b_ref: 0.5 * b_max,
            b_low: 0.1 * b_max,
            b_max,
            backoff: 0.0,
            soft_penalty: 1e3,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::Config("horizon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MpcError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0 < self.b_low && self.b_low < self.b_ref && self.b_ref < self.b_max) || !self.b_max.is_finite() {
            return Err(MpcError::Config(format!(
                "need 0 < B_low < B_ref < B_max, got {} / {} / {}",
                self.b_low, self.b_ref, self.b_max
            )));
        }
        if !(self.backoff >= 0.0 && self.backoff.is_finite()) {
            return Err(MpcError::Config(format!("backoff {} must be finite and >= 0", self.backoff)));
        }
        if !(self.soft_penalty > 0.0 && self.soft_penalty.is_finite()) {
            return Err(MpcError::Config(format!("soft_penalty {} must be positive", self.soft_penalty)));
        }
        Ok(())
    }

    fn slack_weight(&self) -> f64 {
        (self.soft_penalty * (1.0 - self.alpha)).max(1e-9)
    }
}

/// Forecast of `w = H − O` over the horizon, one column per BS.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceForecast {
    mean: DMatrix<f64>,
    variance: DMatrix<f64>,
}

impl DisturbanceForecast {
    pub fn new(mean: DMatrix<f64>, variance: DMatrix<f64>) -> Result<Self, MpcError> {
        if mean.shape() != variance.shape() {
            return Err(MpcError::Dimension(format!(
                "mean is {:?}, variance is {:?}",
                mean.shape(),
                variance.shape()
            )));
        }
        if mean.iter().chain(variance.iter()).any(|v| !v.is_finite()) {
            return Err(MpcError::NonFinite("disturbance forecast".into()));
        }
        if variance.iter().any(|v| *v < 0.0) {
            return Err(MpcError::Dimension("disturbance variance must be >= 0".into()));
        }
        Ok(Self { mean, variance })
    }

    /// Deterministic disturbance.
    pub fn certain(mean: DMatrix<f64>) -> Result<Self, MpcError> {
        let variance = DMatrix::zeros(mean.nrows(), mean.ncols());
        Self::new(mean, variance)
    }

    /// Places single-BS forecasts side by side.
    pub fn stack(columns: &[DisturbanceForecast]) -> Result<Self, MpcError> {
        let Some(first) = columns.first() else {
            return Err(MpcError::Dimension("no columns to stack".into()));
        };
        let m = first.horizon();
        let n: usize = columns.iter().map(|c| c.bs_count()).sum();
        let mut mean = DMatrix::zeros(m, n);
        let mut variance = DMatrix::zeros(m, n);
        let mut at = 0;
        for c in columns {
            if c.horizon() != m {
                return Err(MpcError::Dimension(format!("horizons {m} and {} differ", c.horizon())));
            }
            mean.columns_mut(at, c.bs_count()).copy_from(&c.mean);
            variance.columns_mut(at, c.bs_count()).copy_from(&c.variance);
            at += c.bs_count();
        }
        Ok(Self { mean, variance })
    }

    pub fn horizon(&self) -> usize {
        self.mean.nrows()
    }

    pub fn bs_count(&self) -> usize {
        self.mean.ncols()
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn variance(&self) -> &DMatrix<f64> {
        &self.variance
    }
}

/// Disturbance of one BS from its harvest and consumption forecasts, assumed
/// independent.
pub fn make_disturbance(h: &Forecast, o: &Forecast) -> Result<DisturbanceForecast, MpcError> {
    if h.horizon() != o.horizon() {
        return Err(MpcError::Dimension(format!(
            "harvest horizon {} vs consumption horizon {}",
            h.horizon(),
            o.horizon()
        )));
    }
    let m = h.horizon();
    let mean = DMatrix::from_fn(m, 1, |k, _| h.mean[k] - o.mean[k]);
    let (vh, vo) = (h.variance(), o.variance());
    let variance = DMatrix::from_fn(m, 1, |k, _| vh[k].max(0.0) + vo[k].max(0.0));
    DisturbanceForecast::new(mean, variance)
}

/// Which side of the state box a slack relaxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftSide {
    Low,
    High,
}

/// QP of a single BS in `B_max` units. Variables are `u_0..u_{M−1}`
/// followed by one slack per softened state row.
#[derive(Debug, Clone)]
pub struct BlockQp {
    pub qp: Qp,
    /// Open-loop part of the predicted states `z̄_1..z̄_M`.
    pub drift: DVector<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    /// `(k, side)` for each slack, where `k` indexes `z̄_{k+1}`.
    pub soft_rows: Vec<(usize, SoftSide)>,
    /// Objective terms independent of the decision variables.
    pub constant: f64,
}

/// Per-BS QP blocks plus the data needed to map solutions back to joules.
#[derive(Debug, Clone)]
pub struct HorizonQp {
    pub blocks: Vec<BlockQp>,
    pub config: MpcConfig,
    pub initial: Vec<f64>,
}

impl HorizonQp {
    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Text dump of every block: dimensions, `P`, `q`, `G`, `h`, control
    /// bounds and softened rows. Values are in `B_max` units.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let c = &self.config;
        writeln!(w, "horizon_qp blocks={} horizon={} scale={}", self.blocks.len(), c.horizon, c.b_max)?;
        writeln!(
            w,
            "alpha={} b_ref={} b_low={} b_max={} backoff={}",
            c.alpha, c.b_ref, c.b_low, c.b_max, c.backoff
        )?;
        for (n, b) in self.blocks.iter().enumerate() {
            writeln!(
                w,
                "block {n} initial={} vars={} rows={} constant={}",
                self.initial[n],
                b.qp.dim(),
                b.qp.h.len(),
                b.constant
            )?;
            write_matrix(&mut w, "P", &b.qp.p)?;
            write_vector(&mut w, "q", &b.qp.q)?;
            write_matrix(&mut w, "G", &b.qp.g)?;
            write_vector(&mut w, "h", &b.qp.h)?;
            write_vector(&mut w, "u_min", &b.u_min)?;
            write_vector(&mut w, "u_max", &b.u_max)?;
            write_vector(&mut w, "drift", &b.drift)?;
            let soft: Vec<String> = b
                .soft_rows
                .iter()
                .map(|(k, s)| format!("{k}:{}", if *s == SoftSide::Low { "low" } else { "high" }))
                .collect();
            writeln!(w, "soft {}", soft.join(" "))?;
        }
        Ok(())
    }
}

fn write_matrix<W: Write>(w: &mut W, name: &str, m: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(w, "{name} {} {}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

fn write_vector<W: Write>(w: &mut W, name: &str, v: &DVector<f64>) -> std::io::Result<()> {
    let vals: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
    writeln!(w, "{name} {} {}", v.len(), vals.join(" "))
}

pub fn build_horizon_qp(
    initial: &[f64],
    dist: &DisturbanceForecast,
    cfg: &MpcConfig,
) -> Result<HorizonQp, MpcError> {
    cfg.validate()?;
    let m = cfg.horizon;
    if dist.horizon() != m {
        return Err(MpcError::Dimension(format!(
            "disturbance horizon {} but MPC horizon {m}",
            dist.horizon()
        )));
    }
    if dist.bs_count() != initial.len() {
        return Err(MpcError::Dimension(format!(
            "{} initial buffers but {} disturbance columns",
            initial.len(),
            dist.bs_count()
        )));
    }
    if initial.iter().any(|z| !z.is_finite()) {
        return Err(MpcError::NonFinite("initial buffers".into()));
    }
    let blocks = (0..initial.len())
        .map(|n| {
            let w: Vec<f64> = dist.mean.column(n).iter().copied().collect();
            let var: Vec<f64> = dist.variance.column(n).iter().copied().collect();
            build_block(initial[n], &w, &var, cfg)
        })
        .collect();
    Ok(HorizonQp {
        blocks,
        config: *cfg,
        initial: initial.to_vec(),
    })
}

fn build_block(z0: f64, w: &[f64], var: &[f64], cfg: &MpcConfig) -> BlockQp {
    let m = w.len();
    let s = cfg.b_max;
    let (r, low, high) = (cfg.b_ref / s, cfg.b_low / s, 1.0);
    let z0 = (z0 / s).clamp(0.0, 1.0);

    // Open-loop prediction sets the control bounds of future rows.
    let mut u_min = DVector::zeros(m);
    let mut u_max = DVector::zeros(m);
    let mut open = z0;
    for k in 0..m {
        u_max[k] = (r - open).clamp(0.0, 1.0);
        u_min[k] = -(open - r).max(0.0);
        open = (open + w[k] / s).clamp(0.0, 1.0);
    }

    let mut drift = DVector::zeros(m);
    let mut acc = z0;
    let mut cum_var = 0.0;
    let mut lo_bound = vec![0.0; m];
    let mut hi_bound = vec![0.0; m];
    for k in 0..m {
        acc += w[k] / s;
        drift[k] = acc;
        cum_var += var[k] / (s * s);
        let b = cfg.backoff * cum_var.sqrt();
        lo_bound[k] = low + b;
        hi_bound[k] = (high - b).max(lo_bound[k]);
    }

    // Exact reachable interval of the state chain; rows whose bound cannot be
    // met get a slack on the violated side.
    let mut soft_rows = Vec::new();
    let (mut lo, mut hi) = (z0, z0);
    for k in 0..m {
        let (nlo, nhi) = (lo + u_min[k] + w[k] / s, hi + u_max[k] + w[k] / s);
        let (mut clo, mut chi) = (nlo.max(lo_bound[k]), nhi.min(hi_bound[k]));
        if nhi < lo_bound[k] {
            soft_rows.push((k, SoftSide::Low));
            clo = nlo;
            chi = nhi;
        } else if nlo > hi_bound[k] {
            soft_rows.push((k, SoftSide::High));
            clo = nlo;
            chi = nhi;
        }
        lo = clo;
        hi = chi;
    }

    let nv = m + soft_rows.len();
    let lower = DMatrix::from_fn(m, m, |i, j| if j <= i { 1.0 } else { 0.0 });
    let ltl = lower.transpose() * &lower;
    let mut p = DMatrix::zeros(nv, nv);
    let a = cfg.alpha;
    p.view_mut((0, 0), (m, m))
        .copy_from(&(DMatrix::identity(m, m) * (2.0 * a) + ltl * (2.0 * (1.0 - a))));
    let rho = cfg.slack_weight();
    for i in m..nv {
        p[(i, i)] = 2.0 * rho;
    }
    let offset = drift.add_scalar(-r);
    let mut q = DVector::zeros(nv);
    q.rows_mut(0, m)
        .copy_from(&(lower.transpose() * &offset * (2.0 * (1.0 - a))));
    let constant = (1.0 - a) * offset.norm_squared();

    // Rows: u ≤ u_max, −u ≤ −u_min, state bounds, −slack ≤ 0.
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    for k in 0..m {
        rows.push((vec![(k, 1.0)], u_max[k]));
        rows.push((vec![(k, -1.0)], -u_min[k]));
    }
    for k in 0..m {
        let slack = soft_rows.iter().position(|(sk, _)| *sk == k).map(|i| (m + i, soft_rows[i].1));
        let prefix = |sign: f64| (0..=k).map(|j| (j, sign)).collect::<Vec<_>>();
        // z̄ = drift + L u  ≥ lo  ⇔  −L u ≤ drift − lo
        let mut low_row = prefix(-1.0);
        if let Some((col, SoftSide::Low)) = slack {
            low_row.push((col, -1.0));
        }
        rows.push((low_row, drift[k] - lo_bound[k]));
        let mut high_row = prefix(1.0);
        if let Some((col, SoftSide::High)) = slack {
            high_row.push((col, -1.0));
        }
        rows.push((high_row, hi_bound[k] - drift[k]));
    }
    for i in m..nv {
        rows.push((vec![(i, -1.0)], 0.0));
    }
    let mut g = DMatrix::zeros(rows.len(), nv);
    let mut h = DVector::zeros(rows.len());
    for (i, (entries, rhs)) in rows.into_iter().enumerate() {
        for (j, v) in entries {
            g[(i, j)] = v;
        }
        h[i] = rhs;
    }
    BlockQp {
        qp: Qp::new(p, q, g, h).expect("block dimensions are consistent"),
        drift,
        u_min,
        u_max,
        soft_rows,
        constant,
    }
}

/// Solution over the whole horizon, in joules.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPlan {
    /// `M × n_s`; row `k` is applied in slot `k`.
    pub u: DMatrix<f64>,
    /// `M × n_s` predicted means `z̄_1..z̄_M`.
    pub predicted: DMatrix<f64>,
    /// Bounds used in the solve.
    pub u_min: DMatrix<f64>,
    pub u_max: DMatrix<f64>,
    /// Objective value in J², including softening penalties.
    pub objective: f64,
    pub iterations: usize,
}

impl ControlPlan {
    pub fn first_action(&self) -> Vec<f64> {
        self.u.row(0).iter().copied().collect()
    }
}

/// Mean and variance of the buffer trajectory implied by a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonState {
    /// `(M + 1) × n_s`; row 0 holds the measured buffers.
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
    pub slot0: usize,
}

impl HorizonState {
    pub fn predict(
        initial: &[f64],
        plan: &ControlPlan,
        dist: &DisturbanceForecast,
        slot0: usize,
    ) -> Result<Self, MpcError> {
        let (m, n) = plan.u.shape();
        if dist.horizon() != m || dist.bs_count() != n || initial.len() != n {
            return Err(MpcError::Dimension("plan, disturbance and buffers disagree".into()));
        }
        let mut mean = DMatrix::zeros(m + 1, n);
        let mut variance = DMatrix::zeros(m + 1, n);
        for j in 0..n {
            mean[(0, j)] = initial[j];
            for k in 0..m {
                mean[(k + 1, j)] = mean[(k, j)] + plan.u[(k, j)] + dist.mean[(k, j)];
                variance[(k + 1, j)] = variance[(k, j)] + dist.variance[(k, j)];
            }
        }
        Ok(Self { mean, variance, slot0 })
    }
}

pub fn solve_horizon(problem: &HorizonQp) -> Result<ControlPlan, MpcError> {
    solve_horizon_with(problem, &QpSettings::default())
}

pub fn solve_horizon_with(problem: &HorizonQp, settings: &QpSettings) -> Result<ControlPlan, MpcError> {
    let m = problem.horizon();
    let n = problem.blocks.len();
    let s = problem.config.b_max;
    let mut u = DMatrix::zeros(m, n);
    let mut predicted = DMatrix::zeros(m, n);
    let mut u_min = DMatrix::zeros(m, n);
    let mut u_max = DMatrix::zeros(m, n);
    let mut objective = 0.0;
    let mut iterations = 0;
    for (j, block) in problem.blocks.iter().enumerate() {
        let sol = block
            .qp
            .solve_with(settings)
            .map_err(|source| MpcError::Solver { column: j, source })?;
        iterations = iterations.max(sol.iterations);
        objective += (sol.objective + block.constant) * s * s;
        let mut z = 0.0;
        for k in 0..m {
            // Interior-point iterates sit strictly inside; snap onto the box.
            let uk = sol.x[k].clamp(block.u_min[k], block.u_max[k]);
            z += uk;
            u[(k, j)] = uk * s;
            predicted[(k, j)] = (block.drift[k] + z) * s;
            u_min[(k, j)] = block.u_min[k] * s;
            u_max[(k, j)] = block.u_max[k] * s;
        }
    }
    Ok(ControlPlan {
        u,
        predicted,
        u_min,
        u_max,
        objective,
        iterations,
    })
}

/// One receding-horizon step: returns the action of the current slot.
/// Positive entries are demands, negative entries are offers.
pub fn mpc_step(initial: &[f64], dist: &DisturbanceForecast, cfg: &MpcConfig) -> Result<Vec<f64>, MpcError> {
    let problem = build_horizon_qp(initial, dist, cfg)?;
    Ok(solve_horizon(&problem)?.first_action())
}
