//! Matching source offers to consumer demands within one slot.
//!
//! Two paths share the same problem data. The continuous path minimizes
//!
//! ```text
//! β Σ_j (Σ_i y_ij e_ij − d_j)² − (1 − β) Σ_ij exp(y_ij / g_ij)
//! ```
//!
//! over `0 ≤ y_ij ≤ 1`, `Σ_j y_ij ≤ 1`. The second term is concave, so the
//! solver runs projected-gradient descent from several starts and keeps the
//! best point. The assignment path builds a square cost matrix and solves it
//! with the Hungarian method, giving a one-to-one matching.
//!
//! Energies are divided by `scale` (normally `B_max`) before entering either
//! objective so both terms are dimensionless.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{GridError, PpgTopology};

#[derive(Debug, Error)]
pub enum AllocationError {
    #[error("invalid allocation problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Party {
    pub bs: usize,
    /// Offer of a source or demand of a consumer (J).
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    pub sources: Vec<Party>,
    pub consumers: Vec<Party>,
    /// Hop counts `g_ij`.
    pub hops: DMatrix<usize>,
    /// Attenuation `a(g_ij)`.
    pub attenuation: DMatrix<f64>,
    pub beta: f64,
    /// Energy unit of both objectives (J).
    pub scale: f64,
}

impl AllocationProblem {
    pub fn new(
        sources: Vec<Party>,
        consumers: Vec<Party>,
        hops: DMatrix<usize>,
        attenuation: DMatrix<f64>,
        beta: f64,
        scale: f64,
    ) -> Result<Self, AllocationError> {
        let (i, j) = (sources.len(), consumers.len());
        if hops.shape() != (i, j) || attenuation.shape() != (i, j) {
            return Err(AllocationError::Invalid(format!(
                "{i} sources, {j} consumers but hops {:?} and attenuation {:?}",
                hops.shape(),
                attenuation.shape()
            )));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(AllocationError::Invalid(format!("beta {beta} outside [0, 1]")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(AllocationError::Invalid(format!("scale {scale} must be positive")));
        }
        if let Some(p) = sources.iter().chain(&consumers).find(|p| !(p.amount >= 0.0 && p.amount.is_finite())) {
            return Err(AllocationError::Invalid(format!("BS {} has amount {}", p.bs, p.amount)));
        }
        if hops.iter().any(|&g| g == 0) {
            return Err(AllocationError::Invalid("a BS cannot trade with itself (g = 0)".into()));
        }
        if attenuation.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(AllocationError::Invalid("attenuation must lie in [0, 1]".into()));
        }
        Ok(Self {
            sources,
            consumers,
            hops,
            attenuation,
            beta,
            scale,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty() || self.consumers.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.sources.len(), self.consumers.len())
    }

    /// `e_ij = offer_i · a(g_ij)` (J).
    pub fn available(&self, i: usize, j: usize) -> f64 {
        self.sources[i].amount * self.attenuation[(i, j)]
    }

    pub fn available_matrix(&self) -> DMatrix<f64> {
        let (ni, nj) = self.shape();
        DMatrix::from_fn(ni, nj, |i, j| self.available(i, j))
    }

    /// Continuous objective in `scale` units.
    pub fn objective(&self, y: &DMatrix<f64>) -> f64 {
        let (ni, nj) = self.shape();
        let mut f1 = 0.0;
        for j in 0..nj {
            let got: f64 = (0..ni).map(|i| y[(i, j)] * self.available(i, j)).sum();
            f1 += ((got - self.consumers[j].amount) / self.scale).powi(2);
        }
        let mut f2 = 0.0;
        for i in 0..ni {
            for j in 0..nj {
                f2 -= (y[(i, j)] / self.hops[(i, j)] as f64).exp();
            }
        }
        self.beta * f1 + (1.0 - self.beta) * f2
    }

    fn gradient(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let (ni, nj) = self.shape();
        let e = DMatrix::from_fn(ni, nj, |i, j| self.available(i, j) / self.scale);
        let resid: Vec<f64> = (0..nj)
            .map(|j| (0..ni).map(|i| y[(i, j)] * e[(i, j)]).sum::<f64>() - self.consumers[j].amount / self.scale)
            .collect();
        DMatrix::from_fn(ni, nj, |i, j| {
            let g = self.hops[(i, j)] as f64;
            2.0 * self.beta * resid[j] * e[(i, j)] - (1.0 - self.beta) * (y[(i, j)] / g).exp() / g
        })
    }

    /// Long-format CSV: `source_bs,consumer_bs,offer,demand,hops,available`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["source_bs", "consumer_bs", "offer", "demand", "hops", "available"])?;
        for (i, s) in self.sources.iter().enumerate() {
            for (j, c) in self.consumers.iter().enumerate() {
                w.write_record(&[
                    s.bs.to_string(),
                    c.bs.to_string(),
                    s.amount.to_string(),
                    c.amount.to_string(),
                    self.hops[(i, j)].to_string(),
                    self.available(i, j).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Splits per-BS actions into sources (`u < 0`) and consumers (`u > 0`) and
/// fills hop counts and attenuation from the topology.
pub fn build_problem(
    actions: &[f64],
    topo: &PpgTopology,
    beta: f64,
    scale: f64,
) -> Result<AllocationProblem, AllocationError> {
    if actions.len() != topo.bs_count() {
        return Err(AllocationError::Invalid(format!(
            "{} actions for {} BSs",
            actions.len(),
            topo.bs_count()
        )));
    }
    let mut sources = Vec::new();
    let mut consumers = Vec::new();
    for (bs, &u) in actions.iter().enumerate() {
        if !u.is_finite() {
            return Err(AllocationError::Invalid(format!("BS {bs} action {u}")));
        }
        if u < 0.0 {
            sources.push(Party { bs, amount: -u });
        } else if u > 0.0 {
            consumers.push(Party { bs, amount: u });
        }
    }
    let (ni, nj) = (sources.len(), consumers.len());
    let mut hops = DMatrix::from_element(ni, nj, 1usize);
    for i in 0..ni {
        for j in 0..nj {
            hops[(i, j)] = topo.unique_route(sources[i].bs, consumers[j].bs)?.hops();
        }
    }
    let attenuation = hops.map(|g| topo.attenuation(g));
    AllocationProblem::new(sources, consumers, hops, attenuation, beta, scale)
}

/// Fractions `y_ij` of `e_ij` shipped from source `i` to consumer `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationMatrix {
    pub y: DMatrix<f64>,
}

impl AllocationMatrix {
    pub fn zeros(ni: usize, nj: usize) -> Self {
        Self {
            y: DMatrix::zeros(ni, nj),
        }
    }

    /// Largest violation of `0 ≤ y ≤ 1` and `Σ_j y_ij ≤ 1`.
    pub fn violation(&self) -> f64 {
        let mut v: f64 = 0.0;
        for x in self.y.iter() {
            v = v.max(-x).max(x - 1.0);
        }
        for row in self.y.row_iter() {
            v = v.max(row.sum() - 1.0);
        }
        v.max(0.0)
    }

    /// Energy leaving source `i` towards consumer `j` (J).
    pub fn sent(&self, p: &AllocationProblem, i: usize, j: usize) -> f64 {
        self.y[(i, j)] * p.sources[i].amount
    }

    /// Energy arriving at each consumer (J).
    pub fn delivered(&self, p: &AllocationProblem) -> Vec<f64> {
        let (ni, nj) = p.shape();
        (0..nj)
            .map(|j| (0..ni).map(|i| self.y[(i, j)] * p.available(i, j)).sum())
            .collect()
    }

    /// Long-format CSV: `source_bs,consumer_bs,y,sent,delivered`.
    pub fn write_csv<W: Write>(&self, p: &AllocationProblem, w: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["source_bs", "consumer_bs", "y", "sent", "delivered"])?;
        for (i, s) in p.sources.iter().enumerate() {
            for (j, c) in p.consumers.iter().enumerate() {
                w.write_record(&[
                    s.bs.to_string(),
                    c.bs.to_string(),
                    self.y[(i, j)].to_string(),
                    self.sent(p, i, j).to_string(),
                    (self.y[(i, j)] * p.available(i, j)).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvexOptions {
    pub max_iterations: usize,
    /// Projected-gradient residual `‖y − P(y − ∇f)‖∞` at which a descent stops.
    pub tolerance: f64,
    /// Random starts on top of the fixed ones.
    pub random_starts: usize,
    /// All vertex starts are tried when there are at most this many.
    pub vertex_limit: usize,
    /// Vertex starts sampled when there are more than `vertex_limit`.
    pub random_vertices: usize,
    pub seed: u64,
}

impl Default for ConvexOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            tolerance: 1e-9,
            random_starts: 8,
            vertex_limit: 256,
            random_vertices: 64,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexSolution {
    pub allocation: AllocationMatrix,
    pub objective: f64,
    /// Projected-gradient residual of the returned point.
    pub residual: f64,
    /// False when the best descent hit the iteration limit.
    pub converged: bool,
}

pub fn solve_convex(p: &AllocationProblem) -> ConvexSolution {
    solve_convex_with(p, &ConvexOptions::default())
}

pub fn solve_convex_with(p: &AllocationProblem, opts: &ConvexOptions) -> ConvexSolution {
    let (ni, nj) = p.shape();
    if p.is_empty() {
        return ConvexSolution {
            allocation: AllocationMatrix::zeros(ni, nj),
            objective: 0.0,
            residual: 0.0,
            converged: true,
        };
    }
    let mut best: Option<ConvexSolution> = None;
    for start in starts(p, opts) {
        let (y, residual, converged) = descend(p, start, opts);
        let objective = p.objective(&y);
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(ConvexSolution {
                allocation: AllocationMatrix { y },
                objective,
                residual,
                converged,
            });
        }
    }
    best.expect("at least one start")
}

fn starts(p: &AllocationProblem, opts: &ConvexOptions) -> Vec<DMatrix<f64>> {
    let (ni, nj) = p.shape();
    let mut out = vec![
        DMatrix::zeros(ni, nj),
        DMatrix::from_element(ni, nj, 1.0 / nj as f64),
        greedy_fill(p),
    ];
    // Vertices of the row-wise capped simplex: each source ships everything
    // to one consumer or nothing.
    let count = (nj as u64 + 1).checked_pow(ni as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    match count {
        Some(c) if c <= opts.vertex_limit as u64 => {
            for code in 0..c {
                let mut y = DMatrix::zeros(ni, nj);
                let mut rest = code;
                for i in 0..ni {
                    let pick = (rest % (nj as u64 + 1)) as usize;
                    rest /= nj as u64 + 1;
                    if pick < nj {
                        y[(i, pick)] = 1.0;
                    }
                }
                out.push(y);
            }
        }
        _ => {
            for _ in 0..opts.random_vertices {
                let mut y = DMatrix::zeros(ni, nj);
                for i in 0..ni {
                    let pick = rng.random_range(0..=nj);
                    if pick < nj {
                        y[(i, pick)] = 1.0;
                    }
                }
                out.push(y);
            }
        }
    }
    for _ in 0..opts.random_starts {
        let mut y = DMatrix::from_fn(ni, nj, |_, _| rng.random::<f64>());
        project(&mut y);
        out.push(y);
    }
    out
}

/// Serves consumers in order of demand from the sources that reach them with
/// the least loss.
fn greedy_fill(p: &AllocationProblem) -> DMatrix<f64> {
    let (ni, nj) = p.shape();
    let mut y = DMatrix::zeros(ni, nj);
    let mut left: Vec<f64> = vec![1.0; ni];
    let mut order: Vec<usize> = (0..nj).collect();
    order.sort_by(|&a, &b| p.consumers[b].amount.total_cmp(&p.consumers[a].amount).then(a.cmp(&b)));
    for j in order {
        let mut need = p.consumers[j].amount;
        let mut srcs: Vec<usize> = (0..ni).collect();
        srcs.sort_by(|&a, &b| p.attenuation[(b, j)].total_cmp(&p.attenuation[(a, j)]).then(a.cmp(&b)));
        for i in srcs {
            let e = p.available(i, j);
            if need <= 0.0 || e <= 0.0 || left[i] <= 0.0 {
                continue;
            }
            let take = (need / e).min(left[i]);
            y[(i, j)] = take;
            left[i] -= take;
            need -= take * e;
        }
    }
    y
}

/// Euclidean projection of each row onto `{0 ≤ y ≤ 1, Σ y ≤ 1}`.
fn project(y: &mut DMatrix<f64>) {
    for mut row in y.row_iter_mut() {
        let clipped: f64 = row.iter().map(|v| v.clamp(0.0, 1.0)).sum();
        if clipped <= 1.0 {
            row.apply(|v| *v = v.clamp(0.0, 1.0));
            continue;
        }
        let (mut lo, mut hi) = (0.0, row.max());
        for _ in 0..100 {
            let tau = 0.5 * (lo + hi);
            let s: f64 = row.iter().map(|v| (v - tau).clamp(0.0, 1.0)).sum();
            if s > 1.0 {
                lo = tau;
            } else {
                hi = tau;
            }
        }
        row.apply(|v| *v = (*v - hi).clamp(0.0, 1.0));
    }
}

fn residual(p: &AllocationProblem, y: &DMatrix<f64>) -> f64 {
    let mut step = y - p.gradient(y);
    project(&mut step);
    (y - step).amax()
}

/// Projected gradient with Barzilai-Borwein steps and Armijo backtracking.
fn descend(p: &AllocationProblem, mut y: DMatrix<f64>, opts: &ConvexOptions) -> (DMatrix<f64>, f64, bool) {
    project(&mut y);
    let mut f = p.objective(&y);
    let mut g = p.gradient(&y);
    let mut step = 1.0;
    for _ in 0..opts.max_iterations {
        let mut t = step;
        let (next, fn_next) = loop {
            let mut cand = &y - &g * t;
            project(&mut cand);
            let fc = p.objective(&cand);
            let decrease = g.dot(&(&y - &cand)) - (&cand - &y).norm_squared() / (2.0 * t);
            if fc <= f - 1e-4 * decrease.max(0.0) || t < 1e-14 {
                break (cand, fc);
            }
            t *= 0.5;
        };
        let s = &next - &y;
        if s.amax() == 0.0 {
            break;
        }
        let g_next = p.gradient(&next);
        let d = &g_next - &g;
        let sd = s.dot(&d);
        step = if sd > 1e-16 { (s.norm_squared() / sd).clamp(1e-8, 1e8) } else { 1.0 };
        y = next;
        f = fn_next;
        g = g_next;
        if residual(p, &y) <= opts.tolerance {
            return (y.clone(), residual(p, &y), true);
        }
    }
    let r = residual(p, &y);
    (y, r, r <= opts.tolerance)
}

/// Square cost matrix of the assignment path; padding entries equal the
/// largest real cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub c: DMatrix<f64>,
    pub rows: usize,
    pub cols: usize,
}

pub fn build_cost_matrix(p: &AllocationProblem) -> CostMatrix {
    let (ni, nj) = p.shape();
    let a = ni.max(nj);
    let real = DMatrix::from_fn(ni, nj, |i, j| {
        let gap = (p.available(i, j) - p.consumers[j].amount) / p.scale;
        p.beta * gap * gap - (1.0 - p.beta) * (1.0 / p.hops[(i, j)] as f64).exp()
    });
    let pad = real.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = if pad.is_finite() { pad } else { 0.0 };
    let c = DMatrix::from_fn(a, a, |i, j| if i < ni && j < nj { real[(i, j)] } else { pad });
    CostMatrix { c, rows: ni, cols: nj }
}

/// Minimum-cost perfect matching of a square matrix, returned as the column
/// of each row. Among optimal matchings the lexicographically smallest
/// column sequence is chosen.
pub fn solve_hungarian(c: &DMatrix<f64>) -> Vec<usize> {
    let n = c.nrows();
    assert_eq!(n, c.ncols(), "cost matrix must be square");
    assert!(c.iter().all(|v| v.is_finite()), "cost matrix must be finite");
    if n == 0 {
        return Vec::new();
    }
    let optimum = assignment_cost(c, &hungarian(c));
    let tol = 1e-9 * (1.0 + c.amax() * n as f64);
    let mut rows: Vec<usize> = (0..n).collect();
    let mut cols: Vec<usize> = (0..n).collect();
    let mut fixed = 0.0;
    let mut out = Vec::with_capacity(n);
    while !rows.is_empty() {
        let r = rows[0];
        let mut chosen = None;
        for (k, &col) in cols.iter().enumerate() {
            let rest_rows = &rows[1..];
            let rest_cols: Vec<usize> = cols.iter().enumerate().filter(|(q, _)| *q != k).map(|(_, &v)| v).collect();
            let sub = DMatrix::from_fn(rest_rows.len(), rest_cols.len(), |i, j| c[(rest_rows[i], rest_cols[j])]);
            let rest = if sub.nrows() == 0 { 0.0 } else { assignment_cost(&sub, &hungarian(&sub)) };
            if fixed + c[(r, col)] + rest <= optimum + tol {
                chosen = Some(k);
                break;
            }
        }
        let k = chosen.expect("an optimal completion exists");
        fixed += c[(r, cols[k])];
        out.push(cols.remove(k));
        rows.remove(0);
    }
    out
}

fn assignment_cost(c: &DMatrix<f64>, cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum()
}

/// O(n³) shortest augmenting path with potentials.
fn hungarian(c: &DMatrix<f64>) -> Vec<usize> {
    let n = c.nrows();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=n {
        cols[matched[j] - 1] = j - 1;
    }
    cols
}

/// Source/consumer index pairs of the optimal matching, padding dropped.
pub fn hungarian_pairs(cost: &CostMatrix) -> Vec<(usize, usize)> {
    solve_hungarian(&cost.c)
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < cost.rows && j < cost.cols)
        .collect()
}

/// Each matched pair ships `min(1, d_j / e_ij)` of the available energy.
pub fn assignment_to_allocation(pairs: &[(usize, usize)], p: &AllocationProblem) -> AllocationMatrix {
    let (ni, nj) = p.shape();
    let mut m = AllocationMatrix::zeros(ni, nj);
    for &(i, j) in pairs {
        let e = p.available(i, j);
        m.y[(i, j)] = if e > 0.0 { (p.consumers[j].amount / e).min(1.0) } else { 0.0 };
    }
    m
}

pub fn solve_assignment(p: &AllocationProblem) -> AllocationMatrix {
    if p.is_empty() {
        let (ni, nj) = p.shape();
        return AllocationMatrix::zeros(ni, nj);
    }
    assignment_to_allocation(&hungarian_pairs(&build_cost_matrix(p)), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridParams;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy};

    fn problem(offers: &[f64], demands: &[f64], hops: &[usize], beta: f64) -> AllocationProblem {
        let (ni, nj) = (offers.len(), demands.len());
        let hops = DMatrix::from_row_slice(ni, nj, hops);
        let params = GridParams::default();
        let attenuation = hops.map(|g| params.attenuation(g));
        AllocationProblem::new(
            offers.iter().enumerate().map(|(bs, &amount)| Party { bs, amount }).collect(),
            demands
                .iter()
                .enumerate()
                .map(|(k, &amount)| Party { bs: ni + k, amount })
                .collect(),
            hops,
            attenuation,
            beta,
            360e3,
        )
        .unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn random_feasible(rng: &mut ChaCha8Rng, ni: usize, nj: usize) -> DMatrix<f64> {
        let mut y = DMatrix::from_fn(ni, nj, |_, _| rng.random::<f64>());
        for mut row in y.row_iter_mut() {
            let total: f64 = row.sum();
            let cap: f64 = rng.random();
            if total > cap {
                row *= cap / total;
            }
        }
        y
    }

    #[test]
    fn availability_applies_attenuation() {
        let t = PpgTopology::chains(2, 1, GridParams::default()).unwrap();
        let p = build_problem(&[-100e3, 50e3], &t, 0.5, 360e3).unwrap();
        assert_eq!(p.hops[(0, 0)], 2);
        assert_relative_eq!(p.available(0, 0), 100e3 * t.attenuation(2));
        assert!(p.available(0, 0) <= 100e3);
        let idle = build_problem(&[-100e3, 0.0], &t, 0.5, 360e3).unwrap();
        assert!(idle.is_empty());
        assert_eq!(solve_convex(&idle).allocation.y.shape(), (1, 0));
    }

    #[test]
    fn self_trade_rejected() {
        let hops = DMatrix::from_element(1, 1, 0usize);
        let r = AllocationProblem::new(
            vec![Party { bs: 0, amount: 1.0 }],
            vec![Party { bs: 0, amount: 1.0 }],
            hops,
            DMatrix::from_element(1, 1, 1.0),
            0.5,
            1.0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn exact_match_is_fully_used() {
        let mut p = problem(&[100e3], &[0.0], &[1], 1.0);
        p.consumers[0].amount = p.available(0, 0);
        let s = solve_convex(&p);
        assert_relative_eq!(s.allocation.y[(0, 0)], 1.0, epsilon = 1e-6);
        assert!(s.objective.abs() < 1e-12);
    }

    #[test]
    fn zero_demand_ships_nothing() {
        let p = problem(&[100e3, 50e3], &[0.0, 0.0], &[1, 2, 3, 4], 1.0);
        let s = solve_convex(&p);
        assert!(s.allocation.y.amax() < 1e-9);
    }

    #[test]
    fn single_consumer_gets_what_is_reachable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let ni = rng.random_range(1..=4);
            let offers: Vec<f64> = (0..ni).map(|_| rng.random_range(1e3..150e3)).collect();
            let hops: Vec<usize> = (0..ni).map(|_| rng.random_range(1..=6)).collect();
            let demand = rng.random_range(1e3..300e3);
            let p = problem(&offers, &[demand], &hops, 1.0);
            let reach: f64 = (0..ni).map(|i| p.available(i, 0)).sum();
            let got = solve_convex(&p).allocation.delivered(&p)[0];
            assert!((got - demand.min(reach)).abs() <= 1e-6 * p.scale, "{got} vs {}", demand.min(reach));
        }
    }

    #[test]
    fn convex_dominates_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let (ni, nj) = (2, 2);
            let offers: Vec<f64> = (0..ni).map(|_| rng.random_range(0.0..200e3)).collect();
            let demands: Vec<f64> = (0..nj).map(|_| rng.random_range(0.0..200e3)).collect();
            let hops: Vec<usize> = (0..ni * nj).map(|_| rng.random_range(1..=8)).collect();
            let p = problem(&offers, &demands, &hops, rng.random());
            let s = solve_convex(&p);
            assert!(s.allocation.violation() <= 1e-9);
            let best = (0..20_000)
                .map(|_| p.objective(&random_feasible(&mut rng, ni, nj)))
                .fold(f64::INFINITY, f64::min);
            assert!(s.objective <= best + 1e-6, "{} > {best}", s.objective);
        }
    }

    #[test]
    fn cost_matrix_examples() {
        let mut p = problem(&[100e3], &[0.0], &[1], 0.5);
        p.consumers[0].amount = p.available(0, 0);
        let c = build_cost_matrix(&p);
        assert_relative_eq!(c.c[(0, 0)], -0.5 * std::f64::consts::E, epsilon = 1e-12);

        let p = problem(&[100e3, 20e3], &[60e3], &[1, 3], 0.5);
        let c = build_cost_matrix(&p);
        assert_eq!(c.c.shape(), (2, 2));
        let max = c.c[(0, 0)].max(c.c[(1, 0)]);
        assert_eq!(c.c[(0, 1)], max);
        assert_eq!(c.c[(1, 1)], max);

        let p = problem(&[100e3], &[60e3], &[4], 1.0);
        let gap = (p.available(0, 0) - 60e3) / 360e3;
        assert_relative_eq!(build_cost_matrix(&p).c[(0, 0)], gap * gap);
    }

    #[test]
    fn hungarian_identity_and_permutations() {
        let base = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(solve_hungarian(&base), vec![0, 1, 2]);
        for perm in permutations(3) {
            let c = DMatrix::from_fn(3, 3, |i, j| if perm[i] == j { 0.0 } else { 1.0 });
            assert_eq!(solve_hungarian(&c), perm);
        }
    }

    #[test]
    fn hungarian_ties_break_lexicographically() {
        let c = DMatrix::from_element(3, 3, 2.0);
        assert_eq!(solve_hungarian(&c), vec![0, 1, 2]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(solve_hungarian(&c), vec![0, 1]);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(-50..50) as f64);
            let got = assignment_cost(&c, &solve_hungarian(&c));
            let best = permutations(n)
                .iter()
                .map(|p| assignment_cost(&c, p))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(got, best);
        }
    }

    #[test]
    fn fraction_rule() {
        let mut p = problem(&[100e3, 40e3], &[40e3, 100e3], &[1, 1, 1, 1], 0.5);
        p.attenuation.fill(1.0);
        let y = assignment_to_allocation(&[(0, 0), (1, 1)], &p);
        assert_relative_eq!(y.y[(0, 0)], 0.4);
        assert_relative_eq!(y.y[(1, 1)], 1.0);
        let y = assignment_to_allocation(&[(0, 0)], &p);
        assert!(y.y.column(1).iter().all(|v| *v == 0.0));
        p.attenuation.fill(0.0);
        assert_eq!(assignment_to_allocation(&[(0, 0)], &p).y[(0, 0)], 0.0);
    }

    #[test]
    fn csv_dumps_have_one_row_per_pair() {
        let p = problem(&[100e3, 40e3], &[40e3], &[1, 2], 0.5);
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
        let mut buf = Vec::new();
        solve_assignment(&p).write_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("source_bs,consumer_bs,y,sent,delivered"));
    }

    fn arb_problem() -> impl Strategy<Value = AllocationProblem> {
        (1usize..=4, 1usize..=4, 0.0..=1.0f64).prop_flat_map(|(ni, nj, beta)| {
            (
                prop::collection::vec(0.0..250e3, ni),
                prop::collection::vec(0.0..250e3, nj),
                prop::collection::vec(1usize..=8, ni * nj),
            )
                .prop_map(move |(o, d, g)| problem(&o, &d, &g, beta))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn convex_path_is_feasible(p in arb_problem()) {
            let s = solve_convex(&p);
            prop_assert!(s.allocation.violation() <= 1e-9);
            for (i, src) in p.sources.iter().enumerate() {
                let out: f64 = (0..p.consumers.len()).map(|j| s.allocation.y[(i, j)] * p.available(i, j)).sum();
                prop_assert!(out <= src.amount * (1.0 + 1e-9));
            }
        }

        #[test]
        fn assignment_path_is_a_matching(p in arb_problem()) {
            let y = solve_assignment(&p);
            prop_assert!(y.violation() <= 1e-9);
            for row in y.y.row_iter() {
                prop_assert!(row.iter().filter(|v| **v > 0.0).count() <= 1);
            }
            for col in y.y.column_iter() {
                prop_assert!(col.iter().filter(|v| **v > 0.0).count() <= 1);
            }
            let pairs = hungarian_pairs(&build_cost_matrix(&p));
            prop_assert_eq!(pairs.len(), p.sources.len().min(p.consumers.len()));
        }
    }
}
