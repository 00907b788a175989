//! Dense convex quadratic programs solved by a primal-dual interior-point
//! method (Mehrotra predictor-corrector).
//!
//! ```text
//! minimize    ½ xᵀ P x + qᵀ x
//! subject to  G x ≤ h
//! ```
//!
//! `P` must be symmetric positive semidefinite. Problems here are small (tens
//! of variables), so every Newton step forms and factors the reduced normal
//! matrix `P + Gᵀ W G` densely.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    IterationLimit {
        iterations: usize,
        residual: f64,
        /// Last iterate; may be slightly infeasible.
        best: Vec<f64>,
    },
    #[error("Newton system is singular")]
    Singular,
}

#[derive(Debug, Clone)]
pub struct Qp {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub tolerance: f64,
    /// Residual at which the best iterate is still returned once the
    /// iteration limit is reached.
    pub acceptable: f64,
    pub max_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            acceptable: 1e-7,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of `G x ≤ h`.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// `‖P x + q + Gᵀ λ‖∞`
    pub stationarity: f64,
    /// `max(0, max(G x - h))`
    pub infeasibility: f64,
}

impl Qp {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, g: DMatrix<f64>, h: DVector<f64>) -> Result<Self, QpError> {
        let n = q.len();
        if p.shape() != (n, n) {
            return Err(QpError::Dimension(format!("P is {:?}, expected {n}x{n}", p.shape())));
        }
        if g.ncols() != n || g.nrows() != h.len() {
            return Err(QpError::Dimension(format!(
                "G is {:?}, h has {} rows, {n} variables",
                g.shape(),
                h.len()
            )));
        }
        Ok(Self { p, q, g, h })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        (&self.g * x - &self.h).iter().fold(0.0, |m, v| m.max(*v))
    }

    pub fn solve(&self) -> Result<QpSolution, QpError> {
        self.solve_with(&QpSettings::default())
    }

    pub fn solve_with(&self, settings: &QpSettings) -> Result<QpSolution, QpError> {
        let n = self.dim();
        let m = self.h.len();
        if m == 0 {
            return self.solve_unconstrained();
        }
        let mut x = DVector::zeros(n);
        // Start with slacks and multipliers well inside the positive orthant.
        let r0 = &self.h - &self.g * &x;
        let mut s = r0.map(|v| v.max(1.0));
        let mut z = DVector::from_element(m, 1.0);

        let scale_d = 1.0 + self.q.amax();
        let reg = 1e-14 * (1.0 + self.p.diagonal().amax());
        let scale_p = 1.0 + self.h.amax();
        let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;

        for iter in 0..settings.max_iterations {
            let r_d = &self.p * &x + &self.q + self.g.tr_mul(&z);
            let r_p = &self.g * &x + &s - &self.h;
            let mu = s.dot(&z) / m as f64;
            let res = (r_d.amax() / scale_d).max(r_p.amax() / scale_p).max(mu);
            if best.as_ref().is_none_or(|b| res < b.0) {
                best = Some((res, x.clone(), z.clone()));
            }
            if r_d.amax() <= settings.tolerance * scale_d
                && r_p.amax() <= settings.tolerance * scale_p
                && mu <= settings.tolerance
            {
                let (x, z) = self.polish(x, z, &s);
                return Ok(self.finish(x, z, iter));
            }

            let w = s.zip_map(&z, |si, zi| zi / si);
            let mut normal = self.p.clone();
            let gw = DMatrix::from_fn(m, n, |i, j| self.g[(i, j)] * w[i]);
            normal += self.g.tr_mul(&gw);
            for i in 0..n {
                normal[(i, i)] += reg;
            }
            let Some(chol) = Cholesky::new(normal) else {
                break;
            };

            // Solves the Newton system for a complementarity residual r_c.
            let direction = |r_c: &DVector<f64>| {
                let rhs = -&r_d - self.g.tr_mul(&w.component_mul(&r_p))
                    + self.g.tr_mul(&r_c.component_div(&s));
                let dx = chol.solve(&rhs);
                let dz = w.component_mul(&(&self.g * &dx + &r_p)) - r_c.component_div(&s);
                let ds = -(r_c + s.component_mul(&dz)).component_div(&z);
                (dx, ds, dz)
            };

            // Predictor.
            let r_aff = s.component_mul(&z);
            let (_, ds_a, dz_a) = direction(&r_aff);
            let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
            let mu_aff = (&s + a_aff * &ds_a).dot(&(&z + a_aff * &dz_a)) / m as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

            // Corrector.
            let r_c = r_aff + ds_a.component_mul(&dz_a) - DVector::from_element(m, sigma * mu);
            let (dx, ds, dz) = direction(&r_c);
            let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
            x += alpha * dx;
            s += alpha * ds;
            z += alpha * dz;
        }
        match best {
            Some((res, x, z)) if res <= settings.acceptable => Ok(self.finish(x, z, settings.max_iterations)),
            Some((res, x, _)) => Err(QpError::IterationLimit {
                iterations: settings.max_iterations,
                residual: res,
                best: x.iter().copied().collect(),
            }),
            None => Err(QpError::Singular),
        }
    }

    /// Re-solves the equality-constrained problem on the nearly active rows.
    /// The result replaces the interior iterate when it is feasible and no
    /// worse, which removes the `√μ` offset from degenerate bounds.
    fn polish(&self, x: DVector<f64>, z: DVector<f64>, s: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.dim();
        let active: Vec<usize> = (0..s.len()).filter(|&i| s[i] <= 1e-5 * (1.0 + self.h[i].abs())).collect();
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.p);
        rhs.rows_mut(0, n).copy_from(&(-&self.q));
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = self.g[(i, j)];
                kkt[(j, n + r)] = self.g[(i, j)];
            }
            rhs[n + r] = self.h[i];
        }
        let Ok(sol) = kkt.svd(true, true).solve(&rhs, 1e-12) else {
            return (x, z);
        };
        let xp = sol.rows(0, n).into_owned();
        let tol = 1e-12 * (1.0 + self.h.amax());
        if self.max_violation(&xp) > tol || self.objective(&xp) > self.objective(&x) + tol {
            return (x, z);
        }
        let mut zp = DVector::zeros(self.h.len());
        for (r, &i) in active.iter().enumerate() {
            zp[i] = sol[n + r];
        }
        if zp.iter().any(|v| *v < -1e-9) {
            return (xp, z);
        }
        (xp, zp.map(|v| v.max(0.0)))
    }

    fn solve_unconstrained(&self) -> Result<QpSolution, QpError> {
        let chol = Cholesky::new(self.p.clone()).ok_or(QpError::Singular)?;
        let x = chol.solve(&(-&self.q));
        Ok(self.finish(x, DVector::zeros(0), 0))
    }

    fn finish(&self, x: DVector<f64>, z: DVector<f64>, iterations: usize) -> QpSolution {
        let stationarity = (&self.p * &x + &self.q + self.g.tr_mul(&z)).amax();
        QpSolution {
            objective: self.objective(&x),
            infeasibility: self.max_violation(&x),
            x,
            multipliers: z,
            iterations,
            stationarity,
        }
    }
}

/// Largest step in `(0, 1]` keeping `v + a·dv ≥ 0`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(vi, di)| -vi / di)
        .fold(1.0, f64::min)
}
