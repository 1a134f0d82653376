//! Entropic optimal transport between discrete measures.
//!
//! The cost is fixed to `c(x, y) = ½‖x − y‖²`. The dual potentials are found by
//! alternating the two soft c-transforms in the log domain:
//!
//! ```text
//! f_i = −ε log Σ_j q_j exp((g_j − c_ij) / ε)
//! g_j = −ε log Σ_i p_i exp((f_i − c_ij) / ε)
//! ```
//!
//! until both the sweep-to-sweep change of `g` and the marginal residual of the
//! coupling density `ξ_ij = exp((f_i + g_j − c_ij) / ε)` fall below `tol`.
//! Potentials are reported in the gauge `Σ_j q_j g_j = 0`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{squared_distance, DiscreteMeasure};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        SolverOptions {
            tol,
            ..Default::default()
        }
    }
}

/// Converged dual potentials and coupling density for a pair `(P, Q)`.
#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    /// Potential on the atoms of `P`.
    pub f: Vec<f64>,
    /// Potential on the atoms of `Q`, `Σ_j q_j g_j = 0`.
    pub g: Vec<f64>,
    pub epsilon: f64,
    /// Dual value `Σ p_i f_i + Σ q_j g_j`, equal to `S_ε(P, Q)` at the optimum.
    pub cost: f64,
    /// `n × m` coupling density with respect to `P ⊗ Q`.
    pub xi: DMatrix<f64>,
    pub iterations: usize,
    /// Final sup-norm marginal residual.
    pub residual: f64,
}

/// The JSON view of a solution (`ξ` is written separately as CSV).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolutionSummary {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub cost: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// `½‖x − y‖²`.
#[inline]
pub fn half_squared_distance(x: &[f64], y: &[f64]) -> f64 {
    0.5 * squared_distance(x, y)
}

pub fn cost_matrix(p: &DiscreteMeasure, q: &DiscreteMeasure) -> DMatrix<f64> {
    DMatrix::from_fn(p.len(), q.len(), |i, j| {
        half_squared_distance(p.point(i), q.point(j))
    })
}

/// `log Σ_k exp(a_k)` with max subtraction.
#[inline]
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Soft c-transform of `g` against `Q`, evaluated at the rows of `cost`.
fn c_transform_rows(cost: &DMatrix<f64>, log_w: &[f64], g: &[f64], eps: f64, out: &mut [f64]) {
    for (i, out_i) in out.iter_mut().enumerate() {
        let terms = (0..g.len()).map(|j| log_w[j] + (g[j] - cost[(i, j)]) / eps);
        *out_i = -eps * log_sum_exp(terms);
    }
}

/// Soft c-transform of `f` against `P`, evaluated at the columns of `cost`.
fn c_transform_cols(cost: &DMatrix<f64>, log_w: &[f64], f: &[f64], eps: f64, out: &mut [f64]) {
    for (j, out_j) in out.iter_mut().enumerate() {
        let terms = (0..f.len()).map(|i| log_w[i] + (f[i] - cost[(i, j)]) / eps);
        *out_j = -eps * log_sum_exp(terms);
    }
}

fn coupling_density(cost: &DMatrix<f64>, f: &[f64], g: &[f64], eps: f64) -> DMatrix<f64> {
    DMatrix::from_fn(f.len(), g.len(), |i, j| ((f[i] + g[j] - cost[(i, j)]) / eps).exp())
}

fn marginal_residual_of(xi: &DMatrix<f64>, p: &[f64], q: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..xi.nrows() {
        let row: f64 = (0..xi.ncols()).map(|j| q[j] * xi[(i, j)]).sum();
        worst = worst.max((row - 1.0).abs());
    }
    for j in 0..xi.ncols() {
        let col: f64 = (0..xi.nrows()).map(|i| p[i] * xi[(i, j)]).sum();
        worst = worst.max((col - 1.0).abs());
    }
    worst
}

/// Solves the entropic dual for `(P, Q)` at regularization `epsilon`.
pub fn solve(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    epsilon: f64,
    opts: SolverOptions,
) -> Result<SinkhornSolution> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(format!(
            "P lives in R^{} but Q in R^{}",
            p.dim(),
            q.dim()
        )));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {}", opts.tol)));
    }

    let cost = cost_matrix(p, q);
    let log_p: Vec<f64> = p.weights().iter().map(|w| w.ln()).collect();
    let log_q: Vec<f64> = q.weights().iter().map(|w| w.ln()).collect();

    let mut f = vec![0.0; p.len()];
    let mut g = vec![0.0; q.len()];
    let mut g_next = vec![0.0; q.len()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        c_transform_rows(&cost, &log_q, &g, epsilon, &mut f);
        c_transform_cols(&cost, &log_p, &f, epsilon, &mut g_next);
        let change = g
            .iter()
            .zip(&g_next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut g, &mut g_next);
        if change <= opts.tol {
            let xi = coupling_density(&cost, &f, &g, epsilon);
            if marginal_residual_of(&xi, p.weights(), q.weights()) <= opts.tol {
                converged = true;
                break;
            }
        }
    }

    if !converged {
        let xi = coupling_density(&cost, &f, &g, epsilon);
        let residual = marginal_residual_of(&xi, p.weights(), q.weights());
        return Err(Error::NoConvergence {
            iterations,
            residual,
        });
    }

    let shift = q.mean(&g);
    for gj in &mut g {
        *gj -= shift;
    }
    for fi in &mut f {
        *fi += shift;
    }
    let xi = coupling_density(&cost, &f, &g, epsilon);
    let residual = marginal_residual_of(&xi, p.weights(), q.weights());
    let dual = p.mean(&f) + q.mean(&g);

    Ok(SinkhornSolution {
        f,
        g,
        epsilon,
        cost: dual,
        xi,
        iterations,
        residual,
    })
}

impl SinkhornSolution {
    /// Optimal plan `π_ij = p_i q_j ξ_ij`.
    pub fn plan(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> DMatrix<f64> {
        let (pw, qw) = (p.weights(), q.weights());
        DMatrix::from_fn(self.xi.nrows(), self.xi.ncols(), |i, j| pw[i] * qw[j] * self.xi[(i, j)])
    }

    pub fn marginal_residual(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
        marginal_residual_of(&self.xi, p.weights(), q.weights())
    }

    /// Sup-norm distance between `(f, g)` and the soft c-transforms of `(g, f)`.
    pub fn fixed_point_residual(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
        let cost = cost_matrix(p, q);
        let log_p: Vec<f64> = p.weights().iter().map(|w| w.ln()).collect();
        let log_q: Vec<f64> = q.weights().iter().map(|w| w.ln()).collect();
        let mut tf = vec![0.0; self.f.len()];
        let mut tg = vec![0.0; self.g.len()];
        c_transform_rows(&cost, &log_q, &self.g, self.epsilon, &mut tf);
        c_transform_cols(&cost, &log_p, &self.f, self.epsilon, &mut tg);
        tf.iter()
            .zip(&self.f)
            .chain(tg.iter().zip(&self.g))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `f` extended to an arbitrary point `x` through the soft c-transform of `g`.
    pub fn extend_f(&self, q: &DiscreteMeasure, x: &[f64]) -> f64 {
        let eps = self.epsilon;
        let terms = q
            .points()
            .zip(q.weights())
            .zip(&self.g)
            .map(|((y, w), gj)| w.ln() + (gj - half_squared_distance(x, y)) / eps)
            .collect::<Vec<_>>();
        -eps * log_sum_exp(terms.into_iter())
    }

    /// `g` extended to an arbitrary point `y` through the soft c-transform of `f`.
    pub fn extend_g(&self, p: &DiscreteMeasure, y: &[f64]) -> f64 {
        let eps = self.epsilon;
        let terms = p
            .points()
            .zip(p.weights())
            .zip(&self.f)
            .map(|((x, w), fi)| w.ln() + (fi - half_squared_distance(x, y)) / eps)
            .collect::<Vec<_>>();
        -eps * log_sum_exp(terms.into_iter())
    }

    /// Moves the constant between the potentials so that `g` is centered
    /// against `reference` (which may differ from the `Q` the solution was
    /// computed for; `g` is extended off-support when needed).
    pub fn recenter_against(&mut self, p: &DiscreteMeasure, reference: &DiscreteMeasure) {
        let values: Vec<f64> = reference.points().map(|y| self.extend_g(p, y)).collect();
        let shift = reference.mean(&values);
        for gj in &mut self.g {
            *gj -= shift;
        }
        for fi in &mut self.f {
            *fi += shift;
        }
    }

    pub fn summary(&self) -> SolutionSummary {
        SolutionSummary {
            f: self.f.clone(),
            g: self.g.clone(),
            epsilon: self.epsilon,
            cost: self.cost,
            residual: self.residual,
            iterations: self.iterations,
        }
    }
}

/// Primal objective `Σ π_ij c_ij + ε Σ π_ij log ξ_ij` at the solution's plan.
pub fn primal_value(sol: &SinkhornSolution, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
    let cost = cost_matrix(p, q);
    let plan = sol.plan(p, q);
    let mut total = 0.0;
    for i in 0..p.len() {
        for j in 0..q.len() {
            let pi = plan[(i, j)];
            total += pi * cost[(i, j)] + sol.epsilon * pi * sol.xi[(i, j)].ln();
        }
    }
    total
}

/// Transport part of the objective, `Σ p_i q_j ξ_ij ½‖x_i − y_j‖²`.
pub fn sinkhorn_cost(sol: &SinkhornSolution, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
    let cost = cost_matrix(p, q);
    let plan = sol.plan(p, q);
    plan.component_mul(&cost).sum()
}

/// The debiased divergence and the three solves it is built from.
#[derive(Debug, Clone)]
pub struct Divergence {
    pub value: f64,
    pub pq: SinkhornSolution,
    pub pp: SinkhornSolution,
    pub qq: SinkhornSolution,
}

/// `D_ε(P, Q) = S_ε(P, Q) − ½ (S_ε(P, P) + S_ε(Q, Q))`.
pub fn sinkhorn_divergence(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    epsilon: f64,
    opts: SolverOptions,
) -> Result<Divergence> {
    let pq = solve(p, q, epsilon, opts)?;
    let pp = solve(p, p, epsilon, opts)?;
    let qq = solve(q, q, epsilon, opts)?;
    let value = pq.cost - 0.5 * (pp.cost + qq.cost);
    Ok(Divergence { value, pq, pp, qq })
}
