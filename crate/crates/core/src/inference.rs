//! Asymptotic variances, limit spectra, confidence intervals and tests built
//! on a converged coupling.
//!
//! Every variance is a plug-in: the formulas are evaluated on whatever
//! measures are passed in, whether population truths or empirical measures.

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{squared_distance, DiscreteMeasure};
use crate::operators::{build_operators, center, KernelOperators, ResolventSystem, Side};
use crate::sinkhorn::{cost_matrix, sinkhorn_divergence, solve, SinkhornSolution, SolverOptions};
use crate::stats::{quantile, two_sided_z};

/// Below this an H1 variance is reported as degenerate.
pub const DEGENERATE_VARIANCE: f64 = 1e-10;
const H0_SYMMETRY_TOL: f64 = 1e-6;
const H0_NEGATIVE_TOL: f64 = 1e-10;
const H0_OBSERVED_TOL: f64 = 1e-12;

/// A test function `η(x, y)` on the product of the supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FunctionalSpec {
    /// `½‖x − y‖²`, whose coupling integral is the transport cost `d_S`.
    HalfSquaredDistance,
    /// `1{‖x − y‖² ≤ t}`, whose coupling integral is `RCol(π, t)`.
    ThresholdIndicator {
        t: f64,
    },
    Constant {
        c: f64,
    },
    /// Row `i` holds `η(x_i, y_j)` for all `j`.
    ExplicitMatrix {
        values: Vec<Vec<f64>>,
    },
}

impl FunctionalSpec {
    pub fn explicit(m: &DMatrix<f64>) -> Self {
        FunctionalSpec::ExplicitMatrix {
            values: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FunctionalSpec::HalfSquaredDistance => Ok(()),
            FunctionalSpec::ThresholdIndicator { t } if t.is_finite() && *t >= 0.0 => Ok(()),
            FunctionalSpec::ThresholdIndicator { t } => Err(Error::InvalidArgument(format!(
                "threshold {t} must be finite and nonnegative"
            ))),
            FunctionalSpec::Constant { c } if c.is_finite() => Ok(()),
            FunctionalSpec::Constant { c } => Err(Error::InvalidArgument(format!("constant {c} is not finite"))),
            FunctionalSpec::ExplicitMatrix { values } => {
                let width = values.first().map_or(0, Vec::len);
                if values.is_empty() || width == 0 {
                    return Err(Error::DimensionMismatch("explicit η matrix is empty".into()));
                }
                if values.iter().any(|r| r.len() != width) {
                    return Err(Error::DimensionMismatch("explicit η matrix is ragged".into()));
                }
                if values.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "explicit η matrix has non-finite entries".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// The `n × m` matrix `η(x_i, y_j)`.
    pub fn evaluate(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<DMatrix<f64>> {
        self.validate()?;
        let (n, m) = (p.len(), q.len());
        Ok(match self {
            FunctionalSpec::HalfSquaredDistance => cost_matrix(p, q),
            FunctionalSpec::ThresholdIndicator { t } => DMatrix::from_fn(n, m, |i, j| {
                if squared_distance(p.point(i), q.point(j)) <= *t {
                    1.0
                } else {
                    0.0
                }
            }),
            FunctionalSpec::Constant { c } => DMatrix::from_element(n, m, *c),
            FunctionalSpec::ExplicitMatrix { values } => {
                if values.len() != n || values[0].len() != m {
                    return Err(Error::DimensionMismatch(format!(
                        "η matrix is {}×{}, measures have {n} and {m} atoms",
                        values.len(),
                        values[0].len()
                    )));
                }
                DMatrix::from_fn(n, m, |i, j| values[i][j])
            }
        })
    }

    /// The same functional on sub-supports (rows and columns picked by index).
    pub fn restrict(&self, rows: &[usize], cols: &[usize]) -> FunctionalSpec {
        match self {
            FunctionalSpec::ExplicitMatrix { values } => FunctionalSpec::ExplicitMatrix {
                values: rows
                    .iter()
                    .map(|&i| cols.iter().map(|&j| values[i][j]).collect())
                    .collect(),
            },
            other => other.clone(),
        }
    }
}

/// How the measures were sampled: sizes, the `√rate` scaling and the weight `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingDesign {
    /// `P_n` against a known `Q`.
    OneSample { n: usize },
    /// `P_n` against `Q_m`; `λ` weighs the `P` side of every variance.
    TwoSample { n: usize, m: usize, lambda: f64 },
}

impl SamplingDesign {
    pub fn one_sample(n: usize) -> Result<Self> {
        let d = SamplingDesign::OneSample { n };
        d.validate()?;
        Ok(d)
    }

    /// `λ = m / (n + m)`.
    pub fn two_sample(n: usize, m: usize) -> Result<Self> {
        let lambda = m as f64 / (n + m).max(1) as f64;
        Self::with_lambda(n, m, lambda)
    }

    pub fn with_lambda(n: usize, m: usize, lambda: f64) -> Result<Self> {
        let d = SamplingDesign::TwoSample { n, m, lambda };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingDesign::OneSample { n } if n >= 1 => Ok(()),
            SamplingDesign::TwoSample { n, m, lambda } if n >= 1 && m >= 1 => validate_lambda(Some(lambda)),
            _ => Err(Error::InvalidArgument("sample sizes must be at least 1".into())),
        }
    }

    /// `n`, or `nm / (n + m)`.
    pub fn rate(&self) -> f64 {
        match *self {
            SamplingDesign::OneSample { n } => n as f64,
            SamplingDesign::TwoSample { n, m, .. } => (n as f64 * m as f64) / (n + m) as f64,
        }
    }

    /// `None` in the one-sample case.
    pub fn lambda(&self) -> Option<f64> {
        match *self {
            SamplingDesign::OneSample { .. } => None,
            SamplingDesign::TwoSample { lambda, .. } => Some(lambda),
        }
    }
}

fn validate_lambda(lambda: Option<f64>) -> Result<()> {
    match lambda {
        Some(l) if !(l > 0.0 && l < 1.0) => Err(Error::InvalidArgument(format!("lambda {l} outside (0, 1)"))),
        _ => Ok(()),
    }
}

fn validate_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("level {level} outside (0, 1)")))
    }
}

/// Point estimate with a normal-theory confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub estimate: f64,
    pub sigma2: f64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    /// Absent for one-sample designs.
    pub lambda: Option<f64>,
}

impl InferenceReport {
    /// Interval `estimate ± z_{1−α/2} √(σ² / rate)`.
    pub fn new(estimate: f64, sigma2: f64, design: SamplingDesign, level: f64) -> Result<Self> {
        validate_level(level)?;
        let rate = design.rate();
        let half = two_sided_z(level)? * (sigma2.max(0.0) / rate).sqrt();
        Ok(InferenceReport {
            estimate,
            sigma2,
            rate,
            ci_low: estimate - half,
            ci_high: estimate + half,
            level,
            lambda: design.lambda(),
        })
    }

    pub fn contains(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

/// `Σ_ij p_i q_j ξ_ij h_ij`.
pub fn coupling_expectation(h: &DMatrix<f64>, sol: &SinkhornSolution, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
    sol.plan(p, q).component_mul(h).sum()
}

fn marginals_of(h: &DMatrix<f64>, ops: &KernelOperators) -> (DVector<f64>, DVector<f64>) {
    let eta_x = DVector::from_fn(ops.kq.nrows(), |i, _| ops.kq.row(i).dot(&h.row(i)));
    let eta_y = DVector::from_fn(ops.kp.nrows(), |j, _| ops.kp.row(j).transpose().dot(&h.column(j)));
    (eta_x, eta_y)
}

fn check_solution(sol: &SinkhornSolution, p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<()> {
    if sol.xi.nrows() != p.len() || sol.xi.ncols() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "solution is {}×{}, measures have {} and {} atoms",
            sol.xi.nrows(),
            sol.xi.ncols(),
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `η_x(x_i) = Σ_j q_j ξ_ij η_ij` and `η_y(y_j) = Σ_i p_i ξ_ij η_ij`.
pub fn eta_marginals(
    eta: &FunctionalSpec,
    sol: &SinkhornSolution,
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_solution(sol, p, q)?;
    let h = eta.evaluate(p, q)?;
    Ok(marginals_of(&h, &build_operators(sol, p, q)))
}

/// Influence functions of `∫ η dπ` on the `P` and `Q` atoms:
/// `(1 − A_Q A_P)^{-1}(η_x − A_Q η_y)` and `(1 − A_P A_Q)^{-1}(η_y − A_P η_x)`.
pub fn influence_functions(h: &DMatrix<f64>, ops: &KernelOperators) -> Result<(DVector<f64>, DVector<f64>)> {
    let (n, m) = (ops.kq.nrows(), ops.kq.ncols());
    if h.nrows() != n || h.ncols() != m {
        return Err(Error::DimensionMismatch(format!(
            "η is {}×{}, operators are {n}×{m}",
            h.nrows(),
            h.ncols()
        )));
    }
    // Subtracting the plan mean first makes constants vanish identically.
    let theta = ops.p.dot(&marginals_of(h, ops).0);
    let h = h.map(|v| v - theta);
    let (eta_x, eta_y) = marginals_of(&h, ops);
    let vx = center(&(&eta_x - ops.apply_aq(&eta_y)), &ops.p);
    let vy = center(&(&eta_y - ops.apply_ap(&eta_x)), &ops.q);
    let ux = ops.resolvent(Side::X)?.solve(&vx)?;
    let uy = ops.resolvent(Side::Y)?.solve(&vy)?;
    Ok((ux, uy))
}

fn weighted_variance(v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let c = center(v, w);
    w.dot(&c.component_mul(&c)).max(0.0)
}

/// `σ²_λ(η) = λ Var_P(u_x) + (1 − λ) Var_Q(u_y)`; `lambda = None` keeps the `P` term only.
pub fn functional_variance(
    eta: &FunctionalSpec,
    sol: &SinkhornSolution,
    ops: &KernelOperators,
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    lambda: Option<f64>,
) -> Result<f64> {
    validate_lambda(lambda)?;
    check_solution(sol, p, q)?;
    let h = eta.evaluate(p, q)?;
    let (ux, uy) = influence_functions(&h, ops)?;
    let var_p = weighted_variance(&ux, &ops.p);
    Ok(match lambda {
        None => var_p,
        Some(l) => l * var_p + (1.0 - l) * weighted_variance(&uy, &ops.q),
    })
}

/// Plug-in inference for `∫ η dπ`.
pub fn functional_ci(
    eta: &FunctionalSpec,
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    epsilon: f64,
    level: f64,
    design: SamplingDesign,
    opts: SolverOptions,
) -> Result<InferenceReport> {
    validate_level(level)?;
    design.validate()?;
    let sol = solve(p, q, epsilon, opts)?;
    let ops = build_operators(&sol, p, q);
    let h = eta.evaluate(p, q)?;
    let estimate = coupling_expectation(&h, &sol, p, q);
    let sigma2 = functional_variance(eta, &sol, &ops, p, q, design.lambda())?;
    InferenceReport::new(estimate, sigma2, design, level)
}

/// `Var_P(f)`.
pub fn cost_variance_one_sample(sol: &SinkhornSolution, p: &DiscreteMeasure) -> f64 {
    p.variance(&sol.f).max(0.0)
}

/// Inference for `S_ε(P_n, Q)` with `Q` known.
pub fn cost_ci(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    epsilon: f64,
    level: f64,
    n: usize,
    opts: SolverOptions,
) -> Result<InferenceReport> {
    let design = SamplingDesign::one_sample(n)?;
    let sol = solve(p, q, epsilon, opts)?;
    InferenceReport::new(sol.cost, cost_variance_one_sample(&sol, p), design, level)
}

/// Influence functions and limiting variance of `D_ε` when `P ≠ Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H1Variance {
    pub sigma2: f64,
    pub divergence: f64,
    /// `ψ_{P,Q} = f_{P,Q} − ½(f_{P,P} + g_{P,P})` on the atoms of `P`.
    pub psi_p: Vec<f64>,
    /// `ψ_{Q,P}` on the atoms of `Q`.
    pub psi_q: Vec<f64>,
}

impl H1Variance {
    pub fn is_degenerate(&self) -> bool {
        self.sigma2 <= DEGENERATE_VARIANCE
    }
}

pub fn divergence_h1_variance(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    epsilon: f64,
    lambda: Option<f64>,
    opts: SolverOptions,
) -> Result<H1Variance> {
    validate_lambda(lambda)?;
    let d = sinkhorn_divergence(p, q, epsilon, opts)?;
    let psi_p: Vec<f64> = (0..p.len())
        .map(|i| d.pq.f[i] - 0.5 * (d.pp.f[i] + d.pp.g[i]))
        .collect();
    let psi_q: Vec<f64> = (0..q.len())
        .map(|j| d.pq.g[j] - 0.5 * (d.qq.f[j] + d.qq.g[j]))
        .collect();
    let var_p = p.variance(&psi_p).max(0.0);
    let sigma2 = match lambda {
        None => var_p,
        Some(l) => l * var_p + (1.0 - l) * q.variance(&psi_q).max(0.0),
    };
    Ok(H1Variance {
        sigma2,
        divergence: d.value,
        psi_p,
        psi_q,
    })
}

/// Normal-theory interval for `D_ε(P, Q)`; the flag is set when the variance is degenerate.
pub fn divergence_ci(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    epsilon: f64,
    level: f64,
    design: SamplingDesign,
    opts: SolverOptions,
) -> Result<(InferenceReport, bool)> {
    design.validate()?;
    let h1 = divergence_h1_variance(p, q, epsilon, design.lambda(), opts)?;
    let degenerate = h1.is_degenerate();
    Ok((
        InferenceReport::new(h1.divergence, h1.sigma2, design, level)?,
        degenerate,
    ))
}

/// Weights `μ_j ≥ 0` of the limit law `Σ_j μ_j N_j²` of the scaled divergence under `P = Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H0Spectrum {
    pub weights: Vec<f64>,
}

impl H0Spectrum {
    /// `Σ μ_j`.
    pub fn mean(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `2 Σ μ_j²`.
    pub fn variance(&self) -> f64 {
        2.0 * self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.clone());
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * roots * eig.eigenvectors.transpose()
}

/// `diag(w) − w wᵀ`.
pub fn multinomial_covariance(w: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(w) - w * w.transpose()
}

/// Limit spectrum for `n·D_ε(P_n, P)`.
///
/// With `A = Ξ diag(p)` the self-transport operator, the second-order
/// expansion is `D_ε(P + δ, P) ≈ (ε/2) δᵀ (I − A²)^{-1} Ξ δ`. The weights are
/// the nonzero eigenvalues of `¼ Σ_P^{1/2} M Σ_P^{1/2}` with `M = 2ε (I − A²)^{-1} Ξ`.
pub fn h0_limit_spectrum(p: &DiscreteMeasure, epsilon: f64, opts: SolverOptions) -> Result<H0Spectrum> {
    if p.len() == 1 {
        return Ok(H0Spectrum { weights: Vec::new() });
    }
    let sol = solve(p, p, epsilon, opts)?;
    let ops = build_operators(&sol, p, p);
    let a = &ops.kq;
    let resolvent = ResolventSystem::new(a * a, ops.p.clone(), Side::X)?;
    let m = resolvent.solve_matrix(&sol.xi) * (2.0 * epsilon);
    let root = psd_sqrt(&multinomial_covariance(&ops.p));
    let b = &root * m * &root * 0.25;
    let scale = b.amax().max(1.0);
    let asym = (&b - b.transpose()).amax();
    if asym > H0_SYMMETRY_TOL * scale {
        return Err(Error::NonSymmetric(asym));
    }
    let sym = (&b + b.transpose()) * 0.5;
    let mut values: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    if let Some(&worst) = values.iter().min_by(|x, y| x.total_cmp(y)) {
        if worst < -H0_NEGATIVE_TOL * scale {
            return Err(Error::NonSymmetric(worst));
        }
    }
    // One direction (the constants) is annihilated by Σ_P; drop it.
    let null = values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
        .map(|(k, _)| k)
        .expect("at least two eigenvalues");
    values.remove(null);
    let mut weights: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    weights.sort_by(|x, y| y.total_cmp(x));
    debug!("H0 spectrum for {} atoms: {:?}", p.len(), weights);
    Ok(H0Spectrum { weights })
}

/// `draws` independent samples of `Σ_j μ_j N_j²`.
pub fn h0_limit_sample<R: Rng + ?Sized>(spectrum: &H0Spectrum, draws: usize, rng: &mut R) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be at least 1".into()));
    }
    Ok((0..draws)
        .map(|_| {
            spectrum
                .weights
                .iter()
                .map(|w| {
                    let z: f64 = rng.sample(StandardNormal);
                    w * z * z
                })
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H0TestReport {
    /// Scaled statistic `rate · D̂`.
    pub observed: f64,
    pub divergence: f64,
    pub rate: f64,
    pub spectrum: Vec<f64>,
    /// Level-quantile of the sampled limit law.
    pub critical_value: f64,
    pub p_value: f64,
    /// `√(p(1 − p) / draws)`.
    pub mc_stderr: f64,
    pub level: f64,
    pub draws: usize,
    /// `p_value < 1 − level`.
    pub reject: bool,
}

/// Compares a scaled statistic with the sampled limit law.
pub fn h0_test_scaled<R: Rng + ?Sized>(
    divergence: f64,
    rate: f64,
    spectrum: &H0Spectrum,
    level: f64,
    draws: usize,
    rng: &mut R,
) -> Result<H0TestReport> {
    validate_level(level)?;
    let observed = rate * divergence;
    let samples = h0_limit_sample(spectrum, draws, rng)?;
    let exceed = samples.iter().filter(|&&s| s >= observed - H0_OBSERVED_TOL).count();
    let p_value = exceed as f64 / draws as f64;
    Ok(H0TestReport {
        observed,
        divergence,
        rate,
        spectrum: spectrum.weights.clone(),
        critical_value: quantile(&samples, level)?,
        p_value,
        mc_stderr: (p_value * (1.0 - p_value) / draws as f64).sqrt(),
        level,
        draws,
        reject: p_value < 1.0 - level,
    })
}

/// Tests `P_n ~ P` using the spectrum of the hypothesized `P`.
#[allow(clippy::too_many_arguments)]
pub fn h0_test_one_sample<R: Rng + ?Sized>(
    hypothesis: &DiscreteMeasure,
    sample: &DiscreteMeasure,
    n: usize,
    epsilon: f64,
    level: f64,
    draws: usize,
    opts: SolverOptions,
    rng: &mut R,
) -> Result<H0TestReport> {
    let design = SamplingDesign::one_sample(n)?;
    let d = sinkhorn_divergence(sample, hypothesis, epsilon, opts)?;
    let spectrum = h0_limit_spectrum(hypothesis, epsilon, opts)?;
    h0_test_scaled(d.value, design.rate(), &spectrum, level, draws, rng)
}

/// Tests `P = Q` from two samples using the spectrum of the pooled sample.
#[allow(clippy::too_many_arguments)]
pub fn h0_test_two_sample<R: Rng + ?Sized>(
    p: &DiscreteMeasure,
    n: usize,
    q: &DiscreteMeasure,
    m: usize,
    epsilon: f64,
    level: f64,
    draws: usize,
    opts: SolverOptions,
    rng: &mut R,
) -> Result<H0TestReport> {
    let design = SamplingDesign::two_sample(n, m)?;
    let d = sinkhorn_divergence(p, q, epsilon, opts)?;
    let pooled = pooled_measure(p, n as f64, q, m as f64)?;
    let spectrum = h0_limit_spectrum(&pooled, epsilon, opts)?;
    h0_test_scaled(d.value, design.rate(), &spectrum, level, draws, rng)
}

/// `(a·P + b·Q) / (a + b)` with coincident atoms merged.
pub fn pooled_measure(p: &DiscreteMeasure, a: f64, q: &DiscreteMeasure, b: f64) -> Result<DiscreteMeasure> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch(format!(
            "dimensions {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    let total = a + b;
    let points = p.points().chain(q.points()).map(<[f64]>::to_vec).collect();
    let weights = p
        .weights()
        .iter()
        .map(|w| w * a / total)
        .chain(q.weights().iter().map(|w| w * b / total))
        .collect();
    DiscreteMeasure::new(points, weights)
}

/// Joint limit covariance of the potentials on the atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialCovariance {
    /// `n × n`, on the atoms of `P`.
    pub cov_f: DMatrix<f64>,
    /// `m × m`, on the atoms of `Q`.
    pub cov_g: DMatrix<f64>,
    /// `n × m`.
    pub cross: DMatrix<f64>,
}

/// Covariances of the two base processes: `Cov(𝔾_P)_{jk} = Σ_i p_i ξ_ij ξ_ik − 1`
/// on `Q`-atoms and `Cov(𝔾_Q)_{ik} = Σ_j q_j ξ_ij ξ_kj − 1` on `P`-atoms.
pub fn base_covariances(
    sol: &SinkhornSolution,
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (p.len(), q.len());
    let pw = p.weights();
    let qw = q.weights();
    let xi = &sol.xi;
    let gp = DMatrix::from_fn(m, m, |j, k| {
        (0..n).map(|i| pw[i] * xi[(i, j)] * xi[(i, k)]).sum::<f64>() - 1.0
    });
    let gq = DMatrix::from_fn(n, n, |i, k| {
        (0..m).map(|j| qw[j] * xi[(i, j)] * xi[(k, j)]).sum::<f64>() - 1.0
    });
    (gp, gq)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Limit covariance of `√rate (f̂ − f, ĝ − g)` with `g` centered under the population `Q`.
///
/// A perturbation `δp` of `P` moves the potentials by `δf = ε R_x A_Q Ξᵀ δp`,
/// `δg = −ε R_y Ξᵀ δp`; a perturbation `δq` of `Q` by `δf = −ε R_x Ξ δq`,
/// `δg = −A_P δf`. These maps are pushed through the multinomial covariances.
pub fn potential_covariance(
    sol: &SinkhornSolution,
    ops: &KernelOperators,
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    lambda: Option<f64>,
) -> Result<PotentialCovariance> {
    validate_lambda(lambda)?;
    check_solution(sol, p, q)?;
    let eps = sol.epsilon;
    let rx = ops.resolvent(Side::X)?;
    let ry = ops.resolvent(Side::Y)?;
    let xi = &sol.xi;
    let xi_t = xi.transpose();

    let sigma_p = multinomial_covariance(&ops.p);
    let lf_p = rx.solve_matrix(&(&ops.kq * &xi_t)) * eps;
    let lg_p = ry.solve_matrix(&xi_t) * (-eps);
    let weight_p = lambda.unwrap_or(1.0);
    let mut cov_f = &lf_p * &sigma_p * lf_p.transpose() * weight_p;
    let mut cov_g = &lg_p * &sigma_p * lg_p.transpose() * weight_p;
    let mut cross = &lf_p * &sigma_p * lg_p.transpose() * weight_p;

    if let Some(l) = lambda {
        let sigma_q = multinomial_covariance(&ops.q);
        let lf_q = rx.solve_matrix(xi) * (-eps);
        let lg_q = -(&ops.kp * &lf_q);
        cov_f += &lf_q * &sigma_q * lf_q.transpose() * (1.0 - l);
        cov_g += &lg_q * &sigma_q * lg_q.transpose() * (1.0 - l);
        cross += &lf_q * &sigma_q * lg_q.transpose() * (1.0 - l);
    }
    Ok(PotentialCovariance {
        cov_f: symmetrize(cov_f),
        cov_g: symmetrize(cov_g),
        cross,
    })
}
