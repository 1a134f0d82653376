//! Replication engine: resample from ground-truth measures, re-estimate, and
//! compare the spread of the estimates with the predicted limit law.

use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    cost_ci, cost_variance_one_sample, divergence_ci, divergence_h1_variance, functional_ci, functional_variance,
    h0_limit_sample, h0_limit_spectrum, potential_covariance, FunctionalSpec, H0Spectrum, SamplingDesign,
};
use crate::measures::{DiscreteMeasure, EmpiricalMeasure, SampleBatch};
use crate::operators::build_operators;
use crate::sinkhorn::{sinkhorn_divergence, solve, SolverOptions};
use crate::stats::{mean_variance, quantile, two_sided_z};

pub use crate::stats::{ks_distance, KsReference};

/// Tolerance for the one-off ground-truth solves.
pub const TRUTH_TOL: f64 = 1e-12;
pub const DEFAULT_H0_DRAWS: usize = 100_000;
/// Predicted variances at or below this are treated as zero when standardizing.
pub const NEGLIGIBLE_VARIANCE: f64 = 1e-12;
/// RNG stream reserved for sampling the H0 mixture; replicates use streams `0..R`.
const MIXTURE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Statistic {
    /// `S_ε(P_n, Q)`; one-sample only.
    Cost,
    /// `f̂(x_atom)` for an atom of the truth `P`.
    PotentialAtAtom { atom: usize },
    Functional { eta: FunctionalSpec },
    /// `D_ε(P_n, Q)` or `D_ε(P_n, Q_m)` with `P ≠ Q`.
    Divergence,
    /// `n·D_ε(P_n, P)`, or `nm/(n+m)·D_ε(P_n, P'_m)` when `m` is set.
    ScaledDivergenceH0,
}

impl Statistic {
    pub fn name(&self) -> &'static str {
        match self {
            Statistic::Cost => "cost",
            Statistic::PotentialAtAtom { .. } => "potential-at-atom",
            Statistic::Functional { .. } => "functional",
            Statistic::Divergence => "divergence",
            Statistic::ScaledDivergenceH0 => "scaled-divergence-h0",
        }
    }
}

fn default_level() -> f64 {
    0.95
}

fn default_h0_draws() -> usize {
    DEFAULT_H0_DRAWS
}

fn default_parallel() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub truth_p: DiscreteMeasure,
    #[serde(default)]
    pub truth_q: Option<DiscreteMeasure>,
    pub statistic: Statistic,
    pub epsilon: f64,
    pub n: usize,
    /// Second sample size; absent for one-sample designs.
    #[serde(default)]
    pub m: Option<usize>,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_h0_draws")]
    pub h0_draws: usize,
    #[serde(default = "default_parallel")]
    pub parallel: bool,
    #[serde(default)]
    pub keep_replicates: bool,
}

impl SimulationConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: SimulationConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.replications < 1 {
            return bad("replications must be at least 1".into());
        }
        if self.n < 2 || self.m.is_some_and(|m| m < 2) {
            return bad("sample sizes must be at least 2".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} outside (0, 1)", self.level));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.h0_draws < 1 {
            return bad("h0_draws must be at least 1".into());
        }
        match (&self.statistic, &self.truth_q) {
            (Statistic::ScaledDivergenceH0, _) => {}
            (_, None) => return bad(format!("statistic {} needs truth_q", self.statistic.name())),
            (_, Some(q)) if q.dim() != self.truth_p.dim() => {
                return Err(Error::DimensionMismatch(format!(
                    "truth_p has dimension {}, truth_q {}",
                    self.truth_p.dim(),
                    q.dim()
                )))
            }
            _ => {}
        }
        match &self.statistic {
            Statistic::Cost if self.m.is_some() => {
                bad("the cost statistic has no two-sample limit; drop m".into())
            }
            Statistic::PotentialAtAtom { atom } if *atom >= self.truth_p.len() => {
                bad(format!("atom {atom} out of range for {} atoms", self.truth_p.len()))
            }
            Statistic::Functional { eta } => {
                eta.validate()?;
                let q = self.truth_q.as_ref().expect("checked above");
                eta.evaluate(&self.truth_p, q).map(|_| ())
            }
            _ => Ok(()),
        }
    }

    pub fn design(&self) -> Result<SamplingDesign> {
        match self.m {
            None => SamplingDesign::one_sample(self.n),
            Some(m) => SamplingDesign::two_sample(self.n, m),
        }
    }
}

/// One replicate's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub estimate: f64,
    /// `√rate (θ̂ − θ)`, or the scaled divergence itself under H0.
    pub value: f64,
    /// Whether the plug-in interval (or the H0 acceptance region) held the truth.
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub statistic: String,
    pub replications: usize,
    pub completed: usize,
    /// Replicates skipped because a solve failed numerically.
    pub failures: usize,
    pub rate: f64,
    pub truth_value: f64,
    pub empirical_mean: f64,
    pub empirical_variance: f64,
    pub predicted_mean: f64,
    pub predicted_variance: f64,
    /// Absent when the predicted variance vanishes.
    pub variance_ratio: Option<f64>,
    /// KS distance of standardized values to `N(0, 1)`, or of H0 values to the sampled mixture.
    pub ks_statistic: Option<f64>,
    pub coverage: f64,
    pub level: f64,
    /// H0 weights, when the statistic is the scaled divergence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<Vec<Replicate>>,
}

impl ReplicationReport {
    pub fn replicates_csv(&self) -> Option<String> {
        self.replicates.as_ref().map(|reps| {
            let mut out = String::from("index,estimate,value,covered\n");
            for r in reps {
                out.push_str(&format!("{},{:.16e},{:.16e},{}\n", r.index, r.estimate, r.value, r.covered));
            }
            out
        })
    }
}

/// Population quantities, computed once.
struct Truth {
    value: f64,
    predicted_mean: f64,
    predicted_variance: f64,
    /// Level-quantile of the H0 mixture, with the mixture sample itself.
    mixture: Option<(H0Spectrum, Vec<f64>, f64)>,
}

fn truth_quantities(cfg: &SimulationConfig, design: SamplingDesign) -> Result<Truth> {
    let opts = SolverOptions::with_tol(TRUTH_TOL);
    let p = &cfg.truth_p;
    let lambda = design.lambda();
    let plain = |value: f64, predicted_variance: f64| Truth {
        value,
        predicted_mean: 0.0,
        predicted_variance,
        mixture: None,
    };
    Ok(match &cfg.statistic {
        Statistic::Cost => {
            let q = cfg.truth_q.as_ref().expect("validated");
            let sol = solve(p, q, cfg.epsilon, opts)?;
            plain(sol.cost, cost_variance_one_sample(&sol, p))
        }
        Statistic::PotentialAtAtom { atom } => {
            let q = cfg.truth_q.as_ref().expect("validated");
            let sol = solve(p, q, cfg.epsilon, opts)?;
            let ops = build_operators(&sol, p, q);
            let cov = potential_covariance(&sol, &ops, p, q, lambda)?;
            plain(sol.f[*atom], cov.cov_f[(*atom, *atom)])
        }
        Statistic::Functional { eta } => {
            let q = cfg.truth_q.as_ref().expect("validated");
            let sol = solve(p, q, cfg.epsilon, opts)?;
            let ops = build_operators(&sol, p, q);
            let h = eta.evaluate(p, q)?;
            let value = crate::inference::coupling_expectation(&h, &sol, p, q);
            plain(value, functional_variance(eta, &sol, &ops, p, q, lambda)?)
        }
        Statistic::Divergence => {
            let q = cfg.truth_q.as_ref().expect("validated");
            let h1 = divergence_h1_variance(p, q, cfg.epsilon, lambda, opts)?;
            plain(h1.divergence, h1.sigma2)
        }
        Statistic::ScaledDivergenceH0 => {
            let spectrum = h0_limit_spectrum(p, cfg.epsilon, opts)?;
            let mut rng = stream_rng(cfg.seed, MIXTURE_STREAM);
            let sample = h0_limit_sample(&spectrum, cfg.h0_draws, &mut rng)?;
            let critical = quantile(&sample, cfg.level)?;
            Truth {
                value: 0.0,
                predicted_mean: spectrum.mean(),
                predicted_variance: spectrum.variance(),
                mixture: Some((spectrum, sample, critical)),
            }
        }
    })
}

/// Replicate RNG keyed by `(seed, stream)`, independent of scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw(source: &DiscreteMeasure, n: usize, rng: &mut ChaCha8Rng) -> Result<EmpiricalMeasure> {
    Ok(SampleBatch::draw(source, n, rng)?.empirical())
}

fn run_one(cfg: &SimulationConfig, design: SamplingDesign, truth: &Truth, index: usize) -> Result<Replicate> {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let opts = SolverOptions::default();
    let rate = design.rate();
    let scale = rate.sqrt();
    let p_hat = draw(&cfg.truth_p, cfg.n, &mut rng)?;
    let second = |rng: &mut ChaCha8Rng, source: &DiscreteMeasure| -> Result<Option<EmpiricalMeasure>> {
        cfg.m.map(|m| draw(source, m, rng)).transpose()
    };
    let standardized = |estimate: f64, covered: bool| Replicate {
        index,
        estimate,
        value: scale * (estimate - truth.value),
        covered,
    };

    match &cfg.statistic {
        Statistic::Cost => {
            let q = cfg.truth_q.as_ref().expect("validated");
            let r = cost_ci(&p_hat.measure, q, cfg.epsilon, cfg.level, cfg.n, opts)?;
            Ok(standardized(r.estimate, r.contains(truth.value)))
        }
        Statistic::Functional { eta } => {
            let q = cfg.truth_q.as_ref().expect("validated");
            let q_hat = second(&mut rng, q)?;
            let cols: Vec<usize> = match &q_hat {
                Some(e) => e.support.clone(),
                None => (0..q.len()).collect(),
            };
            let q_measure = q_hat.as_ref().map_or(q, |e| &e.measure);
            let local = eta.restrict(&p_hat.support, &cols);
            let r = functional_ci(&local, &p_hat.measure, q_measure, cfg.epsilon, cfg.level, design, opts)?;
            Ok(standardized(r.estimate, r.contains(truth.value)))
        }
        Statistic::Divergence => {
            let q = cfg.truth_q.as_ref().expect("validated");
            let q_hat = second(&mut rng, q)?;
            let q_measure = q_hat.as_ref().map_or(q, |e| &e.measure);
            let (r, _) = divergence_ci(&p_hat.measure, q_measure, cfg.epsilon, cfg.level, design, opts)?;
            Ok(standardized(r.estimate, r.contains(truth.value)))
        }
        Statistic::PotentialAtAtom { atom } => {
            let q = cfg.truth_q.as_ref().expect("validated");
            let q_hat = second(&mut rng, q)?;
            let q_measure = q_hat.as_ref().map_or(q, |e| &e.measure);
            let mut sol = solve(&p_hat.measure, q_measure, cfg.epsilon, opts)?;
            // Compare potentials in the gauge of the population Q.
            if q_hat.is_some() {
                sol.recenter_against(&p_hat.measure, q);
            }
            let x = cfg.truth_p.point(*atom);
            let estimate = sol.extend_f(q_measure, x);
            let ops = build_operators(&sol, &p_hat.measure, q_measure);
            let cov = potential_covariance(&sol, &ops, &p_hat.measure, q_measure, design.lambda())?;
            // An atom that drew no sample has no plug-in variance.
            let sigma2 = p_hat
                .support
                .iter()
                .position(|&i| i == *atom)
                .map_or(0.0, |k| cov.cov_f[(k, k)].max(0.0));
            let half = two_sided_z(cfg.level)? * (sigma2 / rate).sqrt();
            Ok(standardized(estimate, (estimate - truth.value).abs() <= half))
        }
        Statistic::ScaledDivergenceH0 => {
            let other = second(&mut rng, &cfg.truth_p)?;
            let reference = other.as_ref().map_or(&cfg.truth_p, |e| &e.measure);
            let d = sinkhorn_divergence(&p_hat.measure, reference, cfg.epsilon, opts)?;
            let value = rate * d.value;
            let critical = truth.mixture.as_ref().expect("H0 truth carries the mixture").2;
            Ok(Replicate {
                index,
                estimate: d.value,
                value,
                covered: value <= critical,
            })
        }
    }
}

/// Runs `cfg.replications` replicates and aggregates them.
pub fn run_replications(cfg: &SimulationConfig) -> Result<ReplicationReport> {
    cfg.validate()?;
    let design = cfg.design()?;
    let truth = truth_quantities(cfg, design)?;
    let job = |index: usize| run_one(cfg, design, &truth, index);
    let outcomes: Vec<Result<Replicate>> = if cfg.parallel {
        (0..cfg.replications).into_par_iter().map(job).collect()
    } else {
        (0..cfg.replications).map(job).collect()
    };

    let mut replicates = Vec::with_capacity(outcomes.len());
    let mut failures = 0;
    for outcome in outcomes {
        match outcome {
            Ok(r) => replicates.push(r),
            Err(e) if e.is_numerical() => failures += 1,
            Err(e) => return Err(e),
        }
    }
    info!(
        "{}: {} replicates, {} failures",
        cfg.statistic.name(),
        replicates.len(),
        failures
    );
    if replicates.is_empty() {
        return Err(Error::EmptySample);
    }

    let values: Vec<f64> = replicates.iter().map(|r| r.value).collect();
    let (empirical_mean, empirical_variance) = mean_variance(&values);
    let positive = truth.predicted_variance > NEGLIGIBLE_VARIANCE;
    let ks_statistic = match &truth.mixture {
        Some((_, sample, _)) => Some(ks_distance(&values, KsReference::Sample(sample))?),
        None if positive => {
            let sd = truth.predicted_variance.sqrt();
            let z: Vec<f64> = values.iter().map(|v| v / sd).collect();
            Some(ks_distance(&z, KsReference::StandardNormal)?)
        }
        None => None,
    };
    let covered = replicates.iter().filter(|r| r.covered).count();

    Ok(ReplicationReport {
        statistic: cfg.statistic.name().to_string(),
        replications: cfg.replications,
        completed: replicates.len(),
        failures,
        rate: design.rate(),
        truth_value: truth.value,
        empirical_mean,
        empirical_variance,
        predicted_mean: truth.predicted_mean,
        predicted_variance: truth.predicted_variance,
        variance_ratio: positive.then(|| empirical_variance / truth.predicted_variance),
        ks_statistic,
        coverage: covered as f64 / replicates.len() as f64,
        level: cfg.level,
        spectrum: truth.mixture.as_ref().map(|(s, _, _)| s.weights.clone()),
        replicates: cfg.keep_replicates.then_some(replicates),
    })
}
