//! Kernel operators of a converged coupling and their deflated resolvents.
//!
//! On the atoms, integrating against `ξ` over one marginal is a row-stochastic
//! matrix:
//!
//! * `A_Q b = Σ_j ξ_ij q_j b_j` maps functions on `Q`-atoms to functions on `P`-atoms,
//! * `A_P a = Σ_i ξ_ij p_i a_i` maps functions on `P`-atoms to functions on `Q`-atoms.
//!
//! Both fix constants, so `1 − A_Q A_P` has the constants in its kernel. On
//! centered functions it is invertible; we solve `(I − K + 1 wᵀ) u = v`
//! instead, which agrees with the resolvent there and is nonsingular.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::DiscreteMeasure;
use crate::sinkhorn::SinkhornSolution;

/// Weighted-mean tolerance for right-hand sides handed to a resolvent.
pub const CENTERING_TOLERANCE: f64 = 1e-8;
const SYMMETRY_WARN: f64 = 1e-8;
const PIVOT_RATIO: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct KernelOperators {
    /// `n × m`, `(KQ)_ij = ξ_ij q_j`.
    pub kq: DMatrix<f64>,
    /// `m × n`, `(KP)_ji = ξ_ij p_i`.
    pub kp: DMatrix<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub epsilon: f64,
    self_transport: bool,
}

/// Which composite operator a resolvent inverts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    /// `1 − A_Q A_P`, acting on functions on `P`-atoms.
    X,
    /// `1 − A_P A_Q`, acting on functions on `Q`-atoms.
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumKind {
    /// `A_Q A_P` on `P`-atoms.
    QP,
    /// `A_P A_Q` on `Q`-atoms.
    PQ,
    /// `A_P` itself for a self-transport problem.
    SelfA,
}

pub fn build_operators(sol: &SinkhornSolution, p: &DiscreteMeasure, q: &DiscreteMeasure) -> KernelOperators {
    let (n, m) = (p.len(), q.len());
    let pw = p.weights();
    let qw = q.weights();
    let kq = DMatrix::from_fn(n, m, |i, j| sol.xi[(i, j)] * qw[j]);
    let kp = DMatrix::from_fn(m, n, |j, i| sol.xi[(i, j)] * pw[i]);
    KernelOperators {
        kq,
        kp,
        p: DVector::from_column_slice(pw),
        q: DVector::from_column_slice(qw),
        epsilon: sol.epsilon,
        self_transport: p.approx_eq(q, 1e-12),
    }
}

pub fn weighted_mean(v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    w.dot(v)
}

/// `v − (wᵀv) 1`.
pub fn center(v: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let mean = weighted_mean(v, w);
    v.map(|x| x - mean)
}

impl KernelOperators {
    pub fn is_self_transport(&self) -> bool {
        self.self_transport
    }

    pub fn apply_aq(&self, b: &DVector<f64>) -> DVector<f64> {
        &self.kq * b
    }

    pub fn apply_ap(&self, a: &DVector<f64>) -> DVector<f64> {
        &self.kp * a
    }

    pub fn weights(&self, side: Side) -> &DVector<f64> {
        match side {
            Side::X => &self.p,
            Side::Y => &self.q,
        }
    }

    pub fn composite(&self, side: Side) -> DMatrix<f64> {
        match side {
            Side::X => &self.kq * &self.kp,
            Side::Y => &self.kp * &self.kq,
        }
    }

    /// `|Σ p_i a_i (A_Q b)_i − Σ q_j b_j (A_P a)_j|`.
    pub fn adjointness_gap(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let lhs = self.p.component_mul(a).dot(&self.apply_aq(b));
        let rhs = self.q.component_mul(b).dot(&self.apply_ap(a));
        (lhs - rhs).abs()
    }

    /// Largest deviation of a row sum of `KQ` or `KP` from one.
    pub fn row_sum_defect(&self) -> f64 {
        let rows = |m: &DMatrix<f64>| {
            m.row_iter()
                .map(|r| (r.sum() - 1.0).abs())
                .fold(0.0, f64::max)
        };
        rows(&self.kq).max(rows(&self.kp))
    }

    pub fn resolvent(&self, side: Side) -> Result<ResolventSystem> {
        ResolventSystem::new(self.composite(side), self.weights(side).clone(), side)
    }
}

/// Factorized `I − K + 1 wᵀ` for one side.
#[derive(Debug, Clone)]
pub struct ResolventSystem {
    pub side: Side,
    weights: DVector<f64>,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ResolventSystem {
    pub fn new(composite: DMatrix<f64>, weights: DVector<f64>, side: Side) -> Result<Self> {
        let n = composite.nrows();
        let ones = DVector::from_element(n, 1.0);
        let deflated = DMatrix::identity(n, n) - composite + ones * weights.transpose();
        let lu = deflated.lu();
        let u = lu.u();
        let diag = u.diagonal().map(f64::abs);
        let (lo, hi) = (diag.min(), diag.max());
        if !(lo.is_finite() && hi > 0.0 && lo > PIVOT_RATIO * hi) {
            return Err(Error::SingularSystem(format!(
                "pivot ratio {:e} on the {side:?} side",
                if hi > 0.0 { lo / hi } else { 0.0 }
            )));
        }
        Ok(ResolventSystem { side, weights, lu })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Solves `(I − K) u = v` for a centered `v`; the returned `u` is centered.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let mean = weighted_mean(v, &self.weights);
        let scale = v.amax().max(1.0);
        if mean.abs() > CENTERING_TOLERANCE * scale {
            return Err(Error::NotCentered { mean });
        }
        Ok(self.solve_deflated(v))
    }

    /// Applies the deflated inverse without checking the input.
    pub fn solve_deflated(&self, v: &DVector<f64>) -> DVector<f64> {
        let u = self
            .lu
            .solve(v)
            .expect("factorization checked nonsingular at construction");
        center(&u, &self.weights)
    }

    /// Deflated inverse applied to every column of `rhs`.
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self
            .lu
            .solve(rhs)
            .expect("factorization checked nonsingular at construction");
        for mut col in out.column_iter_mut() {
            let mean = self.weights.dot(&col);
            col.add_scalar_mut(-mean);
        }
        out
    }
}

/// Convenience wrapper: factorize and solve once.
pub fn resolvent_solve(ops: &KernelOperators, side: Side, v: &DVector<f64>) -> Result<DVector<f64>> {
    ops.resolvent(side)?.solve(v)
}

/// Eigenvalues of `D^{1/2} K D^{-1/2}` for a `w`-self-adjoint `K`, descending.
pub(crate) fn balanced_eigenvalues(k: &DMatrix<f64>, w: &DVector<f64>) -> Vec<f64> {
    let n = k.nrows();
    let sqrt_w = w.map(f64::sqrt);
    let s = DMatrix::from_fn(n, n, |i, j| sqrt_w[i] * k[(i, j)] / sqrt_w[j]);
    let asym = (&s - s.transpose()).amax();
    if asym > SYMMETRY_WARN {
        warn!("balanced operator is not symmetric (residual {asym:e}); symmetrizing");
    }
    let sym = (&s + s.transpose()) * 0.5;
    let mut values: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

pub fn operator_spectrum(ops: &KernelOperators, which: SpectrumKind) -> Result<Vec<f64>> {
    match which {
        SpectrumKind::QP => Ok(balanced_eigenvalues(&ops.composite(Side::X), &ops.p)),
        SpectrumKind::PQ => Ok(balanced_eigenvalues(&ops.composite(Side::Y), &ops.q)),
        SpectrumKind::SelfA => {
            if !ops.self_transport {
                return Err(Error::NotSelfTransport);
            }
            Ok(balanced_eigenvalues(&ops.kq, &ops.p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sinkhorn::{solve, SolverOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_atoms() -> DiscreteMeasure {
        DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.5, 0.5]).unwrap()
    }

    fn random_measure(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DiscreteMeasure {
        let points = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        DiscreteMeasure::new(points, raw.iter().map(|w| w / total).collect()).unwrap()
    }

    fn ops_for(p: &DiscreteMeasure, q: &DiscreteMeasure) -> KernelOperators {
        let sol = solve(p, q, 1.0, SolverOptions::with_tol(1e-13)).unwrap();
        build_operators(&sol, p, q)
    }

    /// Truncated Neumann series `Σ_k K^k v`; converges on centered inputs.
    fn neumann(k: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut term = v.clone();
        let mut total = v.clone();
        for _ in 0..100_000 {
            term = k * term;
            total += &term;
            if term.amax() < 1e-15 {
                break;
            }
        }
        total
    }

    #[test]
    fn two_atom_matrices_match_closed_form() {
        let p = two_atoms();
        let ops = ops_for(&p, &p);
        let e = (-0.5f64).exp();
        let diag = 1.0 / (1.0 + e);
        let off = e / (1.0 + e);
        for m in [&ops.kq, &ops.kp] {
            assert!((m[(0, 0)] - diag).abs() < 1e-9);
            assert!((m[(0, 1)] - off).abs() < 1e-9);
            assert!((m[(1, 0)] - off).abs() < 1e-9);
            assert!((m[(1, 1)] - diag).abs() < 1e-9);
        }
    }

    #[test]
    fn single_atom_operator_is_identity() {
        let p = DiscreteMeasure::dirac(vec![0.0]).unwrap();
        let q = DiscreteMeasure::dirac(vec![2.0]).unwrap();
        let ops = ops_for(&p, &q);
        assert!((ops.kq[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((ops.kp[(0, 0)] - 1.0).abs() < 1e-14);
        let spec = operator_spectrum(&ops, SpectrumKind::QP).unwrap();
        assert_eq!(spec.len(), 1);
        assert!((spec[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_measure(&mut rng, 4, 2);
        let q = random_measure(&mut rng, 3, 2);
        let ops = ops_for(&p, &q);
        let u = resolvent_solve(&ops, Side::X, &DVector::zeros(4)).unwrap();
        assert!(u.amax() < 1e-15);
    }

    #[test]
    fn two_atom_resolvent_on_eigenvector() {
        let p = two_atoms();
        let ops = ops_for(&p, &p);
        let a = (0.25f64).tanh();
        let v = DVector::from_vec(vec![0.7, -0.7]);
        let u = resolvent_solve(&ops, Side::X, &v).unwrap();
        let factor = 1.0 / (1.0 - a * a);
        assert!((u[0] - 0.7 * factor).abs() < 1e-9);
        assert!((u[1] + 0.7 * factor).abs() < 1e-9);
        let series = neumann(&ops.composite(Side::X), &v);
        assert!((u - series).amax() < 1e-9);
    }

    #[test]
    fn deflated_solve_matches_neumann_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_measure(&mut rng, 5, 2);
        let q = random_measure(&mut rng, 7, 2);
        let ops = ops_for(&p, &q);
        for side in [Side::X, Side::Y] {
            let sys = ops.resolvent(side).unwrap();
            let k = ops.composite(side);
            let w = ops.weights(side).clone();
            for _ in 0..10 {
                let raw = DVector::from_fn(w.len(), |_, _| rng.random_range(-1.0..1.0));
                let v = center(&raw, &w);
                let u = sys.solve(&v).unwrap();
                assert!(weighted_mean(&u, &w).abs() < 1e-10);
                assert!((&u - neumann(&k, &v)).amax() < 1e-8);
                let back = &u - &k * &u;
                assert!((back - &v).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn uncentered_rhs_is_rejected() {
        let p = two_atoms();
        let ops = ops_for(&p, &p);
        let err = resolvent_solve(&ops, Side::Y, &DVector::from_vec(vec![1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::NotCentered { .. }));
    }

    #[test]
    fn adjointness_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_measure(&mut rng, 6, 3);
        let q = random_measure(&mut rng, 4, 3);
        let ops = ops_for(&p, &q);
        assert!(ops.row_sum_defect() < 1e-10);
        for _ in 0..100 {
            let a = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
            let b = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            assert!(ops.adjointness_gap(&a, &b) < 1e-10);
        }
    }

    #[test]
    fn intertwining_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = random_measure(&mut rng, 5, 2);
        let q = random_measure(&mut rng, 6, 2);
        let ops = ops_for(&p, &q);
        let rx = ops.resolvent(Side::X).unwrap();
        let ry = ops.resolvent(Side::Y).unwrap();
        for _ in 0..20 {
            let v = center(&DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0)), &ops.p);
            let lhs = ops.apply_ap(&rx.solve(&v).unwrap());
            let rhs = ry.solve(&ops.apply_ap(&v)).unwrap();
            assert!((lhs - rhs).amax() < 1e-9);
        }
    }

    #[test]
    fn two_atom_self_spectrum() {
        let p = two_atoms();
        let ops = ops_for(&p, &p);
        let spec = operator_spectrum(&ops, SpectrumKind::SelfA).unwrap();
        assert!((spec[0] - 1.0).abs() < 1e-10);
        assert!((spec[1] - (0.25f64).tanh()).abs() < 1e-9);
    }

    #[test]
    fn self_spectrum_requires_self_transport() {
        let p = two_atoms();
        let q = DiscreteMeasure::new(vec![vec![0.0], vec![1.0]], vec![0.4, 0.6]).unwrap();
        let ops = ops_for(&p, &q);
        assert!(matches!(operator_spectrum(&ops, SpectrumKind::SelfA), Err(Error::NotSelfTransport)));
    }

    #[test]
    fn random_self_spectra_are_positive_contractions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let n = rng.random_range(2..9);
            let p = random_measure(&mut rng, n, 2);
            let ops = ops_for(&p, &p);
            let spec = operator_spectrum(&ops, SpectrumKind::SelfA).unwrap();
            assert!((spec[0] - 1.0).abs() < 1e-9);
            assert!(spec[1..].iter().all(|&l| l > -1e-9 && l < 1.0 - 1e-9));
            let comp = operator_spectrum(&ops, SpectrumKind::QP).unwrap();
            assert!(comp[1..].iter().all(|&l| l.abs() < 1.0 - 1e-9));
        }
    }
}
