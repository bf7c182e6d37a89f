//! Solves the three quadrics in `r3 = [r13, r23, r33]`.
//!
//! The cascade eliminates `r13` and `r23` with a Macaulay resultant,
//! solves the resulting degree-8 polynomial in `r33` through companion
//! matrices, and back-substitutes each real root with Sylvester
//! resultants. A trust-region dogleg solver covers the cases where no
//! real root survives.

mod back_substitution;
mod dogleg;
mod polynomial;
mod resultant;

pub use back_substitution::{
    det4, project_seed, recover_r13, recover_r23, sylvester_matrix, sylvester_quartics, IMAG_REL_TOL, RANGE_TOL,
};
pub use dogleg::{dogleg_minimize, dogleg_refine, dogleg_step, DoglegOutcome, DoglegState};
pub use polynomial::{companion_matrix, companion_roots, real_cubic_roots, refine_roots_iterated, Polynomial, RefinedRoots};
pub use resultant::{chebyshev_nodes, macaulay_univariate, ResultantEntries, ResultantMatrices};

use nalgebra::{Complex, Vector3};

use crate::constraints::QuadricSystem;
use crate::error::{CalibError, Result};

/// Candidates closer than this in `r3` are merged.
pub const DEDUP_TOL: f64 = 1e-6;
/// Upper bound on the number of candidates.
pub const MAX_CANDIDATES: usize = 8;
const POLISH_ITER: usize = 5;

/// One solution of the three quadrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateR3 {
    pub r13: Complex<f64>,
    pub r23: Complex<f64>,
    pub r33: Complex<f64>,
    /// `[F1, F2, F3]` at the candidate.
    pub residuals: [f64; 3],
}

impl CandidateR3 {
    fn from_real(sys: &QuadricSystem, x: Vector3<f64>) -> Self {
        let f = sys.residuals(&x);
        let c = |v: f64| Complex::new(v, 0.0);
        Self { r13: c(x.x), r23: c(x.y), r33: c(x.z), residuals: [f.x, f.y, f.z] }
    }

    pub fn real_part(&self) -> Vector3<f64> {
        Vector3::new(self.r13.re, self.r23.re, self.r33.re)
    }

    pub fn is_real(&self) -> bool {
        [self.r13, self.r23, self.r33].iter().all(|z| back_substitution::is_real(*z))
    }

    /// `Σ |F_i|`.
    pub fn total_residual(&self) -> f64 {
        self.residuals.iter().map(|v| v.abs()).sum()
    }
}

/// Everything the cascade produces, including seeds for local refinement.
#[derive(Debug, Clone)]
pub struct R3Solutions {
    pub univariate: Polynomial,
    pub r33_roots: Vec<Complex<f64>>,
    /// Real candidates, sorted by ascending total residual.
    pub candidates: Vec<CandidateR3>,
    /// Real projections of roots that did not yield a candidate.
    pub seeds: Vec<Vector3<f64>>,
}

/// Newton iterations on the square system, kept only while they improve.
fn polish(sys: &QuadricSystem, mut x: Vector3<f64>) -> Vector3<f64> {
    let mut best = sys.residuals(&x).norm();
    for _ in 0..POLISH_ITER {
        let Some(step) = sys.jacobian(&x).lu().solve(&sys.residuals(&x)) else { break };
        let next = x - step;
        let r = sys.residuals(&next).norm();
        if !(r < best) {
            break;
        }
        x = next;
        best = r;
    }
    x
}

/// Runs the full elimination cascade.
pub fn solve_r3_detailed(sys: &impl AsRef<QuadricSystem>) -> Result<R3Solutions> {
    let sys = sys.as_ref();
    let univariate = macaulay_univariate(sys)?;
    let initial = companion_roots(&univariate)?;
    let r33_roots = refine_roots_iterated(&univariate, &initial)?.roots;
    let tol = sys.tolerance();

    let mut candidates: Vec<CandidateR3> = Vec::new();
    let mut seeds = Vec::new();
    for root in &r33_roots {
        let mut found = false;
        if back_substitution::is_real(*root) {
            let r33 = root.re;
            for r13 in recover_r13(sys, r33).unwrap_or_default() {
                for r23 in recover_r23(sys, r13, r33).unwrap_or_default() {
                    let x = polish(sys, Vector3::new(r13, r23, r33));
                    let cand = CandidateR3::from_real(sys, x);
                    if cand.residuals.iter().all(|v| v.abs() <= tol) {
                        found = true;
                        candidates.push(cand);
                    }
                }
            }
        }
        if !found {
            seeds.push(project_seed(sys, *root));
        }
    }

    candidates.sort_by(|a, b| a.total_residual().total_cmp(&b.total_residual()).then(a.r33.re.total_cmp(&b.r33.re)));
    let mut unique: Vec<CandidateR3> = Vec::new();
    for c in candidates {
        if unique.iter().all(|u| (u.real_part() - c.real_part()).norm() >= DEDUP_TOL) {
            unique.push(c);
        }
    }
    unique.truncate(MAX_CANDIDATES);
    Ok(R3Solutions { univariate, r33_roots, candidates: unique, seeds })
}

/// Real solutions of the three quadrics.
pub fn solve_r3_candidates(sys: &impl AsRef<QuadricSystem>) -> Result<Vec<CandidateR3>> {
    let out = solve_r3_detailed(sys)?;
    if out.candidates.is_empty() {
        return Err(CalibError::NoCandidates);
    }
    Ok(out.candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_from_rpy;
    use crate::test_fixtures::{random_system, system_for};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometric_truth_is_a_candidate() {
        let rot = rotation_from_rpy(0.25, -0.3, 0.4);
        let sys = system_for(rot, Vector3::new(0.1, 0.2, 0.05));
        let cands = solve_r3_candidates(&sys).unwrap();
        assert!(cands.len() <= MAX_CANDIDATES);
        let r3 = rot.column(2).into_owned();
        assert!(cands.iter().any(|c| (c.real_part() - r3).norm() < 1e-8));
        let tol = sys.tolerance();
        for c in &cands {
            assert!(c.residuals.iter().all(|v| v.abs() <= tol));
        }
    }

    #[test]
    fn planted_root_is_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let (sys, r3) = random_system(&mut rng);
            let out = solve_r3_detailed(&sys).unwrap();
            assert!(out.r33_roots.iter().any(|z| (z - Complex::new(r3.z, 0.0)).norm() < 1e-6));
            assert!(out.candidates.iter().any(|c| (c.real_part() - r3).norm() < 1e-8));
            assert_eq!(out.r33_roots.len(), 8);
        }
    }

    #[test]
    fn candidates_are_sorted_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let (sys, _) = random_system(&mut rng);
            let c = solve_r3_candidates(&sys).unwrap();
            for w in c.windows(2) {
                assert!(w[0].total_residual() <= w[1].total_residual());
                assert!((w[0].real_part() - w[1].real_part()).norm() >= DEDUP_TOL);
            }
            assert!(c.iter().all(CandidateR3::is_real));
        }
    }

    /// Grid search plus Newton polish over the unit sphere.
    fn brute_force(sys: &QuadricSystem) -> Vec<Vector3<f64>> {
        let mut found: Vec<Vector3<f64>> = Vec::new();
        let n = 60;
        for i in 0..n {
            let theta = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
            for j in 0..2 * n {
                let phi = std::f64::consts::PI * j as f64 / n as f64;
                let x0 = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
                let mut x = x0;
                for _ in 0..40 {
                    let f = sys.residuals(&x);
                    let Some(step) = sys.jacobian(&x).lu().solve(&f) else { break };
                    let mut t = 1.0;
                    while t > 1e-4 && sys.residuals(&(x - step * t)).norm() >= f.norm() {
                        t *= 0.5;
                    }
                    x -= step * t;
                }
                if x.iter().all(|v| v.is_finite())
                    && sys.residuals(&x).amax() < 1e-10
                    && found.iter().all(|f| (f - x).norm() > 1e-4)
                {
                    found.push(x);
                }
            }
        }
        found
    }

    #[test]
    fn matches_brute_force_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let (sys, _) = random_system(&mut rng);
            let brute = brute_force(&sys);
            let cands: Vec<Vector3<f64>> = solve_r3_candidates(&sys).unwrap().iter().map(|c| c.real_part()).collect();
            for b in &brute {
                assert!(cands.iter().any(|c| (c - b).norm() < 1e-4), "brute {b:?} missing from {cands:?}");
            }
            for c in &cands {
                assert!(brute.iter().any(|b| (c - b).norm() < 1e-4), "candidate {c:?} not found by brute force: {:?}", sys.residuals(c));
            }
        }
    }
}
