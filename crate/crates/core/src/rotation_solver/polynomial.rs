use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix};

use crate::error::{CalibError, Result};

/// Relative threshold below which leading coefficients are dropped.
pub const TRIM_REL_TOL: f64 = 1e-13;
/// Iteration cap of the generalized companion refinement.
pub const REFINE_MAX_ITER: usize = 50;
/// Convergence threshold on root updates, relative to `1 + |s|`.
pub const REFINE_STEP_TOL: f64 = 1e-12;
/// Iteration caps of the eigenvalue and fallback root finders.
const SCHUR_MAX_ITER: usize = 10_000;
const ABERTH_MAX_ITER: usize = 500;
/// Separation applied to coincident roots before refinement.
pub const COINCIDENT_PERTURBATION: f64 = 1e-8;

/// Real polynomial with coefficients stored highest degree first.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    /// Builds a polynomial, trimming leading coefficients below
    /// `TRIM_REL_TOL · max|c|`.
    pub fn new(coeffs: Vec<f64>) -> Self {
        let scale = coeffs.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        Self::trimmed(coeffs, TRIM_REL_TOL * scale)
    }

    /// Builds a polynomial, trimming only exact leading zeros.
    pub fn exact(coeffs: Vec<f64>) -> Self {
        Self::trimmed(coeffs, 0.0)
    }

    fn trimmed(coeffs: Vec<f64>, tol: f64) -> Self {
        let start = coeffs.iter().position(|c| c.abs() > tol).unwrap_or(coeffs.len());
        let mut coeffs = coeffs[start..].to_vec();
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        Self { coeffs }
    }

    pub fn constant(c: f64) -> Self {
        Self::exact(vec![c])
    }

    /// Monic polynomial with the given real roots.
    pub fn from_roots(roots: &[f64]) -> Self {
        roots.iter().fold(Self::constant(1.0), |p, r| p.mul(&Self::exact(vec![1.0, -r])))
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn leading(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| *c == 0.0)
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |a, c| a.max(c.abs()))
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn eval_complex(&self, z: Complex<f64>) -> Complex<f64> {
        self.coeffs.iter().fold(Complex::new(0.0, 0.0), |acc, c| acc * z + c)
    }

    pub fn derivative(&self) -> Self {
        let n = self.degree();
        if n == 0 {
            return Self::constant(0.0);
        }
        Self::exact(self.coeffs[..n].iter().enumerate().map(|(i, c)| c * (n - i) as f64).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        let n = self.coeffs.len().max(other.coeffs.len());
        let mut out = vec![0.0; n];
        for (src, off) in [(&self.coeffs, n - self.coeffs.len()), (&other.coeffs, n - other.coeffs.len())] {
            for (i, c) in src.iter().enumerate() {
                out[off + i] += c;
            }
        }
        Self::exact(out)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Self::exact(out)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::exact(self.coeffs.iter().map(|c| c * s).collect())
    }
}

/// Standard companion matrix of a polynomial of degree ≥ 1.
pub fn companion_matrix(p: &Polynomial) -> DMatrix<f64> {
    let n = p.degree();
    let c = p.coefficients();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        m[(i, i + 1)] = 1.0;
    }
    for j in 0..n {
        m[(n - 1, j)] = -c[n - j] / c[0];
    }
    m
}

/// All complex roots as eigenvalues of the companion matrix.
pub fn companion_roots(p: &Polynomial) -> Result<Vec<Complex<f64>>> {
    if p.is_zero() {
        return Err(CalibError::ZeroPolynomial);
    }
    if p.degree() == 0 {
        return Ok(Vec::new());
    }
    let m = companion_matrix(p);
    for candidate in [m.clone(), balance(m)] {
        if let Some(schur) = Schur::try_new(candidate, f64::EPSILON, SCHUR_MAX_ITER) {
            let eig: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
            if eig.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Ok(eig);
            }
        }
    }
    Ok(aberth_roots(p))
}

/// Diagonal similarity scaling that equalizes row and column norms.
fn balance(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for _ in 0..20 {
        let mut changed = false;
        for i in 0..n {
            let c: f64 = (0..n).filter(|&j| j != i).map(|j| m[(j, i)].abs()).sum();
            let r: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let f = (r / c).sqrt();
            if (f - 1.0).abs() > 0.05 {
                for j in 0..n {
                    m[(j, i)] *= f;
                    m[(i, j)] /= f;
                }
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    m
}

/// Simultaneous Aberth-Ehrlich iteration from points on the Cauchy bound.
fn aberth_roots(p: &Polynomial) -> Vec<Complex<f64>> {
    let c = p.coefficients();
    let n = p.degree();
    let radius = 1.0 + c[1..].iter().map(|v| (v / c[0]).abs()).fold(0.0, f64::max);
    let dp = p.derivative();
    let mut z: Vec<Complex<f64>> = (0..n)
        .map(|k| Complex::from_polar(radius, 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / n as f64))
        .collect();
    for _ in 0..ABERTH_MAX_ITER {
        let mut moved = 0.0f64;
        for i in 0..n {
            let ratio = p.eval_complex(z[i]) / dp.eval_complex(z[i]);
            let repulsion: Complex<f64> = (0..n).filter(|&j| j != i).map(|j| Complex::new(1.0, 0.0) / (z[i] - z[j])).sum();
            let step = ratio / (Complex::new(1.0, 0.0) - ratio * repulsion);
            if step.re.is_finite() && step.im.is_finite() {
                z[i] -= step;
                moved = moved.max(step.norm() / (1.0 + z[i].norm()));
            }
        }
        if moved < REFINE_STEP_TOL {
            break;
        }
    }
    z
}

/// Result of [`refine_roots_iterated`].
#[derive(Debug, Clone)]
pub struct RefinedRoots {
    pub roots: Vec<Complex<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// `max |P(s_i)|` before the first and after every iteration.
    pub residual_history: Vec<f64>,
}

fn max_residual(p: &Polynomial, s: &[Complex<f64>]) -> f64 {
    s.iter().map(|z| p.eval_complex(*z).norm()).fold(0.0, f64::max)
}

fn separate_coincident(s: &mut [Complex<f64>]) {
    for i in 1..s.len() {
        let mut k = 1.0;
        while s[..i].iter().any(|t| (s[i] - t).norm() < COINCIDENT_PERTURBATION) {
            s[i] += Complex::new(COINCIDENT_PERTURBATION * k, COINCIDENT_PERTURBATION * k);
            k += 1.0;
        }
    }
}

fn complex_eigenvalues(m: DMatrix<Complex<f64>>) -> Option<Vec<Complex<f64>>> {
    let n = m.nrows();
    let schur = Schur::try_new(m, f64::EPSILON, 10_000)?;
    let (_, t) = schur.unpack();
    Some((0..n).map(|i| t[(i, i)]).collect())
}

/// Refines approximate roots with the generalized companion matrix
/// `C(P, S) = diag(s) − 1·lᵀ`, `l_i = P(s_i) / (a_n Π_{j≠i}(s_i − s_j))`.
///
/// Each returned root is whichever of the input and the final iterate has
/// the smaller `|P|`.
pub fn refine_roots_iterated(p: &Polynomial, roots: &[Complex<f64>]) -> Result<RefinedRoots> {
    if p.is_zero() {
        return Err(CalibError::ZeroPolynomial);
    }
    let n = roots.len();
    let lead = p.leading();
    let mut s = roots.to_vec();
    separate_coincident(&mut s);
    let mut history = vec![max_residual(p, &s)];
    let mut converged = n == 0;
    let mut iterations = 0;

    while !converged && iterations < REFINE_MAX_ITER {
        let l: Vec<Complex<f64>> = (0..n)
            .map(|i| {
                let q: Complex<f64> = (0..n).filter(|j| *j != i).map(|j| s[i] - s[j]).product();
                p.eval_complex(s[i]) / (q * lead)
            })
            .collect();
        if l.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            break;
        }
        let c = DMatrix::from_fn(n, n, |i, j| if i == j { s[i] - l[j] } else { -l[j] });
        let Some(eig) = complex_eigenvalues(c) else { break };

        // Greedy nearest matching keeps root identities stable.
        let mut used = vec![false; n];
        let mut next = s.clone();
        let mut step = 0.0f64;
        for i in 0..n {
            let (j, _) = eig
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, e)| (j, (e - s[i]).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            used[j] = true;
            next[i] = eig[j];
            step = step.max((eig[j] - s[i]).norm() / (1.0 + s[i].norm()));
        }
        s = next;
        iterations += 1;
        history.push(max_residual(p, &s));
        converged = step < REFINE_STEP_TOL;
        if !converged {
            separate_coincident(&mut s);
        }
    }

    let roots = roots
        .iter()
        .zip(s)
        .map(|(orig, it)| if p.eval_complex(it).norm() <= p.eval_complex(*orig).norm() { it } else { *orig })
        .collect();
    Ok(RefinedRoots { roots, converged, iterations, residual_history: history })
}

/// Real roots of `a x³ + b x² + c x + d` with `a ≠ 0`, polished by Newton.
pub fn real_cubic_roots(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let (b, c, d) = (b / a, c / a, d / a);
    // Depressed cubic t³ + p t + q with x = t − b/3.
    let shift = b / 3.0;
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    let mut roots = if disc > 0.0 {
        let sq = disc.sqrt();
        vec![(-q / 2.0 + sq).cbrt() + (-q / 2.0 - sq).cbrt()]
    } else if p == 0.0 {
        vec![0.0]
    } else {
        let r = (-p / 3.0).sqrt();
        let phi = (-q / (2.0 * r * r * r)).clamp(-1.0, 1.0).acos();
        (0..3).map(|k| 2.0 * r * ((phi + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos()).collect()
    };
    let f = |x: f64| ((x + b) * x + c) * x + d;
    let df = |x: f64| (3.0 * x + 2.0 * b) * x + c;
    for x in roots.iter_mut() {
        *x -= shift;
        for _ in 0..3 {
            let dv = df(*x);
            if dv == 0.0 {
                break;
            }
            let next = *x - f(*x) / dv;
            if f(next).abs() < f(*x).abs() {
                *x = next;
            } else {
                break;
            }
        }
    }
    roots.sort_by(f64::total_cmp);
    roots
}
