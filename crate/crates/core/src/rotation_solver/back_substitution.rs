use nalgebra::{Complex, Vector3};

use super::polynomial::{companion_roots, real_cubic_roots, refine_roots_iterated, Polynomial};
use crate::constraints::{Quadric, QuadricSystem};
use crate::error::{CalibError, Result};

/// Slack on the `[-1, 1]` range of rotation entries.
pub const RANGE_TOL: f64 = 1e-6;
/// Relative imaginary magnitude below which a root is treated as real.
pub const IMAG_REL_TOL: f64 = 1e-6;

pub(crate) fn is_real(z: Complex<f64>) -> bool {
    z.im.abs() <= IMAG_REL_TOL * (1.0 + z.re.abs())
}

/// Coefficients `[c0, c1, c2]` of `q` as a quadratic in `r23`, each a
/// polynomial in `r13`, at fixed `r33 = s`.
fn quadratic_in_r23(q: &Quadric, s: f64) -> [Polynomial; 3] {
    let c = &q.0;
    [
        Polynomial::exact(vec![c[0], c[3] * s + c[6], c[5] * s * s + c[8] * s + c[9]]),
        Polynomial::exact(vec![c[1], c[4] * s + c[7]]),
        Polynomial::constant(c[2]),
    ]
}

fn det2(m: [[&Polynomial; 2]; 2]) -> Polynomial {
    m[0][0].mul(m[1][1]).sub(&m[0][1].mul(m[1][0]))
}

fn minor<const N: usize, const M: usize>(m: &[[&Polynomial; N]; N], col: usize) -> [[Polynomial; M]; M] {
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let c = if j < col { j } else { j + 1 };
            m[i + 1][c].clone()
        })
    })
}

fn det3(m: [[&Polynomial; 3]; 3]) -> Polynomial {
    (0..3).fold(Polynomial::constant(0.0), |acc, col| {
        let sub: [[Polynomial; 2]; 2] = minor(&m, col);
        let term = m[0][col].mul(&det2([[&sub[0][0], &sub[0][1]], [&sub[1][0], &sub[1][1]]]));
        if col % 2 == 0 { acc.add(&term) } else { acc.sub(&term) }
    })
}

/// Determinant of a 4×4 polynomial matrix by Laplace expansion.
pub fn det4(m: &[[Polynomial; 4]; 4]) -> Polynomial {
    let refs: [[&Polynomial; 4]; 4] = std::array::from_fn(|i| std::array::from_fn(|j| &m[i][j]));
    (0..4).fold(Polynomial::constant(0.0), |acc, col| {
        let sub: [[Polynomial; 3]; 3] = minor(&refs, col);
        let sub_refs = std::array::from_fn(|i| std::array::from_fn(|j| &sub[i][j]));
        let term = m[0][col].mul(&det3(sub_refs));
        if col % 2 == 0 { acc.add(&term) } else { acc.sub(&term) }
    })
}

/// Sylvester matrix of two quadratics in `r23` with coefficients
/// `[c0, c1, c2]`, columns ordered by ascending power.
pub fn sylvester_matrix(a: &[Polynomial; 3], b: &[Polynomial; 3]) -> [[Polynomial; 4]; 4] {
    let z = Polynomial::constant(0.0);
    [
        [a[0].clone(), a[1].clone(), a[2].clone(), z.clone()],
        [z.clone(), a[0].clone(), a[1].clone(), a[2].clone()],
        [b[0].clone(), b[1].clone(), b[2].clone(), z.clone()],
        [z, b[0].clone(), b[1].clone(), b[2].clone()],
    ]
}

/// Quartics in `r13` obtained by eliminating `r23` from `(F1, F3)` and
/// `(F2, F3)` at fixed `r33`.
pub fn sylvester_quartics(sys: &QuadricSystem, r33: f64) -> (Polynomial, Polynomial) {
    let [f1, f2, f3] = sys.quadrics();
    let unit = quadratic_in_r23(&f3, r33);
    let p1 = det4(&sylvester_matrix(&quadratic_in_r23(&f1, r33), &unit));
    let p2 = det4(&sylvester_matrix(&quadratic_in_r23(&f2, r33), &unit));
    (p1, p2)
}

fn poly_tolerance(p: &Polynomial) -> f64 {
    1e-6 * (1.0 + p.max_abs_coefficient())
}

/// Real critical points of `P1² + P2²`, unfiltered.
fn r13_critical_points(sys: &QuadricSystem, r33: f64) -> Result<(Polynomial, Polynomial, Vec<Complex<f64>>)> {
    let (p1, p2) = sylvester_quartics(sys, r33);
    let d = p1.mul(&p1).add(&p2.mul(&p2)).derivative();
    if d.is_zero() || d.degree() == 0 {
        return Err(CalibError::NoRoot);
    }
    let roots = refine_roots_iterated(&d, &companion_roots(&d)?)?.roots;
    Ok((p1, p2, roots))
}

/// Candidate values of `r13` for a given `r33`.
pub fn recover_r13(sys: &impl AsRef<QuadricSystem>, r33: f64) -> Result<Vec<f64>> {
    let sys = sys.as_ref();
    if !(r33.abs() <= 1.0 + RANGE_TOL) {
        return Err(CalibError::NoRoot);
    }
    let (p1, p2, roots) = r13_critical_points(sys, r33)?;
    let (tol1, tol2) = (poly_tolerance(&p1), poly_tolerance(&p2));
    let mut out: Vec<f64> = roots
        .into_iter()
        .filter(|z| is_real(*z))
        .map(|z| z.re)
        .filter(|x| x * x <= 1.0 + RANGE_TOL && p1.eval(*x).abs() <= tol1 && p2.eval(*x).abs() <= tol2)
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    if out.is_empty() {
        return Err(CalibError::NoRoot);
    }
    Ok(out)
}

/// Critical points in `r23` of `F1² + F2² + F3²` at fixed `(r13, r33)`.
fn r23_critical_points(sys: &QuadricSystem, r13: f64, r33: f64) -> Vec<f64> {
    let mut cubic = [0.0; 4];
    for q in sys.quadrics() {
        let c = &q.0;
        let a = c[2];
        let b = c[1] * r13 + c[4] * r33 + c[7];
        let k = c[0] * r13 * r13 + c[3] * r13 * r33 + c[5] * r33 * r33 + c[6] * r13 + c[8] * r33 + c[9];
        cubic[0] += 2.0 * a * a;
        cubic[1] += 3.0 * a * b;
        cubic[2] += b * b + 2.0 * a * k;
        cubic[3] += b * k;
    }
    real_cubic_roots(cubic[0], cubic[1], cubic[2], cubic[3])
}

/// Candidate values of `r23` for given `(r13, r33)`.
pub fn recover_r23(sys: &impl AsRef<QuadricSystem>, r13: f64, r33: f64) -> Result<Vec<f64>> {
    let sys = sys.as_ref();
    if !(r13 * r13 + r33 * r33 <= 1.0 + RANGE_TOL) {
        return Err(CalibError::NoRoot);
    }
    let tol = sys.tolerance();
    let out: Vec<f64> = r23_critical_points(sys, r13, r33)
        .into_iter()
        .filter(|y| sys.residuals(&Vector3::new(r13, *y, r33)).amax() <= tol)
        .collect();
    if out.is_empty() {
        return Err(CalibError::NoRoot);
    }
    Ok(out)
}

/// Real point closest to satisfying the system for a possibly complex
/// `r33`, used to seed local refinement.
pub fn project_seed(sys: &QuadricSystem, r33: Complex<f64>) -> Vector3<f64> {
    let s = r33.re.clamp(-1.0, 1.0);
    let r13s: Vec<f64> = match r13_critical_points(sys, s) {
        Ok((_, _, roots)) => roots.iter().map(|z| z.re.clamp(-1.0, 1.0)).collect(),
        Err(_) => vec![0.0],
    };
    let mut best = Vector3::new(0.0, (1.0 - s * s).max(0.0).sqrt(), s);
    let mut best_cost = sys.residuals(&best).norm_squared();
    for r13 in r13s {
        for r23 in r23_critical_points(sys, r13, s) {
            let x = Vector3::new(r13, r23.clamp(-1.0, 1.0), s);
            let cost = sys.residuals(&x).norm_squared();
            if cost < best_cost {
                best = x;
                best_cost = cost;
            }
        }
    }
    best
}
