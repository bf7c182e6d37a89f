use nalgebra::{Matrix3, Vector3};

use crate::constraints::QuadricSystem;
use crate::error::{CalibError, Result};

pub const INITIAL_RADIUS: f64 = 0.1;
pub const MIN_RADIUS: f64 = 1e-12;
pub const MAX_RADIUS: f64 = 1.0;
pub const RESIDUAL_TOL: f64 = 1e-10;
pub const STEP_TOL: f64 = 1e-12;
pub const MAX_ITER: usize = 200;
/// Largest admissible seed norm.
pub const MAX_SEED_NORM: f64 = 2.0;

/// Iteration state of the trust-region solver.
#[derive(Debug, Clone, PartialEq)]
pub struct DoglegState {
    pub x: Vector3<f64>,
    pub trust_radius: f64,
    pub gradient: Vector3<f64>,
    pub gauss_newton_matrix: Matrix3<f64>,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoglegOutcome {
    pub x: Vector3<f64>,
    pub residual_norm: f64,
    /// `‖F‖∞ < RESIDUAL_TOL` at exit.
    pub converged: bool,
    /// `‖F‖` at the seed and after every accepted step.
    pub history: Vec<f64>,
    /// Whether any iteration fell back to a pure Cauchy step.
    pub singular_jacobian: bool,
    pub state: DoglegState,
}

/// Point on the dogleg path of length at most `radius`.
pub fn dogleg_step(cauchy: &Vector3<f64>, gauss_newton: Option<&Vector3<f64>>, radius: f64) -> Vector3<f64> {
    if let Some(gn) = gauss_newton {
        if gn.norm() <= radius {
            return *gn;
        }
    }
    let nc = cauchy.norm();
    if nc >= radius {
        return cauchy * (radius / nc);
    }
    let Some(gn) = gauss_newton else { return *cauchy };
    // Solve |d_C + τ (d_GN − d_C)| = Δ for τ ∈ [0, 1].
    let diff = gn - cauchy;
    let a = diff.norm_squared();
    let b = 2.0 * cauchy.dot(&diff);
    let c = nc * nc - radius * radius;
    let tau = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
    cauchy + diff * tau.clamp(0.0, 1.0)
}

/// Largest accepted condition estimate of `B` for a Gauss-Newton step.
const MAX_CONDITION: f64 = 1e14;

fn gauss_newton_step(b: &Matrix3<f64>, g: &Vector3<f64>) -> Option<Vector3<f64>> {
    let chol = b.cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    if !(lo > 0.0) || (hi / lo).powi(2) > MAX_CONDITION {
        return None;
    }
    Some(-chol.solve(g)).filter(|d| d.iter().all(|v| v.is_finite()))
}

/// Minimizes `‖F(x)‖` for a square residual with Jacobian, starting at `x0`.
pub fn dogleg_minimize<F>(eval: F, x0: Vector3<f64>) -> DoglegOutcome
where
    F: Fn(&Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>),
{
    let mut x = x0;
    let (mut f, mut jac) = eval(&x);
    let mut radius = INITIAL_RADIUS;
    let mut history = vec![f.norm()];
    let mut singular = false;
    let mut state = DoglegState {
        x,
        trust_radius: radius,
        gradient: jac.transpose() * f,
        gauss_newton_matrix: jac.transpose() * jac,
        iteration: 0,
    };

    for iteration in 0..MAX_ITER {
        let g = jac.transpose() * f;
        let b = jac.transpose() * jac;
        state = DoglegState { x, trust_radius: radius, gradient: g, gauss_newton_matrix: b, iteration };
        if f.amax() < RESIDUAL_TOL {
            break;
        }
        let gbg = g.dot(&(b * g));
        if !(gbg > 0.0) {
            break;
        }
        let cauchy = -g * (g.norm_squared() / gbg);
        let gn = gauss_newton_step(&b, &g);
        singular |= gn.is_none();
        let d = dogleg_step(&cauchy, gn.as_ref(), radius);
        if d.norm() < STEP_TOL {
            break;
        }

        let predicted = f.norm_squared() - (f + jac * d).norm_squared();
        let x_new = x + d;
        let (f_new, jac_new) = eval(&x_new);
        let actual = f.norm_squared() - f_new.norm_squared();
        let rho = if predicted > 0.0 { actual / predicted } else { -1.0 };

        if rho > 0.0 && f_new.iter().all(|v| v.is_finite()) {
            x = x_new;
            f = f_new;
            jac = jac_new;
            history.push(f.norm());
        }
        if rho < 0.25 {
            radius *= 0.25;
        } else if rho > 0.75 && d.norm() >= 0.999 * radius {
            radius *= 2.0;
        }
        radius = radius.clamp(MIN_RADIUS, MAX_RADIUS);
        state.iteration = iteration + 1;
    }
    state.x = x;
    state.trust_radius = radius;
    DoglegOutcome {
        x,
        residual_norm: f.norm(),
        converged: f.amax() < RESIDUAL_TOL,
        history,
        singular_jacobian: singular,
        state,
    }
}

/// Trust-region dogleg refinement of `r3` on the three quadrics.
pub fn dogleg_refine(sys: &impl AsRef<QuadricSystem>, x0: &Vector3<f64>) -> Result<DoglegOutcome> {
    let sys = sys.as_ref();
    if !(x0.norm() <= MAX_SEED_NORM) {
        return Err(CalibError::InvalidSeed(format!("seed norm {} exceeds {MAX_SEED_NORM}", x0.norm())));
    }
    Ok(dogleg_minimize(|x| (sys.residuals(x), sys.jacobian(x)), *x0))
}
