//! Point-to-plane constraints of one or more target observations.
//!
//! Each observation yields six rows `n̄ᵢᵀ (R p̄ᵢ + t) = d̄ᵢ`. Translation is
//! eliminated in closed form through the normal equations, `r1` is expressed
//! affinely in `r3`, and what remains is three quadrics in
//! `r3 = [r13, r23, r33]`:
//!
//! ```text
//! F1 = |H r3 + K|² − 1          (unit r1)
//! F2 = r3ᵀ (H r3 + K)           (r1 ⊥ r3)
//! F3 = |r3|² − 1                (unit r3)
//! ```

use nalgebra::{Cholesky, DVector, Matrix3, MatrixXx3, SymmetricEigen, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geometry::LaserPoint;

/// Unit-norm tolerance for observation normals.
pub const NORMAL_UNIT_TOL: f64 = 1e-9;
/// Minimum separation of the laser feature x-coordinates, meters.
pub const MIN_X_SEPARATION: f64 = 1e-9;
/// Relative singular-value threshold for numerical rank.
pub const RANK_REL_TOL: f64 = 1e-10;
/// Largest accepted condition number of `G_xᵀ G_x`.
pub const MAX_REDUCTION_CONDITION: f64 = 1e12;

/// Features extracted from a single snapshot of the V-shaped target.
///
/// `p1`, `p2`, `p3` are the scan-plane crossings of sides PQ, PR and PO.
/// `normals[0..4]` are the unit normals of planes PQC, PRC, PQO and PRO in
/// the camera frame; `d1`, `d2` the camera distances of the last two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub p1: LaserPoint,
    pub p2: LaserPoint,
    pub p3: LaserPoint,
    pub normals: [Vector3<f64>; 4],
    pub d1: f64,
    pub d2: f64,
    /// Scan returns on board PQO.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg13: Option<Vec<LaserPoint>>,
    /// Scan returns on board PRO.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg23: Option<Vec<LaserPoint>>,
}

impl Observation {
    pub fn points(&self) -> [LaserPoint; 3] {
        [self.p1, self.p2, self.p3]
    }
}

/// One point-to-plane row: `normalᵀ (R p + t) = distance`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintRow {
    pub normal: Vector3<f64>,
    pub point: LaserPoint,
    pub distance: f64,
}

impl ConstraintRow {
    pub fn residual(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> f64 {
        self.normal.dot(&(rotation * self.point.embed() + translation)) - self.distance
    }
}

/// Quadratic polynomial in `(r13, r23, r33)`.
///
/// Coefficient order: `r13², r13·r23, r23², r13·r33, r23·r33, r33², r13,
/// r23, r33, 1`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quadric(pub [f64; 10]);

/// Monomial exponents of each [`Quadric`] coefficient slot.
const QUADRIC_EXPONENTS: [[u8; 3]; 10] = [
    [2, 0, 0],
    [1, 1, 0],
    [0, 2, 0],
    [1, 0, 1],
    [0, 1, 1],
    [0, 0, 2],
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [0, 0, 0],
];

impl Quadric {
    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        let c = &self.0;
        let (a, b, z) = (x[0], x[1], x[2]);
        c[0] * a * a
            + c[1] * a * b
            + c[2] * b * b
            + c[3] * a * z
            + c[4] * b * z
            + c[5] * z * z
            + c[6] * a
            + c[7] * b
            + c[8] * z
            + c[9]
    }

    pub fn gradient(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let c = &self.0;
        let (a, b, z) = (x[0], x[1], x[2]);
        Vector3::new(
            2.0 * c[0] * a + c[1] * b + c[3] * z + c[6],
            c[1] * a + 2.0 * c[2] * b + c[4] * z + c[7],
            c[3] * a + c[4] * b + 2.0 * c[5] * z + c[8],
        )
    }

    fn add_assign(&mut self, other: &Quadric) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += b;
        }
    }
}

/// Affine form `c·x + c0` in `(r13, r23, r33)`.
#[derive(Debug, Clone, Copy)]
struct LinearForm {
    coeffs: [f64; 3],
    constant: f64,
}

impl LinearForm {
    /// Multiply-and-collect into the quadric monomial basis.
    fn product(&self, other: &LinearForm) -> Quadric {
        let mut q = Quadric::default();
        let mut add = |exp: [u8; 3], v: f64| {
            let slot = QUADRIC_EXPONENTS.iter().position(|e| *e == exp).unwrap();
            q.0[slot] += v;
        };
        for i in 0..3 {
            for j in 0..3 {
                let mut exp = [0u8; 3];
                exp[i] += 1;
                exp[j] += 1;
                add(exp, self.coeffs[i] * other.coeffs[j]);
            }
            let mut exp = [0u8; 3];
            exp[i] += 1;
            add(exp, self.coeffs[i] * other.constant + self.constant * other.coeffs[i]);
        }
        add([0, 0, 0], self.constant * other.constant);
        q
    }

    fn variable(i: usize) -> Self {
        let mut coeffs = [0.0; 3];
        coeffs[i] = 1.0;
        Self { coeffs, constant: 0.0 }
    }
}

/// The three quadrics in `r3` left after eliminating `t` and `r1`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadricSystem {
    /// Coefficients `e11..e19` of the unit-`r1` quadric.
    pub e1: [f64; 9],
    /// Coefficients `e21..e29` of the orthogonality quadric.
    pub e2: [f64; 9],
    /// Constant term of the unit-`r1` quadric.
    pub m: f64,
}

impl AsRef<QuadricSystem> for QuadricSystem {
    fn as_ref(&self) -> &QuadricSystem {
        self
    }
}

impl QuadricSystem {
    pub fn quadrics(&self) -> [Quadric; 3] {
        let mut f1 = [0.0; 10];
        f1[..9].copy_from_slice(&self.e1);
        f1[9] = self.m;
        let mut f2 = [0.0; 10];
        f2[..9].copy_from_slice(&self.e2);
        [Quadric(f1), Quadric(f2), Quadric([1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0])]
    }

    /// `[F1, F2, F3]` at `r3`.
    pub fn residuals(&self, r3: &Vector3<f64>) -> Vector3<f64> {
        let [a, b, c] = self.quadrics();
        Vector3::new(a.eval(r3), b.eval(r3), c.eval(r3))
    }

    /// Rows are `∇F1`, `∇F2`, `∇F3`.
    pub fn jacobian(&self, r3: &Vector3<f64>) -> Matrix3<f64> {
        let [a, b, c] = self.quadrics();
        Matrix3::from_rows(&[a.gradient(r3).transpose(), b.gradient(r3).transpose(), c.gradient(r3).transpose()])
    }

    /// Largest magnitude among `e_ij` and `m`.
    pub fn coefficient_scale(&self) -> f64 {
        self.e1.iter().chain(self.e2.iter()).chain(std::iter::once(&self.m)).fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Residual acceptance threshold for roots of the system.
    pub fn tolerance(&self) -> f64 {
        1e-6 * (1.0 + self.coefficient_scale())
    }
}

/// Intermediate matrices of the translation and `r1` elimination.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    /// `Σ n̄ n̄ᵀ`
    pub n_o: Matrix3<f64>,
    /// `Σ d̄ n̄`
    pub d_n: Vector3<f64>,
    /// `Σ n̄ n̄ᵀ x̄`
    pub n_alpha: Matrix3<f64>,
    /// `Σ n̄ n̄ᵀ z̄`
    pub n_gamma: Matrix3<f64>,
    pub g_x: MatrixXx3<f64>,
    pub g_z: MatrixXx3<f64>,
    pub g_d: DVector<f64>,
    pub h: Matrix3<f64>,
    pub k: Vector3<f64>,
    pub equations: QuadricSystem,
    pub rows: Vec<ConstraintRow>,
    n_o_chol: Cholesky<f64, nalgebra::U3>,
}

impl AsRef<QuadricSystem> for ReducedSystem {
    fn as_ref(&self) -> &QuadricSystem {
        &self.equations
    }
}

impl ReducedSystem {
    pub fn residuals(&self, r3: &Vector3<f64>) -> Vector3<f64> {
        self.equations.residuals(r3)
    }

    pub fn jacobian(&self, r3: &Vector3<f64>) -> Matrix3<f64> {
        self.equations.jacobian(r3)
    }

    pub fn tolerance(&self) -> f64 {
        self.equations.tolerance()
    }

    /// `r1 = H r3 + K`.
    pub fn r1_from_r3(&self, r3: &Vector3<f64>) -> Vector3<f64> {
        self.h * r3 + self.k
    }

    /// `t = N_o⁻¹ (D_n − N_α r1 − N_γ r3)`.
    pub fn translation(&self, r1: &Vector3<f64>, r3: &Vector3<f64>) -> Vector3<f64> {
        self.n_o_chol.solve(&(self.d_n - self.n_alpha * r1 - self.n_gamma * r3))
    }

    /// Sum of squared constraint residuals (the least-squares cost `J`).
    pub fn cost(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> f64 {
        self.rows.iter().map(|r| r.residual(rotation, translation).powi(2)).sum()
    }
}

/// Rank diagnostics of the six linear constraints of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct IndependenceReport {
    /// `n4 = u n1 + v n2 + w n3`, when `{n1, n2, n3}` is a basis.
    pub uvw: Option<Vector3<f64>>,
    pub rank_a: usize,
    /// Subsets `{n1,n2,n3}`, `{n1,n2,n4}`, `{n1,n3,n4}`, `{n2,n3,n4}`.
    pub subset_independent: [bool; 4],
    pub min_singular_value_a: f64,
}

pub fn validate_observation(obs: &Observation) -> Result<&Observation> {
    for (i, n) in obs.normals.iter().enumerate() {
        let norm = n.norm();
        if !((norm - 1.0).abs() <= NORMAL_UNIT_TOL) {
            return Err(CalibError::NonUnitNormal { index: i + 1, norm });
        }
    }
    for (name, value) in [("d1", obs.d1), ("d2", obs.d2)] {
        if !(value > 0.0) || !value.is_finite() {
            return Err(CalibError::NonPositiveDistance { name, value });
        }
    }
    let pts = obs.points();
    if pts.iter().any(|p| !p.is_finite()) {
        return Err(CalibError::DegenerateObservation("non-finite laser point".into()));
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if (pts[i].x - pts[j].x).abs() <= MIN_X_SEPARATION {
            return Err(CalibError::DegenerateObservation(format!(
                "laser points p{} and p{} share the x coordinate {}",
                i + 1,
                j + 1,
                pts[i].x
            )));
        }
    }
    Ok(obs)
}

/// The six rows in the fixed order
/// `(n1,p1,0) (n2,p2,0) (n3,p1,d1) (n3,p3,d1) (n4,p2,d2) (n4,p3,d2)`.
pub fn build_rows(obs: &Observation) -> [ConstraintRow; 6] {
    let [n1, n2, n3, n4] = obs.normals;
    let row = |normal, point, distance| ConstraintRow { normal, point, distance };
    [
        row(n1, obs.p1, 0.0),
        row(n2, obs.p2, 0.0),
        row(n3, obs.p1, obs.d1),
        row(n3, obs.p3, obs.d1),
        row(n4, obs.p2, obs.d2),
        row(n4, obs.p3, obs.d2),
    ]
}

/// Stacks the rows of several observations.
pub fn stack_rows<'a>(observations: impl IntoIterator<Item = &'a Observation>) -> Vec<ConstraintRow> {
    observations.into_iter().flat_map(build_rows).collect()
}

pub fn translation_from_rotation(sys: &ReducedSystem, r1: &Vector3<f64>, r3: &Vector3<f64>) -> Vector3<f64> {
    sys.translation(r1, r3)
}

pub fn reduce(rows: &[ConstraintRow]) -> Result<ReducedSystem> {
    if rows.len() < 6 {
        return Err(CalibError::InsufficientObservations { needed: 6, got: rows.len() });
    }
    let nrows = rows.len();
    let mut n_o = Matrix3::zeros();
    let mut d_n = Vector3::zeros();
    let mut n_alpha = Matrix3::zeros();
    let mut n_gamma = Matrix3::zeros();
    let mut n_mat = MatrixXx3::zeros(nrows);
    let mut n_x = MatrixXx3::zeros(nrows);
    let mut n_z = MatrixXx3::zeros(nrows);
    let mut d = DVector::zeros(nrows);
    for (i, r) in rows.iter().enumerate() {
        let nn = r.normal * r.normal.transpose();
        n_o += nn;
        d_n += r.normal * r.distance;
        n_alpha += nn * r.point.x;
        n_gamma += nn * r.point.z;
        n_mat.set_row(i, &r.normal.transpose());
        n_x.set_row(i, &(r.normal.transpose() * r.point.x));
        n_z.set_row(i, &(r.normal.transpose() * r.point.z));
        d[i] = r.distance;
    }
    let n_o_chol = Cholesky::new(n_o).ok_or(CalibError::SingularNormalGram)?;
    let g_x = &n_x - &n_mat * n_o_chol.solve(&n_alpha);
    let g_z = &n_z - &n_mat * n_o_chol.solve(&n_gamma);
    let g_d = &d - &n_mat * n_o_chol.solve(&d_n);

    let gram: Matrix3<f64> = g_x.transpose() * &g_x;
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_REDUCTION_CONDITION) {
        return Err(CalibError::SingularReduction(cond));
    }
    let gram_chol = Cholesky::new(gram).ok_or(CalibError::SingularReduction(cond))?;
    let h = -gram_chol.solve(&(g_x.transpose() * &g_z));
    let k = gram_chol.solve(&(g_x.transpose() * &g_d));

    // r1 = H r3 + K as three affine forms in r3.
    let r1_forms: [LinearForm; 3] = std::array::from_fn(|i| LinearForm {
        coeffs: [h[(i, 0)], h[(i, 1)], h[(i, 2)]],
        constant: k[i],
    });
    let mut unit_r1 = Quadric::default();
    let mut ortho = Quadric::default();
    for (i, form) in r1_forms.iter().enumerate() {
        unit_r1.add_assign(&form.product(form));
        ortho.add_assign(&LinearForm::variable(i).product(form));
    }
    unit_r1.0[9] -= 1.0;

    let mut e1 = [0.0; 9];
    e1.copy_from_slice(&unit_r1.0[..9]);
    let mut e2 = [0.0; 9];
    e2.copy_from_slice(&ortho.0[..9]);

    Ok(ReducedSystem {
        n_o,
        d_n,
        n_alpha,
        n_gamma,
        g_x,
        g_z,
        g_d,
        h,
        k,
        equations: QuadricSystem { e1, e2, m: unit_r1.0[9] },
        rows: rows.to_vec(),
        n_o_chol,
    })
}

/// Numerical rank and basis diagnostics of the six linear equations in
/// `[t; r1; r3]`.
pub fn check_independence(obs: &Observation) -> IndependenceReport {
    let rows = build_rows(obs);
    let mut a = nalgebra::SMatrix::<f64, 6, 9>::zeros();
    for (i, r) in rows.iter().enumerate() {
        for c in 0..3 {
            a[(i, c)] = r.normal[c];
            a[(i, 3 + c)] = r.normal[c] * r.point.x;
            a[(i, 6 + c)] = r.normal[c] * r.point.z;
        }
    }
    let sv = SVD::new(a, false, false).singular_values;
    let smax = sv.max();
    let rank_a = sv.iter().filter(|s| **s > RANK_REL_TOL * smax).count();

    let [n1, n2, n3, n4] = obs.normals;
    let independent = |a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>| {
        let s = Matrix3::from_columns(&[a, b, c]).singular_values();
        s.min() > RANK_REL_TOL * s.max()
    };
    let subset_independent = [
        independent(n1, n2, n3),
        independent(n1, n2, n4),
        independent(n1, n3, n4),
        independent(n2, n3, n4),
    ];
    let uvw = if subset_independent[0] {
        Matrix3::from_columns(&[n1, n2, n3]).lu().solve(&n4)
    } else {
        None
    };
    IndependenceReport { uvw, rank_a, subset_independent, min_singular_value_a: sv.min() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_from_rpy, RigidPose};
    use crate::test_fixtures::exact_observation;

    fn truth() -> RigidPose {
        RigidPose::new(rotation_from_rpy(0.1, -0.15, 0.2), Vector3::new(0.12, 0.08, 0.05)).unwrap()
    }

    #[test]
    fn rows_follow_the_fixed_layout() {
        let obs = exact_observation(&truth());
        let rows = build_rows(&obs);
        assert_eq!(rows[0].normal, obs.normals[0]);
        assert_eq!(rows[0].distance, 0.0);
        assert_eq!(rows[1].distance, 0.0);
        assert_eq!((rows[2].normal, rows[2].distance), (obs.normals[2], obs.d1));
        assert_eq!((rows[3].normal, rows[3].distance), (obs.normals[2], obs.d1));
        assert_eq!((rows[4].normal, rows[4].distance), (obs.normals[3], obs.d2));
        assert_eq!((rows[5].normal, rows[5].distance), (obs.normals[3], obs.d2));
        assert_eq!([rows[2].point, rows[3].point], [obs.p1, obs.p3]);
        assert_eq!([rows[4].point, rows[5].point], [obs.p2, obs.p3]);
        let pose = truth();
        for r in &rows {
            assert!(r.residual(&pose.rotation, &pose.translation).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_errors() {
        let obs = exact_observation(&truth());
        assert!(validate_observation(&obs).is_ok());

        let mut bad = obs.clone();
        bad.p1.x = 0.3;
        bad.p2.x = 0.3;
        assert!(matches!(validate_observation(&bad), Err(CalibError::DegenerateObservation(_))));

        let mut bad = obs.clone();
        bad.normals[0] = Vector3::new(0.0, 0.0, 2.0);
        assert!(matches!(validate_observation(&bad), Err(CalibError::NonUnitNormal { index: 1, .. })));

        let mut bad = obs;
        bad.d2 = -0.1;
        assert!(matches!(validate_observation(&bad), Err(CalibError::NonPositiveDistance { name: "d2", .. })));
    }

    #[test]
    fn reduction_matches_ground_truth() {
        let pose = truth();
        let sys = reduce(&build_rows(&exact_observation(&pose))).unwrap();
        let (r1, r3) = (pose.column(0), pose.column(2));
        assert!((sys.r1_from_r3(&r3) - r1).norm() < 1e-9);
        assert!(sys.residuals(&r3).amax() < 1e-9);
        assert!((r3.norm_squared() - 1.0).abs() < 1e-12);
        assert!((sys.translation(&r1, &r3) - pose.translation).norm() < 1e-9);
    }

    #[test]
    fn expansion_matches_direct_evaluation() {
        let sys = reduce(&build_rows(&exact_observation(&truth()))).unwrap();
        let [f1, f2, _] = sys.equations.quadrics();
        for x in [Vector3::new(0.3, -0.7, 0.2), Vector3::new(-1.1, 0.4, 0.9), Vector3::new(0.0, 0.0, 0.0)] {
            let r1 = sys.h * x + sys.k;
            assert!((f1.eval(&x) - (r1.norm_squared() - 1.0)).abs() < 1e-12);
            assert!((f2.eval(&x) - x.dot(&r1)).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let sys = reduce(&build_rows(&exact_observation(&truth()))).unwrap();
        let x = Vector3::new(0.2, -0.4, 0.85);
        let jac = sys.jacobian(&x);
        let h = 1e-6;
        for c in 0..3 {
            let mut dx = Vector3::zeros();
            dx[c] = h;
            let fd = (sys.residuals(&(x + dx)) - sys.residuals(&(x - dx))) / (2.0 * h);
            for r in 0..3 {
                assert!((fd[r] - jac[(r, c)]).abs() <= 1e-5 * (1.0 + jac[(r, c)].abs()));
            }
        }
    }

    #[test]
    fn translation_is_the_least_squares_minimizer() {
        let pose = truth();
        let sys = reduce(&build_rows(&exact_observation(&pose))).unwrap();
        let r1 = (pose.column(0) + Vector3::new(0.01, -0.02, 0.005)).normalize();
        let r3 = pose.column(2);
        let rot = Matrix3::from_columns(&[r1, r3.cross(&r1), r3]);
        let t = sys.translation(&r1, &r3);
        let best = sys.cost(&rot, &t);
        let dirs = [Vector3::x(), Vector3::y(), Vector3::z(), Vector3::new(1.0, -1.0, 0.5)];
        for d in dirs {
            for s in [1e-4, -1e-4, 1e-2, -1e-2] {
                assert!(sys.cost(&rot, &(t + d * s)) > best);
            }
        }
    }

    #[test]
    fn scaling_the_scene_scales_translation_only() {
        let pose = truth();
        let obs = exact_observation(&pose);
        let mut scaled = obs.clone();
        for p in [&mut scaled.p1, &mut scaled.p2, &mut scaled.p3] {
            p.x *= 2.0;
            p.z *= 2.0;
        }
        scaled.d1 *= 2.0;
        scaled.d2 *= 2.0;
        let a = reduce(&build_rows(&obs)).unwrap();
        let b = reduce(&build_rows(&scaled)).unwrap();
        assert!((a.h - b.h).norm() < 1e-9);
        assert!((a.k - b.k).norm() < 1e-9);
        let (r1, r3) = (pose.column(0), pose.column(2));
        assert!((b.translation(&r1, &r3) - 2.0 * a.translation(&r1, &r3)).norm() < 1e-9);
    }

    #[test]
    fn independence_of_a_valid_view() {
        let obs = exact_observation(&truth());
        let rep = check_independence(&obs);
        assert_eq!(rep.rank_a, 6);
        assert_eq!(rep.subset_independent, [true; 4]);
        let uvw = rep.uvw.unwrap();
        let [n1, n2, n3, n4] = obs.normals;
        assert!((n1 * uvw.x + n2 * uvw.y + n3 * uvw.z - n4).norm() < 1e-9);
    }

    #[test]
    fn coplanar_boards_lose_rank() {
        let mut obs = exact_observation(&truth());
        obs.normals[3] = obs.normals[2];
        let rep = check_independence(&obs);
        assert!(rep.rank_a < 6);
        assert!(!rep.subset_independent[2]);
        assert!(!rep.subset_independent[3]);
    }

    #[test]
    fn too_few_rows() {
        let rows = build_rows(&exact_observation(&truth()));
        assert!(matches!(reduce(&rows[..5]), Err(CalibError::InsufficientObservations { .. })));
    }
}
