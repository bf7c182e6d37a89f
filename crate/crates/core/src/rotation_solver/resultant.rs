use nalgebra::{DMatrix, DVector, Matrix3, SMatrix};

use super::polynomial::Polynomial;
use crate::constraints::QuadricSystem;
use crate::error::{CalibError, Result};

/// Degree of the eliminant in `r33`.
pub const UNIVARIATE_DEGREE: usize = 8;
/// Half-width of the interpolation interval.
pub const NODE_RADIUS: f64 = 1.2;
/// Extra nodes used to confirm that the determinant ratio is polynomial.
pub const CHECK_NODES: [f64; 3] = [0.3, -0.77, 1.1];
/// Relative interpolation residual allowed at the check nodes.
pub const CHECK_REL_TOL: f64 = 1e-6;

/// Chebyshev nodes of the first kind on `[−NODE_RADIUS, NODE_RADIUS]`.
pub fn chebyshev_nodes() -> [f64; UNIVARIATE_DEGREE + 1] {
    let n = (UNIVARIATE_DEGREE + 1) as f64;
    std::array::from_fn(|k| NODE_RADIUS * (std::f64::consts::PI * (k as f64 + 0.5) / n).cos())
}

/// Polynomial entries of the resultant matrices at a fixed `r33`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultantEntries {
    pub e14: f64,
    pub e15: f64,
    pub e16: f64,
    pub e24: f64,
    pub e25: f64,
    pub e26: f64,
    pub e31: f64,
}

/// Numerator and denominator of the Macaulay resultant in `r33`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultantMatrices {
    pub e1: [f64; 9],
    pub e2: [f64; 9],
    pub m: f64,
}

impl ResultantMatrices {
    pub fn new(sys: &QuadricSystem) -> Self {
        Self { e1: sys.e1, e2: sys.e2, m: sys.m }
    }

    pub fn entries(&self, r: f64) -> ResultantEntries {
        let [_, _, _, e14, e15, e16, e17, e18, e19] = self.e1;
        let [_, _, _, e24, e25, e26, e27, e28, e29] = self.e2;
        ResultantEntries {
            e14: e14 * r + e17,
            e15: e15 * r + e18,
            e16: e16 * r * r + e19 * r + self.m,
            e24: e24 * r + e27,
            e25: e25 * r + e28,
            e26: e26 * r * r + e29 * r,
            e31: r * r - 1.0,
        }
    }

    pub fn denominator(&self, r: f64) -> Matrix3<f64> {
        let (e11, e13) = (self.e1[0], self.e1[2]);
        let e = self.entries(r);
        Matrix3::new(e11, 0.0, 0.0, 0.0, e11, 1.0, e.e16, e13, 1.0)
    }

    pub fn numerator(&self, r: f64) -> SMatrix<f64, 15, 15> {
        let [e11, e12, e13, ..] = self.e1;
        let [e21, e22, e23, ..] = self.e2;
        let ResultantEntries { e14: a14, e15: a15, e16: a16, e24: a24, e25: a25, e26: a26, e31: a31 } = self.entries(r);
        #[rustfmt::skip]
        let rows: [[f64; 15]; 15] = [
            [e11, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [e12, e11, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, e21, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [a14, 0.0, e11, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, e21, 0.0, 0.0, 0.0, 0.0, 0.0],
            [e13, e12, 0.0, e11, 0.0, 0.0, 0.0, 0.0, e22, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            [a15, a14, e12, 0.0, e11, 0.0, 0.0, 0.0, a24, e22, 0.0, 1.0, 0.0, e21, 0.0],
            [a16, 0.0, a14, 0.0, 0.0, e11, 0.0, 0.0, 0.0, a24, 0.0, 0.0, 1.0, 0.0, e21],
            [0.0, e13, 0.0, e12, 0.0, 0.0, 1.0, 0.0, e23, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, a15, e13, a14, e12, 0.0, 0.0, 1.0, a25, e23, 0.0, 0.0, 0.0, e22, 0.0],
            [0.0, a16, a15, 0.0, a14, e12, a31, 0.0, a26, a25, 0.0, 0.0, 0.0, a24, e22],
            [0.0, 0.0, a16, 0.0, 0.0, a14, 0.0, a31, 0.0, a26, 0.0, 0.0, 0.0, 0.0, a24],
            [0.0, 0.0, 0.0, e13, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, a15, e13, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, e23, 0.0],
            [0.0, 0.0, 0.0, a16, a15, e13, 0.0, 0.0, 0.0, 0.0, a31, 0.0, 1.0, a25, e23],
            [0.0, 0.0, 0.0, 0.0, a16, a15, 0.0, 0.0, 0.0, 0.0, 0.0, a31, 0.0, a26, a25],
            [0.0, 0.0, 0.0, 0.0, 0.0, a16, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, a31, 0.0, a26],
        ];
        SMatrix::from_fn(|i, j| rows[i][j])
    }

    /// `det(numerator) / det(denominator)` at `r`.
    pub fn ratio(&self, r: f64) -> Result<f64> {
        let den = self.denominator(r).determinant();
        let scale = self.e1[0].abs().max(self.e1[2].abs()).max(1.0);
        if !(den.abs() > 1e-12 * scale * scale) {
            return Err(CalibError::ResultantDegenerate(format!("denominator vanishes at r33 = {r}")));
        }
        Ok(self.numerator(r).lu().determinant() / den)
    }
}

/// Eliminates `r13` and `r23`, returning the degree-8 polynomial in `r33`.
///
/// Coefficients are obtained by interpolating the determinant ratio at
/// Chebyshev nodes, then validated at [`CHECK_NODES`].
pub fn macaulay_univariate(sys: &impl AsRef<QuadricSystem>) -> Result<Polynomial> {
    let mats = &ResultantMatrices::new(sys.as_ref());
    let nodes = chebyshev_nodes();
    let n = nodes.len();
    let values = nodes.iter().map(|x| mats.ratio(*x)).collect::<Result<Vec<f64>>>()?;
    let vander = DMatrix::from_fn(n, n, |i, j| nodes[i].powi((n - 1 - j) as i32));
    let coeffs = vander
        .lu()
        .solve(&DVector::from_vec(values.clone()))
        .ok_or_else(|| CalibError::ResultantDegenerate("singular interpolation system".into()))?;
    let poly = Polynomial::new(coeffs.iter().copied().collect());

    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return Err(CalibError::ResultantDegenerate("resultant vanishes identically".into()));
    }
    for x in CHECK_NODES {
        let err = (mats.ratio(x)? - poly.eval(x)).abs();
        if err > CHECK_REL_TOL * scale {
            return Err(CalibError::ResultantDegenerate(format!(
                "interpolation residual {err:.3e} at r33 = {x} exceeds tolerance"
            )));
        }
    }
    Ok(poly)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_fixtures::{random_system, system_for};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn denominator_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (sys, _) = random_system(&mut rng);
        let mats = ResultantMatrices::new(&sys);
        let d0 = mats.denominator(0.0).determinant();
        let want = mats.e1[0] * (mats.e1[0] - mats.e1[2]);
        assert!((d0 - want).abs() < 1e-12 * want.abs().max(1.0));
        for r in [-1.1, 0.4, 0.9] {
            assert!((mats.denominator(r).determinant() - d0).abs() < 1e-12 * d0.abs().max(1.0));
        }
    }

    #[test]
    fn random_systems_vanish_at_the_planted_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (sys, r3) = random_system(&mut rng);
            let p = macaulay_univariate(&sys).unwrap();
            assert_eq!(p.degree(), 8);
            assert!(p.eval(r3.z).abs() <= 1e-8 * p.max_abs_coefficient());
        }
    }

    #[test]
    fn scaled_system_has_the_same_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (sys, _) = random_system(&mut rng);
        let scaled = QuadricSystem { e1: sys.e1.map(|v| v * 10.0), e2: sys.e2.map(|v| v * 10.0), m: sys.m * 10.0 };
        let a = macaulay_univariate(&sys).unwrap();
        let b = macaulay_univariate(&scaled).unwrap();
        let ratio = b.leading() / a.leading();
        for (x, y) in a.coefficients().iter().zip(b.coefficients()) {
            assert!((x * ratio - y).abs() <= 1e-8 * b.max_abs_coefficient());
        }
    }

    #[test]
    fn identity_rotation_has_unit_root() {
        let sys = system_for(nalgebra::Matrix3::identity(), Vector3::new(0.1, 0.05, 0.02));
        let p = macaulay_univariate(&sys).unwrap();
        assert!(p.eval(1.0).abs() <= 1e-8 * p.max_abs_coefficient());
    }

    #[test]
    fn vanishing_denominator_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut sys, _) = random_system(&mut rng);
        sys.e1[2] = sys.e1[0];
        assert!(matches!(macaulay_univariate(&sys), Err(CalibError::ResultantDegenerate(_))));
    }
}
