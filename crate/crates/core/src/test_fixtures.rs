//! Hand-built scenes shared by unit tests.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::constraints::{build_rows, reduce, Observation, QuadricSystem, ReducedSystem};
use crate::geometry::{LaserPoint, RigidPose};

/// Builds an exact observation for `pose` from hand-placed target points.
pub fn exact_observation(pose: &RigidPose) -> Observation {
    // Target corners in the camera frame: ridge toward the camera.
    let p = Vector3::new(0.02, -0.18, 0.95);
    let q = Vector3::new(-0.35, 0.22, 1.05);
    let r = Vector3::new(0.38, 0.25, 1.02);
    let o = Vector3::new(0.0, 0.30, 0.80);
    let inv = pose.inverse();
    let cross = |a: Vector3<f64>, b: Vector3<f64>| {
        let (a, b) = (inv.transform(&a), inv.transform(&b));
        let s = a.y / (a.y - b.y);
        let x = a + (b - a) * s;
        LaserPoint::new(x.x, x.z)
    };
    let plane = |a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>| {
        crate::geometry::PlaneFeature::new((b - a).cross(&(c - a)), (b - a).cross(&(c - a)).dot(&a)).unwrap()
    };
    let t3 = plane(p, q, o);
    let t4 = plane(p, r, o);
    Observation {
        p1: cross(p, q),
        p2: cross(p, r),
        p3: cross(p, o),
        normals: [p.cross(&q).normalize(), p.cross(&r).normalize(), t3.normal, t4.normal],
        d1: t3.distance,
        d2: t4.distance,
        seg13: None,
        seg23: None,
    }
}

/// Reduced system of the exact hand-built observation for `(rotation, t)`.
pub fn system_for(rotation: Matrix3<f64>, translation: Vector3<f64>) -> ReducedSystem {
    let pose = RigidPose::new(rotation, translation).unwrap();
    reduce(&build_rows(&exact_observation(&pose))).unwrap()
}

/// Random quadric system with a planted real unit root `r3`.
pub fn random_system(rng: &mut impl Rng) -> (QuadricSystem, Vector3<f64>) {
    let normal = rand_distr::StandardNormal;
    let r3 = Vector3::from_fn(|_, _| rng.sample::<f64, _>(normal)).normalize();
    let mut sys = QuadricSystem {
        e1: std::array::from_fn(|_| rng.sample(normal)),
        e2: std::array::from_fn(|_| rng.sample(normal)),
        m: 0.0,
    };
    sys.m = -sys.residuals(&r3).x;
    let f2 = sys.residuals(&r3).y;
    sys.e2[8] -= f2 / r3.z;
    (sys, r3)
}
