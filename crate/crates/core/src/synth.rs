//! Synthetic rigs, targets, ray-cast observations and sensor noise.
//!
//! The target frame has its origin at the midpoint of the fold `PO`. The
//! base triangle `PQR` is parallel to `Z_T = 0` below the origin and the fold
//! rises toward `+Z_T`, so a sensor on the `+Z_T` side sees a convex ridge.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::constraints::Observation;
use crate::error::{CalibError, Result};
use crate::features::{image_line_through, normal_from_image_line, plane_from_board_pose, BoardPose, ScanPoint, MIN_SEGMENT_POINTS};
use crate::geometry::{rotation_from_rpy, skew, LaserPoint, PlaneFeature, RigidPose};

pub const DEFAULT_BOARD_ANGLE_DEG: f64 = 150.0;
/// Elevation of the fold `PO` above the base plane.
pub const DEFAULT_FOLD_ELEVATION_DEG: f64 = 30.0;
pub const DEFAULT_FOLD_LENGTH: f64 = 0.5;
pub const DEFAULT_SIDE_LENGTH: f64 = 0.5;
/// LRF angular resolution, degrees.
pub const DEFAULT_SCAN_RESOLUTION_DEG: f64 = 0.36;
/// Barycentric subdivision of the checkerboard grid (171 interior corners, about 2.5 cm squares).
const GRID_DIVISIONS: usize = 20;

/// Geometry of the V-shaped target in its own frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGeometry {
    pub board_angle_deg: f64,
    pub p: Vector3<f64>,
    pub q: Vector3<f64>,
    pub r: Vector3<f64>,
    pub o: Vector3<f64>,
    /// Checkerboard corners of boards `PQO` and `PRO` in the target frame.
    pub board_points: [Vec<Vector3<f64>>; 2],
}

impl TargetGeometry {
    /// Target with the given dihedral angle between the two boards.
    pub fn new(board_angle_deg: f64) -> Result<Self> {
        Self::with_dimensions(board_angle_deg, DEFAULT_FOLD_ELEVATION_DEG, DEFAULT_FOLD_LENGTH, DEFAULT_SIDE_LENGTH)
    }

    pub fn with_dimensions(board_angle_deg: f64, elevation_deg: f64, fold: f64, side: f64) -> Result<Self> {
        if !(board_angle_deg > 0.0 && board_angle_deg < 180.0) {
            return Err(CalibError::InvalidConfig(format!("board angle {board_angle_deg} outside (0, 180)")));
        }
        if !(elevation_deg > 0.0 && elevation_deg < 90.0 && fold > 0.0 && side > 0.0) {
            return Err(CalibError::InvalidConfig("target dimensions must be positive".into()));
        }
        let half = board_angle_deg.to_radians() / 2.0;
        let phi = elevation_deg.to_radians();
        let u = Vector3::new(0.0, phi.cos(), phi.sin());
        let b = Vector3::new(0.0, phi.sin(), -phi.cos());
        let side_dir = |sign: f64| {
            let a = Vector3::x() * (sign * half.sin()) + b * half.cos();
            (u * (half.cos() * phi.cos()) + a * phi.sin()).normalize()
        };
        let p = -u * (fold / 2.0);
        let o = u * (fold / 2.0);
        let q = p + side_dir(-1.0) * side;
        let r = p + side_dir(1.0) * side;
        let grid = |a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>| {
            let n = GRID_DIVISIONS;
            let mut pts = Vec::new();
            for i in 1..n {
                for j in 1..n - i {
                    let k = n - i - j;
                    if k >= 1 {
                        pts.push((a * i as f64 + b * j as f64 + c * k as f64) / n as f64);
                    }
                }
            }
            pts
        };
        let board_points = [grid(p, q, o), grid(p, r, o)];
        Ok(Self { board_angle_deg, p, q, r, o, board_points })
    }

    /// Outward-facing planes of boards `PQO` and `PRO` in the target frame.
    pub fn board_planes(&self) -> [(Vector3<f64>, Vector3<f64>); 2] {
        let n3 = (self.o - self.p).cross(&(self.q - self.p)).normalize();
        let n4 = (self.r - self.p).cross(&(self.o - self.p)).normalize();
        [(n3, self.p), (n4, self.p)]
    }
}

impl Default for TargetGeometry {
    fn default() -> Self {
        Self::new(DEFAULT_BOARD_ANGLE_DEG).expect("default geometry is valid")
    }
}

/// Sensor noise levels, scaled together by `k_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Range noise along the beam, meters.
    pub sigma_laser: f64,
    /// Image noise per pixel coordinate.
    pub sigma_pixel: f64,
    pub k_factor: f64,
}

impl NoiseModel {
    pub fn new(sigma_laser: f64, sigma_pixel: f64, k_factor: f64) -> Result<Self> {
        if !(sigma_laser >= 0.0 && sigma_pixel >= 0.0 && (0.0..=1.0).contains(&k_factor)) {
            return Err(CalibError::InvalidConfig("noise levels must be non-negative and k in [0, 1]".into()));
        }
        Ok(Self { sigma_laser, sigma_pixel, k_factor })
    }

    pub fn none() -> Self {
        Self { sigma_laser: 0.0, sigma_pixel: 0.0, k_factor: 0.0 }
    }

    pub fn laser(&self) -> f64 {
        self.k_factor * self.sigma_laser
    }

    pub fn pixel(&self) -> f64 {
        self.k_factor * self.sigma_pixel
    }
}

/// Sampling ranges of the simulation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Half-width of the uniform roll/pitch/yaw range of the rig, degrees.
    pub rig_rotation_range: f64,
    /// Per-axis range of the rig translation, meters.
    pub rig_translation_range: (f64, f64),
    /// Half-width of the target roll/pitch/yaw range, degrees.
    pub target_rotation_range: f64,
    /// Target depth along the optical axis, meters.
    pub target_distance_range: (f64, f64),
    pub intrinsics: Matrix3<f64>,
    pub image_size: (u32, u32),
    pub scan_resolution_deg: f64,
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            rig_rotation_range: 45.0,
            rig_translation_range: (0.05, 0.30),
            target_rotation_range: 45.0,
            target_distance_range: (0.5, 1.5),
            intrinsics: Matrix3::new(400.0, 0.0, 320.0, 0.0, 400.0, 240.0, 0.0, 0.0, 1.0),
            image_size: (640, 480),
            scan_resolution_deg: DEFAULT_SCAN_RESOLUTION_DEG,
            rng_seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let (t0, t1) = self.rig_translation_range;
        let (d0, d1) = self.target_distance_range;
        if !(self.rig_rotation_range >= 0.0 && self.target_rotation_range >= 0.0 && t0 <= t1 && 0.0 < d0 && d0 <= d1) {
            return Err(CalibError::InvalidConfig("empty or invalid sampling range".into()));
        }
        if !(self.scan_resolution_deg > 0.0) {
            return Err(CalibError::InvalidConfig("scan resolution must be positive".into()));
        }
        if !(self.intrinsics.determinant().abs() > 1e-12) {
            return Err(CalibError::SingularIntrinsics);
        }
        Ok(())
    }
}

/// Target orientation when all sampled angles are zero: `Z_T` toward the
/// camera, `X_T` along the camera `x` axis.
pub fn facing_rotation() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    /// LRF frame in the camera frame.
    pub rig_pose: RigidPose,
    /// Target frame in the camera frame.
    pub target_pose: RigidPose,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

fn rpy(rng: &mut impl Rng, half_range_deg: f64) -> Matrix3<f64> {
    let h = half_range_deg.to_radians();
    let (roll, pitch, yaw) = (uniform(rng, -h, h), uniform(rng, -h, h), uniform(rng, -h, h));
    rotation_from_rpy(roll, pitch, yaw)
}

/// Random LRF pose in the camera frame.
pub fn sample_rig(cfg: &ScenarioConfig, rng: &mut impl Rng) -> RigidPose {
    let (t0, t1) = cfg.rig_translation_range;
    let rotation = rpy(rng, cfg.rig_rotation_range);
    let translation = Vector3::new(uniform(rng, t0, t1), uniform(rng, t0, t1), uniform(rng, t0, t1));
    RigidPose { rotation, translation }
}

/// Random target pose for a given rig. The target origin is placed on the
/// scan plane at the sampled depth, at the point nearest the optical axis.
pub fn sample_target(cfg: &ScenarioConfig, rig: &RigidPose, rng: &mut impl Rng) -> RigidPose {
    let rotation = rpy(rng, cfg.target_rotation_range) * facing_rotation();
    let depth = uniform(rng, cfg.target_distance_range.0, cfg.target_distance_range.1);

    // Scan plane m·(x − t) = 0 at z = depth: m_x x + m_y y = c.
    let m = rig.rotation.column(1).into_owned();
    let c = m.dot(&rig.translation) - m.z * depth;
    let mm = m.x * m.x + m.y * m.y;
    let anchor = if mm > 1e-12 { Vector3::new(c * m.x / mm, c * m.y / mm, depth) } else { Vector3::new(0.0, 0.0, depth) };
    RigidPose { rotation, translation: anchor }
}

/// Random rig and target poses.
pub fn sample_scenario(cfg: &ScenarioConfig, rng: &mut impl Rng) -> GroundTruth {
    let rig_pose = sample_rig(cfg, rng);
    let target_pose = sample_target(cfg, &rig_pose, rng);
    GroundTruth { rig_pose, target_pose }
}

/// Target corners and board planes expressed in one frame.
struct PlacedTarget {
    p: Vector3<f64>,
    q: Vector3<f64>,
    r: Vector3<f64>,
    o: Vector3<f64>,
}

impl PlacedTarget {
    fn new(geom: &TargetGeometry, pose: &RigidPose) -> Self {
        Self { p: pose.transform(&geom.p), q: pose.transform(&geom.q), r: pose.transform(&geom.r), o: pose.transform(&geom.o) }
    }
}

fn laser_crossing(a: &Vector3<f64>, b: &Vector3<f64>, side: &'static str) -> Result<LaserPoint> {
    if (a.y > 0.0) == (b.y > 0.0) || a.y == b.y {
        return Err(CalibError::NoIntersection(side));
    }
    let s = a.y / (a.y - b.y);
    let x = a + (b - a) * s;
    Ok(LaserPoint::new(x.x, x.z))
}

fn scan_angle(p: &LaserPoint) -> f64 {
    p.x.atan2(p.z)
}

/// Möller–Trumbore ray/triangle intersection from the origin.
fn ray_triangle(dir: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<f64> {
    let (e1, e2) = (b - a, c - a);
    let h = dir.cross(&e2);
    let det = e1.dot(&h);
    if det.abs() < 1e-14 {
        return None;
    }
    let s = -a;
    let u = s.dot(&h) / det;
    let qv = s.cross(&e1);
    let v = dir.dot(&qv) / det;
    if !(0.0..=1.0).contains(&u) || v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qv) / det;
    (t > 0.0).then_some(t)
}

/// Which surface a scan return hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Base,
    BoardPqo,
    BoardPro,
}

/// Ray-cast scan across the target and the surrounding base plane, ordered
/// by increasing scan angle.
pub fn simulate_scan(gt: &GroundTruth, geom: &TargetGeometry, cfg: &ScenarioConfig) -> Result<Vec<(ScanPoint, Surface)>> {
    let laser_pose = gt.rig_pose.inverse().compose(&gt.target_pose);
    let t = PlacedTarget::new(geom, &laser_pose);
    let p1 = laser_crossing(&t.p, &t.q, "PQ")?;
    let p2 = laser_crossing(&t.p, &t.r, "PR")?;
    let (a1, a2) = (scan_angle(&p1), scan_angle(&p2));
    let span = (a2 - a1).abs();
    let margin = (0.5 * span).max(3f64.to_radians());
    let (start, end) = (a1.min(a2) - margin, a1.max(a2) + margin);
    let res = cfg.scan_resolution_deg.to_radians();
    let base_normal = (t.q - t.p).cross(&(t.r - t.p));

    let mut out = Vec::new();
    let steps = ((end - start) / res).floor() as usize;
    for k in 0..=steps {
        let alpha = start + k as f64 * res;
        let dir = Vector3::new(alpha.sin(), 0.0, alpha.cos());
        let hits = [
            (ray_triangle(&dir, &t.p, &t.q, &t.o), Surface::BoardPqo),
            (ray_triangle(&dir, &t.p, &t.r, &t.o), Surface::BoardPro),
        ];
        let board = hits.iter().filter_map(|(h, s)| h.map(|d| (d, *s))).min_by(|a, b| a.0.total_cmp(&b.0));
        let hit = board.or_else(|| {
            let den = base_normal.dot(&dir);
            let d = base_normal.dot(&t.p) / den;
            (den.abs() > 1e-12 && d > 0.0).then_some((d, Surface::Base))
        });
        if let Some((d, s)) = hit {
            out.push((ScanPoint::new(d * dir.x, d * dir.z, out.len()), s));
        }
    }
    Ok(out)
}

fn project(k: &Matrix3<f64>, x: &Vector3<f64>) -> Vector2<f64> {
    let h = k * x;
    Vector2::new(h.x / h.z, h.y / h.z)
}

fn in_image(cfg: &ScenarioConfig, px: &Vector2<f64>) -> bool {
    px.x >= 0.0 && px.y >= 0.0 && px.x <= cfg.image_size.0 as f64 && px.y <= cfg.image_size.1 as f64
}

/// Board frame of `(a, b, c)`: origin `a`, `x` toward `b`, `z` the plane
/// normal.
fn board_frame(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> RigidPose {
    let x = (b - a).normalize();
    let z = x.cross(&(c - a)).normalize();
    let y = z.cross(&x);
    RigidPose { rotation: Matrix3::from_columns(&[x, y, z]), translation: *a }
}

/// Ideal observation of the target by both sensors.
pub fn simulate_observation(gt: &GroundTruth, geom: &TargetGeometry, cfg: &ScenarioConfig) -> Result<Observation> {
    let cam = PlacedTarget::new(geom, &gt.target_pose);
    if [cam.p, cam.q, cam.r, cam.o].iter().any(|x| x.z <= 0.0) {
        return Err(CalibError::TargetBehindCamera);
    }
    let laser_pose = gt.rig_pose.inverse().compose(&gt.target_pose);
    let las = PlacedTarget::new(geom, &laser_pose);
    let p1 = laser_crossing(&las.p, &las.q, "PQ")?;
    let p2 = laser_crossing(&las.p, &las.r, "PR")?;
    let p3 = laser_crossing(&las.p, &las.o, "PO")?;

    let plane = |a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>| {
        let n = (b - a).cross(&(c - a));
        PlaneFeature::new(n, n.dot(a))
    };
    let t3 = plane(&cam.p, &cam.q, &cam.o)?;
    let t4 = plane(&cam.p, &cam.r, &cam.o)?;

    let scan = simulate_scan(gt, geom, cfg)?;
    let pick = |s: Surface| scan.iter().filter(|(_, h)| *h == s).map(|(p, _)| p.laser()).collect::<Vec<_>>();
    Ok(Observation {
        p1,
        p2,
        p3,
        normals: [cam.p.cross(&cam.q).normalize(), cam.p.cross(&cam.r).normalize(), t3.normal, t4.normal],
        d1: t3.distance,
        d2: t4.distance,
        seg13: Some(pick(Surface::BoardPqo)),
        seg23: Some(pick(Surface::BoardPro)),
    })
}

/// Checks that a scenario is usable: the scan plane cuts all three sides,
/// both sensors face the target from the outside, every corner projects
/// inside the image, the three laser features are in front of the LRF, the
/// `PQ` side is scanned before the `PR` side and the scan crosses base,
/// board, board, base with at least [`MIN_SEGMENT_POINTS`] returns each.
pub fn check_scenario(gt: &GroundTruth, geom: &TargetGeometry, cfg: &ScenarioConfig) -> Result<()> {
    let cam = PlacedTarget::new(geom, &gt.target_pose);
    for x in [cam.p, cam.q, cam.r, cam.o] {
        if x.z <= 0.0 {
            return Err(CalibError::TargetBehindCamera);
        }
        if !in_image(cfg, &project(&cfg.intrinsics, &x)) {
            return Err(CalibError::InvalidConfig("target corner outside the image".into()));
        }
    }
    let sensors = [Vector3::zeros(), gt.rig_pose.translation];
    for (n, a) in geom.board_planes() {
        let n = gt.target_pose.rotation * n;
        let a = gt.target_pose.transform(&a);
        if sensors.iter().any(|s| n.dot(&(s - a)) <= 0.0) {
            return Err(CalibError::InvalidConfig("a board is seen from behind".into()));
        }
    }
    let laser_pose = gt.rig_pose.inverse().compose(&gt.target_pose);
    let las = PlacedTarget::new(geom, &laser_pose);
    let p1 = laser_crossing(&las.p, &las.q, "PQ")?;
    let p2 = laser_crossing(&las.p, &las.r, "PR")?;
    let p3 = laser_crossing(&las.p, &las.o, "PO")?;
    if [p1, p2, p3].iter().any(|p| p.z <= 0.0) {
        return Err(CalibError::InvalidConfig("laser features behind the LRF".into()));
    }
    if !(scan_angle(&p1) < scan_angle(&p2)) {
        return Err(CalibError::InvalidConfig("PR side scanned before PQ side".into()));
    }
    let scan = simulate_scan(gt, geom, cfg)?;
    let mut runs: Vec<(Surface, usize)> = Vec::new();
    for (_, s) in &scan {
        match runs.last_mut() {
            Some((last, n)) if last == s => *n += 1,
            _ => runs.push((*s, 1)),
        }
    }
    let profile = [Surface::Base, Surface::BoardPqo, Surface::BoardPro, Surface::Base];
    if runs.len() != 4 || runs.iter().zip(profile).any(|((s, n), want)| *s != want || *n < MIN_SEGMENT_POINTS) {
        return Err(CalibError::InvalidConfig("scan does not show four usable segments".into()));
    }
    Ok(())
}

/// Draws scenarios until one passes [`check_scenario`]; returns it with its
/// ideal observation and the number of rejected draws.
pub fn sample_valid(
    cfg: &ScenarioConfig,
    geom: &TargetGeometry,
    rng: &mut impl Rng,
    max_attempts: usize,
) -> Result<(GroundTruth, Observation, usize)> {
    for rejected in 0..max_attempts {
        let gt = sample_scenario(cfg, rng);
        if let Ok(obs) = observe_if_valid(&gt, geom, cfg) {
            return Ok((gt, obs, rejected));
        }
    }
    Err(CalibError::InvalidConfig(format!("no valid scenario in {max_attempts} draws")))
}

/// Like [`sample_valid`] with the rig held fixed.
pub fn sample_valid_target(
    cfg: &ScenarioConfig,
    geom: &TargetGeometry,
    rig: &RigidPose,
    rng: &mut impl Rng,
    max_attempts: usize,
) -> Result<(GroundTruth, Observation, usize)> {
    for rejected in 0..max_attempts {
        let gt = GroundTruth { rig_pose: *rig, target_pose: sample_target(cfg, rig, rng) };
        if let Ok(obs) = observe_if_valid(&gt, geom, cfg) {
            return Ok((gt, obs, rejected));
        }
    }
    Err(CalibError::InvalidConfig(format!("no valid target pose in {max_attempts} draws")))
}

fn observe_if_valid(gt: &GroundTruth, geom: &TargetGeometry, cfg: &ScenarioConfig) -> Result<Observation> {
    check_scenario(gt, geom, cfg)?;
    simulate_observation(gt, geom, cfg)
}

/// Moves a laser return along its beam by `delta` meters.
pub fn perturb_along_beam(p: &LaserPoint, delta: f64) -> LaserPoint {
    let r = p.range();
    if r == 0.0 {
        return *p;
    }
    let s = 1.0 + delta / r;
    LaserPoint::new(p.x * s, p.z * s)
}

/// Gauss-Newton pose fit of known board points to observed pixels.
pub fn estimate_board_pose(
    k: &Matrix3<f64>,
    board_points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    initial: &BoardPose,
) -> BoardPose {
    let mut rot = initial.rotation;
    let mut t = initial.translation;
    let cost = |rot: &Matrix3<f64>, t: &Vector3<f64>| -> f64 {
        board_points.iter().zip(pixels).map(|(x, px)| (project(k, &(rot * x + t)) - px).norm_squared()).sum()
    };
    let mut current = cost(&rot, &t);
    for _ in 0..20 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (x, px) in board_points.iter().zip(pixels) {
            let xr = rot * x;
            let xc = xr + t;
            let h = k * xc;
            let dproj = Matrix2x3::new(1.0 / h.z, 0.0, -h.x / (h.z * h.z), 0.0, 1.0 / h.z, -h.y / (h.z * h.z)) * k;
            let mut j = Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * -skew(&xr)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            let r = Vector2::new(h.x / h.z, h.y / h.z) - px;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(step) = jtj.cholesky().map(|c| -c.solve(&jtr)) else { break };
        let dr = Rotation3::from_scaled_axis(Vector3::new(step[0], step[1], step[2])).into_inner();
        let (next_rot, next_t) = (dr * rot, t + Vector3::new(step[3], step[4], step[5]));
        let next = cost(&next_rot, &next_t);
        if !(next < current) {
            break;
        }
        let done = current - next <= 1e-15 * current.max(1e-30);
        rot = next_rot;
        t = next_t;
        current = next;
        if done {
            break;
        }
    }
    BoardPose { rotation: rot, translation: t }
}

/// Adds sensor noise to an ideal observation.
///
/// Every laser return (features and board samples) moves along its beam by
/// `N(0, (kσ1)²)`. Image noise `N(0, (kσ2)²)` perturbs the projected target
/// corners and checkerboard corners; `n1`, `n2` are re-derived from the
/// noisy image lines `PQ`, `PR` and `n3`, `n4`, `d1`, `d2` from board poses
/// re-fitted to the noisy corners.
pub fn apply_noise(
    obs: &Observation,
    noise: &NoiseModel,
    gt: &GroundTruth,
    geom: &TargetGeometry,
    cfg: &ScenarioConfig,
    rng: &mut impl Rng,
) -> Result<Observation> {
    let mut out = obs.clone();
    let (sl, sp) = (noise.laser(), noise.pixel());
    if sl > 0.0 {
        let n = Normal::new(0.0, sl).expect("positive sigma");
        for p in [&mut out.p1, &mut out.p2, &mut out.p3] {
            *p = perturb_along_beam(p, n.sample(rng));
        }
        for seg in [out.seg13.as_mut(), out.seg23.as_mut()].into_iter().flatten() {
            for p in seg.iter_mut() {
                *p = perturb_along_beam(p, n.sample(rng));
            }
        }
    }
    if sp > 0.0 {
        let n = Normal::new(0.0, sp).expect("positive sigma");
        let k = &cfg.intrinsics;
        let mut noisy_px = |x: &Vector3<f64>| project(k, x) + Vector2::new(n.sample(rng), n.sample(rng));
        let cam = PlacedTarget::new(geom, &gt.target_pose);
        let (pp, pq, pr) = (noisy_px(&cam.p), noisy_px(&cam.q), noisy_px(&cam.r));
        out.normals[0] = normal_from_image_line(k, &image_line_through(&pp, &pq))?;
        out.normals[1] = normal_from_image_line(k, &image_line_through(&pp, &pr))?;

        let corners = [(geom.p, geom.q, geom.o), (geom.p, geom.r, geom.o)];
        for (i, (a, b, c)) in corners.iter().enumerate() {
            let frame = board_frame(a, b, c);
            let inv = frame.inverse();
            let local: Vec<Vector3<f64>> = geom.board_points[i].iter().map(|x| inv.transform(x)).collect();
            let truth = gt.target_pose.compose(&frame);
            let pixels: Vec<Vector2<f64>> =
                local.iter().map(|x| noisy_px(&truth.transform(x))).collect();
            let init = BoardPose { rotation: truth.rotation, translation: truth.translation };
            let plane = plane_from_board_pose(&estimate_board_pose(k, &local, &pixels, &init));
            out.normals[2 + i] = plane.normal;
            if i == 0 {
                out.d1 = plane.distance;
            } else {
                out.d2 = plane.distance;
            }
        }
    }
    Ok(out)
}

/// Adds beam-direction noise to a raw scan.
pub fn apply_scan_noise(scan: &[ScanPoint], sigma: f64, rng: &mut impl Rng) -> Vec<ScanPoint> {
    if !(sigma > 0.0) {
        return scan.to_vec();
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    scan.iter()
        .map(|p| {
            let q = perturb_along_beam(&p.laser(), n.sample(rng));
            ScanPoint::new(q.x, q.z, p.index)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{build_rows, check_independence, validate_observation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn valid(seed: u64) -> (GroundTruth, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gt, obs, _) = sample_valid(&ScenarioConfig::default(), &TargetGeometry::default(), &mut rng, 1000).unwrap();
        (gt, obs)
    }

    #[test]
    fn geometry_has_the_requested_board_angle() {
        for angle in [30.0, 90.0, 135.0, 150.0, 170.0] {
            let g = TargetGeometry::new(angle).unwrap();
            let [(n3, _), (n4, _)] = g.board_planes();
            // Dihedral angle between the boards measured inside the target.
            let dihedral = 180.0 - n3.dot(&n4).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((dihedral - angle).abs() < 1e-9, "{dihedral} vs {angle}");
            assert!((g.q.z - g.p.z).abs() < 1e-12 && (g.r.z - g.p.z).abs() < 1e-12 && g.p.z < 0.0 && g.o.z > 0.0);
            assert!(((g.o - g.p).norm() - DEFAULT_FOLD_LENGTH).abs() < 1e-12);
            assert_eq!(g.board_points[0].len(), (GRID_DIVISIONS - 1) * (GRID_DIVISIONS - 2) / 2);
        }
        assert!(TargetGeometry::new(180.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = ScenarioConfig::default();
        let a = sample_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_width_ranges_are_fixed() {
        let cfg = ScenarioConfig {
            rig_rotation_range: 0.0,
            rig_translation_range: (0.1, 0.1),
            target_rotation_range: 0.0,
            target_distance_range: (1.0, 1.0),
            ..ScenarioConfig::default()
        };
        let a = sample_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_scenario(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert_eq!(a.rig_pose.rotation, Matrix3::identity());
        assert_eq!(a.target_pose.rotation, facing_rotation());
    }

    #[test]
    fn marginals_are_uniform() {
        // Kolmogorov-Smirnov against U(0.05, 0.30) for each translation axis.
        let cfg = ScenarioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let mut axes: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
        for _ in 0..n {
            let gt = sample_scenario(&cfg, &mut rng);
            for (i, axis) in axes.iter_mut().enumerate() {
                axis.push(gt.rig_pose.translation[i]);
            }
        }
        // Critical value for p = 0.01.
        let crit = 1.628 / (n as f64).sqrt();
        for mut v in axes {
            v.sort_by(f64::total_cmp);
            let d = v
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let f = (x - 0.05) / 0.25;
                    (f - i as f64 / n as f64).abs().max((f - (i + 1) as f64 / n as f64).abs())
                })
                .fold(0.0, f64::max);
            assert!(d < crit, "KS statistic {d}");
        }
    }

    #[test]
    fn ideal_observations_satisfy_the_constraints() {
        for seed in 0..50 {
            let (gt, obs) = valid(seed);
            validate_observation(&obs).unwrap();
            for row in build_rows(&obs) {
                assert!(row.residual(&gt.rig_pose.rotation, &gt.rig_pose.translation).abs() <= 1e-12);
            }
            assert_eq!(check_independence(&obs).rank_a, 6);
            let rig = gt.rig_pose;
            let (n3, d1, n4, d2) = (obs.normals[2], obs.d1, obs.normals[3], obs.d2);
            for p in obs.seg13.as_ref().unwrap() {
                assert!((n3.dot(&rig.transform(&p.embed())) - d1).abs() < 1e-12);
            }
            for p in obs.seg23.as_ref().unwrap() {
                assert!((n4.dot(&rig.transform(&p.embed())) - d2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frontal_scene_orders_the_features() {
        let cfg = ScenarioConfig::default();
        let gt = GroundTruth {
            rig_pose: RigidPose { rotation: Matrix3::identity(), translation: Vector3::new(0.0, 0.0, 0.0) },
            target_pose: RigidPose { rotation: facing_rotation(), translation: Vector3::new(0.0, 0.0, 1.0) },
        };
        let geom = TargetGeometry::default();
        check_scenario(&gt, &geom, &cfg).unwrap();
        let obs = simulate_observation(&gt, &geom, &cfg).unwrap();
        let a = |p: &LaserPoint| scan_angle(p);
        assert!(a(&obs.p1) < a(&obs.p3) && a(&obs.p3) < a(&obs.p2));
    }

    #[test]
    fn zero_noise_is_identity() {
        let (gt, obs) = valid(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = NoiseModel::new(0.01, 3.0, 0.0).unwrap();
        let out = apply_noise(&obs, &noise, &gt, &TargetGeometry::default(), &ScenarioConfig::default(), &mut rng).unwrap();
        assert_eq!(out, obs);
    }

    #[test]
    fn beam_noise_has_half_normal_magnitude() {
        let (gt, obs) = valid(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = NoiseModel::new(0.01, 0.0, 1.0).unwrap();
        let (geom, cfg) = (TargetGeometry::default(), ScenarioConfig::default());
        let mut total = 0.0;
        let mut count = 0;
        while count < 10_000 {
            let out = apply_noise(&obs, &noise, &gt, &geom, &cfg, &mut rng).unwrap();
            for (a, b) in [(obs.p1, out.p1), (obs.p2, out.p2), (obs.p3, out.p3)] {
                total += (b.range() - a.range()).abs();
                count += 1;
                // Direction is unchanged.
                assert!((a.x * b.z - a.z * b.x).abs() < 1e-12);
            }
        }
        let mean = total / count as f64;
        let want = 0.01 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - want).abs() < 0.05 * want, "{mean} vs {want}");
    }

    #[test]
    fn noisy_observations_validate() {
        let (geom, cfg) = (TargetGeometry::default(), ScenarioConfig::default());
        let noise = NoiseModel::new(0.01, 3.0, 1.0).unwrap();
        let mut ok = 0;
        for seed in 0..200 {
            let (gt, obs) = valid(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let out = apply_noise(&obs, &noise, &gt, &geom, &cfg, &mut rng).unwrap();
            if validate_observation(&out).is_ok() {
                ok += 1;
            }
        }
        assert!(ok >= 198);
    }

    #[test]
    fn board_pose_fit_recovers_exact_pose() {
        let k = ScenarioConfig::default().intrinsics;
        let pts: Vec<Vector3<f64>> = (0..15).map(|i| Vector3::new((i % 5) as f64 * 0.05, (i / 5) as f64 * 0.05, 0.0)).collect();
        let truth = BoardPose { rotation: rotation_from_rpy(0.2, -0.1, 0.3), translation: Vector3::new(0.05, -0.02, 0.9) };
        let px: Vec<Vector2<f64>> = pts.iter().map(|x| project(&k, &(truth.rotation * x + truth.translation))).collect();
        let init = BoardPose { rotation: rotation_from_rpy(0.22, -0.08, 0.28), translation: Vector3::new(0.06, -0.01, 0.95) };
        let fit = estimate_board_pose(&k, &pts, &px, &init);
        assert!((fit.rotation - truth.rotation).norm() < 1e-9);
        assert!((fit.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn scan_misses_are_reported() {
        let cfg = ScenarioConfig::default();
        let gt = GroundTruth {
            rig_pose: RigidPose { rotation: Matrix3::identity(), translation: Vector3::new(0.0, 2.0, 0.0) },
            target_pose: RigidPose { rotation: facing_rotation(), translation: Vector3::new(0.0, 0.0, 1.0) },
        };
        assert!(matches!(simulate_observation(&gt, &TargetGeometry::default(), &cfg), Err(CalibError::NoIntersection(_))));
    }
}
