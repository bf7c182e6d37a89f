//! Solver inputs from raw sensor data.
//!
//! Laser side: a scan of the target resting on a planar surface is split
//! into four straight runs (surface, board T3, board T4, surface), each run
//! is fitted with a total-least-squares line and neighbouring lines are
//! intersected. Camera side: board planes come from checkerboard poses and
//! the side planes through the camera center come from image lines.

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::geometry::{LaserPoint, PlaneFeature};

/// Default RDP tolerance, meters.
pub const DEFAULT_RDP_TOLERANCE: f64 = 8e-3;
/// Smallest `|sin|` between two lines that are intersected.
pub const PARALLEL_TOL: f64 = 1e-6;
/// Minimum number of scan points handed to the segmenter.
pub const MIN_SCAN_POINTS: usize = 8;
/// Minimum number of points kept in each refined segment.
pub const MIN_SEGMENT_POINTS: usize = 3;

/// One raw laser return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub x: f64,
    pub z: f64,
    /// Angular order within the scan.
    pub index: usize,
}

impl ScanPoint {
    pub fn new(x: f64, z: f64, index: usize) -> Self {
        Self { x, z, index }
    }

    pub fn xz(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.z)
    }

    pub fn laser(&self) -> LaserPoint {
        LaserPoint::new(self.x, self.z)
    }
}

/// Infinite 2D line `point + s · direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2D {
    pub direction: Vector2<f64>,
    pub point: Vector2<f64>,
}

impl Line2D {
    pub fn normal(&self) -> Vector2<f64> {
        Vector2::new(-self.direction.y, self.direction.x)
    }

    pub fn distance(&self, p: &Vector2<f64>) -> f64 {
        (p - self.point).dot(&self.normal())
    }

    /// Orthogonal projection of `p` onto the line.
    pub fn project(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.point + self.direction * (p - self.point).dot(&self.direction)
    }
}

/// A weighted edge pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub position: Vector2<f64>,
    pub gradient_magnitude: f64,
}

/// Three image lines through a shared vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinePencil {
    pub vertex: Vector2<f64>,
    pub directions: [Vector2<f64>; 3],
}

/// Checkerboard pose: board frame `Z_W = 0` expressed in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Laser features of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserFeatures {
    pub p1: LaserPoint,
    pub p2: LaserPoint,
    pub p3: LaserPoint,
    pub seg13: Vec<LaserPoint>,
    pub seg23: Vec<LaserPoint>,
    /// Fitted lines `l1, l13, l23, l2`.
    pub lines: [Line2D; 4],
}

fn chord_deviation(points: &[ScanPoint]) -> (usize, f64) {
    let (a, b) = (points[0].xz(), points[points.len() - 1].xz());
    let chord = b - a;
    let len = chord.norm();
    let mut best = (0, 0.0);
    for (i, p) in points.iter().enumerate().skip(1).take(points.len().saturating_sub(2)) {
        let d = if len > 0.0 {
            (chord.x * (p.z - a.y) - chord.y * (p.x - a.x)).abs() / len
        } else {
            (p.xz() - a).norm()
        };
        if d > best.1 {
            best = (i, d);
        }
    }
    best
}

fn check_scan(points: &[ScanPoint]) -> Result<()> {
    if points.len() < MIN_SCAN_POINTS {
        return Err(CalibError::TooFewPoints { needed: MIN_SCAN_POINTS, got: points.len() });
    }
    if points.windows(2).any(|w| w[1].index <= w[0].index) {
        return Err(CalibError::InvalidConfig("scan indices must be strictly increasing".into()));
    }
    Ok(())
}

/// Breakpoint indices of a top-down RDP split. Splitting stops when every
/// piece deviates from its chord by at most `tolerance`, or once `max_pieces`
/// pieces exist (largest deviation split first).
fn rdp_breakpoints(points: &[ScanPoint], tolerance: f64, max_pieces: usize) -> Vec<usize> {
    let mut cuts = vec![0, points.len() - 1];
    while cuts.len() - 1 < max_pieces {
        let worst = cuts
            .windows(2)
            .map(|w| {
                let (i, d) = chord_deviation(&points[w[0]..=w[1]]);
                (w[0] + i, d)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((i, d)) if d > tolerance => {
                let pos = cuts.partition_point(|c| *c < i);
                cuts.insert(pos, i);
            }
            _ => break,
        }
    }
    cuts
}

/// Ramer-Douglas-Peucker split of a polyline into straight runs.
///
/// Every returned segment lies within `tolerance` of the chord joining its
/// end points. Adjacent segments share their breakpoint.
pub fn segment_scan(points: &[ScanPoint], tolerance: f64) -> Result<Vec<Vec<ScanPoint>>> {
    check_scan(points)?;
    if !(tolerance > 0.0) {
        return Err(CalibError::InvalidConfig("RDP tolerance must be positive".into()));
    }
    let cuts = rdp_breakpoints(points, tolerance, usize::MAX);
    Ok(cuts.windows(2).map(|w| points[w[0]..=w[1]].to_vec()).collect())
}

fn scatter(points: &[Vector2<f64>], center: &Vector2<f64>, weights: Option<&[f64]>) -> Matrix2<f64> {
    points.iter().enumerate().fold(Matrix2::zeros(), |acc, (i, p)| {
        let d = p - center;
        acc + d * d.transpose() * weights.map_or(1.0, |w| w[i])
    })
}

/// Unit eigenvectors of a symmetric 2×2 matrix for its (smallest, largest)
/// eigenvalues, and the smallest eigenvalue.
fn principal_axes(s: &Matrix2<f64>) -> (Vector2<f64>, Vector2<f64>, f64) {
    let eig = SymmetricEigen::new(*s);
    let (lo, hi) = if eig.eigenvalues[0] <= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    (eig.eigenvectors.column(lo).into_owned(), eig.eigenvectors.column(hi).into_owned(), eig.eigenvalues[lo])
}

/// Total-least-squares line through a point set.
pub fn fit_line_tls(points: &[Vector2<f64>]) -> Result<Line2D> {
    if points.len() < 2 {
        return Err(CalibError::TooFewPoints { needed: 2, got: points.len() });
    }
    let centroid = points.iter().sum::<Vector2<f64>>() / points.len() as f64;
    let s = scatter(points, &centroid, None);
    if !(s.trace() > 0.0) {
        return Err(CalibError::DegeneratePoints);
    }
    let (_, dir, _) = principal_axes(&s);
    Ok(Line2D { direction: dir, point: centroid })
}

/// Sum of squared perpendicular distances to `line`.
pub fn tls_residual(points: &[Vector2<f64>], line: &Line2D) -> f64 {
    points.iter().map(|p| line.distance(p).powi(2)).sum()
}

pub fn intersect_lines(a: &Line2D, b: &Line2D) -> Result<Vector2<f64>> {
    let sin = a.direction.perp(&b.direction);
    if !(sin.abs() > PARALLEL_TOL) {
        return Err(CalibError::NearParallel(sin.abs()));
    }
    let s = (b.point - a.point).perp(&b.direction) / sin;
    Ok(a.point + a.direction * s)
}

fn xz(points: &[ScanPoint]) -> Vec<Vector2<f64>> {
    points.iter().map(ScanPoint::xz).collect()
}

/// Minimal total TLS residual of `points` split into two runs at the best
/// index in `lo..=hi` (first run is `..split`).
fn best_split(points: &[Vector2<f64>], lo: usize, hi: usize) -> usize {
    let cost = |k: usize| {
        let (a, b) = points.split_at(k);
        let fit = |p: &[Vector2<f64>]| fit_line_tls(p).map(|l| tls_residual(p, &l)).unwrap_or(0.0);
        fit(a) + fit(b)
    };
    (lo..=hi).min_by(|a, b| cost(*a).total_cmp(&cost(*b))).unwrap_or(lo)
}

/// Disjoint index ranges of the four runs, boundaries refined by
/// minimizing the TLS residual of each adjacent pair.
fn four_runs(points: &[ScanPoint], tolerance: f64) -> Result<[std::ops::Range<usize>; 4]> {
    let cuts = rdp_breakpoints(points, tolerance, 4);
    if cuts.len() != 5 {
        return Err(CalibError::WrongSegmentCount(cuts.len() - 1));
    }
    let all = xz(points);
    // Runs are [c0, c1), [c1, c2), [c2, c3), [c3, end]; the breakpoint
    // sample itself may belong to either neighbour, so each boundary is
    // searched within its two neighbouring runs.
    let mut b = [cuts[1], cuts[2], cuts[3]];
    for _ in 0..3 {
        let mut changed = false;
        for k in 0..3 {
            let start = if k == 0 { 0 } else { b[k - 1] };
            let end = if k == 2 { points.len() } else { b[k + 1] };
            let lo = start + MIN_SEGMENT_POINTS;
            let hi = end.saturating_sub(MIN_SEGMENT_POINTS);
            if lo > hi {
                return Err(CalibError::WrongSegmentCount(4));
            }
            let split = start + best_split(&all[start..end], lo - start, hi - start);
            changed |= split != b[k];
            b[k] = split;
        }
        if !changed {
            break;
        }
    }
    Ok([0..b[0], b[0]..b[1], b[1]..b[2], b[2]..points.len()])
}

/// Laser features from a scan of the target lying on a planar surface.
///
/// The scan must be ordered by angle and show the surface, board T3, board
/// T4 and the surface again. `tolerance` seeds the RDP split; when more than
/// four runs exceed it, only the four most significant are kept.
pub fn extract_laser_features(points: &[ScanPoint], tolerance: f64) -> Result<LaserFeatures> {
    check_scan(points)?;
    if !(tolerance > 0.0) {
        return Err(CalibError::InvalidConfig("RDP tolerance must be positive".into()));
    }
    let runs = four_runs(points, tolerance)?;
    let all = xz(points);
    let lines: Vec<Line2D> = runs.iter().map(|r| fit_line_tls(&all[r.clone()])).collect::<Result<_>>()?;
    let lines: [Line2D; 4] = [lines[0], lines[1], lines[2], lines[3]];

    // Convex profile: the outer corners turn one way, the ridge the other.
    let turn = |a: &Line2D, b: &Line2D, ra: &std::ops::Range<usize>, rb: &std::ops::Range<usize>| {
        let da = all[ra.end - 1] - all[ra.start];
        let db = all[rb.end - 1] - all[rb.start];
        let (da, db) = (a.direction * a.direction.dot(&da).signum(), b.direction * b.direction.dot(&db).signum());
        da.perp(&db)
    };
    let t1 = turn(&lines[0], &lines[1], &runs[0], &runs[1]);
    let t2 = turn(&lines[1], &lines[2], &runs[1], &runs[2]);
    let t3 = turn(&lines[2], &lines[3], &runs[2], &runs[3]);
    if !(t1 * t2 < 0.0 && t2 * t3 < 0.0) {
        return Err(CalibError::NonConvexScan);
    }
    // The ridge must bulge toward the sensor.
    let p1 = intersect_lines(&lines[0], &lines[1])?;
    let p3 = intersect_lines(&lines[1], &lines[2])?;
    let p2 = intersect_lines(&lines[3], &lines[2])?;
    let chord = p2 - p1;
    if !(chord.perp(&(p3 - p1)) * chord.perp(&(-p1)) > 0.0) {
        return Err(CalibError::NonConvexScan);
    }

    let to_laser = |v: Vector2<f64>| LaserPoint::new(v.x, v.y);
    Ok(LaserFeatures {
        p1: to_laser(p1),
        p2: to_laser(p2),
        p3: to_laser(p3),
        seg13: points[runs[1].clone()].iter().map(ScanPoint::laser).collect(),
        seg23: points[runs[2].clone()].iter().map(ScanPoint::laser).collect(),
        lines,
    })
}

/// Plane `Z_W = 0` of a checkerboard in the camera frame.
pub fn plane_from_board_pose(board: &BoardPose) -> PlaneFeature {
    let n = -board.rotation.column(2).into_owned();
    let d = n.dot(&board.translation);
    PlaneFeature::new(n, d).expect("rotation columns are unit vectors")
}

/// Unit normal of the plane through the camera center that projects onto
/// the homogeneous image line `line`.
pub fn normal_from_image_line(k: &Matrix3<f64>, line: &Vector3<f64>) -> Result<Vector3<f64>> {
    let det = k.determinant();
    if !(det.abs() > 1e-12 * k.norm().powi(3)) {
        return Err(CalibError::SingularIntrinsics);
    }
    let n = k.transpose() * line;
    let norm = n.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(CalibError::DegeneratePoints);
    }
    Ok(n / norm)
}

/// Homogeneous line through two pixels.
pub fn image_line_through(a: &Vector2<f64>, b: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(a.x, a.y, 1.0).cross(&Vector3::new(b.x, b.y, 1.0))
}

pub const PENCIL_MAX_ITER: usize = 100;
pub const PENCIL_VERTEX_TOL: f64 = 1e-6;

fn pencil_cost(regions: &[Vec<PixelSample>; 3], vertex: &Vector2<f64>, dirs: &[Vector2<f64>; 3]) -> f64 {
    regions
        .iter()
        .zip(dirs)
        .map(|(reg, d)| {
            let eta = Vector2::new(-d.y, d.x);
            reg.iter().map(|s| s.gradient_magnitude * (s.position - vertex).dot(&eta).powi(2)).sum::<f64>()
        })
        .sum()
}

/// Weighted fit of three image lines through a common vertex.
pub fn fit_line_pencil(regions: &[Vec<PixelSample>; 3], initial: &LinePencil) -> Result<LinePencil> {
    for reg in regions {
        let valid = reg.iter().filter(|s| s.gradient_magnitude > 0.0).count();
        if valid < 2 {
            return Err(CalibError::TooFewPoints { needed: 2, got: valid });
        }
        if reg.iter().any(|s| !(s.gradient_magnitude >= 0.0)) {
            return Err(CalibError::InvalidConfig("gradient magnitudes must be non-negative".into()));
        }
    }
    let mut vertex = initial.vertex;
    let mut dirs = initial.directions.map(|d| d.normalize());
    let initial_cost = pencil_cost(regions, &vertex, &dirs);
    let best_init = (vertex, dirs);

    for _ in 0..PENCIL_MAX_ITER {
        for (i, reg) in regions.iter().enumerate() {
            let pts: Vec<Vector2<f64>> = reg.iter().map(|s| s.position).collect();
            let w: Vec<f64> = reg.iter().map(|s| s.gradient_magnitude).collect();
            let (_, dir, _) = principal_axes(&scatter(&pts, &vertex, Some(&w)));
            dirs[i] = if dir.dot(&dirs[i]) < 0.0 { -dir } else { dir };
        }
        let mut a = Matrix2::zeros();
        let mut b = Vector2::zeros();
        for (reg, d) in regions.iter().zip(&dirs) {
            let eta = Vector2::new(-d.y, d.x);
            let nn = eta * eta.transpose();
            for s in reg {
                a += nn * s.gradient_magnitude;
                b += nn * s.position * s.gradient_magnitude;
            }
        }
        let eig = SymmetricEigen::new(a).eigenvalues;
        if !(eig.min() > 1e-12 * eig.max()) {
            return Err(CalibError::IllConditioned);
        }
        let next = a.try_inverse().ok_or(CalibError::IllConditioned)? * b;
        let moved = (next - vertex).norm();
        vertex = next;
        if moved < PENCIL_VERTEX_TOL {
            break;
        }
    }
    let (vertex, dirs) = polish_pencil(regions, vertex, dirs);
    if pencil_cost(regions, &vertex, &dirs) > initial_cost {
        return Ok(LinePencil { vertex: best_init.0, directions: best_init.1 });
    }
    Ok(LinePencil { vertex, directions: dirs })
}

/// Joint Gauss-Newton steps on vertex and line angles; each step is kept
/// only if it lowers the cost.
fn polish_pencil(
    regions: &[Vec<PixelSample>; 3],
    mut vertex: Vector2<f64>,
    mut dirs: [Vector2<f64>; 3],
) -> (Vector2<f64>, [Vector2<f64>; 3]) {
    let mut cost = pencil_cost(regions, &vertex, &dirs);
    for _ in 0..20 {
        let mut jtj = nalgebra::Matrix5::<f64>::zeros();
        let mut jtr = nalgebra::Vector5::<f64>::zeros();
        for (i, (reg, d)) in regions.iter().zip(&dirs).enumerate() {
            let eta = Vector2::new(-d.y, d.x);
            for s in reg {
                let w = s.gradient_magnitude;
                let rel = s.position - vertex;
                let mut j = nalgebra::Vector5::zeros();
                j[0] = -eta.x;
                j[1] = -eta.y;
                j[2 + i] = -rel.dot(d);
                jtj += j * j.transpose() * w;
                jtr += j * (rel.dot(&eta) * w);
            }
        }
        let Some(step) = jtj.cholesky().map(|c| -c.solve(&jtr)) else { break };
        let next_vertex = vertex + Vector2::new(step[0], step[1]);
        let next_dirs: [Vector2<f64>; 3] = std::array::from_fn(|i| {
            let (s, c) = step[2 + i].sin_cos();
            Vector2::new(c * dirs[i].x - s * dirs[i].y, s * dirs[i].x + c * dirs[i].y)
        });
        let next_cost = pencil_cost(regions, &next_vertex, &next_dirs);
        if !(next_cost < cost) {
            break;
        }
        vertex = next_vertex;
        dirs = next_dirs;
        cost = next_cost;
    }
    (vertex, dirs)
}
