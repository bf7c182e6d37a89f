//! Single- and multi-snapshot solvers, cheirality disambiguation, LM
//! refinement and snapshot selection.

use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{build_rows, reduce, stack_rows, validate_observation, ConstraintRow, Observation, ReducedSystem};
use crate::error::{CalibError, Result};
use crate::features::fit_line_tls;
use crate::geometry::{orthonormal_frame, skew, LaserPoint, RigidPose};
use crate::rotation_solver::{dogleg_refine, solve_r3_detailed};

pub const DEFAULT_EPSILON: f64 = 5e-3;
pub const LM_INITIAL_DAMPING: f64 = 1e-3;
pub const LM_MAX_ITER: usize = 100;
pub const LM_GRADIENT_TOL: f64 = 1e-12;
pub const LM_RELATIVE_TOL: f64 = 1e-14;
const LM_MAX_DAMPING: f64 = 1e16;
/// Residuals (m²) closer than this are treated as equal.
pub const TIE_TOL: f64 = 1e-12;

/// Solver options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// LRF axis that must point into the camera's forward half-space.
    pub forward_axis: [f64; 3],
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { forward_axis: [0.0, 0.0, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSolution {
    pub pose: RigidPose,
    /// Sum of squared point-to-plane residuals over all rows.
    pub total_residual: f64,
    pub candidates_considered: usize,
    /// Candidates that passed the cheirality check.
    pub survivors: usize,
    pub used_dogleg: bool,
    pub per_observation_residuals: Vec<f64>,
    /// Every distinct physical candidate with its cost, best first.
    pub candidates: Vec<(RigidPose, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Distance threshold, meters.
    pub epsilon: f64,
}

impl SelectionConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(CalibError::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON }
    }
}

fn observation_residuals(pose: &RigidPose, observations: &[Observation]) -> Vec<f64> {
    observations
        .iter()
        .map(|o| build_rows(o).iter().map(|r| r.residual(&pose.rotation, &pose.translation).powi(2)).sum())
        .collect()
}

fn rows_cost(rows: &[ConstraintRow], rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> f64 {
    rows.iter().map(|r| r.residual(rotation, translation).powi(2)).sum()
}

/// Whether `pose` puts every laser feature in front of the camera and
/// turns the LRF forward axis toward the camera's forward half-space.
pub fn passes_cheirality(pose: &RigidPose, observations: &[Observation], forward: &Vector3<f64>) -> bool {
    if !((pose.rotation * forward).z > 0.0) {
        return false;
    }
    observations.iter().all(|o| o.points().iter().all(|p| pose.transform(&p.embed()).z > 0.0))
}

/// Keeps the candidates that pass [`passes_cheirality`] and returns the one
/// with the least residual.
pub fn cheirality_check(candidates: &[(RigidPose, f64)], observations: &[Observation]) -> Result<RigidPose> {
    let forward = Vector3::from(SolverConfig::default().forward_axis);
    let survivors: Vec<(RigidPose, f64)> =
        candidates.iter().filter(|(p, _)| passes_cheirality(p, observations, &forward)).copied().collect();
    pick(&survivors).map(|(p, _)| p).ok_or(CalibError::NoPhysicalSolution)
}

/// Pose for one `r3` candidate: `r1 = H r3 + K`, orthonormalized, and the
/// least-squares translation.
fn assemble(sys: &ReducedSystem, r3: &Vector3<f64>) -> Option<(RigidPose, f64)> {
    if !(r3.norm() > 0.0) || r3.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let r3 = r3.normalize();
    let r1 = sys.r1_from_r3(&r3);
    let rotation = orthonormal_frame(&r1, &r3);
    if rotation.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let translation = sys.translation(&rotation.column(0).into_owned(), &rotation.column(2).into_owned());
    Some((RigidPose { rotation, translation }, sys.cost(&rotation, &translation)))
}

/// Least residual; residuals within [`TIE_TOL`] of the least count as equal
/// and go to the shortest baseline.
fn pick(candidates: &[(RigidPose, f64)]) -> Option<(RigidPose, f64)> {
    let least = candidates.iter().map(|c| c.1).min_by(f64::total_cmp)?;
    candidates
        .iter()
        .filter(|c| c.1 <= least + TIE_TOL)
        .min_by(|a, b| a.0.translation.norm().total_cmp(&b.0.translation.norm()))
        .copied()
}

/// Drops poses that repeat an earlier rotation.
fn distinct(candidates: Vec<(RigidPose, f64)>) -> Vec<(RigidPose, f64)> {
    let mut unique: Vec<(RigidPose, f64)> = Vec::new();
    for c in candidates {
        if unique.iter().all(|u| (u.0.rotation - c.0.rotation).norm() > 1e-6) {
            unique.push(c);
        }
    }
    unique
}

/// Seeds used when the elimination cascade itself fails.
fn axis_seeds() -> Vec<Vector3<f64>> {
    let mut s = Vec::new();
    for i in 0..3 {
        for sign in [1.0, -1.0] {
            let mut v = Vector3::zeros();
            v[i] = sign;
            s.push(v);
        }
    }
    s
}

pub fn solve_single(obs: &Observation) -> Result<CalibrationSolution> {
    solve_multi(std::slice::from_ref(obs))
}

pub fn solve_multi(observations: &[Observation]) -> Result<CalibrationSolution> {
    solve_multi_with(observations, &SolverConfig::default())
}

/// Analytic solve over all stacked constraint rows.
pub fn solve_multi_with(observations: &[Observation], cfg: &SolverConfig) -> Result<CalibrationSolution> {
    if observations.is_empty() {
        return Err(CalibError::InsufficientObservations { needed: 1, got: 0 });
    }
    for obs in observations {
        validate_observation(obs)?;
    }
    let forward = Vector3::from(cfg.forward_axis);
    let sys = reduce(&stack_rows(observations))?;
    let cascade = solve_r3_detailed(&sys);

    let (analytic, seeds): (Vec<Vector3<f64>>, Vec<Vector3<f64>>) = match &cascade {
        Ok(s) => (s.candidates.iter().map(|c| c.real_part()).collect(), s.seeds.clone()),
        Err(_) => (Vec::new(), axis_seeds()),
    };
    let passes = |c: &(RigidPose, f64)| passes_cheirality(&c.0, observations, &forward);
    let analytic_poses: Vec<(RigidPose, f64)> = analytic.iter().filter_map(|r3| assemble(&sys, r3)).collect();
    let survivors = distinct(analytic_poses.iter().copied().filter(passes).collect());

    // Roots that gave no real candidate are refined from their real
    // projection; under noise the physical root can turn complex.
    let refine = |seeds: &[Vector3<f64>]| -> Vec<(RigidPose, f64)> {
        seeds
            .iter()
            .filter_map(|seed| dogleg_refine(&sys, seed).ok().and_then(|out| assemble(&sys, &out.x)))
            .collect()
    };
    let mut refined = refine(&seeds);
    if survivors.is_empty() && refined.iter().all(|c| !passes(c)) {
        let mut extra = analytic.clone();
        if seeds.is_empty() && extra.is_empty() {
            extra = axis_seeds();
        }
        refined.extend(refine(&extra));
    }
    let refined_survivors = distinct(refined.iter().copied().filter(passes).collect());

    let best_analytic = pick(&survivors);
    let best_refined = pick(&refined_survivors);
    let ((pose, total_residual), used_dogleg) = match (best_analytic, best_refined) {
        (Some(a), Some(r)) if r.1 + TIE_TOL < a.1 => (r, true),
        (Some(a), _) => (a, false),
        (None, Some(r)) => (r, true),
        (None, None) => return Err(CalibError::NoPhysicalSolution),
    };
    let considered = analytic_poses.len() + refined.len();
    let mut candidates = distinct(survivors.iter().chain(&refined_survivors).copied().collect());
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(CalibrationSolution {
        pose,
        total_residual,
        candidates_considered: considered,
        survivors: survivors.len(),
        used_dogleg,
        per_observation_residuals: observation_residuals(&pose, observations),
        candidates,
    })
}

/// Levenberg-Marquardt over a rotation increment and the translation. The
/// rotation is updated as `R ← R exp([δ]×)`, so the parameterization is
/// always centered at the current estimate.
pub fn lm_refine(seed: &RigidPose, observations: &[Observation]) -> CalibrationSolution {
    let rows = stack_rows(observations);
    let mut rotation = seed.rotation;
    let mut translation = seed.translation;
    let mut cost = rows_cost(&rows, &rotation, &translation);
    let mut lambda = LM_INITIAL_DAMPING;

    'outer: for _ in 0..LM_MAX_ITER {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for row in &rows {
            let r = row.residual(&rotation, &translation);
            let jr = -(row.normal.transpose() * rotation * skew(&row.point.embed()));
            let j = Vector6::new(jr[0], jr[1], jr[2], row.normal.x, row.normal.y, row.normal.z);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        if jtr.amax() < LM_GRADIENT_TOL {
            break;
        }
        let floor = 1e-12 * jtj.diagonal().max().max(1e-300);
        loop {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)].max(floor);
            }
            let Some(step) = a.cholesky().map(|c| -c.solve(&jtr)) else {
                lambda *= 10.0;
                if lambda > LM_MAX_DAMPING {
                    break 'outer;
                }
                continue;
            };
            let delta = nalgebra::Rotation3::from_scaled_axis(Vector3::new(step[0], step[1], step[2])).into_inner();
            let next_rotation = rotation * delta;
            let next_translation = translation + Vector3::new(step[3], step[4], step[5]);
            let next = rows_cost(&rows, &next_rotation, &next_translation);
            if next < cost {
                let change = (cost - next) / cost.max(f64::MIN_POSITIVE);
                rotation = next_rotation;
                translation = next_translation;
                cost = next;
                lambda *= 0.1;
                if change < LM_RELATIVE_TOL {
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > LM_MAX_DAMPING {
                break 'outer;
            }
        }
    }
    let pose = RigidPose { rotation, translation };
    CalibrationSolution {
        pose,
        total_residual: cost,
        candidates_considered: 1,
        survivors: 1,
        used_dogleg: false,
        per_observation_residuals: observation_residuals(&pose, observations),
        candidates: vec![(pose, cost)],
    }
}

/// Analytic solve followed by Levenberg-Marquardt from every physical
/// candidate. The refined pose with the least cost that still passes the
/// cheirality check is returned, or the analytic pick if none does.
pub fn solve_refined(observations: &[Observation]) -> Result<CalibrationSolution> {
    solve_refined_with(observations, &SolverConfig::default())
}

pub fn solve_refined_with(observations: &[Observation], cfg: &SolverConfig) -> Result<CalibrationSolution> {
    let analytic = solve_multi_with(observations, cfg)?;
    let forward = Vector3::from(cfg.forward_axis);
    let mut refined: Vec<(RigidPose, f64)> = analytic
        .candidates
        .iter()
        .map(|(seed, _)| lm_refine(seed, observations))
        .filter(|s| passes_cheirality(&s.pose, observations, &forward))
        .map(|s| (s.pose, s.total_residual))
        .collect();
    refined.sort_by(|a, b| a.1.total_cmp(&b.1));
    refined = distinct(refined);
    let Some((pose, total_residual)) = pick(&refined) else {
        return Ok(analytic);
    };
    Ok(CalibrationSolution {
        pose,
        total_residual,
        per_observation_residuals: observation_residuals(&pose, observations),
        candidates: refined,
        ..analytic
    })
}

/// Board samples replaced by their projections on the TLS line through them.
fn denoised(points: &[LaserPoint]) -> Vec<Vector3<f64>> {
    let xz: Vec<Vector2<f64>> = points.iter().map(|p| Vector2::new(p.x, p.z)).collect();
    match fit_line_tls(&xz) {
        Ok(line) => xz.iter().map(|p| line.project(p)).map(|q| Vector3::new(q.x, 0.0, q.y)).collect(),
        Err(_) => points.iter().map(LaserPoint::embed).collect(),
    }
}

fn mean_plane_residual(points: &[Vector3<f64>], pose: &RigidPose, n: &Vector3<f64>, d: f64) -> f64 {
    points.iter().map(|p| (n.dot(&pose.transform(p)) - d).powi(2)).sum::<f64>() / (2.0 * points.len() as f64)
}

fn score(obs: &Observation, pose: &RigidPose, index: usize) -> Result<f64> {
    let (Some(s13), Some(s23)) = (obs.seg13.as_ref(), obs.seg23.as_ref()) else {
        return Err(CalibError::MissingSegments(index));
    };
    if s13.is_empty() || s23.is_empty() {
        return Err(CalibError::MissingSegments(index));
    }
    Ok(mean_plane_residual(&denoised(s13), pose, &obs.normals[2], obs.d1)
        + mean_plane_residual(&denoised(s23), pose, &obs.normals[3], obs.d2))
}

/// Mean squared distance of the board samples to their planes under `pose`,
/// halved per board. Samples are first projected onto their fitted scan
/// line.
pub fn selection_score(obs: &Observation, pose: &RigidPose) -> Result<f64> {
    score(obs, pose, 0)
}

/// Observations whose [`selection_score`] under `pose` is at most `ε²`.
pub fn select_snapshots(observations: &[Observation], pose: &RigidPose, cfg: &SelectionConfig) -> Result<Vec<Observation>> {
    let eps2 = cfg.epsilon * cfg.epsilon;
    let mut kept = Vec::new();
    for (i, obs) in observations.iter().enumerate() {
        if score(obs, pose, i)? <= eps2 {
            kept.push(obs.clone());
        }
    }
    Ok(kept)
}

/// Score of a snapshot under its own single-snapshot solution.
pub fn single_view_score(obs: &Observation) -> Result<f64> {
    let sol = solve_single(obs)?;
    selection_score(obs, &sol.pose)
}

/// Consensus score of one observation: the larger of the board-sample
/// score and the mean squared feature residual.
fn consensus_score(obs: &Observation, pose: &RigidPose) -> f64 {
    let rows = build_rows(obs);
    let feature = rows_cost(&rows, &pose.rotation, &pose.translation) / rows.len() as f64;
    match selection_score(obs, pose) {
        Ok(s) => s.max(feature),
        Err(_) => feature,
    }
}

/// Largest set of observations consistent with a pose solved from a random
/// minimal subset. Ties go to the lowest total score.
pub fn ransac_best_subset(
    observations: &[Observation],
    subset_size: usize,
    trials: usize,
    rng_seed: u64,
    cfg: &SelectionConfig,
) -> Result<Vec<Observation>> {
    if subset_size == 0 || subset_size > observations.len() {
        return Err(CalibError::InsufficientObservations { needed: subset_size.max(1), got: observations.len() });
    }
    if trials == 0 {
        return Err(CalibError::InvalidConfig("at least one trial is required".into()));
    }
    let eps2 = cfg.epsilon * cfg.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..trials {
        let mut idx = sample(&mut rng, observations.len(), subset_size).into_vec();
        idx.sort_unstable();
        let subset: Vec<Observation> = idx.iter().map(|&i| observations[i].clone()).collect();
        let Ok(sol) = solve_multi(&subset) else { continue };
        let mut inliers = Vec::new();
        let mut total = 0.0;
        for (i, obs) in observations.iter().enumerate() {
            let s = consensus_score(obs, &sol.pose);
            if s <= eps2 {
                inliers.push(i);
                total += s;
            }
        }
        let better = match &best {
            None => true,
            Some((b, t)) => inliers.len() > b.len() || (inliers.len() == b.len() && total < *t),
        };
        if better && !inliers.is_empty() {
            best = Some((inliers, total));
        }
    }
    let (inliers, _) = best.ok_or(CalibError::NoConsensus)?;
    Ok(inliers.into_iter().map(|i| observations[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_errors, rotation_from_rpy};
    use crate::synth::{apply_noise, sample_valid, sample_valid_target, GroundTruth, NoiseModel, ScenarioConfig, TargetGeometry};
    use crate::test_fixtures::exact_observation;

    fn scene(seed: u64) -> (GroundTruth, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gt, obs, _) = sample_valid(&ScenarioConfig::default(), &TargetGeometry::default(), &mut rng, 1000).unwrap();
        (gt, obs)
    }

    fn noisy(gt: &GroundTruth, obs: &Observation, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = NoiseModel::new(0.01, 3.0, 1.0).unwrap();
        apply_noise(obs, &noise, gt, &TargetGeometry::default(), &ScenarioConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn noise_free_single_snapshot_is_exact() {
        for seed in 0..30 {
            let (gt, obs) = scene(seed);
            let sol = solve_single(&obs).unwrap();
            assert!(pose_errors(&sol.pose, &gt.rig_pose).frobenius <= 1e-6, "seed {seed}");
            for row in build_rows(&obs) {
                assert!(row.residual(&sol.pose.rotation, &sol.pose.translation).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn hand_built_observation_is_solved() {
        let truth = RigidPose { rotation: rotation_from_rpy(0.1, -0.2, 0.15), translation: Vector3::new(0.1, 0.05, 0.02) };
        let sol = solve_single(&exact_observation(&truth)).unwrap();
        assert!(pose_errors(&sol.pose, &truth).frobenius <= 1e-6);
    }

    #[test]
    fn noisy_snapshot_still_solves() {
        let (gt, obs) = scene(5);
        let sol = solve_single(&noisy(&gt, &obs, 1)).unwrap();
        assert!(sol.total_residual > 0.0);
        assert!(crate::geometry::orthonormality_deviation(&sol.pose.rotation) < 1e-9);
    }

    #[test]
    fn single_equals_multi_of_one() {
        let (gt, obs) = scene(8);
        let obs = noisy(&gt, &obs, 2);
        let a = solve_single(&obs).unwrap();
        let b = solve_multi(std::slice::from_ref(&obs)).unwrap();
        assert!((a.pose.rotation - b.pose.rotation).norm() <= 1e-12);
        assert!((a.pose.translation - b.pose.translation).norm() <= 1e-12);
    }

    #[test]
    fn multi_snapshot_noise_free_is_exact() {
        let (gt, first) = scene(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geom = TargetGeometry::default();
        let mut obs = vec![first];
        while obs.len() < 5 {
            obs.push(sample_valid_target(&ScenarioConfig::default(), &geom, &gt.rig_pose, &mut rng, 1000).unwrap().1);
        }
        let sol = solve_multi(&obs).unwrap();
        assert!(pose_errors(&sol.pose, &gt.rig_pose).frobenius <= 1e-6);
        assert_eq!(sol.per_observation_residuals.len(), 5);
    }

    #[test]
    fn cheirality_rejects_points_behind_the_camera() {
        let (_, obs) = scene(3);
        let flipped = RigidPose { rotation: Matrix3::identity(), translation: Vector3::new(0.0, 0.0, -100.0) };
        assert!(matches!(cheirality_check(&[(flipped, 0.0)], std::slice::from_ref(&obs)), Err(CalibError::NoPhysicalSolution)));
        let front = RigidPose { rotation: Matrix3::identity(), translation: Vector3::new(0.0, 0.0, 1.0) };
        let simple = Observation {
            p1: LaserPoint::new(-0.1, 1.0),
            p2: LaserPoint::new(0.1, 1.0),
            p3: LaserPoint::new(0.0, 0.9),
            ..obs
        };
        assert_eq!(cheirality_check(&[(front, 0.0)], &[simple]).unwrap(), front);
    }

    #[test]
    fn cheirality_prefers_least_residual() {
        let (_, obs) = scene(3);
        let a = RigidPose { rotation: Matrix3::identity(), translation: Vector3::new(0.0, 0.0, 5.0) };
        let b = RigidPose { rotation: Matrix3::identity(), translation: Vector3::new(0.0, 0.0, 6.0) };
        assert_eq!(cheirality_check(&[(a, 2.0), (b, 1.0)], &[obs]).unwrap(), b);
    }

    #[test]
    fn scene_behind_the_camera_has_no_physical_solution() {
        // Turn the camera half a revolution about its y axis.
        let flip = rotation_from_rpy(0.0, std::f64::consts::PI, 0.0);
        let mut behind = 0;
        for seed in 0..20 {
            let (_, obs) = scene(seed);
            let mut turned = obs.clone();
            turned.normals = obs.normals.map(|n| flip * n);
            if matches!(solve_single(&turned), Err(CalibError::NoPhysicalSolution)) {
                behind += 1;
            }
        }
        assert_eq!(behind, 20);
    }

    #[test]
    fn lm_keeps_exact_seed() {
        let (gt, obs) = scene(20);
        let sol = lm_refine(&gt.rig_pose, &[obs]);
        assert!(pose_errors(&sol.pose, &gt.rig_pose).frobenius <= 1e-12);
    }

    #[test]
    fn lm_recovers_from_perturbed_seed() {
        let (gt, first) = scene(21);
        let geom = TargetGeometry::default();
        let cfg = ScenarioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut obs = vec![first];
        while obs.len() < 3 {
            obs.push(sample_valid_target(&cfg, &geom, &gt.rig_pose, &mut rng, 1000).unwrap().1);
        }
        let seed = RigidPose {
            rotation: gt.rig_pose.rotation * rotation_from_rpy(2f64.to_radians(), 0.0, 0.0),
            translation: gt.rig_pose.translation + Vector3::new(0.02, 0.0, 0.0),
        };
        let sol = lm_refine(&seed, &obs);
        assert!(pose_errors(&sol.pose, &gt.rig_pose).frobenius <= 1e-6);
    }

    #[test]
    fn lm_never_increases_cost() {
        for seed in 0..10 {
            let (gt, obs) = scene(30 + seed);
            let obs = noisy(&gt, &obs, seed);
            let start = solve_single(&obs).unwrap();
            let refined = lm_refine(&start.pose, std::slice::from_ref(&obs));
            assert!(refined.total_residual <= start.total_residual + 1e-18);
        }
    }

    #[test]
    fn refined_solve_is_no_worse_than_refining_the_analytic_pick() {
        let geom = TargetGeometry::default();
        let cfg = ScenarioConfig::default();
        for seed in 0..10 {
            let (gt, _) = scene(70 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obs: Vec<Observation> = (0..5)
                .map(|i| {
                    let (g, o, _) = sample_valid_target(&cfg, &geom, &gt.rig_pose, &mut rng, 1000).unwrap();
                    noisy(&g, &o, seed * 10 + i)
                })
                .collect();
            let analytic = solve_multi(&obs).unwrap();
            let one = lm_refine(&analytic.pose, &obs);
            let all = solve_refined(&obs).unwrap();
            assert!(all.total_residual <= one.total_residual + 1e-15);
            assert!(!all.candidates.is_empty() && all.candidates[0].1 == all.total_residual);
            assert!(pose_errors(&all.pose, &gt.rig_pose).angular_deg < 5.0);
        }
        let (gt, obs) = shared_rig(80, 3);
        let sol = solve_refined(&obs).unwrap();
        assert!(pose_errors(&sol.pose, &gt.rig_pose).frobenius <= 1e-6);
    }

    #[test]
    fn selection_keeps_clean_and_rejects_offset() {
        let (gt, obs) = scene(40);
        assert!(selection_score(&obs, &gt.rig_pose).unwrap() < 1e-20);
        let mut off = obs.clone();
        // Push the PQO samples 20 mm away from the sensor along their beams.
        off.seg13 = obs.seg13.as_ref().map(|s| s.iter().map(|p| crate::synth::perturb_along_beam(p, 0.02)).collect());
        let kept = select_snapshots(&[obs.clone(), off], &gt.rig_pose, &SelectionConfig::default()).unwrap();
        assert_eq!(kept, vec![obs]);
    }

    #[test]
    fn selection_requires_segments() {
        let (gt, mut obs) = scene(41);
        obs.seg23 = None;
        let r = select_snapshots(&[obs.clone(), obs], &gt.rig_pose, &SelectionConfig::default());
        assert!(matches!(r, Err(CalibError::MissingSegments(0))));
        assert!(SelectionConfig::new(0.0).is_err());
    }

    fn shared_rig(seed: u64, n: usize) -> (GroundTruth, Vec<Observation>) {
        let (gt, first) = scene(seed);
        let geom = TargetGeometry::default();
        let cfg = ScenarioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut obs = vec![first];
        while obs.len() < n {
            obs.push(sample_valid_target(&cfg, &geom, &gt.rig_pose, &mut rng, 1000).unwrap().1);
        }
        (gt, obs)
    }

    #[test]
    fn ransac_keeps_everything_when_clean() {
        let (_, obs) = shared_rig(50, 8);
        let kept = ransac_best_subset(&obs, 3, 10, 1, &SelectionConfig::default()).unwrap();
        assert_eq!(kept.len(), 8);
    }

    #[test]
    fn ransac_drops_planted_outliers() {
        let (_, mut obs) = shared_rig(60, 12);
        for o in obs.iter_mut().take(2) {
            o.p3 = crate::synth::perturb_along_beam(&o.p3, 0.05);
        }
        let kept = ransac_best_subset(&obs, 3, 30, 7, &SelectionConfig::default()).unwrap();
        assert_eq!(kept, obs[2..].to_vec());
        let again = ransac_best_subset(&obs, 3, 30, 7, &SelectionConfig::default()).unwrap();
        assert_eq!(kept, again);
    }

    #[test]
    fn ransac_validates_arguments() {
        let (_, obs) = shared_rig(70, 2);
        assert!(matches!(
            ransac_best_subset(&obs, 3, 5, 0, &SelectionConfig::default()),
            Err(CalibError::InsufficientObservations { .. })
        ));
    }
}
