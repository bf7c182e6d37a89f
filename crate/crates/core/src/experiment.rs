//! Monte-Carlo trials over synthetic rigs.
//!
//! Trial `i` of every setting draws from its own generator seeded with
//! `seed + i`, so settings share scenarios and parallel runs are
//! reproducible.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrator::{single_view_score, solve_multi, solve_refined, SelectionConfig};
use crate::constraints::{validate_observation, Observation};
use crate::error::{CalibError, Result};
use crate::geometry::{pose_errors, RigidPose};
use crate::synth::{apply_noise, sample_rig, sample_valid_target, NoiseModel, ScenarioConfig, TargetGeometry};

/// Reference noise levels: laser depth (m) and pixel.
pub const SIGMA_LASER: f64 = 0.01;
pub const SIGMA_PIXEL: f64 = 3.0;
/// Target draws allowed per snapshot before the rig is re-sampled.
const TARGET_ATTEMPTS: usize = 200;
const RIG_ATTEMPTS: usize = 50;
/// Snapshot draws allowed per kept snapshot under selection.
const SELECTION_DRAW_FACTOR: usize = 20;

/// One experimental condition.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub label: String,
    pub scenario: ScenarioConfig,
    pub geometry: TargetGeometry,
    pub noise: NoiseModel,
    pub observations: usize,
    pub refine: bool,
    /// Also run snapshot selection and report it alongside.
    pub selection: Option<SelectionConfig>,
}

impl TrialSetup {
    pub fn new(label: impl Into<String>, noise: NoiseModel, observations: usize) -> Self {
        Self {
            label: label.into(),
            scenario: ScenarioConfig::default(),
            geometry: TargetGeometry::default(),
            noise,
            observations,
            refine: observations > 1,
            selection: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub setting: String,
    pub trial: usize,
    pub seed: u64,
    pub n_observations: usize,
    pub k_factor: f64,
    pub sigma_laser_mm: f64,
    pub sigma_pixel: f64,
    pub board_angle_deg: f64,
    pub failed: bool,
    pub e_frob: f64,
    pub e_theta_deg: f64,
    pub e_d_mm: f64,
    pub used_dogleg: bool,
    pub survivors: usize,
    pub rejected_draws: usize,
    pub e_frob_sel: Option<f64>,
    pub e_theta_sel_deg: Option<f64>,
    pub e_d_sel_mm: Option<f64>,
    pub runtime_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Stats {
    /// Sample statistics; NaN for an empty slice.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, median: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std: var.sqrt(), median: quantile(values, 0.5) }
    }
}

/// Linear-interpolated quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub setting: String,
    pub trials: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub rejected_draws: usize,
    pub e_frob_mean: f64,
    pub e_frob_median: f64,
    pub e_theta_mean: f64,
    pub e_theta_std: f64,
    pub e_theta_median: f64,
    pub e_d_mean: f64,
    pub e_d_std: f64,
    pub e_d_median: f64,
    pub e_theta_sel_mean: Option<f64>,
    pub e_theta_sel_std: Option<f64>,
    pub e_d_sel_mean: Option<f64>,
    pub e_d_sel_std: Option<f64>,
}

/// Per-setting summaries, in order of first appearance. Failed trials are
/// counted but excluded from the error statistics.
pub fn aggregate(rows: &[TrialRow]) -> Vec<Aggregate> {
    let mut settings: Vec<&str> = Vec::new();
    for r in rows {
        if !settings.contains(&r.setting.as_str()) {
            settings.push(&r.setting);
        }
    }
    settings
        .into_iter()
        .map(|s| {
            let group: Vec<&TrialRow> = rows.iter().filter(|r| r.setting == s).collect();
            let ok: Vec<&&TrialRow> = group.iter().filter(|r| !r.failed).collect();
            let col = |f: fn(&TrialRow) -> f64| Stats::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            let sel = |f: fn(&TrialRow) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| Stats::of(&v))
            };
            let (frob, theta, d) = (col(|r| r.e_frob), col(|r| r.e_theta_deg), col(|r| r.e_d_mm));
            let (theta_sel, d_sel) = (sel(|r| r.e_theta_sel_deg), sel(|r| r.e_d_sel_mm));
            let failures = group.len() - ok.len();
            Aggregate {
                setting: s.to_string(),
                trials: group.len(),
                failures,
                failure_rate: failures as f64 / group.len() as f64,
                rejected_draws: group.iter().map(|r| r.rejected_draws).sum(),
                e_frob_mean: frob.mean,
                e_frob_median: frob.median,
                e_theta_mean: theta.mean,
                e_theta_std: theta.std,
                e_theta_median: theta.median,
                e_d_mean: d.mean,
                e_d_std: d.std,
                e_d_median: d.median,
                e_theta_sel_mean: theta_sel.map(|s| s.mean),
                e_theta_sel_std: theta_sel.map(|s| s.std),
                e_d_sel_mean: d_sel.map(|s| s.mean),
                e_d_sel_std: d_sel.map(|s| s.std),
            }
        })
        .collect()
}

/// Noisy snapshots of one rig.
struct SnapshotStream<'a> {
    setup: &'a TrialSetup,
    rig: RigidPose,
    rng: ChaCha8Rng,
    rejected: usize,
}

impl SnapshotStream<'_> {
    fn next(&mut self) -> Result<Observation> {
        loop {
            let (gt, obs, rejected) = sample_valid_target(
                &self.setup.scenario,
                &self.setup.geometry,
                &self.rig,
                &mut self.rng,
                TARGET_ATTEMPTS,
            )?;
            self.rejected += rejected;
            let noisy = apply_noise(&obs, &self.setup.noise, &gt, &self.setup.geometry, &self.setup.scenario, &mut self.rng);
            match noisy {
                Ok(o) if validate_observation(&o).is_ok() => return Ok(o),
                _ => self.rejected += 1,
            }
        }
    }
}

/// A rig with its first `setup.observations` snapshots. Rigs that cannot
/// produce them are redrawn up to [`RIG_ATTEMPTS`] times.
fn draw_rig<'a>(
    setup: &'a TrialSetup,
    rng: &mut ChaCha8Rng,
    rejected_rigs: &mut usize,
) -> Result<(RigidPose, Vec<Observation>, SnapshotStream<'a>)> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        let rig = sample_rig(&setup.scenario, rng);
        let mut stream = SnapshotStream { setup, rig, rng: ChaCha8Rng::seed_from_u64(rng.next_u64()), rejected: 0 };
        match (0..setup.observations).map(|_| stream.next()).collect::<Result<Vec<_>>>() {
            Ok(first) => return Ok((rig, first, stream)),
            Err(e) if attempts >= RIG_ATTEMPTS => return Err(e),
            Err(_) => *rejected_rigs += 1,
        }
    }
}

/// The rig and noisy snapshots that trial `seed` of `setup` starts from.
pub fn simulate_snapshots(setup: &TrialSetup, seed: u64) -> Result<(RigidPose, Vec<Observation>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rig, first, _) = draw_rig(setup, &mut rng, &mut 0)?;
    Ok((rig, first))
}

fn solve(observations: &[Observation], refine: bool) -> Result<(RigidPose, bool, usize)> {
    let sol = if refine { solve_refined(observations)? } else { solve_multi(observations)? };
    Ok((sol.pose, sol.used_dogleg, sol.survivors))
}

/// Snapshots kept by the single-view check, topped up with the best-scored
/// rejects when too few pass or the rig yields no more targets.
fn select(stream: &mut SnapshotStream, wanted: usize, first: &[Observation], cfg: &SelectionConfig) -> Vec<Observation> {
    let eps2 = cfg.epsilon * cfg.epsilon;
    let mut kept = Vec::new();
    let mut rejected: Vec<(f64, Observation)> = Vec::new();
    let mut consider = |obs: Observation, kept: &mut Vec<Observation>| {
        let score = single_view_score(&obs).unwrap_or(f64::INFINITY);
        if score <= eps2 {
            kept.push(obs);
        } else {
            rejected.push((score, obs));
        }
    };
    let mut draws = 0;
    for obs in first {
        if kept.len() == wanted {
            break;
        }
        consider(obs.clone(), &mut kept);
        draws += 1;
    }
    while kept.len() < wanted && draws < SELECTION_DRAW_FACTOR * wanted {
        let Ok(obs) = stream.next() else { break };
        consider(obs, &mut kept);
        draws += 1;
    }
    if kept.len() < wanted {
        rejected.sort_by(|a, b| a.0.total_cmp(&b.0));
        kept.extend(rejected.into_iter().take(wanted - kept.len()).map(|(_, o)| o));
    }
    kept
}

/// Runs one trial. Failures are reported in the row, not as errors.
pub fn run_trial(setup: &TrialSetup, trial: usize, seed: u64, timing: bool) -> TrialRow {
    let trial_seed = seed.wrapping_add(trial as u64);
    let start = Instant::now();
    let mut row = TrialRow {
        setting: setup.label.clone(),
        trial,
        seed: trial_seed,
        n_observations: setup.observations,
        k_factor: setup.noise.k_factor,
        sigma_laser_mm: setup.noise.laser() * 1e3,
        sigma_pixel: setup.noise.pixel(),
        board_angle_deg: setup.geometry.board_angle_deg,
        failed: true,
        e_frob: f64::NAN,
        e_theta_deg: f64::NAN,
        e_d_mm: f64::NAN,
        used_dogleg: false,
        survivors: 0,
        rejected_draws: 0,
        e_frob_sel: None,
        e_theta_sel_deg: None,
        e_d_sel_mm: None,
        runtime_ms: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);

    let outcome = (|| -> Result<()> {
        let (rig, first, mut stream) = draw_rig(setup, &mut rng, &mut row.rejected_draws)?;
        let (pose, dogleg, survivors) = solve(&first, setup.refine)?;
        let err = pose_errors(&pose, &rig);
        row.failed = false;
        row.e_frob = err.frobenius;
        row.e_theta_deg = err.angular_deg;
        row.e_d_mm = err.distance * 1e3;
        row.used_dogleg = dogleg;
        row.survivors = survivors;

        if let Some(cfg) = &setup.selection {
            let chosen = select(&mut stream, setup.observations, &first, cfg);
            let (pose, _, _) = solve(&chosen, setup.refine)?;
            let err = pose_errors(&pose, &rig);
            row.e_frob_sel = Some(err.frobenius);
            row.e_theta_sel_deg = Some(err.angular_deg);
            row.e_d_sel_mm = Some(err.distance * 1e3);
        }
        row.rejected_draws += stream.rejected;
        Ok(())
    })();
    if outcome.is_err() {
        row.failed = true;
    }
    if timing {
        row.runtime_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    row
}

/// All trials of all setups, setup-major and in trial order.
pub fn run_setups(setups: &[TrialSetup], trials: usize, seed: u64, timing: bool) -> Vec<TrialRow> {
    let jobs: Vec<(usize, usize)> = (0..setups.len()).flat_map(|s| (0..trials).map(move |t| (s, t))).collect();
    jobs.par_iter().map(|&(s, t)| run_trial(&setups[s], t, seed, timing)).collect()
}

/// Noise-free single-snapshot trials.
pub fn stability_setups() -> Vec<TrialSetup> {
    vec![TrialSetup::new("noise-free", NoiseModel::none(), 1)]
}

/// Laser-only, pixel-only and combined noise lines over `k_grid`.
pub fn sweep_noise_setups(k_grid: &[f64], observations: usize) -> Result<Vec<TrialSetup>> {
    let mut out = Vec::new();
    for (line, sl, sp) in [("laser", SIGMA_LASER, 0.0), ("pixel", 0.0, SIGMA_PIXEL), ("both", SIGMA_LASER, SIGMA_PIXEL)] {
        for &k in k_grid {
            out.push(TrialSetup::new(format!("{line} k={k:.2}"), NoiseModel::new(sl, sp, k)?, observations));
        }
    }
    Ok(out)
}

/// Board-angle sweep at the reference noise levels.
pub fn sweep_angle_setups(angles: &[f64], observations: usize) -> Result<Vec<TrialSetup>> {
    angles
        .iter()
        .map(|&a| {
            let mut s = TrialSetup::new(format!("angle={a:.1}"), NoiseModel::new(SIGMA_LASER, SIGMA_PIXEL, 1.0)?, observations);
            s.geometry = TargetGeometry::new(a)?;
            Ok(s)
        })
        .collect()
}

/// Snapshot-count sweep for each laser noise level (meters).
pub fn sweep_obs_setups(m_grid: &[usize], sigma1_grid: &[f64], selection: Option<SelectionConfig>) -> Result<Vec<TrialSetup>> {
    let mut out = Vec::new();
    for &s1 in sigma1_grid {
        for &m in m_grid {
            if m == 0 {
                return Err(CalibError::InvalidConfig("snapshot count must be at least 1".into()));
            }
            let mut s = TrialSetup::new(format!("sigma1={:.1}mm M={m}", s1 * 1e3), NoiseModel::new(s1, SIGMA_PIXEL, 1.0)?, m);
            s.refine = true;
            s.selection = selection;
            out.push(s);
        }
    }
    Ok(out)
}

pub fn default_k_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn default_angle_grid() -> Vec<f64> {
    let mut a: Vec<f64> = (3..=17).map(|i| i as f64 * 10.0).collect();
    a.push(135.0);
    a.sort_by(f64::total_cmp);
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert!(quantile(&[], 0.5).is_nan());
        let s = Stats::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std, s.median), (2.0, 1.0, 2.0));
    }

    #[test]
    fn simulated_snapshots_share_the_rig_and_match_trials() {
        let setup = TrialSetup::new("clean", NoiseModel::none(), 3);
        let (rig, obs) = simulate_snapshots(&setup, 42).unwrap();
        assert_eq!(obs.len(), 3);
        assert_eq!(simulate_snapshots(&setup, 42).unwrap().1, obs);
        let sol = solve_multi(&obs).unwrap();
        assert!(pose_errors(&sol.pose, &rig).frobenius < 1e-6);
        let row = run_trial(&setup, 0, 42, false);
        assert!((row.e_frob - pose_errors(&sol.pose, &rig).frobenius).abs() < 1e-12);
    }

    #[test]
    fn trials_are_deterministic_and_ordered() {
        let setups = stability_setups();
        let a = run_setups(&setups, 8, 42, false);
        let b = run_setups(&setups, 8, 42, false);
        assert_eq!(a, b);
        assert!(a.iter().enumerate().all(|(i, r)| r.trial == i && r.seed == 42 + i as u64));
        assert!(a.iter().all(|r| !r.failed && r.e_frob < 1e-6));
    }

    #[test]
    fn trial_matches_serial_run() {
        let setups = stability_setups();
        let par = run_setups(&setups, 4, 7, false);
        let serial: Vec<TrialRow> = (0..4).map(|t| run_trial(&setups[0], t, 7, false)).collect();
        assert_eq!(par, serial);
    }

    #[test]
    fn aggregates_skip_failures() {
        let mut rows = run_setups(&stability_setups(), 3, 1, false);
        rows[1].failed = true;
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        assert_eq!((agg[0].trials, agg[0].failures), (3, 1));
        let ok = Stats::of(&[rows[0].e_theta_deg, rows[2].e_theta_deg]);
        assert_eq!(agg[0].e_theta_mean, ok.mean);
    }

    #[test]
    fn selection_reports_paired_columns() {
        let setups = sweep_obs_setups(&[3], &[0.01], Some(SelectionConfig::default())).unwrap();
        let rows = run_setups(&setups, 3, 5, false);
        assert!(rows.iter().all(|r| r.failed || (r.e_theta_sel_deg.is_some() && r.e_d_sel_mm.is_some())));
    }

    #[test]
    fn grids_cover_the_reference_settings() {
        let a = default_angle_grid();
        assert!(a.contains(&50.0) && a.contains(&135.0) && a.contains(&170.0));
        assert_eq!(default_k_grid().len(), 11);
        assert!(sweep_obs_setups(&[0], &[0.01], None).is_err());
    }
}
