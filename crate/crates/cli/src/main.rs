use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lrfcal::calibrator::{ransac_best_subset, single_view_score, solve_multi, solve_refined, SelectionConfig};
use lrfcal::constraints::Observation;
use lrfcal::experiment::{
    aggregate, default_angle_grid, default_k_grid, run_setups, simulate_snapshots, stability_setups, sweep_angle_setups,
    sweep_noise_setups, sweep_obs_setups, Aggregate, TrialSetup, SIGMA_LASER, SIGMA_PIXEL,
};
use lrfcal::geometry::{pose_errors, ErrorMetrics};
use lrfcal::io::{ObservationFile, PoseRecord};
use lrfcal::synth::{NoiseModel, TargetGeometry};
use lrfcal::CalibError;

#[derive(Parser)]
#[command(name = "calib", version, about = "LRF-camera extrinsic calibration from a V-shaped target")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the LRF pose in the camera frame from an observation file.
    Calibrate {
        file: PathBuf,
        /// Polish every physical candidate with Levenberg-Marquardt.
        #[arg(long)]
        refine: bool,
        /// Keep only snapshots whose single-view score is within this
        /// distance (millimeters).
        #[arg(long, value_name = "EPS_MM")]
        select: Option<f64>,
        /// Consensus search over random subsets of size K, N trials.
        #[arg(long, value_name = "K,N", value_parser = parse_pair)]
        ransac: Option<(usize, usize)>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write noisy synthetic snapshots of one random rig.
    Simulate {
        /// Number of snapshots.
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        noise_k: f64,
        #[arg(long, default_value_t = lrfcal::synth::DEFAULT_BOARD_ANGLE_DEG)]
        board_angle: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo experiments.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Stability,
    SweepNoise,
    SweepAngle,
    SweepObs,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    kind: Kind,
    /// Trials per setting [default: 10000 for stability, 1000 otherwise].
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-trial rows.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Per-setting aggregates.
    #[arg(long)]
    summary_csv: Option<PathBuf>,
    /// Record wall-clock time per trial.
    #[arg(long)]
    timing: bool,
    /// Snapshots per trial for the noise and angle sweeps.
    #[arg(long, default_value_t = 1)]
    observations: usize,
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    angles: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,15,20")]
    m_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    sigma1_mm: Vec<f64>,
    #[arg(long, default_value_t = 5.0)]
    epsilon_mm: f64,
    /// Skip the snapshot-selection comparison in sweep-obs.
    #[arg(long)]
    no_select: bool,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected K,N")?;
    let k = a.trim().parse().map_err(|e| format!("K: {e}"))?;
    let n = b.trim().parse().map_err(|e| format!("N: {e}"))?;
    Ok((k, n))
}

enum Failure {
    Calib(CalibError),
    Other(String),
}

impl From<CalibError> for Failure {
    fn from(e: CalibError) -> Self {
        Failure::Calib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        use CalibError::*;
        match self {
            Failure::Calib(Parse { .. } | UnsupportedSchema(_)) => 2,
            Failure::Calib(
                DegenerateObservation(_)
                | NonUnitNormal { .. }
                | NonPositiveDistance { .. }
                | SingularNormalGram
                | SingularReduction(_)
                | InsufficientObservations { .. }
                | MissingSegments(_),
            ) => 3,
            Failure::Calib(NoPhysicalSolution) => 4,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Calib(e) => e.fmt(f),
            Failure::Other(s) => f.write_str(s),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate { file, refine, select, ransac, seed, out } => {
            calibrate(&file, refine, select, ransac, seed, out.as_deref())
        }
        Command::Simulate { trials, seed, noise_k, board_angle, out } => {
            simulate(trials, seed, noise_k, board_angle, out.as_deref())
        }
        Command::Experiment(args) => experiment(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct CalibrationReport {
    #[serde(flatten)]
    pose: PoseRecord,
    rodrigues: [f64; 3],
    total_residual: f64,
    survivors: usize,
    candidates_considered: usize,
    used_dogleg: bool,
    observations_used: Vec<usize>,
    per_observation_residuals: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    errors: Option<ErrorReport>,
}

#[derive(Serialize)]
struct ErrorReport {
    e_frob: f64,
    e_theta_deg: f64,
    e_d_mm: f64,
}

impl From<ErrorMetrics> for ErrorReport {
    fn from(m: ErrorMetrics) -> Self {
        Self { e_frob: m.frobenius, e_theta_deg: m.angular_deg, e_d_mm: m.distance * 1e3 }
    }
}

fn calibrate(
    file: &Path,
    refine: bool,
    select: Option<f64>,
    ransac: Option<(usize, usize)>,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let text = fs::read_to_string(file).map_err(|e| Failure::Other(format!("{}: {e}", file.display())))?;
    let input = ObservationFile::from_json(&text)?;
    let truth = input.ground_truth_pose()?;
    let all = &input.observations;
    if all.is_empty() {
        return Err(CalibError::InsufficientObservations { needed: 1, got: 0 }.into());
    }

    let mut used: Vec<usize> = (0..all.len()).collect();
    if let Some(eps_mm) = select {
        let eps = SelectionConfig::new(eps_mm * 1e-3)?.epsilon;
        let mut kept = Vec::new();
        for &i in &used {
            match single_view_score(&all[i]) {
                Ok(s) if s <= eps * eps => kept.push(i),
                Ok(_) | Err(CalibError::NoPhysicalSolution) => {}
                Err(CalibError::MissingSegments(_)) => return Err(CalibError::MissingSegments(i).into()),
                Err(e) => return Err(e.into()),
            }
        }
        if kept.is_empty() {
            return Err(Failure::Other(format!("no snapshot passes selection at {eps_mm} mm")));
        }
        used = kept;
    }
    if let Some((k, n)) = ransac {
        let cfg = SelectionConfig::new(select.unwrap_or(lrfcal::calibrator::DEFAULT_EPSILON * 1e3) * 1e-3)?;
        let pool: Vec<Observation> = used.iter().map(|&i| all[i].clone()).collect();
        let inliers = ransac_best_subset(&pool, k, n, seed, &cfg)?;
        used.retain(|&i| inliers.contains(&all[i]));
    }

    let chosen: Vec<Observation> = used.iter().map(|&i| all[i].clone()).collect();
    let sol = if refine { solve_refined(&chosen)? } else { solve_multi(&chosen)? };
    let report = CalibrationReport {
        pose: PoseRecord::from(&sol.pose),
        rodrigues: sol.pose.rodrigues().into(),
        total_residual: sol.total_residual,
        survivors: sol.survivors,
        candidates_considered: sol.candidates_considered,
        used_dogleg: sol.used_dogleg,
        observations_used: used,
        per_observation_residuals: sol.per_observation_residuals.clone(),
        errors: truth.map(|t| pose_errors(&sol.pose, &t).into()),
    };
    if out.is_some() {
        eprintln!(
            "solved from {} of {} snapshots, residual {:.3e}",
            report.observations_used.len(),
            all.len(),
            report.total_residual
        );
    }
    write_or_print(out, &serde_json::to_string_pretty(&report).expect("report serializes"))
}

fn simulate(snapshots: usize, seed: u64, noise_k: f64, board_angle: f64, out: Option<&Path>) -> Result<(), Failure> {
    if snapshots == 0 {
        return Err(CalibError::InvalidConfig("at least one snapshot is required".into()).into());
    }
    let noise = NoiseModel::new(SIGMA_LASER, SIGMA_PIXEL, noise_k)?;
    let mut setup = TrialSetup::new("simulate", noise, snapshots);
    setup.geometry = TargetGeometry::new(board_angle)?;
    let (rig, observations) = simulate_snapshots(&setup, seed)?;
    write_or_print(out, &ObservationFile::new(observations, Some(&rig)).to_json())
}

fn experiment(args: &ExperimentArgs) -> Result<(), Failure> {
    let (setups, default_trials) = match args.kind {
        Kind::Stability => (stability_setups(), 10_000),
        Kind::SweepNoise => {
            let grid = args.k_grid.clone().unwrap_or_else(default_k_grid);
            (sweep_noise_setups(&grid, args.observations)?, 1000)
        }
        Kind::SweepAngle => {
            let grid = args.angles.clone().unwrap_or_else(default_angle_grid);
            (sweep_angle_setups(&grid, args.observations)?, 1000)
        }
        Kind::SweepObs => {
            let sigmas: Vec<f64> = args.sigma1_mm.iter().map(|s| s * 1e-3).collect();
            let selection = if args.no_select { None } else { Some(SelectionConfig::new(args.epsilon_mm * 1e-3)?) };
            (sweep_obs_setups(&args.m_grid, &sigmas, selection)?, 1000)
        }
    };
    let trials = args.trials.unwrap_or(default_trials);
    let rows = run_setups(&setups, trials, args.seed, args.timing);
    let summary = aggregate(&rows);

    if let Some(path) = &args.csv {
        write_csv(path, &rows)?;
    }
    if let Some(path) = &args.summary_csv {
        write_csv(path, &summary)?;
    }
    print_table(&summary);
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, records: &[T]) -> Result<(), Failure> {
    let fail = |e: csv::Error| Failure::Other(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in records {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn print_table(summary: &[Aggregate]) {
    println!(
        "{:<22} {:>6} {:>5} {:>10} {:>18} {:>9} {:>18} {:>9} {:>10} {:>10}",
        "setting", "trials", "fail", "frob_med", "e_theta_deg", "median", "e_d_mm", "median", "sel_theta", "sel_d_mm"
    );
    let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    for a in summary {
        println!(
            "{:<22} {:>6} {:>5} {:>10.2e} {:>18} {:>9.3} {:>18} {:>9.2} {:>10} {:>10}",
            a.setting,
            a.trials,
            a.failures,
            a.e_frob_median,
            format!("{:.3} ± {:.3}", a.e_theta_mean, a.e_theta_std),
            a.e_theta_median,
            format!("{:.2} ± {:.2}", a.e_d_mean, a.e_d_std),
            a.e_d_median,
            opt(a.e_theta_sel_mean, 3),
            opt(a.e_d_sel_mean, 2),
        );
    }
}
