use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lrfcal::calibrator::{ransac_best_subset, solve_multi, solve_refined, SelectionConfig};
use lrfcal::experiment::{simulate_snapshots, TrialSetup, SIGMA_LASER, SIGMA_PIXEL};
use lrfcal::features::{extract_laser_features, ScanPoint, DEFAULT_RDP_TOLERANCE};
use lrfcal::geometry::pose_errors;
use lrfcal::io::ObservationFile;
use lrfcal::synth::{apply_scan_noise, sample_valid, simulate_scan, NoiseModel, ScenarioConfig, TargetGeometry};

#[test]
fn file_round_trip_then_solve() {
    let setup = TrialSetup::new("io", NoiseModel::none(), 4);
    let (rig, obs) = simulate_snapshots(&setup, 8).unwrap();
    let file = ObservationFile::from_json(&ObservationFile::new(obs, Some(&rig)).to_json()).unwrap();
    let truth = file.ground_truth_pose().unwrap().unwrap();
    let sol = solve_multi(&file.observations).unwrap();
    assert!(pose_errors(&sol.pose, &truth).frobenius < 1e-6);
}

#[test]
fn noisy_snapshots_give_sub_degree_refined_estimates_on_average() {
    let noise = NoiseModel::new(SIGMA_LASER, SIGMA_PIXEL, 1.0).unwrap();
    let setup = TrialSetup::new("noisy", noise, 10);
    let mut theta = 0.0;
    for seed in 0..20 {
        let (rig, obs) = simulate_snapshots(&setup, seed).unwrap();
        let sol = solve_refined(&obs).unwrap();
        theta += pose_errors(&sol.pose, &rig).angular_deg;
    }
    assert!(theta / 20.0 < 1.0, "mean rotation error {} deg", theta / 20.0);
}

#[test]
fn ransac_rejects_a_corrupted_snapshot() {
    let setup = TrialSetup::new("clean", NoiseModel::none(), 6);
    let (rig, mut obs) = simulate_snapshots(&setup, 5).unwrap();
    obs[2].d1 += 0.05;
    let kept = ransac_best_subset(&obs, 2, 30, 1, &SelectionConfig::default()).unwrap();
    assert_eq!(kept.len(), 5);
    assert!(!kept.contains(&obs[2]));
    let sol = solve_multi(&kept).unwrap();
    assert!(pose_errors(&sol.pose, &rig).frobenius < 1e-6);
}

#[test]
fn features_from_noisy_scans_stay_close() {
    let (cfg, geom) = (ScenarioConfig::default(), TargetGeometry::default());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut devs = Vec::new();
    for _ in 0..100 {
        let (gt, ideal, _) = sample_valid(&cfg, &geom, &mut rng, 10_000).unwrap();
        let scan: Vec<ScanPoint> = simulate_scan(&gt, &geom, &cfg).unwrap().into_iter().map(|(p, _)| p).collect();
        let noisy = apply_scan_noise(&scan, SIGMA_LASER, &mut rng);
        let Ok(f) = extract_laser_features(&noisy, DEFAULT_RDP_TOLERANCE) else { continue };
        devs.push((f.p3.x - ideal.p3.x).hypot(f.p3.z - ideal.p3.z));
    }
    devs.sort_by(f64::total_cmp);
    assert!(devs.len() >= 90);
    assert!(devs[devs.len() / 2] < 0.01, "median p3 deviation {}", devs[devs.len() / 2]);
}
