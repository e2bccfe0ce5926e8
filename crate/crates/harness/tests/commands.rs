use std::path::Path;

use navfuse::sim;
use navfuse_harness::commands::{self, CompareReport, FuseSummary, REPORT_FILE, RUN_FILE, SUMMARY_FILE};
use navfuse_harness::config::MeasurementMode;
use navfuse_harness::io::{self, IngestMetadata, IngestReport};
use navfuse_harness::manifest::{RhoSweep, MANIFEST_FILE};
use navfuse_harness::{execute, replay, ExperimentConfig, HarnessError, Manifest, Task};
use tempfile::TempDir;

fn short(duration: f64) -> ExperimentConfig {
    ExperimentConfig {
        duration_s: duration,
        seeds: vec![5],
        ..ExperimentConfig::default()
    }
}

fn tiny_net(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.corpus_trajectories = 2;
    cfg.corpus_duration_s = 60.0;
    cfg.hidden_units = vec![32, 16];
    cfg.epochs = 6;
    cfg.patience = 6;
    cfg.batch_size = 8;
    cfg
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn simulate_into(cfg: &ExperimentConfig, dir: &Path) -> Manifest {
    execute(&Task::Simulate, cfg, dir).unwrap()
}

#[test]
fn simulate_writes_headers_and_rows() {
    let tmp = TempDir::new().unwrap();
    simulate_into(&short(400.0), tmp.path());
    let imu = read(&tmp.path().join(io::IMU_FILE));
    assert_eq!(imu.lines().count(), 40_000 + 1);
    assert!(imu.starts_with("t,fx,fy,fz,wx,wy,wz\n"));
    let dvl = read(&tmp.path().join(io::DVL_FILE));
    assert!(dvl.starts_with("t,b1,b2,b3,b4,v1_valid,v2_valid,v3_valid,v4_valid\n"));
    assert_eq!(dvl.lines().count(), 400 + 1);
    let truth = read(&tmp.path().join(io::TRUTH_FILE));
    assert!(truth.starts_with("t,pn,pe,pd,vn,ve,vd,qw,qx,qy,qz\n"));
    assert!(tmp.path().join(MANIFEST_FILE).exists());
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let cfg = short(30.0);
    let ma = simulate_into(&cfg, a.path());
    let mb = simulate_into(&cfg, b.path());
    assert_eq!(ma.outputs, mb.outputs);
    for f in [io::IMU_FILE, io::DVL_FILE, io::TRUTH_FILE, MANIFEST_FILE] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let other = ExperimentConfig { seeds: vec![6], ..cfg };
    let c = TempDir::new().unwrap();
    simulate_into(&other, c.path());
    assert_ne!(read(&a.path().join(io::IMU_FILE)), read(&c.path().join(io::IMU_FILE)));
}

#[test]
fn noiseless_simulation_logs_the_true_imu() {
    let mut cfg = short(20.0);
    cfg.accel_noise_mps2 = 0.0;
    cfg.gyro_noise_radps = 0.0;
    cfg.accel_bias_rw_mps2 = 0.0;
    cfg.gyro_bias_rw_radps = 0.0;
    cfg.init_accel_bias_sigma_mps2 = 0.0;
    cfg.init_gyro_bias_sigma_radps = 0.0;
    let tmp = TempDir::new().unwrap();
    simulate_into(&cfg, tmp.path());
    let mut report = IngestReport::default();
    let logged = io::read_imu(&tmp.path().join(io::IMU_FILE), &IngestMetadata::default(), &mut report).unwrap();
    let truth = sim::generate(&cfg.profile(), 0.01, navfuse::ins::STANDARD_GRAVITY).unwrap();
    assert_eq!(logged, truth.imu);
}

#[test]
fn ls_fusion_needs_no_network_and_replays() {
    let tmp = TempDir::new().unwrap();
    let sim_dir = tmp.path().join("sim");
    let cfg = short(60.0);
    simulate_into(&cfg, &sim_dir);
    let fuse_dir = tmp.path().join("fuse");
    let task = Task::Fuse {
        data: Some(sim_dir.clone()),
    };
    execute(&task, &cfg, &fuse_dir).unwrap();
    let run = read(&fuse_dir.join(RUN_FILE));
    let header = run.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 1 + 12 + 12 + 3);
    assert!(header.starts_with("t,x0,") && header.ends_with("innov1,innov2"));
    assert_eq!(run.lines().count(), 6000 + 2);
    let summary: FuseSummary = serde_json::from_str(&read(&fuse_dir.join(SUMMARY_FILE))).unwrap();
    assert_eq!(summary.updates, 60);
    assert!(summary.velocity_rmse_mps.unwrap() < 0.3);
    let again = replay(&fuse_dir.join(MANIFEST_FILE), &tmp.path().join("replay")).unwrap();
    assert_eq!(again.original.outputs, again.replayed.outputs);
}

#[test]
fn neglect_mode_equals_aware_mode_without_correlation() {
    let tmp = TempDir::new().unwrap();
    let mut neglect = short(40.0);
    neglect.use_cross_correlation = false;
    let aware_rho0 = ExperimentConfig { rho: 0.0, ..short(40.0) };
    let task = Task::Fuse { data: None };
    execute(&task, &neglect, &tmp.path().join("n")).unwrap();
    execute(&task, &aware_rho0, &tmp.path().join("a")).unwrap();
    assert_eq!(read(&tmp.path().join("n").join(RUN_FILE)), read(&tmp.path().join("a").join(RUN_FILE)));
}

#[test]
fn beamsnet_mode_without_archive_is_a_config_error() {
    let mut cfg = short(20.0);
    cfg.measurement = MeasurementMode::Beamsnet;
    assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    cfg.beamsnet_params = "/nonexistent/params.json".into();
    let err = execute(&Task::Fuse { data: None }, &cfg, TempDir::new().unwrap().path()).unwrap_err();
    assert!(matches!(err, HarnessError::Config(ref m) if m.contains("does not exist")), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn matched_mode_rejects_recorded_data() {
    let tmp = TempDir::new().unwrap();
    let cfg = short(20.0);
    simulate_into(&cfg, &tmp.path().join("sim"));
    let matched = ExperimentConfig {
        measurement: MeasurementMode::Matched,
        rho: 0.2,
        ..cfg
    };
    let err = execute(
        &Task::Fuse {
            data: Some(tmp.path().join("sim")),
        },
        &matched,
        &tmp.path().join("fuse"),
    )
    .unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)), "{err}");
}

#[test]
fn compare_at_zero_rho_shows_no_improvement() {
    let tmp = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        rho: 0.0,
        seeds: vec![1, 2],
        ..short(60.0)
    };
    execute(&Task::Compare { rho_sweep: None }, &cfg, tmp.path()).unwrap();
    let report: CompareReport = serde_json::from_str(&read(&tmp.path().join(REPORT_FILE))).unwrap();
    for g in &report.groups {
        assert!(g.mean_std_improvement_pct.abs() < 0.01, "{g:?}");
    }
    assert!(tmp.path().join("std_seed1.csv").exists() && tmp.path().join("std_seed2.csv").exists());
}

#[test]
fn compare_report_has_the_documented_fields() {
    let tmp = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        seeds: vec![3],
        ..short(60.0)
    };
    let sweep = RhoSweep::parse("0:0.4:0.2").unwrap();
    execute(&Task::Compare { rho_sweep: Some(sweep) }, &cfg, tmp.path()).unwrap();
    let value: serde_json::Value = serde_json::from_str(&read(&tmp.path().join(REPORT_FILE))).unwrap();
    for key in ["measurement", "rho", "seeds", "groups", "aware_nees", "neglect_nees", "per_seed"] {
        assert!(value.get(key).is_some(), "missing {key}");
    }
    let group = &value["groups"][0];
    for key in ["group", "mean_std_improvement_pct", "final_sum_improvement_pct"] {
        assert!(group.get(key).is_some(), "missing groups[].{key}");
    }
    let seed = &value["per_seed"][0];
    for key in ["seed", "summary", "aware_mean_nees", "neglect_mean_nees", "aware_cross_cov_limited", "correlation"] {
        assert!(seed.get(key).is_some(), "missing per_seed[].{key}");
    }
    let sweep_csv = read(&tmp.path().join(commands::SWEEP_FILE));
    let lines: Vec<&str> = sweep_csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("rho,velocity_std_improvement_pct,misalignment_std_improvement_pct"));
    assert!(lines[1].starts_with("0,0,0,0,0"));
}

#[test]
fn training_smoke_run_is_fast_and_resumes_continuously() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_net(short(60.0));
    let start = std::time::Instant::now();
    let first = tmp.path().join("first");
    execute(&Task::Train { data: vec![], resume: None }, &cfg, &first).unwrap();
    assert!(start.elapsed().as_secs() < 60, "{:?}", start.elapsed());

    let history = read(&first.join(commands::HISTORY_FILE));
    let best: Vec<f64> = history
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]), "{best:?}");

    let summary: commands::TrainSummary =
        serde_json::from_str(&read(&first.join("train_summary.json"))).unwrap();
    let resumed = tmp.path().join("resumed");
    let task = Task::Train {
        data: vec![],
        resume: Some(first.join(commands::PARAMS_FILE)),
    };
    execute(&task, &cfg, &resumed).unwrap();
    let again: commands::TrainSummary = serde_json::from_str(&read(&resumed.join("train_summary.json"))).unwrap();
    assert_eq!(again.initial_val_loss, summary.best_val_loss);
    assert!(again.best_val_loss <= summary.best_val_loss);
}

#[test]
fn training_on_recorded_datasets_matches_simulated_layout() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_net(short(50.0));
    simulate_into(&cfg, &tmp.path().join("a"));
    simulate_into(&ExperimentConfig { seeds: vec![9], ..cfg.clone() }, &tmp.path().join("b"));
    let task = Task::Train {
        data: vec![tmp.path().join("a"), tmp.path().join("b")],
        resume: None,
    };
    let out = tmp.path().join("train");
    let manifest = execute(&task, &cfg, &out).unwrap();
    assert_eq!(manifest.inputs.len(), 6);
    let summary: commands::TrainSummary = serde_json::from_str(&read(&out.join("train_summary.json"))).unwrap();
    assert_eq!(summary.samples, 2 * (50 - cfg.dvl_history));
}

#[test]
fn every_command_replays_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_net(short(30.0));
    simulate_into(&cfg, &tmp.path().join("sim"));
    let tasks = [
        Task::Simulate,
        Task::Train { data: vec![], resume: None },
        Task::Fuse { data: None },
        Task::Compare { rho_sweep: None },
        Task::Ingest {
            imu: tmp.path().join("sim").join(io::IMU_FILE),
            dvl: tmp.path().join("sim").join(io::DVL_FILE),
            truth: Some(tmp.path().join("sim").join(io::TRUTH_FILE)),
            metadata: None,
        },
    ];
    for task in tasks {
        let dir = tmp.path().join(task.name());
        execute(&task, &cfg, &dir).unwrap();
        let outcome = replay(&dir.join(MANIFEST_FILE), &dir.join("replay")).unwrap();
        assert_eq!(outcome.original.outputs, outcome.replayed.outputs, "{}", task.name());
    }
}

#[test]
fn replay_refuses_changed_inputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = short(20.0);
    let sim_dir = tmp.path().join("sim");
    simulate_into(&cfg, &sim_dir);
    let fuse_dir = tmp.path().join("fuse");
    execute(&Task::Fuse { data: Some(sim_dir.clone()) }, &cfg, &fuse_dir).unwrap();
    let dvl = sim_dir.join(io::DVL_FILE);
    let text = read(&dvl).replacen("1,1,1,1\n", "1,1,1,0\n", 1);
    std::fs::write(&dvl, text).unwrap();
    let err = replay(&fuse_dir.join(MANIFEST_FILE), &tmp.path().join("again")).unwrap_err();
    assert!(matches!(err, HarnessError::Data(ref m) if m.contains("changed")), "{err}");
}
