//! The harness commands. Each one writes into its own output directory and
//! finishes by writing a manifest that [`replay`] can re-run.

use std::path::{Path, PathBuf};

use nalgebra::{SVector, Vector3};
use navfuse::beamsnet::{self, NetworkParams, Sample, TrainOutcome, WindowedInput};
use navfuse::dvl::BeamGeometry;
use navfuse::ekf::{fuse_run, FilterRun, MeasurementSource, NoiseModel, VelocityMeasurement};
use navfuse::experiments::{
    beamsnet_measurements, corpus_profiles, corpus_samples, corpus_scenario_config, ls_measurements, noise_error_sequences, simulate_corpus, Scenario, ScenarioConfig, IMU_MATCH_TOL,
};
use navfuse::ins::NavState;
use navfuse::metrics::{ensemble_nees, nees, uncertainty_summary, EnsembleNees, StateGroup, UncertaintySummary};
use navfuse::sim::{empirical_cross_corr, TruthState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MeasurementMode};
use crate::error::{HarnessError, Result};
use crate::io::{self, Dataset, IngestMetadata, IngestReport};
use crate::manifest::{Manifest, RhoSweep, Task};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "NAVFUSE_OUT";
pub const DEFAULT_OUT_ROOT: &str = "navfuse-out";

pub const PARAMS_FILE: &str = "params.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const RUN_FILE: &str = "run.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";

/// Output directory of a command: `--out` if given, else
/// `<root>/<command>-seed<seed>` where the root comes from the config, then
/// the environment, then a fixed default.
pub fn output_dir(cli_out: Option<&Path>, config: &ExperimentConfig, task: &Task) -> PathBuf {
    if let Some(out) = cli_out {
        return out.to_path_buf();
    }
    let root = if !config.output_dir.is_empty() {
        PathBuf::from(&config.output_dir)
    } else {
        std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from)
    };
    root.join(format!("{}-seed{}", task.name(), config.seeds[0]))
}

/// Runs `task` and writes its outputs and manifest into `out`.
pub fn execute(task: &Task, config: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let manifest = Manifest::new(task.clone(), config.clone())?;
    log::info!("{} -> {}", task.name(), out.display());
    let outputs = match task {
        Task::Simulate => simulate(config, out)?,
        Task::Train { data, resume } => train(config, data, resume.as_deref(), out)?,
        Task::Fuse { data } => fuse(config, data.as_deref(), out)?,
        Task::Compare { rho_sweep } => compare(config, rho_sweep.as_ref(), out)?,
        Task::Ingest {
            imu,
            dvl,
            truth,
            metadata,
        } => ingest(imu, dvl, truth.as_deref(), metadata.as_deref(), out)?,
    };
    manifest.finish(out, &outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub original: Manifest,
    pub replayed: Manifest,
}

/// Re-runs the command recorded in a manifest into `out` and checks that
/// every output is byte-identical to the recorded one.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayOutcome> {
    let original = Manifest::load(manifest_path)?;
    original.check_inputs()?;
    let replayed = execute(&original.task, &original.config, out)?;
    for (a, b) in original.outputs.iter().zip(&replayed.outputs) {
        if a != b {
            return Err(HarnessError::Data(format!(
                "replayed output {} differs from the recorded one",
                b.path.display()
            )));
        }
    }
    if original.outputs.len() != replayed.outputs.len() {
        return Err(HarnessError::Data("replay produced a different set of outputs".into()));
    }
    Ok(ReplayOutcome { original, replayed })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn simulate(config: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let scenario = Scenario::simulate(&config.scenario()?, config.seeds[0])?;
    let data = Dataset {
        imu: scenario.imu,
        dvl: scenario.dvl.epochs,
        truth: Some(scenario.truth.states),
    };
    io::write_dataset(out, &data)?;
    Ok(vec![io::IMU_FILE.into(), io::DVL_FILE.into(), io::TRUTH_FILE.into()])
}

pub fn load_params(path: &Path) -> Result<NetworkParams> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    NetworkParams::from_json(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

/// Training corpus simulated from the config. The corpus keeps the config's
/// sensors but draws its trajectories from `corpus_profiles` and its initial
/// biases from the calibrated-IMU corpus settings.
pub fn corpus(config: &ExperimentConfig, seed: u64, net: &beamsnet::NetConfig) -> Result<Vec<Sample>> {
    let base = ScenarioConfig {
        initial: corpus_scenario_config().initial,
        ..config.scenario()?
    };
    let profiles = corpus_profiles(config.corpus_trajectories, config.corpus_duration_s, seed);
    let scenarios = simulate_corpus(&base, &profiles, seed)?;
    Ok(corpus_samples(&scenarios, net)?)
}

/// Index one past the IMU sample stamped at `time`.
fn imu_end(imu: &[navfuse::ins::ImuSample], time: f64) -> usize {
    let i = imu.partition_point(|s| s.time < time - IMU_MATCH_TOL);
    match imu.get(i) {
        Some(s) if (s.time - time).abs() <= IMU_MATCH_TOL => i + 1,
        _ => i,
    }
}

fn truth_at(truth: &[TruthState], time: f64) -> Option<&TruthState> {
    let i = truth.partition_point(|s| s.time < time - IMU_MATCH_TOL);
    truth.get(i).filter(|s| (s.time - time).abs() <= IMU_MATCH_TOL)
}

/// Training samples from a recorded dataset; needs truth at every DVL epoch.
pub fn dataset_samples(data: &Dataset, net: &beamsnet::NetConfig, geom: &BeamGeometry) -> Result<Vec<Sample>> {
    let truth = data
        .truth
        .as_ref()
        .ok_or_else(|| HarnessError::Data("training data needs truth.csv".into()))?;
    let mut out = Vec::new();
    for (j, epoch) in data.dvl.iter().enumerate() {
        let end = imu_end(&data.imu, epoch.time);
        if end < net.window || j < net.dvl_history {
            continue;
        }
        let state = truth_at(truth, epoch.time)
            .ok_or_else(|| HarnessError::Data(format!("no truth row at DVL time {} s", epoch.time)))?;
        let input = WindowedInput::assemble(net, &data.imu[..end], &data.dvl[..=j], geom)?;
        out.push(Sample {
            input,
            target: state.body_velocity(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub samples: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub parameters: usize,
    pub best_epoch: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub residual_sigma_mps: [f64; 3],
}

fn write_training(outcome: &TrainOutcome, samples: usize, out: &Path) -> Result<Vec<String>> {
    let path = out.join(PARAMS_FILE);
    std::fs::write(&path, outcome.params.to_json()).map_err(|e| HarnessError::io(&path, e))?;
    io::write_history(&out.join(HISTORY_FILE), &outcome.history)?;
    let r = outcome.params.effective_covariance();
    let summary = TrainSummary {
        samples,
        train_samples: outcome.train_indices.len(),
        validation_samples: outcome.val_indices.len(),
        parameters: outcome.params.parameter_count(),
        best_epoch: outcome.history.best_epoch,
        initial_val_loss: outcome.history.initial_val_loss,
        best_val_loss: outcome.history.best_val_loss(),
        residual_sigma_mps: [r[(0, 0)].sqrt(), r[(1, 1)].sqrt(), r[(2, 2)].sqrt()],
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(vec![PARAMS_FILE.into(), HISTORY_FILE.into(), "train_summary.json".into()])
}

fn train(config: &ExperimentConfig, data: &[PathBuf], resume: Option<&Path>, out: &Path) -> Result<Vec<String>> {
    let seed = config.seeds[0];
    let geom = config.geometry()?;
    let start = resume.map(load_params).transpose()?;
    let net = start.as_ref().map_or_else(|| config.net_config(), |p| p.config.clone());
    let samples = if data.is_empty() {
        corpus(config, seed, &net)?
    } else {
        let mut all = Vec::new();
        for dir in data {
            let (ds, _) = io::read_dataset(dir, &IngestMetadata::default())?;
            all.extend(dataset_samples(&ds, &net, &geom)?);
        }
        all
    };
    log::info!("training on {} samples", samples.len());
    let cfg = config.train_config(seed);
    let outcome = match start {
        Some(params) => beamsnet::resume(params, &samples, &cfg)?,
        None => beamsnet::train(&samples, &net, &geom, &cfg)?,
    };
    write_training(&outcome, samples.len(), out)
}

/// Network for `measurement = "beamsnet"`: loaded from the archive, or
/// trained on the configured corpus with its outputs written into `out`.
fn network(config: &ExperimentConfig, out: &Path, outputs: &mut Vec<String>) -> Result<Option<NetworkParams>> {
    if config.measurement != MeasurementMode::Beamsnet {
        return Ok(None);
    }
    if let Some(path) = config.beamsnet_params_path() {
        return load_params(&path).map(Some);
    }
    let seed = config.seeds[0];
    let net = config.net_config();
    let samples = corpus(config, seed, &net)?;
    let outcome = beamsnet::train(&samples, &net, &config.geometry()?, &config.train_config(seed))?;
    outputs.extend(write_training(&outcome, samples.len(), out)?);
    Ok(Some(outcome.params))
}

fn scenario_measurements(
    scenario: &Scenario,
    config: &ExperimentConfig,
    rho: f64,
    params: Option<&NetworkParams>,
) -> Result<Vec<VelocityMeasurement>> {
    Ok(match config.measurement {
        MeasurementMode::LeastSquares => scenario.ls_measurements()?,
        MeasurementMode::Beamsnet => scenario.beamsnet_measurements(params.expect("network loaded for beamsnet mode"))?,
        MeasurementMode::Matched => scenario.matched_measurements(rho, config.matched_sigma_mps)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseSummary {
    pub measurement: MeasurementMode,
    pub rho: f64,
    pub use_cross_correlation: bool,
    pub seed: u64,
    pub rows: usize,
    pub updates: usize,
    pub psd_clamps: usize,
    pub cross_cov_limited: usize,
    /// RMS over updates of the post-update velocity error, when truth exists.
    pub velocity_rmse_mps: Option<f64>,
    pub final_velocity_error_mps: Option<f64>,
    /// Mean NEES over updates; simulated runs only, since it needs the true
    /// biases.
    pub mean_nees: Option<f64>,
    pub nees_fraction_inside: Option<f64>,
}

fn velocity_errors(run: &FilterRun, truth: impl Fn(f64) -> Option<Vector3<f64>>) -> (Option<f64>, Option<f64>) {
    let errs: Vec<f64> = run
        .updates
        .iter()
        .filter_map(|u| truth(u.time).map(|v| (u.nav.velocity - v).norm()))
        .collect();
    let rmse = (!errs.is_empty()).then(|| (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt());
    let last = run.rows.last().expect("run has rows");
    let final_err = truth(last.time).map(|v| (last.nav.velocity - v).norm());
    (rmse, final_err)
}

fn fuse(config: &ExperimentConfig, data: Option<&Path>, out: &Path) -> Result<Vec<String>> {
    let seed = config.seeds[0];
    let mut outputs = Vec::new();
    let params = network(config, out, &mut outputs)?;
    let noise = config.noise();
    let filter = config.filter();
    let (run, velocity_rmse_mps, final_velocity_error_mps, nees_report) = match data {
        Some(dir) => {
            if config.measurement == MeasurementMode::Matched {
                return Err(HarnessError::Config(
                    "measurement = \"matched\" needs simulated data; drop --data".into(),
                ));
            }
            let (ds, _) = io::read_dataset(dir, &IngestMetadata::default())?;
            let truth = ds
                .truth
                .as_ref()
                .ok_or_else(|| HarnessError::Data("fusing a dataset needs truth.csv for the initial state".into()))?;
            let geom = config.geometry()?;
            let meas = match &params {
                Some(p) => beamsnet_measurements(p, &ds.imu, &ds.dvl, &geom, noise.dvl_meas_sigma)?,
                None => ls_measurements(&ds.dvl, &geom, noise.dvl_meas_sigma)?,
            };
            let initial = dataset_initial_state(&ds).expect("truth checked above");
            let run = fuse_run(&ds.imu, &meas, initial, &noise, &filter, seed)?;
            let (rmse, fin) = velocity_errors(&run, |t| truth_at(truth, t).map(|s| s.velocity));
            (run, rmse, fin, None)
        }
        None => {
            let scenario = Scenario::simulate(&config.scenario()?, seed)?;
            let meas = scenario_measurements(&scenario, config, config.rho, params.as_ref())?;
            let run = scenario.fuse(&meas, &noise, &filter, config.perturb_initial)?;
            let (rmse, fin) = velocity_errors(&run, |t| truth_at(&scenario.truth.states, t).map(|s| s.velocity));
            let report = nees(&run, &scenario.truth_at_epochs())?;
            (run, rmse, fin, Some(report))
        }
    };
    io::write_run(&out.join(RUN_FILE), &run)?;
    let summary = FuseSummary {
        measurement: config.measurement,
        rho: config.rho,
        use_cross_correlation: config.use_cross_correlation,
        seed,
        rows: run.rows.len(),
        updates: run.updates.len(),
        psd_clamps: run.psd_clamps,
        cross_cov_limited: run.cross_cov_limited,
        velocity_rmse_mps,
        final_velocity_error_mps,
        mean_nees: nees_report.as_ref().map(|r| r.mean),
        nees_fraction_inside: nees_report.as_ref().map(|r| r.fraction_inside),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    outputs.extend([RUN_FILE.to_string(), SUMMARY_FILE.to_string()]);
    Ok(outputs)
}

/// Sample correlation between the measurement error and the accelerometer
/// and gyroscope white noise summed over each DVL interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCheck {
    pub lag_epochs: i64,
    pub samples: usize,
    pub band: f64,
    pub max_abs_correlation: f64,
    pub significant_entries: usize,
}

pub fn correlation_check(scenario: &Scenario, meas: &[VelocityMeasurement], lag: i64) -> Option<CorrelationCheck> {
    let first = meas
        .iter()
        .take_while(|m| m.source == MeasurementSource::Fallback)
        .count();
    let (noise, error) = noise_error_sequences(scenario, meas, first);
    let w: Vec<SVector<f64, 6>> = noise.iter().map(|n| n.fixed_rows::<6>(0).into_owned()).collect();
    let c = empirical_cross_corr(&w, &error, lag as isize).ok()?;
    Some(CorrelationCheck {
        lag_epochs: lag,
        samples: c.samples,
        band: c.band,
        max_abs_correlation: c.max_abs_correlation(),
        significant_entries: c.significant_count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub summary: UncertaintySummary,
    pub aware_mean_nees: f64,
    pub neglect_mean_nees: f64,
    pub aware_cross_cov_limited: usize,
    pub correlation: Option<CorrelationCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupImprovement {
    pub group: StateGroup,
    /// Mean over seeds of the time-averaged std improvement, percent.
    pub mean_std_improvement_pct: f64,
    pub final_sum_improvement_pct: f64,
}

/// Contents of `report.json` written by `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub measurement: MeasurementMode,
    pub rho: f64,
    pub seeds: Vec<u64>,
    pub groups: Vec<GroupImprovement>,
    pub aware_nees: EnsembleNees,
    pub neglect_nees: EnsembleNees,
    pub per_seed: Vec<SeedReport>,
}

struct PairOutcome {
    report: SeedReport,
    aware_nees: navfuse::metrics::NeesReport,
    neglect_nees: navfuse::metrics::NeesReport,
}

fn paired(
    config: &ExperimentConfig,
    rho: f64,
    seed: u64,
    params: Option<&NetworkParams>,
    std_csv: Option<&Path>,
) -> Result<PairOutcome> {
    let scenario = Scenario::simulate(&config.scenario()?, seed)?;
    let meas = scenario_measurements(&scenario, config, rho, params)?;
    let noise = NoiseModel { rho, ..config.noise() };
    let (aware, neglect) = scenario.paired_runs(&meas, &noise, &config.filter(), config.perturb_initial)?;
    if let Some(path) = std_csv {
        io::write_std_pair(path, &aware, &neglect)?;
    }
    let truth = scenario.truth_at_epochs();
    let aware_nees = nees(&aware, &truth)?;
    let neglect_nees = nees(&neglect, &truth)?;
    Ok(PairOutcome {
        report: SeedReport {
            seed,
            summary: uncertainty_summary(&aware, &neglect)?,
            aware_mean_nees: aware_nees.mean,
            neglect_mean_nees: neglect_nees.mean,
            aware_cross_cov_limited: aware.cross_cov_limited,
            correlation: correlation_check(&scenario, &meas, config.correlation_lag_epochs),
        },
        aware_nees,
        neglect_nees,
    })
}

fn mean_improvements(reports: &[SeedReport]) -> Vec<GroupImprovement> {
    let n = reports.len() as f64;
    StateGroup::ALL
        .iter()
        .map(|&g| GroupImprovement {
            group: g,
            mean_std_improvement_pct: reports.iter().map(|r| r.summary.group(g).mean_std_improvement_pct).sum::<f64>() / n,
            final_sum_improvement_pct: reports.iter().map(|r| r.summary.group(g).final_sum_improvement_pct).sum::<f64>() / n,
        })
        .collect()
}

fn compare(config: &ExperimentConfig, sweep: Option<&RhoSweep>, out: &Path) -> Result<Vec<String>> {
    let mut outputs = Vec::new();
    let params = network(config, out, &mut outputs)?;
    let seeds = &config.seeds;
    let pairs = seeds
        .par_iter()
        .map(|&seed| paired(config, config.rho, seed, params.as_ref(), Some(&out.join(std_file(seed)))))
        .collect::<Result<Vec<_>>>()?;
    let per_seed: Vec<SeedReport> = pairs.iter().map(|p| p.report.clone()).collect();
    let aware: Vec<_> = pairs.iter().map(|p| p.aware_nees.clone()).collect();
    let neglect: Vec<_> = pairs.iter().map(|p| p.neglect_nees.clone()).collect();
    let report = CompareReport {
        measurement: config.measurement,
        rho: config.rho,
        seeds: seeds.clone(),
        groups: mean_improvements(&per_seed),
        aware_nees: ensemble_nees(&aware)?,
        neglect_nees: ensemble_nees(&neglect)?,
        per_seed,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    outputs.push(REPORT_FILE.into());
    outputs.extend(seeds.iter().map(|&s| std_file(s)));
    if let Some(sweep) = sweep {
        let rhos = sweep.values();
        let results = (0..rhos.len() * seeds.len())
            .into_par_iter()
            .map(|i| {
                let (r, s) = (i / seeds.len(), i % seeds.len());
                paired(config, rhos[r], seeds[s], params.as_ref(), None).map(|p| p.report)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut names = vec!["rho"];
        let cols: Vec<String> = StateGroup::ALL
            .iter()
            .map(|g| format!("{}_std_improvement_pct", serde_json::to_value(g).unwrap().as_str().unwrap().replace('-', "_")))
            .collect();
        names.extend(cols.iter().map(String::as_str));
        names.push("mean_cross_cov_limited");
        let rows = rhos.iter().enumerate().map(|(r, &rho)| {
            let chunk = &results[r * seeds.len()..(r + 1) * seeds.len()];
            let mut row = vec![rho];
            row.extend(mean_improvements(chunk).iter().map(|g| g.mean_std_improvement_pct));
            row.push(chunk.iter().map(|c| c.aware_cross_cov_limited as f64).sum::<f64>() / chunk.len() as f64);
            row
        });
        io::write_table(&out.join(SWEEP_FILE), &names, rows)?;
        outputs.push(SWEEP_FILE.into());
    }
    Ok(outputs)
}

fn std_file(seed: u64) -> String {
    format!("std_seed{seed}.csv")
}

fn ingest(imu: &Path, dvl: &Path, truth: Option<&Path>, metadata: Option<&Path>, out: &Path) -> Result<Vec<String>> {
    let meta = match metadata {
        Some(p) => IngestMetadata::load(p)?,
        None => IngestMetadata::default(),
    };
    let mut report = IngestReport::default();
    let data = Dataset {
        imu: io::read_imu(imu, &meta, &mut report)?,
        dvl: io::read_dvl(dvl, &meta, &mut report)?,
        truth: truth.map(|p| io::read_truth(p, &meta, &mut report)).transpose()?,
    };
    io::write_dataset(out, &data)?;
    write_json(&out.join(INGEST_REPORT_FILE), &report)?;
    let mut outputs = vec![io::IMU_FILE.to_string(), io::DVL_FILE.to_string()];
    if data.truth.is_some() {
        outputs.push(io::TRUTH_FILE.into());
    }
    outputs.push(INGEST_REPORT_FILE.into());
    Ok(outputs)
}

/// Initial navigation state of a recorded dataset: the first truth row with
/// zero bias estimates.
pub fn dataset_initial_state(data: &Dataset) -> Option<NavState> {
    data.truth
        .as_ref()
        .and_then(|t| t.first())
        .map(|s| s.nav_state(Vector3::zeros(), Vector3::zeros()))
}
