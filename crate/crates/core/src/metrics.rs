//! Regression accuracy metrics, NEES consistency and the aware-vs-neglect
//! uncertainty summary.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::ekf::{idx, nav_error, FilterRun, StateMatrix, STATE_DIM};
use crate::ins::NavState;

/// Two time series are aligned if their stamps agree to this tolerance.
pub const TIME_ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty series")]
    Empty,
    #[error("reference series has zero variance")]
    ConstantTruth,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("runs are not time-aligned at row {0}")]
    Misaligned(usize),
    #[error("covariance at index {0} is not positive definite")]
    Singular(usize),
    #[error("invalid chi-square band: {0}")]
    Band(String),
}

fn check(x: &[f64], xh: &[f64]) -> Result<(), MetricError> {
    if x.len() != xh.len() {
        return Err(MetricError::LengthMismatch(x.len(), xh.len()));
    }
    if x.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(i) = x.iter().chain(xh).position(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite(i % x.len()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

pub fn rmse(x: &[f64], xh: &[f64]) -> Result<f64, MetricError> {
    check(x, xh)?;
    let sse: f64 = x.iter().zip(xh).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sse / x.len() as f64).sqrt())
}

pub fn mae(x: &[f64], xh: &[f64]) -> Result<f64, MetricError> {
    check(x, xh)?;
    Ok(x.iter().zip(xh).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

pub fn r_squared(x: &[f64], xh: &[f64]) -> Result<f64, MetricError> {
    check(x, xh)?;
    let m = mean(x);
    let sst: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    if sst == 0.0 {
        return Err(MetricError::ConstantTruth);
    }
    let sse: f64 = x.iter().zip(xh).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

/// Variance accounted for, in percent. Blind to a constant offset.
pub fn vaf(x: &[f64], xh: &[f64]) -> Result<f64, MetricError> {
    check(x, xh)?;
    let var_x = variance(x);
    if var_x == 0.0 {
        return Err(MetricError::ConstantTruth);
    }
    let resid: Vec<f64> = x.iter().zip(xh).map(|(a, b)| a - b).collect();
    Ok((1.0 - variance(&resid) / var_x) * 100.0)
}

pub fn velocity_norms(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().map(|v| v.norm()).collect()
}

fn axis(v: &[Vector3<f64>], i: usize) -> Vec<f64> {
    v.iter().map(|v| v[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub rmse: f64,
    pub mae: f64,
    pub r_squared: f64,
    pub vaf: f64,
}

impl RegressionReport {
    pub fn new(x: &[f64], xh: &[f64]) -> Result<Self, MetricError> {
        Ok(Self {
            rmse: rmse(x, xh)?,
            mae: mae(x, xh)?,
            r_squared: r_squared(x, xh)?,
            vaf: vaf(x, xh)?,
        })
    }

    /// Metrics on the velocity-norm series.
    pub fn on_norms(truth: &[Vector3<f64>], est: &[Vector3<f64>]) -> Result<Self, MetricError> {
        Self::new(&velocity_norms(truth), &velocity_norms(est))
    }
}

pub fn rmse_per_axis(truth: &[Vector3<f64>], est: &[Vector3<f64>]) -> Result<Vector3<f64>, MetricError> {
    let mut out = Vector3::zeros();
    for i in 0..3 {
        out[i] = rmse(&axis(truth, i), &axis(est, i))?;
    }
    Ok(out)
}

pub fn mae_per_axis(truth: &[Vector3<f64>], est: &[Vector3<f64>]) -> Result<Vector3<f64>, MetricError> {
    let mut out = Vector3::zeros();
    for i in 0..3 {
        out[i] = mae(&axis(truth, i), &axis(est, i))?;
    }
    Ok(out)
}

/// RMSE of the full velocity vector error, `sqrt(mean |v - v_hat|^2 / 3)`.
pub fn rmse_vector(truth: &[Vector3<f64>], est: &[Vector3<f64>]) -> Result<f64, MetricError> {
    let r = rmse_per_axis(truth, est)?;
    Ok((r.norm_squared() / 3.0).sqrt())
}

/// Two-sided chi-square interval with the given coverage for the average of
/// `runs` independent NEES values of `dof` degrees of freedom.
pub fn chi2_band(dof: usize, runs: usize, coverage: f64) -> Result<(f64, f64), MetricError> {
    if dof == 0 || runs == 0 || !(coverage > 0.0 && coverage < 1.0) {
        return Err(MetricError::Band(format!("dof {dof}, runs {runs}, coverage {coverage}")));
    }
    let k = (dof * runs) as f64;
    let dist = ChiSquared::new(k).map_err(|e| MetricError::Band(e.to_string()))?;
    let tail = 0.5 * (1.0 - coverage);
    let n = runs as f64;
    Ok((dist.inverse_cdf(tail) / n, dist.inverse_cdf(1.0 - tail) / n))
}

/// `e^T P^-1 e` by Cholesky.
pub fn nees_value(e: &nalgebra::SVector<f64, STATE_DIM>, p: &StateMatrix) -> Option<f64> {
    let chol = p.cholesky()?;
    Some(e.dot(&chol.solve(e)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeesReport {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Single-run 95% band.
    pub band: (f64, f64),
    pub fraction_inside: f64,
}

/// NEES at every measurement update of `run`. `truth[i]` is the true state,
/// biases included, at the time of update `i`.
pub fn nees(run: &FilterRun, truth: &[NavState]) -> Result<NeesReport, MetricError> {
    if run.updates.len() != truth.len() {
        return Err(MetricError::LengthMismatch(run.updates.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut values = Vec::with_capacity(truth.len());
    for (i, (u, t)) in run.updates.iter().zip(truth).enumerate() {
        if (u.time - t.time).abs() > TIME_ALIGN_TOL {
            return Err(MetricError::Misaligned(i));
        }
        let e = nav_error(t, &u.nav);
        values.push(nees_value(&e, &u.covariance).ok_or(MetricError::Singular(i))?);
    }
    let band = chi2_band(STATE_DIM, 1, 0.95)?;
    let inside = values.iter().filter(|v| (band.0..=band.1).contains(*v)).count();
    Ok(NeesReport {
        mean: mean(&values),
        fraction_inside: inside as f64 / values.len() as f64,
        values,
        band,
    })
}

/// Ensemble NEES over Monte Carlo runs of equal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleNees {
    /// Average across runs at each epoch.
    pub epoch_mean: Vec<f64>,
    /// Average of `epoch_mean` over epochs.
    pub mean: f64,
    /// 95% band for an average of `runs` values.
    pub band: (f64, f64),
    pub fraction_inside: f64,
    pub runs: usize,
}

impl EnsembleNees {
    pub fn mean_inside(&self) -> bool {
        (self.band.0..=self.band.1).contains(&self.mean)
    }
}

pub fn ensemble_nees(reports: &[NeesReport]) -> Result<EnsembleNees, MetricError> {
    let first = reports.first().ok_or(MetricError::Empty)?;
    let len = first.values.len();
    if let Some(r) = reports.iter().find(|r| r.values.len() != len) {
        return Err(MetricError::LengthMismatch(len, r.values.len()));
    }
    let runs = reports.len();
    let epoch_mean: Vec<f64> = (0..len)
        .map(|k| reports.iter().map(|r| r.values[k]).sum::<f64>() / runs as f64)
        .collect();
    let band = chi2_band(STATE_DIM, runs, 0.95)?;
    let inside = epoch_mean.iter().filter(|v| (band.0..=band.1).contains(*v)).count();
    Ok(EnsembleNees {
        mean: mean(&epoch_mean),
        fraction_inside: inside as f64 / len as f64,
        epoch_mean,
        band,
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateGroup {
    Velocity,
    Misalignment,
    AccelBias,
    GyroBias,
}

impl StateGroup {
    pub const ALL: [StateGroup; 4] = [
        StateGroup::Velocity,
        StateGroup::Misalignment,
        StateGroup::AccelBias,
        StateGroup::GyroBias,
    ];

    pub fn offset(self) -> usize {
        match self {
            StateGroup::Velocity => idx::VEL,
            StateGroup::Misalignment => idx::ATT,
            StateGroup::AccelBias => idx::ACC_BIAS,
            StateGroup::GyroBias => idx::GYR_BIAS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: StateGroup,
    pub aware_mean_std: f64,
    pub neglect_mean_std: f64,
    pub aware_final_sum_std: f64,
    pub neglect_final_sum_std: f64,
    pub mean_std_improvement_pct: f64,
    pub final_sum_improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub groups: Vec<GroupSummary>,
}

impl UncertaintySummary {
    pub fn group(&self, g: StateGroup) -> &GroupSummary {
        self.groups.iter().find(|s| s.group == g).expect("all groups present")
    }
}

/// Relative reduction from `neglect` to `aware`, percent.
pub fn improvement_pct(aware: f64, neglect: f64) -> f64 {
    if neglect == 0.0 {
        if aware == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        (neglect - aware) / neglect * 100.0
    }
}

fn group_stats(run: &FilterRun, offset: usize) -> (f64, f64) {
    let n = run.rows.len() as f64;
    let time_avg = run
        .rows
        .iter()
        .map(|r| (0..3).map(|i| r.p_diag[offset + i].max(0.0).sqrt()).sum::<f64>() / 3.0)
        .sum::<f64>()
        / n;
    let last = run.rows.last().expect("non-empty run");
    let final_sum = (0..3).map(|i| last.p_diag[offset + i].max(0.0).sqrt()).sum();
    (time_avg, final_sum)
}

/// Per-group average std over time and final summed std, with the
/// percentage improvement of `aware` over `neglect`.
pub fn uncertainty_summary(aware: &FilterRun, neglect: &FilterRun) -> Result<UncertaintySummary, MetricError> {
    if aware.rows.len() != neglect.rows.len() {
        return Err(MetricError::LengthMismatch(aware.rows.len(), neglect.rows.len()));
    }
    if aware.rows.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(i) = aware
        .rows
        .iter()
        .zip(&neglect.rows)
        .position(|(a, b)| (a.time - b.time).abs() > TIME_ALIGN_TOL)
    {
        return Err(MetricError::Misaligned(i));
    }
    let groups = StateGroup::ALL
        .iter()
        .map(|&group| {
            let (am, af) = group_stats(aware, group.offset());
            let (nm, nf) = group_stats(neglect, group.offset());
            GroupSummary {
                group,
                aware_mean_std: am,
                neglect_mean_std: nm,
                aware_final_sum_std: af,
                neglect_final_sum_std: nf,
                mean_std_improvement_pct: improvement_pct(am, nm),
                final_sum_improvement_pct: improvement_pct(af, nf),
            }
        })
        .collect();
    Ok(UncertaintySummary { groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ekf::{FilterRun, RunMode, RunRow, RunTag, StateVector};

    fn run_with_std(std: f64, n: usize) -> FilterRun {
        let rows = (0..n)
            .map(|k| RunRow {
                time: k as f64 * 0.01,
                x: StateVector::zeros(),
                p_diag: StateVector::repeat((std * (1.0 + k as f64)).powi(2)),
                innovation: Vector3::zeros(),
                nav: NavState::at_rest(0.0),
            })
            .collect();
        FilterRun {
            tag: RunTag {
                mode: RunMode::Aware,
                rho: 0.0,
                seed: 0,
            },
            rows,
            updates: vec![],
            psd_clamps: 0,
            cross_cov_limited: 0,
        }
    }

    #[test]
    fn hand_cases() {
        let x = [1.0, 2.0, 3.0];
        let xh = [1.0, 2.0, 4.0];
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert!((rmse(&x, &xh).unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mae(&x, &x).unwrap(), 0.0);
        assert!((mae(&x, &xh).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r_squared(&x, &x).unwrap(), 1.0);
        assert_eq!(r_squared(&x, &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(vaf(&x, &x).unwrap(), 100.0);
        assert_eq!(vaf(&x, &[3.5, 4.5, 5.5]).unwrap(), 100.0);
    }

    #[test]
    fn rejects_bad_series() {
        assert_eq!(rmse(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch(1, 2)));
        assert_eq!(mae(&[], &[]), Err(MetricError::Empty));
        assert_eq!(r_squared(&[2.0, 2.0], &[1.0, 2.0]), Err(MetricError::ConstantTruth));
        assert_eq!(vaf(&[2.0, 2.0], &[1.0, 2.0]), Err(MetricError::ConstantTruth));
        assert_eq!(rmse(&[1.0, f64::NAN], &[1.0, 2.0]), Err(MetricError::NonFinite(1)));
    }

    #[test]
    fn norm_report_matches_components() {
        let t = vec![Vector3::new(3.0, 4.0, 0.0), Vector3::new(0.0, 0.0, 2.0)];
        let e = vec![Vector3::new(3.0, 4.0, 0.0), Vector3::new(0.0, 0.0, 1.0)];
        let r = RegressionReport::on_norms(&t, &e).unwrap();
        assert!((r.rmse - (0.5f64).sqrt()).abs() < 1e-15);
        assert_eq!(r.mae, 0.5);
        assert_eq!(rmse_per_axis(&t, &e).unwrap(), Vector3::new(0.0, 0.0, (0.5f64).sqrt()));
    }

    #[test]
    fn chi2_band_values() {
        let (lo, hi) = chi2_band(12, 1, 0.95).unwrap();
        assert!((lo - 4.403789).abs() < 1e-5);
        assert!((hi - 23.336664).abs() < 1e-5);
        let (lo, hi) = chi2_band(12, 50, 0.95).unwrap();
        assert!((lo - 10.680371).abs() < 1e-5 && (hi - 13.395383).abs() < 1e-5, "{lo} {hi}");
        assert!(chi2_band(0, 1, 0.95).is_err());
    }

    #[test]
    fn nees_scaling() {
        let e = StateVector::from_fn(|i, _| 0.1 * (i as f64 + 1.0));
        let p = StateMatrix::from_diagonal(&e.map(|v| v * v));
        assert!((nees_value(&e, &p).unwrap() - 12.0).abs() < 1e-12);
        assert!((nees_value(&e, &(p * 0.1)).unwrap() - 120.0).abs() < 1e-9);
        assert_eq!(nees_value(&StateVector::zeros(), &p).unwrap(), 0.0);
        assert!(nees_value(&e, &StateMatrix::zeros()).is_none());
    }

    #[test]
    fn gaussian_nees_mean_near_dof() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::seeded(9);
        let l = StateMatrix::from_fn(|i, j| if i >= j { 0.3 + 0.1 * (i + j) as f64 } else { 0.0 });
        let p = l * l.transpose();
        let n = 20_000;
        let total: f64 = (0..n)
            .map(|_| {
                let z = StateVector::from_fn(|_, _| StandardNormal.sample(&mut rng));
                nees_value(&(l * z), &p).unwrap()
            })
            .sum();
        let m = total / n as f64;
        // standard error of the mean is sqrt(24 / n) ~ 0.035
        assert!((m - 12.0).abs() < 0.15, "{m}");
    }

    #[test]
    fn summary_identical_and_scaled() {
        let a = run_with_std(0.1, 50);
        let s = uncertainty_summary(&a, &a).unwrap();
        for g in &s.groups {
            assert_eq!(g.mean_std_improvement_pct, 0.0);
            assert_eq!(g.final_sum_improvement_pct, 0.0);
        }
        let n = run_with_std(0.11, 50);
        let s = uncertainty_summary(&a, &n).unwrap();
        for g in &s.groups {
            assert!((g.mean_std_improvement_pct - 100.0 / 11.0).abs() < 1e-9);
            assert!((g.final_sum_improvement_pct - 100.0 / 11.0).abs() < 1e-9);
        }
    }

    #[test]
    fn summary_rejects_misaligned() {
        let a = run_with_std(0.1, 50);
        let b = run_with_std(0.1, 49);
        assert!(matches!(uncertainty_summary(&a, &b), Err(MetricError::LengthMismatch(50, 49))));
        let mut c = run_with_std(0.1, 50);
        c.rows[7].time += 1e-3;
        assert_eq!(uncertainty_summary(&a, &c), Err(MetricError::Misaligned(7)));
    }
}
