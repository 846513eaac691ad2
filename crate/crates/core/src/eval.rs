//! Localization metrics and the comparison of filters on a shared test
//! stream.

use std::io::Write;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::RoundReport;
use crate::filter::{controls_from_measurements, initial_state, run_analytic_kf, Mat3, Measurement, NoiseModel, Vec3};
use crate::learned::run_network_filter;
use crate::network::GainNetworkParams;
use crate::world::{corrupt, GroundTruth, NoiseSpec, TrajectoryFile};

/// Per-step Euclidean position errors.
pub fn instantaneous_errors(estimates: &[Vec3], truth: &[Vec3]) -> Result<Vec<f64>> {
    if estimates.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "estimates vs truth",
            left: estimates.len(),
            right: truth.len(),
        });
    }
    if estimates.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    Ok(estimates.iter().zip(truth).map(|(e, x)| (e - x).norm()).collect())
}

/// `√((1/T) Σ_t ‖x̂_t − x_t‖²)`.
pub fn rt_le(estimates: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    instantaneous_errors(estimates, truth)?;
    let sum: f64 = estimates.iter().zip(truth).map(|(e, x)| (e - x).norm_squared()).sum();
    Ok((sum / truth.len() as f64).sqrt())
}

/// Empirical CDF as `(threshold, P(error ≤ threshold))` at every distinct
/// error value, ascending.
pub fn error_cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        let p = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == e => last.1 = p,
            _ => out.push((e, p)),
        }
    }
    out
}

/// Evaluates an [`error_cdf`] at `x`.
pub fn cdf_at(cdf: &[(f64, f64)], x: f64) -> f64 {
    match cdf.partition_point(|&(t, _)| t <= x) {
        0 => 0.0,
        i => cdf[i - 1].1,
    }
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(errors: &[f64], q: f64) -> f64 {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub candidate: String,
    pub rt_le: f64,
    pub errors: Vec<f64>,
    pub cdf: Vec<(f64, f64)>,
    pub max_error: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl MetricsReport {
    pub fn new(candidate: impl Into<String>, estimates: &[Vec3], truth: &[Vec3]) -> Result<Self> {
        let errors = instantaneous_errors(estimates, truth)?;
        Ok(Self {
            candidate: candidate.into(),
            rt_le: rt_le(estimates, truth)?,
            cdf: error_cdf(&errors),
            max_error: errors.iter().copied().fold(0.0, f64::max),
            p50: percentile(&errors, 0.5),
            p90: percentile(&errors, 0.9),
            p99: percentile(&errors, 0.99),
            errors,
        })
    }
}

/// Noisy test measurements with the matching ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSequence {
    pub dt: f64,
    pub measurements: Vec<Measurement>,
    pub truth: Vec<Vec3>,
    /// True velocities, when known; needed for the oracle noise model.
    pub velocities: Option<Vec<Vec3>>,
}

impl TestSequence {
    pub fn from_truth(truth: &GroundTruth, noise: &NoiseSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            dt: truth.dt,
            measurements: corrupt(truth, noise, seed)?.measurements,
            truth: truth.positions.clone(),
            velocities: Some(truth.velocities.clone()),
        })
    }

    pub fn from_file(file: &TrajectoryFile) -> Result<Self> {
        let truth = file.truth.as_ref().ok_or(Error::Empty("ground truth of test file"))?;
        Ok(Self {
            dt: file.dt(),
            measurements: file.measurements.clone(),
            truth: truth.positions.clone(),
            velocities: Some(truth.velocities.clone()),
        })
    }

    /// SHA-256 of the measurement stream as little-endian f64 bytes.
    pub fn stream_hash(&self) -> String {
        stream_hash(&self.measurements)
    }
}

pub fn stream_hash(measurements: &[Measurement]) -> String {
    let mut h = Sha256::new();
    for m in measurements {
        for v in m.position.iter().chain(m.velocity.iter().flat_map(|v| v.iter())) {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Noise model the generator actually used: measurement covariance
/// `σ_p²·I` and, per axis, process variance `dt²·mean_t(std_a(t)²)` from
/// the velocity noise. The bias is not modeled, and both variances are
/// floored at [`MIN_VARIANCE`] so that noise-free data stays invertible.
pub fn true_noise_model(velocities: &[Vec3], noise: &NoiseSpec, dt: f64) -> Result<NoiseModel> {
    if velocities.is_empty() {
        return Err(Error::Empty("velocity sequence"));
    }
    let mut var = Vec3::zeros();
    for v in velocities {
        var += Vec3::from_fn(|a, _| noise.velocity_std(v[a]).powi(2));
    }
    var *= dt * dt / velocities.len() as f64;
    let var = var.map(|v| v.max(MIN_VARIANCE));
    Ok(NoiseModel::diagonal(var, Vec3::repeat(noise.position_std.powi(2).max(MIN_VARIANCE))))
}

/// A filter under comparison.
#[derive(Debug, Clone, PartialEq)]
pub enum Candidate {
    AnalyticKf { name: String, noise: NoiseModel },
    Network { name: String, params: GainNetworkParams },
}

impl Candidate {
    pub fn name(&self) -> &str {
        match self {
            Candidate::AnalyticKf { name, .. } | Candidate::Network { name, .. } => name,
        }
    }

    pub fn estimate(&self, measurements: &[Measurement], dt: f64) -> Result<Vec<Vec3>> {
        match self {
            Candidate::AnalyticKf { noise, .. } => {
                let controls = controls_from_measurements(measurements, dt)?;
                let first = measurements.first().ok_or(Error::Empty("measurement sequence"))?;
                let init = initial_state(first, &noise.meas_cov);
                Ok(run_analytic_kf(measurements, &controls, noise, &init)?.updated_means())
            }
            Candidate::Network { params, .. } => Ok(run_network_filter(params, measurements, dt)?.updated_means()),
        }
    }
}

pub const MIN_VARIANCE: f64 = 1e-12;

pub const RAW_GNSS: &str = "gnss";

/// Raw GNSS baseline plus the analytic filter with the true and with
/// identity covariances.
pub fn baseline_candidates(test: &TestSequence, noise: &NoiseSpec) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    if let Some(v) = &test.velocities {
        out.push(Candidate::AnalyticKf {
            name: "kf-true".into(),
            noise: true_noise_model(v, noise, test.dt)?,
        });
    }
    out.push(Candidate::AnalyticKf {
        name: "kf-identity".into(),
        noise: NoiseModel {
            state_cov: Mat3::identity(),
            meas_cov: Mat3::identity(),
        },
    });
    Ok(out)
}

/// Metrics of a trained network on a test sequence.
pub fn evaluate_network(params: &GainNetworkParams, test: &TestSequence) -> Result<MetricsReport> {
    let est = run_network_filter(params, &test.measurements, test.dt)?;
    MetricsReport::new("network", &est.updated_means(), &test.truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Raw GNSS first, then the candidates in the given order.
    pub reports: Vec<MetricsReport>,
    pub stream_hash: String,
}

impl Comparison {
    pub fn get(&self, candidate: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.candidate == candidate)
    }

    /// `candidate,rt_le_m,max_err_m,p50_m,p90_m,p99_m`.
    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "candidate,rt_le_m,max_err_m,p50_m,p90_m,p99_m")?;
        for r in &self.reports {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.candidate, r.rt_le, r.max_error, r.p50, r.p90, r.p99
            )?;
        }
        Ok(())
    }

    /// `candidate,threshold_m,probability`.
    pub fn write_cdf_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "candidate,threshold_m,probability")?;
        for r in &self.reports {
            for (t, p) in &r.cdf {
                writeln!(w, "{},{t},{p}", r.candidate)?;
            }
        }
        Ok(())
    }
}

/// Runs every candidate on its own copy of the test stream. Each copy is
/// hashed before use and all hashes must agree.
pub fn compare(test: &TestSequence, candidates: &[Candidate]) -> Result<Comparison> {
    let hash = test.stream_hash();
    let raw: Vec<Vec3> = test.measurements.iter().map(|m| m.position).collect();
    let mut reports = vec![MetricsReport::new(RAW_GNSS, &raw, &test.truth)?];
    let runs: Vec<Result<(String, MetricsReport)>> = candidates
        .par_iter()
        .map(|c| {
            let stream = test.measurements.clone();
            let h = stream_hash(&stream);
            let est = c.estimate(&stream, test.dt)?;
            Ok((h, MetricsReport::new(c.name(), &est, &test.truth)?))
        })
        .collect();
    for run in runs {
        let (h, report) = run?;
        if h != hash {
            return Err(Error::Config(format!(
                "candidate `{}` saw a different measurement stream",
                report.candidate
            )));
        }
        reports.push(report);
    }
    Ok(Comparison {
        reports,
        stream_hash: hash,
    })
}

/// Corrupts `truth` with `noise` under `seed` and compares the raw fixes,
/// the analytic baselines and `candidates` on that one stream.
pub fn run_comparison(
    truth: &GroundTruth,
    candidates: &[Candidate],
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Comparison> {
    let test = TestSequence::from_truth(truth, noise, seed)?;
    let mut all = baseline_candidates(&test, noise)?;
    all.extend_from_slice(candidates);
    compare(&test, &all)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergencePoint {
    pub round: usize,
    pub federated: f64,
    /// Lowest federated RT-LE up to and including this round.
    pub best_federated: f64,
    pub central: f64,
}

/// Federated test RT-LE per round against a constant centralized reference.
pub fn convergence_curve(rounds: &[RoundReport], central_rtle: f64) -> Vec<ConvergencePoint> {
    let mut points: Vec<ConvergencePoint> = rounds
        .iter()
        .map(|r| ConvergencePoint {
            round: r.round,
            federated: r.global_rtle,
            best_federated: r.global_rtle,
            central: central_rtle,
        })
        .collect();
    points.sort_by_key(|p| p.round);
    let mut best = f64::INFINITY;
    for p in &mut points {
        best = best.min(p.federated);
        p.best_federated = best;
    }
    points
}

pub fn write_convergence_csv<W: Write>(points: &[ConvergencePoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "round,federated_rtle_m,best_federated_rtle_m,central_rtle_m")?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.round, p.federated, p.best_federated, p.central)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rt_le_examples() {
        let t = vec![Vec3::zeros(); 4];
        assert_eq!(rt_le(&t, &t).unwrap(), 0.0);
        let e = vec![Vec3::new(3.0, 4.0, 0.0); 4];
        assert_eq!(rt_le(&e, &t).unwrap(), 5.0);
        let e = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 3.0, 0.0)];
        assert!((rt_le(&e, &t[..2]).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert!(rt_le(&e, &t).is_err());
        assert!(rt_le(&[], &[]).is_err());
    }

    #[test]
    fn cdf_examples() {
        let cdf = error_cdf(&[3.0, 1.0, 2.0]);
        assert_eq!(cdf_at(&cdf, 2.0), 2.0 / 3.0);
        assert_eq!(cdf_at(&cdf, 0.5), 0.0);
        assert_eq!(cdf_at(&cdf, 3.0), 1.0);
        let flat = error_cdf(&[2.0; 5]);
        assert_eq!(flat, vec![(2.0, 1.0)]);
        assert_eq!(cdf_at(&flat, 1.999), 0.0);
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let e: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&e, 0.5), 50.0);
        assert_eq!(percentile(&e, 0.99), 99.0);
        assert_eq!(percentile(&e, 1.0), 100.0);
    }

    #[test]
    fn convergence_rows_follow_rounds() {
        let mk = |round| RoundReport {
            round,
            clients: vec![],
            global_val_loss: 0.0,
            global_rtle: round as f64,
            bytes: 0,
        };
        let pts = convergence_curve(&[mk(2), mk(1), mk(3)], 1.5);
        assert_eq!(pts.iter().map(|p| p.round).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(pts.iter().all(|p| p.central == 1.5));
    }
}
