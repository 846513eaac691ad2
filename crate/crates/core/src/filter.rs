//! Kalman filter recursion for a constant-velocity position model.
//!
//! State is the 3D position of a vehicle. The motion model is
//! `x̄ = x̂ + dt·u` (A = I, B = dt·I) where `u` is the measured velocity, and
//! the measurement model is a direct position fix (H = I). Two update paths
//! exist: the analytic filter computes the gain from the noise model, while
//! the gain-injected filter takes the gain from an external source such as
//! the learned gain network.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Symmetry tolerance for covariance matrices.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Smallest eigenvalue still accepted as positive semi-definite.
pub const PSD_TOL: f64 = -1e-9;
/// Largest condition number accepted for the innovation covariance.
pub const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateEstimate {
    pub mean: Vec3,
    pub covariance: Mat3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub velocity: Vec3,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub position: Vec3,
    pub velocity: Option<Vec3>,
}

impl Measurement {
    pub fn position(position: Vec3) -> Self {
        Self {
            position,
            velocity: None,
        }
    }

    pub fn with_velocity(position: Vec3, velocity: Vec3) -> Self {
        Self {
            position,
            velocity: Some(velocity),
        }
    }
}

/// Process (`state_cov`, R) and measurement (`meas_cov`, Q) covariances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub state_cov: Mat3,
    pub meas_cov: Mat3,
}

impl NoiseModel {
    pub fn diagonal(state_var: Vec3, meas_var: Vec3) -> Self {
        Self {
            state_cov: Mat3::from_diagonal(&state_var),
            meas_cov: Mat3::from_diagonal(&meas_var),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_psd(&self.state_cov, "state covariance")?;
        check_psd(&self.meas_cov, "measurement covariance")
    }
}

/// Measurement function `g` and its Jacobian. Only the direct position fix
/// is provided.
pub trait MeasurementModel {
    fn predict(&self, state: &Vec3) -> Vec3;
    fn jacobian(&self, state: &Vec3) -> Mat3;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMeasurement;

impl MeasurementModel for IdentityMeasurement {
    fn predict(&self, state: &Vec3) -> Vec3 {
        *state
    }

    fn jacobian(&self, _state: &Vec3) -> Mat3 {
        Mat3::identity()
    }
}

/// One step of a filter run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterStep {
    pub predicted_mean: Vec3,
    pub predicted_cov: Mat3,
    pub gain: Mat3,
    pub updated_mean: Vec3,
    pub updated_cov: Mat3,
    pub innovation: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterTrace {
    pub steps: Vec<FilterStep>,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn updated_means(&self) -> Vec<Vec3> {
        self.steps.iter().map(|s| s.updated_mean).collect()
    }

    pub fn last(&self) -> Option<&FilterStep> {
        self.steps.last()
    }
}

pub fn symmetrize(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Mat3) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub(crate) fn check_finite_vec(v: &Vec3, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what })
    }
}

pub(crate) fn check_finite_mat(m: &Mat3, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what })
    }
}

pub(crate) fn check_psd(m: &Mat3, what: &'static str) -> Result<()> {
    check_finite_mat(m, what)?;
    let min_eigenvalue = min_eigenvalue(m);
    if min_eigenvalue < PSD_TOL {
        return Err(Error::NotPsd {
            what,
            min_eigenvalue,
        });
    }
    Ok(())
}

/// `x̄ = x̂ + dt·u`.
pub fn predict_mean(prev: &StateEstimate, u: &ControlInput) -> Result<Vec3> {
    if !(u.dt.is_finite() && u.dt > 0.0) {
        return Err(Error::InvalidDt(u.dt));
    }
    check_finite_vec(&prev.mean, "previous mean")?;
    check_finite_vec(&u.velocity, "control velocity")?;
    Ok(prev.mean + u.velocity * u.dt)
}

/// `S̄ = Ŝ + R` (the state Jacobian is the identity).
pub fn predict_cov(prev_cov: &Mat3, state_cov: &Mat3) -> Result<Mat3> {
    check_psd(prev_cov, "previous covariance")?;
    check_psd(state_cov, "state covariance")?;
    Ok(symmetrize(&(prev_cov + state_cov)))
}

fn condition_number(m: &Mat3) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `K = S̄ (S̄ + Q)⁻¹`.
pub fn analytic_gain(pred_cov: &Mat3, meas_cov: &Mat3) -> Result<Mat3> {
    check_finite_mat(pred_cov, "predicted covariance")?;
    check_finite_mat(meas_cov, "measurement covariance")?;
    let innovation_cov = pred_cov + meas_cov;
    let condition = condition_number(&innovation_cov);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let inv = innovation_cov
        .try_inverse()
        .ok_or(Error::Singular { condition })?;
    Ok(pred_cov * inv)
}

/// `x̂ = x̄ + K (z − x̄)`.
pub fn update_mean(pred: &Vec3, z: &Measurement, gain: &Mat3) -> Vec3 {
    pred + gain * (z.position - IdentityMeasurement.predict(pred))
}

/// `Ŝ = (I − K) S̄`, symmetrized.
pub fn update_cov_analytic(pred_cov: &Mat3, gain: &Mat3) -> Mat3 {
    symmetrize(&((Mat3::identity() - gain) * pred_cov))
}

/// `Ŝ = S̄ − S̄ K`, symmetrized. Agrees with [`update_cov_analytic`] when
/// `S̄` and `K` commute.
pub fn update_cov_gain_form(pred_cov: &Mat3, gain: &Mat3) -> Mat3 {
    symmetrize(&(pred_cov - pred_cov * gain))
}

/// Initial estimate: the first position fix with the measurement covariance.
pub fn initial_state(first: &Measurement, meas_cov: &Mat3) -> StateEstimate {
    StateEstimate {
        mean: first.position,
        covariance: *meas_cov,
    }
}

fn check_lengths(measurements: &[Measurement], controls: &[ControlInput]) -> Result<()> {
    if measurements.is_empty() {
        return Err(Error::Empty("measurement sequence"));
    }
    if measurements.len() != controls.len() {
        return Err(Error::LengthMismatch {
            what: "measurements vs controls",
            left: measurements.len(),
            right: controls.len(),
        });
    }
    Ok(())
}

pub fn run_analytic_kf(
    measurements: &[Measurement],
    controls: &[ControlInput],
    noise: &NoiseModel,
    init: &StateEstimate,
) -> Result<FilterTrace> {
    check_lengths(measurements, controls)?;
    noise.validate()?;
    let mut state = *init;
    let mut steps = Vec::with_capacity(measurements.len());
    for (z, u) in measurements.iter().zip(controls) {
        check_finite_vec(&z.position, "measurement")?;
        let predicted_mean = predict_mean(&state, u)?;
        let predicted_cov = predict_cov(&state.covariance, &noise.state_cov)?;
        let gain = analytic_gain(&predicted_cov, &noise.meas_cov)?;
        let updated_mean = update_mean(&predicted_mean, z, &gain);
        let updated_cov = update_cov_analytic(&predicted_cov, &gain);
        steps.push(FilterStep {
            predicted_mean,
            predicted_cov,
            gain,
            updated_mean,
            updated_cov,
            innovation: z.position - predicted_mean,
        });
        state = StateEstimate {
            mean: updated_mean,
            covariance: updated_cov,
        };
    }
    Ok(FilterTrace { steps })
}

/// What a gain source sees at step `step`.
#[derive(Debug, Clone, Copy)]
pub struct GainContext<'a> {
    pub step: usize,
    /// Updated estimate from the previous step (the initial state at step 0).
    pub previous: &'a StateEstimate,
    /// Prediction for this step; the covariance is `Ŝ + R` from the
    /// configured state covariance.
    pub predicted: &'a StateEstimate,
    pub measurement: &'a Measurement,
    /// Measurement of the previous step (this step's measurement at step 0).
    pub previous_measurement: &'a Measurement,
    pub control: &'a ControlInput,
}

/// Gain for one step, optionally with the source's own predicted covariance,
/// which then replaces `Ŝ + R` in the covariance update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectedGain {
    pub gain: Mat3,
    pub predicted_cov: Option<Mat3>,
}

impl InjectedGain {
    pub fn gain_only(gain: Mat3) -> Self {
        Self {
            gain,
            predicted_cov: None,
        }
    }
}

pub trait GainSource {
    fn gain(&mut self, ctx: &GainContext<'_>) -> Result<InjectedGain>;
}

impl<F> GainSource for F
where
    F: FnMut(&GainContext<'_>) -> Result<InjectedGain>,
{
    fn gain(&mut self, ctx: &GainContext<'_>) -> Result<InjectedGain> {
        self(ctx)
    }
}

/// Kalman recursion with the gain supplied per step by `source`.
/// The covariance is carried with the `S̄ − S̄K` form.
pub fn run_gain_injected_kf<G: GainSource + ?Sized>(
    measurements: &[Measurement],
    controls: &[ControlInput],
    state_cov: &Mat3,
    source: &mut G,
    init: &StateEstimate,
) -> Result<FilterTrace> {
    check_lengths(measurements, controls)?;
    check_psd(state_cov, "state covariance")?;
    let mut state = *init;
    let mut steps = Vec::with_capacity(measurements.len());
    for (t, (z, u)) in measurements.iter().zip(controls).enumerate() {
        check_finite_vec(&z.position, "measurement")?;
        let predicted = StateEstimate {
            mean: predict_mean(&state, u)?,
            covariance: symmetrize(&(state.covariance + state_cov)),
        };
        let previous_measurement = if t == 0 { z } else { &measurements[t - 1] };
        let injected = source.gain(&GainContext {
            step: t,
            previous: &state,
            predicted: &predicted,
            measurement: z,
            previous_measurement,
            control: u,
        })?;
        if !injected.gain.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGain { step: t });
        }
        let predicted_cov = injected.predicted_cov.unwrap_or(predicted.covariance);
        let updated_mean = update_mean(&predicted.mean, z, &injected.gain);
        let updated_cov = update_cov_gain_form(&predicted_cov, &injected.gain);
        steps.push(FilterStep {
            predicted_mean: predicted.mean,
            predicted_cov,
            gain: injected.gain,
            updated_mean,
            updated_cov,
            innovation: z.position - predicted.mean,
        });
        state = StateEstimate {
            mean: updated_mean,
            covariance: updated_cov,
        };
    }
    Ok(FilterTrace { steps })
}

/// Controls taken from the measured velocity of each measurement. The
/// filter is initialized at the first fix, so the first control is zero.
pub fn controls_from_measurements(measurements: &[Measurement], dt: f64) -> Result<Vec<ControlInput>> {
    measurements
        .iter()
        .enumerate()
        .map(|(t, m)| {
            m.velocity
                .map(|v| ControlInput {
                    velocity: if t == 0 { Vec3::zeros() } else { v },
                    dt,
                })
                .ok_or(Error::Empty("measurement velocity"))
        })
        .collect()
}
