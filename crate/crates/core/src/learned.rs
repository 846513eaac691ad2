//! The Kalman filter with its gain produced by the recurrent network, and
//! the reverse pass through the unrolled filter-plus-network recursion.
//!
//! Per step:
//! ```text
//! x̄_t  = x̂_{t−1} + dt·u_t
//! K_t  = net(features(z_t, z_{t−1}, x̂_{t−1}, x̄_{t−1}, x̄_{t−2}, x̄_t, u_t, dt), h_{t−1})
//! x̂_t  = x̄_t + K_t (z_t − x̄_t)
//! ```
//! The filter starts from the first position fix with `u_0 = 0`, and the
//! network from a zeroed hidden state.

use crate::error::{Error, Result};
use crate::filter::{
    controls_from_measurements, run_gain_injected_kf, FilterTrace, GainContext, InjectedGain, Mat3, Measurement,
    StateEstimate, Vec3,
};
use crate::network::{
    backward_step, build_features, features_backward, forward_step_cached, FeatureInputs, GainNetworkParams,
    GainNetworkState, OutputGrads, StepCache,
};

/// Forward pass of one window, with everything the reverse pass needs.
pub(crate) struct WindowForward {
    caches: Vec<StepCache>,
    innovations: Vec<Vec3>,
    pub updated: Vec<Vec3>,
}

pub(crate) fn forward_window(params: &GainNetworkParams, meas: &[Measurement], dt: f64) -> Result<WindowForward> {
    let first = meas.first().ok_or(Error::Empty("window"))?;
    let init = first.position;
    let mut state = GainNetworkState::zeros(params.shape());
    let (mut xhat_prev, mut xbar_prev, mut xbar_prev2) = (init, init, init);
    let mut caches = Vec::with_capacity(meas.len());
    let mut innovations = Vec::with_capacity(meas.len());
    let mut updated = Vec::with_capacity(meas.len());
    for (t, z) in meas.iter().enumerate() {
        let v = z.velocity.ok_or(Error::Empty("measurement velocity"))?;
        // the filter starts at the first fix; nothing to predict before it
        let u = if t == 0 { Vec3::zeros() } else { v };
        let xbar = xhat_prev + u * dt;
        let feat = build_features(&FeatureInputs {
            measurement: z,
            previous_measurement: &meas[t.saturating_sub(1)],
            prev_updated: xhat_prev,
            prev_predicted: xbar_prev,
            prev_prev_predicted: xbar_prev2,
            predicted: xbar,
            control: u,
            dt,
        });
        let cache = forward_step_cached(params, &state, &feat)?;
        state = cache.next_state();
        let nu = z.position - xbar;
        let xhat = xbar + cache.outputs().k * nu;
        if !xhat.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss { step: t });
        }
        caches.push(cache);
        innovations.push(nu);
        updated.push(xhat);
        xbar_prev2 = xbar_prev;
        xbar_prev = xbar;
        xhat_prev = xhat;
    }
    Ok(WindowForward {
        caches,
        innovations,
        updated,
    })
}

/// Gradient of `Σ_t ⟨d_updated_t, x̂_t⟩` with respect to the parameters,
/// through both the network recurrence and the filter recursion.
pub(crate) fn backward_window(params: &GainNetworkParams, fwd: &WindowForward, d_updated: &[Vec3]) -> GainNetworkParams {
    let n = fwd.caches.len();
    debug_assert_eq!(d_updated.len(), n);
    let mut a_xhat = d_updated.to_vec();
    let mut a_xbar = vec![Vec3::zeros(); n];
    let mut grads = params.zeros_like();
    let mut dh = GainNetworkState::zeros(params.shape());
    for t in (0..n).rev() {
        let cache = &fwd.caches[t];
        let g = a_xhat[t];
        let nu = fwd.innovations[t];
        let d_gain: Mat3 = g * nu.transpose();
        let d_nu = cache.outputs().k.transpose() * g;
        a_xbar[t] += g - d_nu;

        let (d_feat, dh_prev) = backward_step(params, cache, &OutputGrads::gain_only(d_gain), &dh, &mut grads);
        dh = dh_prev;
        let fg = features_backward(&d_feat);
        a_xbar[t] += fg.predicted;
        if t >= 1 {
            a_xhat[t - 1] += fg.prev_updated;
            a_xbar[t - 1] += fg.prev_predicted;
            // x̄_t = x̂_{t−1} + dt·u_t
            let carry = a_xbar[t];
            a_xhat[t - 1] += carry;
        }
        if t >= 2 {
            a_xbar[t - 2] += fg.prev_prev_predicted;
        }
    }
    grads
}

/// Runs the learned filter over a whole measurement sequence through the
/// generic gain-injected recursion. The covariance carried in the trace is
/// the network's predicted covariance updated with `S̄ − S̄K`.
pub fn run_network_filter(params: &GainNetworkParams, measurements: &[Measurement], dt: f64) -> Result<FilterTrace> {
    let controls = controls_from_measurements(measurements, dt)?;
    let first = measurements.first().ok_or(Error::Empty("measurement sequence"))?;
    let init = StateEstimate {
        mean: first.position,
        covariance: Mat3::identity(),
    };
    let mut state = GainNetworkState::zeros(params.shape());
    let (mut xbar_prev, mut xbar_prev2) = (init.mean, init.mean);
    let mut source = |ctx: &GainContext<'_>| -> Result<InjectedGain> {
        let feat = build_features(&FeatureInputs {
            measurement: ctx.measurement,
            previous_measurement: ctx.previous_measurement,
            prev_updated: ctx.previous.mean,
            prev_predicted: xbar_prev,
            prev_prev_predicted: xbar_prev2,
            predicted: ctx.predicted.mean,
            control: ctx.control.velocity,
            dt: ctx.control.dt,
        });
        let cache = forward_step_cached(params, &state, &feat)?;
        state = cache.next_state();
        xbar_prev2 = xbar_prev;
        xbar_prev = ctx.predicted.mean;
        Ok(InjectedGain {
            gain: cache.outputs().k,
            predicted_cov: Some(cache.outputs().sbar),
        })
    };
    run_gain_injected_kf(measurements, &controls, &Mat3::zeros(), &mut source, &init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, NetworkShape};
    use crate::world::{corrupt, generate_trajectory, NoiseSpec, TrajectorySpec};

    #[test]
    fn window_forward_matches_generic_recursion() {
        let params = init_params(2, NetworkShape::default());
        let truth = generate_trajectory(&TrajectorySpec::new(60, 2.0, 9.0, 3)).unwrap();
        let meas = corrupt(&truth, &NoiseSpec::training(), 4).unwrap().measurements;
        let fwd = forward_window(&params, &meas, truth.dt).unwrap();
        let trace = run_network_filter(&params, &meas, truth.dt).unwrap();
        assert_eq!(fwd.updated, trace.updated_means());
    }
}
