//! Built-in numerical checks: gain injection against the analytic filter,
//! end-to-end gradients against finite differences, and the algebra of
//! model aggregation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::federation::aggregate;
use crate::filter::{
    analytic_gain, run_analytic_kf, run_gain_injected_kf, ControlInput, GainContext, InjectedGain, Measurement,
    NoiseModel, StateEstimate, Vec3,
};
use crate::network::{init_params, GainNetworkParams, NetworkShape};
use crate::seeds::derive_seed;
use crate::trainer::{check_against_differences, compute_loss, loss_and_gradient, GradCheckReport};
use crate::world::{corrupt, generate_trajectory, NoiseSpec, Subtrajectory, TrajectorySpec};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A random sequence with random diagonal noise covariances.
pub fn random_filter_case(seed: u64, len: usize) -> (Vec<Measurement>, Vec<ControlInput>, NoiseModel, StateEstimate) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = rng.random_range(0.05..0.5);
    let state_var = Vec3::from_fn(|_, _| rng.random_range(0.01..2.0));
    let meas_var = Vec3::from_fn(|_, _| rng.random_range(0.1..5.0));
    let mut x = Vec3::from_fn(|_, _| 10.0 * normal(&mut rng));
    let mut meas = Vec::with_capacity(len);
    let mut controls = Vec::with_capacity(len);
    for _ in 0..len {
        let v = Vec3::from_fn(|_, _| 5.0 * normal(&mut rng));
        x += v * dt;
        let z = x + Vec3::from_fn(|i, _| meas_var[i].sqrt() * normal(&mut rng));
        meas.push(Measurement::with_velocity(z, v));
        controls.push(ControlInput { velocity: v, dt });
    }
    let init = StateEstimate {
        mean: meas[0].position,
        covariance: crate::filter::Mat3::from_diagonal(&meas_var),
    };
    (meas, controls, NoiseModel::diagonal(state_var, meas_var), init)
}

/// Largest element-wise difference in means and covariances between the
/// analytic filter and the gain-injected filter fed analytic gains.
pub fn filter_equivalence_error(seed: u64, sequences: usize, len: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..sequences {
        let (meas, controls, noise, init) = random_filter_case(derive_seed(seed, "filter-case", k as u64), len);
        let analytic = run_analytic_kf(&meas, &controls, &noise, &init)?;
        let mut source = |ctx: &GainContext<'_>| -> Result<InjectedGain> {
            Ok(InjectedGain::gain_only(analytic_gain(&ctx.predicted.covariance, &noise.meas_cov)?))
        };
        let injected = run_gain_injected_kf(&meas, &controls, &noise.state_cov, &mut source, &init)?;
        for (a, b) in analytic.steps.iter().zip(&injected.steps) {
            worst = worst
                .max((a.updated_mean - b.updated_mean).abs().max())
                .max((a.updated_cov - b.updated_cov).abs().max())
                .max((a.gain - b.gain).abs().max());
        }
    }
    Ok(worst)
}

/// Gradient checks on length-`window` windows for each seed. `perturb`
/// scales the analytic gradient before comparison (1.0 for a real check).
pub fn gradient_check_reports(
    seeds: &[u64],
    window: usize,
    count: usize,
    step: f64,
    perturb: f64,
) -> Result<Vec<GradCheckReport>> {
    seeds
        .iter()
        .map(|&seed| {
            let truth = generate_trajectory(&TrajectorySpec::new(window, 0.7, 10.9, derive_seed(seed, "gc-trajectory", 0)))?;
            let meas = corrupt(&truth, &NoiseSpec::training(), derive_seed(seed, "gc-noise", 0))?.measurements;
            let sub = Subtrajectory {
                measurements: &meas,
                truth: &truth.positions,
                dt: truth.dt,
            };
            let params = init_params(derive_seed(seed, "gc-init", 0), NetworkShape::default());
            let (_, mut analytic) = loss_and_gradient(&params, &sub, 0.0)?;
            analytic.scale(perturb);
            check_against_differences(&params, &analytic, count, seed, step, |p| {
                compute_loss(p, &sub, 0.0).map(|e| e.loss)
            })
        })
        .collect()
}

fn max_abs_diff(a: &GainNetworkParams, b: &GainNetworkParams) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest deviation over the identity, selection, symmetry and
/// permutation properties of [`aggregate`].
pub fn aggregation_algebra_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = NetworkShape::default();
    let models: Vec<GainNetworkParams> = (0..4)
        .map(|i| init_params(derive_seed(seed, "agg-model", i), shape))
        .collect();
    let mut raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter_mut().for_each(|w| *w /= total);
    // renormalize away the rounding left by the division
    let drift = 1.0 - raw.iter().sum::<f64>();
    raw[0] += drift;

    let mut worst = max_abs_diff(&aggregate(&models[..1], &[1.0])?, &models[0]);
    for hot in 0..models.len() {
        let mut w = vec![0.0; models.len()];
        w[hot] = 1.0;
        worst = worst.max(max_abs_diff(&aggregate(&models, &w)?, &models[hot]));
    }
    let same = vec![models[1].clone(); 4];
    worst = worst.max(max_abs_diff(&aggregate(&same, &raw)?, &models[1]));

    let reference = aggregate(&models, &raw)?;
    for _ in 0..8 {
        let mut order: Vec<usize> = (0..models.len()).collect();
        order.shuffle(&mut rng);
        let m: Vec<GainNetworkParams> = order.iter().map(|&i| models[i].clone()).collect();
        let w: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
        worst = worst.max(max_abs_diff(&aggregate(&m, &w)?, &reference));
    }
    Ok(worst)
}
