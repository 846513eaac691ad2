//! Local adaptation: end-to-end training of one client's gain network
//! through the learned filter.
//!
//! The window loss is `(1/T) Σ_t ‖x̂_t − x_t‖² + γ‖θ‖²`. Updates are plain
//! SGD over windows in a seeded order, with optional gradient-norm clipping
//! and a decoupled weight-decay shrink after every step.

use std::io::Write;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::Vec3;
use crate::learned::{backward_window, forward_window};
use crate::network::GainNetworkParams;
use crate::seeds::derive_seed;
use crate::world::{ClientDataset, Split, Subtrajectory};

/// Window losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Decoupled shrink: every step multiplies θ by `1 − lr·weight_decay`.
    pub weight_decay: f64,
    /// γ of the ℓ2 term inside the loss.
    pub gamma: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.03,
            weight_decay: 0.0,
            gamma: 0.0,
            batch_size: 1,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate and weight decay both at 0.3. With one step per window
    /// this diverges on the default world; kept for comparison runs.
    pub fn aggressive() -> Self {
        Self {
            learning_rate: 0.3,
            weight_decay: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config("weight decay and gamma must be >= 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    /// Mean squared position error plus `γ‖θ‖²`.
    pub loss: f64,
    /// Mean squared position error alone.
    pub mse: f64,
    pub estimates: Vec<Vec3>,
}

fn mse_and_grad(estimates: &[Vec3], truth: &[Vec3]) -> (f64, Vec<Vec3>) {
    let n = estimates.len() as f64;
    let mut sum = 0.0;
    let grad = estimates
        .iter()
        .zip(truth)
        .map(|(e, x)| {
            let d = e - x;
            sum += d.norm_squared();
            d * (2.0 / n)
        })
        .collect();
    (sum / n, grad)
}

fn check_window(sub: &Subtrajectory<'_>) -> Result<()> {
    if sub.is_empty() {
        return Err(Error::Empty("window"));
    }
    if sub.truth.len() != sub.measurements.len() {
        return Err(Error::LengthMismatch {
            what: "window measurements vs truth",
            left: sub.measurements.len(),
            right: sub.truth.len(),
        });
    }
    Ok(())
}

fn finite_loss(loss: f64, estimates: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    if loss.is_finite() {
        return Ok(loss);
    }
    let step = estimates
        .iter()
        .zip(truth)
        .position(|(e, x)| !(e - x).norm_squared().is_finite())
        .unwrap_or(estimates.len().saturating_sub(1));
    Err(Error::NonFiniteLoss { step })
}

pub fn compute_loss(params: &GainNetworkParams, sub: &Subtrajectory<'_>, gamma: f64) -> Result<LossEval> {
    check_window(sub)?;
    let fwd = forward_window(params, sub.measurements, sub.dt)?;
    let (mse, _) = mse_and_grad(&fwd.updated, sub.truth);
    let loss = finite_loss(mse + gamma * params.squared_norm(), &fwd.updated, sub.truth)?;
    Ok(LossEval {
        loss,
        mse,
        estimates: fwd.updated,
    })
}

/// Loss and its exact gradient by reverse mode through the unrolled filter.
pub fn loss_and_gradient(
    params: &GainNetworkParams,
    sub: &Subtrajectory<'_>,
    gamma: f64,
) -> Result<(LossEval, GainNetworkParams)> {
    check_window(sub)?;
    let fwd = forward_window(params, sub.measurements, sub.dt)?;
    let (mse, d_updated) = mse_and_grad(&fwd.updated, sub.truth);
    let loss = finite_loss(mse + gamma * params.squared_norm(), &fwd.updated, sub.truth)?;
    let mut grads = backward_window(params, &fwd, &d_updated);
    if gamma != 0.0 {
        grads.add_scaled(params, 2.0 * gamma);
    }
    Ok((
        LossEval {
            loss,
            mse,
            estimates: fwd.updated,
        },
        grads,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean pre-update loss over the training windows.
    pub train_loss: f64,
    /// Mean loss over the validation windows (NaN without any).
    pub val_loss: f64,
    /// RT-LE over all validation steps (NaN without any).
    pub val_rtle: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    /// CSV with `epoch,train_loss,val_loss,val_rtle` and, when
    /// `with_timing`, a trailing wall-clock `seconds` column.
    pub fn write_csv<W: Write>(&self, mut w: W, with_timing: bool) -> std::io::Result<()> {
        write!(w, "epoch,train_loss,val_loss,val_rtle")?;
        writeln!(w, "{}", if with_timing { ",seconds" } else { "" })?;
        for e in &self.epochs {
            write!(w, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_rtle)?;
            if with_timing {
                write!(w, ",{:.6}", e.seconds)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitEval {
    pub loss: f64,
    pub rtle: f64,
}

/// Mean window loss and pooled RT-LE over one split.
pub fn evaluate_split(params: &GainNetworkParams, dataset: &ClientDataset, split: Split, gamma: f64) -> Result<SplitEval> {
    let mut loss = 0.0;
    let mut sq = 0.0;
    let mut steps = 0usize;
    let mut windows = 0usize;
    for sub in dataset.windows_in(split) {
        let eval = compute_loss(params, &sub, gamma)?;
        loss += eval.loss;
        sq += eval.mse * sub.len() as f64;
        steps += sub.len();
        windows += 1;
    }
    if windows == 0 {
        return Ok(SplitEval {
            loss: f64::NAN,
            rtle: f64::NAN,
        });
    }
    Ok(SplitEval {
        loss: loss / windows as f64,
        rtle: (sq / steps as f64).sqrt(),
    })
}

/// One SGD step: clip, descend, shrink.
pub fn apply_update(params: &mut GainNetworkParams, grads: &GainNetworkParams, cfg: &TrainConfig) {
    let mut scale = 1.0;
    if let Some(clip) = cfg.clip_norm {
        let norm = grads.norm();
        if norm > clip {
            scale = clip / norm;
        }
    }
    params.add_scaled(grads, -cfg.learning_rate * scale);
    if cfg.weight_decay != 0.0 {
        params.scale(1.0 - cfg.learning_rate * cfg.weight_decay);
    }
}

/// One pass over the training windows in an order seeded by
/// `(cfg.seed, epoch)`.
pub fn train_epoch(
    params: &GainNetworkParams,
    dataset: &ClientDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(GainNetworkParams, EpochStats)> {
    cfg.validate()?;
    let start = Instant::now();
    let train: Vec<Subtrajectory<'_>> = dataset.windows_in(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Empty("training windows"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epoch", epoch as u64)));

    let mut params = params.clone();
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let mut grads = params.zeros_like();
        for &w in batch {
            let (eval, g) = loss_and_gradient(&params, &train[w], cfg.gamma)?;
            if eval.loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged {
                    epoch,
                    window: w,
                    loss: eval.loss,
                });
            }
            total += eval.loss;
            grads.add_scaled(&g, 1.0 / batch.len() as f64);
        }
        apply_update(&mut params, &grads, cfg);
        if !params.is_finite() {
            return Err(Error::NonFinite { what: "parameters" });
        }
    }
    let val = evaluate_split(&params, dataset, Split::Validation, cfg.gamma)?;
    Ok((
        params,
        EpochStats {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss: val.loss,
            val_rtle: val.rtle,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// `cfg.epochs` epochs numbered from `first_epoch`, so that training split
/// into rounds sees the same shuffles as one uninterrupted run.
pub fn train_local_from(
    params: &GainNetworkParams,
    dataset: &ClientDataset,
    cfg: &TrainConfig,
    first_epoch: usize,
) -> Result<(GainNetworkParams, TrainReport)> {
    cfg.validate()?;
    let mut params = params.clone();
    let mut report = TrainReport::default();
    for epoch in first_epoch..first_epoch + cfg.epochs {
        let (next, stats) = train_epoch(&params, dataset, cfg, epoch)?;
        log::debug!(
            "client {} epoch {epoch}: train {:.4} val {:.4} rtle {:.3}",
            dataset.id,
            stats.train_loss,
            stats.val_loss,
            stats.val_rtle
        );
        params = next;
        report.epochs.push(stats);
    }
    Ok((params, report))
}

pub fn train_local(
    params: &GainNetworkParams,
    dataset: &ClientDataset,
    cfg: &TrainConfig,
) -> Result<(GainNetworkParams, TrainReport)> {
    train_local_from(params, dataset, cfg, 0)
}

/// Denominator floor for the relative error of near-zero gradients.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares `analytic` against central differences of `loss` for `count`
/// parameters drawn without replacement using `seed`.
pub fn check_against_differences(
    params: &GainNetworkParams,
    analytic: &GainNetworkParams,
    count: usize,
    seed: u64,
    step: f64,
    mut loss: impl FnMut(&GainNetworkParams) -> Result<f64>,
) -> Result<GradCheckReport> {
    let all: Vec<usize> = (0..params.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = all.choose_multiple(&mut rng, count.min(all.len())).copied().collect();
    picked.sort_unstable();
    let mut probe = params.clone();
    let mut entries = Vec::with_capacity(picked.len());
    for index in picked {
        let orig = probe.values()[index];
        probe.values_mut()[index] = orig + step;
        let up = loss(&probe)?;
        probe.values_mut()[index] = orig - step;
        let down = loss(&probe)?;
        probe.values_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.values()[index];
        entries.push(GradCheckEntry {
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_error })
}

/// End-to-end gradient check of the window loss.
pub fn gradient_check(
    params: &GainNetworkParams,
    sub: &Subtrajectory<'_>,
    gamma: f64,
    count: usize,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_gradient(params, sub, gamma)?;
    check_against_differences(params, &analytic, count, seed, step, |p| {
        compute_loss(p, sub, gamma).map(|e| e.loss)
    })
}
