//! Federated averaging of client gain networks: local adaptation on every
//! client, weighted combination on the server, broadcast, repeat.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::encoded_len;
use crate::error::{Error, Result};
use crate::eval::{evaluate_network, TestSequence};
use crate::network::GainNetworkParams;
use crate::trainer::{evaluate_split, train_local_from, TrainConfig, TrainReport};
use crate::world::{ClientDataset, Split};

/// Allowed deviation of the combination weights' sum from one.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Uniform,
    /// `a_i = T_i / Σ T_j` over the clients' trajectory lengths.
    SizeProportional,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub weighting: Weighting,
    pub local_epochs: usize,
    /// Template for local training; its `epochs` and `seed` are replaced per
    /// round and per client.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            weighting: Weighting::SizeProportional,
            local_epochs: 5,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("at least one round is required".into()));
        }
        self.train.validate()
    }

    /// Local training config of `client`: `local_epochs` epochs seeded with
    /// `seed + client`.
    pub fn client_train_config(&self, client: u32) -> TrainConfig {
        TrainConfig {
            epochs: self.local_epochs,
            seed: self.seed.wrapping_add(client as u64),
            ..self.train.clone()
        }
    }
}

pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidWeights("no weights".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidWeights(format!("weight {w} is negative or not finite")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidWeights(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Combination weights for `datasets` under `weighting`.
pub fn combination_weights(weighting: &Weighting, datasets: &[ClientDataset]) -> Result<Vec<f64>> {
    let n = datasets.len();
    if n == 0 {
        return Err(Error::Empty("client list"));
    }
    let weights = match weighting {
        Weighting::Uniform => vec![1.0 / n as f64; n],
        Weighting::SizeProportional => {
            let total: usize = datasets.iter().map(|d| d.len()).sum();
            if total == 0 {
                return Err(Error::Empty("client datasets"));
            }
            datasets.iter().map(|d| d.len() as f64 / total as f64).collect()
        }
        Weighting::Explicit(w) => {
            if w.len() != n {
                return Err(Error::InvalidWeights(format!("{} weights for {n} clients", w.len())));
            }
            w.clone()
        }
    };
    validate_weights(&weights)?;
    Ok(weights)
}

fn canonical_order(a: (&GainNetworkParams, f64), b: (&GainNetworkParams, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| {
        a.0.values()
            .iter()
            .zip(b.0.values())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Element-wise weighted mean `Σ a_i θ_i`.
///
/// The inputs are put into a canonical order (weight descending, then
/// parameter values) and accumulated as `θ_0 + Σ a_i (θ_i − θ_0)` from the
/// first model in that order. The result therefore does not depend on the
/// order of the inputs, and returns the model itself bit for bit for a
/// single model, one-hot weights or identical models.
pub fn aggregate(models: &[GainNetworkParams], weights: &[f64]) -> Result<GainNetworkParams> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    if models.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: "models vs weights",
            left: models.len(),
            right: weights.len(),
        });
    }
    validate_weights(weights)?;
    if let Some(m) = models.iter().find(|m| !m.same_manifest(&models[0])) {
        return Err(Error::ManifestMismatch(format!(
            "models have {} and {} parameters",
            models[0].len(),
            m.len()
        )));
    }
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&i, &j| canonical_order((&models[i], weights[i]), (&models[j], weights[j])));
    let base = &models[order[0]];
    let mut out = base.clone();
    for (k, v) in out.values_mut().iter_mut().enumerate() {
        let b = base.values()[k];
        let mut acc = 0.0;
        for &i in &order[1..] {
            acc += weights[i] * (models[i].values()[k] - b);
        }
        *v = b + acc;
    }
    Ok(out)
}

/// Server-side combination of `(client id, model)` uploads.
pub fn aggregate_clients(uploads: &[(u32, GainNetworkParams)], weights: &[f64]) -> Result<GainNetworkParams> {
    let models: Vec<GainNetworkParams> = uploads.iter().map(|(_, m)| m.clone()).collect();
    aggregate(&models, weights)
}

/// Replaces every client model with a copy of the global one.
pub fn broadcast(global: &GainNetworkParams, clients: &mut [GainNetworkParams]) {
    for c in clients {
        c.clone_from(global);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRound {
    pub id: u32,
    /// Mean training loss of the last local epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_rtle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    pub clients: Vec<ClientRound>,
    /// Mean validation loss of the global model over all clients' windows.
    pub global_val_loss: f64,
    /// Test RT-LE of the global model (NaN without a test sequence).
    pub global_rtle: f64,
    /// N uploads plus N broadcasts of one checkpoint.
    pub bytes: usize,
}

/// Writes `round,client,train_loss,val_loss,rtle,bytes`, one row per client
/// followed by a `global` row per round. Client rows carry their validation
/// RT-LE, global rows the test RT-LE.
pub fn write_rounds_csv<W: Write>(rounds: &[RoundReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "round,client,train_loss,val_loss,rtle,bytes")?;
    for r in rounds {
        for c in &r.clients {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.round, c.id, c.train_loss, c.val_loss, c.val_rtle, r.bytes
            )?;
        }
        writeln!(w, "{},global,,{},{},{}", r.round, r.global_val_loss, r.global_rtle, r.bytes)?;
    }
    Ok(())
}

/// Mean validation loss of `params` over the validation windows of all
/// clients.
fn pooled_val_loss(params: &GainNetworkParams, datasets: &[ClientDataset], gamma: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for d in datasets {
        let n = d.count(Split::Validation);
        if n > 0 {
            sum += evaluate_split(params, d, Split::Validation, gamma)?.loss * n as f64;
            count += n;
        }
    }
    Ok(if count == 0 { f64::NAN } else { sum / count as f64 })
}

/// Runs `cfg.rounds` rounds from `init`. Clients adapt in parallel; the
/// result does not depend on scheduling since aggregation order is fixed.
pub fn run_federated(
    init: &GainNetworkParams,
    datasets: &[ClientDataset],
    cfg: &FedConfig,
    test: Option<&TestSequence>,
) -> Result<(GainNetworkParams, Vec<RoundReport>)> {
    cfg.validate()?;
    let weights = combination_weights(&cfg.weighting, datasets)?;
    let mut ids: Vec<u32> = datasets.iter().map(|d| d.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("client ids must be distinct".into()));
    }
    let bytes = 2 * datasets.len() * encoded_len(init);
    let mut global = init.clone();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let first_epoch = (round - 1) * cfg.local_epochs;
        let results: Vec<Result<(GainNetworkParams, TrainReport)>> = datasets
            .par_iter()
            .map(|d| train_local_from(&global, d, &cfg.client_train_config(d.id), first_epoch))
            .collect();
        let mut uploads = Vec::with_capacity(datasets.len());
        let mut clients = Vec::with_capacity(datasets.len());
        for (d, res) in datasets.iter().zip(results) {
            let (params, report) = res.map_err(|e| Error::ClientAborted {
                round,
                client: d.id,
                source: Box::new(e),
            })?;
            let stats = match report.last() {
                Some(s) => ClientRound {
                    id: d.id,
                    train_loss: s.train_loss,
                    val_loss: s.val_loss,
                    val_rtle: s.val_rtle,
                },
                None => {
                    let v = evaluate_split(&params, d, Split::Validation, cfg.train.gamma)?;
                    ClientRound {
                        id: d.id,
                        train_loss: f64::NAN,
                        val_loss: v.loss,
                        val_rtle: v.rtle,
                    }
                }
            };
            uploads.push((d.id, params));
            clients.push(stats);
        }
        let mut order: Vec<usize> = (0..uploads.len()).collect();
        order.sort_by_key(|&i| uploads[i].0);
        let sorted: Vec<(u32, GainNetworkParams)> = order.iter().map(|&i| uploads[i].clone()).collect();
        let sorted_weights: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
        global = aggregate_clients(&sorted, &sorted_weights)?;
        clients.sort_by_key(|c| c.id);

        let global_rtle = match test {
            Some(t) => evaluate_network(&global, t)?.rt_le,
            None => f64::NAN,
        };
        let global_val_loss = pooled_val_loss(&global, datasets, cfg.train.gamma)?;
        log::info!("round {round}: global val loss {global_val_loss:.4}, test rtle {global_rtle:.3}");
        reports.push(RoundReport {
            round,
            clients,
            global_val_loss,
            global_rtle,
            bytes,
        });
    }
    Ok((global, reports))
}

/// Single trainer over all clients' windows pooled together.
pub fn train_central(
    init: &GainNetworkParams,
    datasets: &[ClientDataset],
    cfg: &TrainConfig,
) -> Result<(GainNetworkParams, TrainReport)> {
    let pooled = ClientDataset::pooled(datasets)?;
    train_local_from(init, &pooled, cfg, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, NetworkShape};

    fn models(n: usize) -> Vec<GainNetworkParams> {
        (0..n).map(|i| init_params(i as u64 + 10, NetworkShape::default())).collect()
    }

    #[test]
    fn single_model_and_one_hot_are_exact() {
        let m = models(3);
        assert_eq!(aggregate(&m[..1], &[1.0]).unwrap(), m[0]);
        assert_eq!(aggregate(&m[..2], &[1.0, 0.0]).unwrap(), m[0]);
        assert_eq!(aggregate(&m, &[0.0, 0.0, 1.0]).unwrap(), m[2]);
    }

    #[test]
    fn identical_models_are_exact() {
        let m = vec![models(1)[0].clone(); 4];
        assert_eq!(aggregate(&m, &[0.1, 0.2, 0.3, 0.4]).unwrap(), m[0]);
    }

    #[test]
    fn bad_weights_are_rejected() {
        let m = models(2);
        assert!(matches!(aggregate(&m, &[0.5, 0.6]), Err(Error::InvalidWeights(_))));
        assert!(matches!(aggregate(&m, &[1.5, -0.5]), Err(Error::InvalidWeights(_))));
        assert!(matches!(aggregate(&m, &[1.0]), Err(Error::LengthMismatch { .. })));
        let other = init_params(
            1,
            NetworkShape {
                head: 8,
                ..NetworkShape::default()
            },
        );
        assert!(matches!(
            aggregate(&[m[0].clone(), other], &[0.5, 0.5]),
            Err(Error::ManifestMismatch(_))
        ));
    }

    #[test]
    fn broadcast_copies_global() {
        let m = models(3);
        let mut clients = m[1..].to_vec();
        broadcast(&m[0], &mut clients);
        assert!(clients.iter().all(|c| *c == m[0]));
        broadcast(&m[0], &mut []);
        assert_eq!(aggregate(&clients, &[0.25, 0.75]).unwrap(), m[0]);
    }

    #[test]
    fn rounds_csv_layout() {
        let r = RoundReport {
            round: 1,
            clients: vec![ClientRound {
                id: 0,
                train_loss: 1.0,
                val_loss: 2.0,
                val_rtle: 3.0,
            }],
            global_val_loss: 4.0,
            global_rtle: 5.0,
            bytes: 10,
        };
        let mut out = Vec::new();
        write_rounds_csv(&[r], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "round,client,train_loss,val_loss,rtle,bytes\n1,0,1,2,3,10\n1,global,,4,5,10\n"
        );
    }
}
