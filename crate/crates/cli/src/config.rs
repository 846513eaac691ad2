use std::fs;
use std::path::{Path, PathBuf};

use fedkalman::federation::{FedConfig, Weighting};
use fedkalman::network::NetworkShape;
use fedkalman::seeds::derive_seed;
use fedkalman::trainer::TrainConfig;
use fedkalman::world::{NoiseSpec, TrajectorySpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub training: TrainingConfig,
    pub federation: FederationConfig,
    pub evaluation: EvaluationConfig,
    pub io: IoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            training: TrainingConfig::default(),
            federation: FederationConfig::default(),
            evaluation: EvaluationConfig::default(),
            io: IoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub steps: usize,
    pub speed_min: f64,
    pub speed_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dt: f64,
    pub window_len: usize,
    pub split_ratio: f64,
    pub clients: Vec<ClientSpec>,
    pub train_noise: NoiseSpec,
    pub test_noise: NoiseSpec,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let clients = fedkalman::world::default_client_specs(0)
            .into_iter()
            .map(|s| ClientSpec {
                steps: s.steps,
                speed_min: s.speed_min,
                speed_max: s.speed_max,
            })
            .collect();
        Self {
            dt: 0.1,
            window_len: 100,
            split_ratio: 0.8,
            clients,
            train_noise: NoiseSpec::training(),
            test_noise: NoiseSpec::test(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Epochs of individual training.
    pub epochs: usize,
    pub central_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub network: NetworkShape,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: 500,
            central_epochs: 1500,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            gamma: t.gamma,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm.unwrap_or(0.0),
            network: NetworkShape::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub weighting: Weighting,
}

impl Default for FederationConfig {
    fn default() -> Self {
        let f = FedConfig::default();
        Self {
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            weighting: f.weighting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub test_steps: usize,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let t = fedkalman::world::default_test_spec(0);
        Self {
            test_steps: t.steps,
            speed_min: t.speed_min,
            speed_max: t.speed_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out: PathBuf,
    /// Subdirectory name under each output folder; `seed-<seed>` when unset.
    pub run_id: Option<String>,
    /// Extra checkpoints to evaluate, as `name = path`.
    pub checkpoints: Vec<NamedPath>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            run_id: None,
            checkpoints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| fedkalman::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e)))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &cfg.io.checkpoints {
            let p = resolve(base, &c.path);
            if !p.exists() {
                return Err(CliError::Usage(format!(
                    "{}: checkpoint `{}` not found at {}",
                    path.display(),
                    c.name,
                    p.display()
                )));
            }
        }
        let mut cfg = cfg;
        for c in &mut cfg.io.checkpoints {
            c.path = resolve(base, &c.path);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn run_id(&self) -> String {
        self.io.run_id.clone().unwrap_or_else(|| format!("seed-{}", self.seed))
    }

    pub fn dir(&self, kind: &str) -> PathBuf {
        self.io.out.join(kind).join(self.run_id())
    }

    pub fn client_specs(&self) -> Vec<TrajectorySpec> {
        self.world
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| TrajectorySpec {
                dt: self.world.dt,
                ..TrajectorySpec::new(
                    c.steps,
                    c.speed_min,
                    c.speed_max,
                    derive_seed(self.seed, "client-trajectory", i as u64),
                )
            })
            .collect()
    }

    pub fn test_spec(&self) -> TrajectorySpec {
        TrajectorySpec {
            dt: self.world.dt,
            ..TrajectorySpec::new(
                self.evaluation.test_steps,
                self.evaluation.speed_min,
                self.evaluation.speed_max,
                derive_seed(self.seed, "test-trajectory", 0),
            )
        }
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            gamma: t.gamma,
            batch_size: t.batch_size,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            seed: self.seed,
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            rounds: self.federation.rounds,
            weighting: self.federation.weighting.clone(),
            local_epochs: self.federation.local_epochs,
            train: self.train_config(self.federation.local_epochs),
            seed: self.seed,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn edited_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 17;
        cfg.federation.weighting = Weighting::Explicit(vec![0.25; 4]);
        cfg.training.clip_norm = 0.0;
        cfg.world.test_noise.bias = None;
        cfg.io.run_id = Some("abc".into());
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train_config(1).clip_norm, None);
        assert_eq!(ExperimentConfig::default().train_config(1).clip_norm, Some(1.0));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = toml::from_str::<ExperimentConfig>("[training]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = toml::from_str::<ExperimentConfig>("sed = 1\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg: ExperimentConfig = toml::from_str("seed = 3\n[federation]\nrounds = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.federation.rounds, 2);
        assert_eq!(cfg.world.clients.len(), 4);
        assert_eq!(cfg.world.clients[1].steps, 4600);
        assert_eq!(cfg.training.central_epochs, 1500);
    }
}
