//! TOML experiment configuration. Every key is optional; missing keys take
//! the desk-scale defaults and unknown keys are rejected.

use fdsim_core::channel::ChannelModelConfig;
use fdsim_core::data::SyntheticSpec;
use fdsim_core::distill::DistillConfig;
use fdsim_core::federation::{BroadcastMode, FedConfig, Strategy};
use fdsim_core::model::{Activation, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Syntax(String),
    #[error("{path}: {detail}")]
    Key { path: String, detail: String },
    #[error("{0}")]
    Invalid(String),
}

impl ConfigError {
    fn key(path: &str, detail: impl Into<String>) -> Self {
        ConfigError::Key { path: path.to_string(), detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub federation: FederationSection,
    pub data: DataSection,
    pub client_model: ModelSection,
    pub server_model: ModelSection,
    pub lora: LoraSection,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub channel: ChannelSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: u32,
    pub strategy: Strategy,
    pub dirichlet_gamma: f64,
    pub public_set_size: usize,
    pub seed: u64,
    pub distill_epochs: usize,
    pub broadcast: BroadcastMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub cluster_spread: f64,
}

/// An MLP from `feature_dim` through `hidden` to `num_classes`. A missing
/// `hidden` takes the default width for that side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub scale_projection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub bandwidth_hz: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub time_budget_s: f64,
    pub bits_per_entry: u32,
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile::from_fed_config(&FedConfig::default()).expect("defaults are representable")
    }
}

macro_rules! section_default {
    ($ty:ty, $field:ident) => {
        impl Default for $ty {
            fn default() -> Self {
                ConfigFile::default().$field
            }
        }
    };
}

section_default!(FederationSection, federation);
section_default!(DataSection, data);
section_default!(LoraSection, lora);
section_default!(ChannelSection, channel);

fn hidden_sizes(spec: &ModelSpec) -> Vec<usize> {
    spec.layer_dims.iter().skip(1).map(|&(d_in, _)| d_in).collect()
}

impl ConfigFile {
    /// Inverse of `to_fed_config` for configurations built from MLP specs
    /// with every layer adapted and projections at the last layer.
    pub fn from_fed_config(cfg: &FedConfig) -> Result<Self, ConfigError> {
        let model = |name: &str, spec: &ModelSpec| -> Result<ModelSection, ConfigError> {
            let hidden = hidden_sizes(spec);
            let rebuilt = mlp(cfg.data.feature_dim, &hidden, cfg.data.num_classes, spec.activation, spec.lora_rank, spec.lora_alpha, spec.scale_projection);
            if &rebuilt != spec {
                return Err(ConfigError::Invalid(format!("{name} is not expressible as a config file")));
            }
            Ok(ModelSection { hidden: Some(hidden), activation: spec.activation })
        };
        let client_model = model("client_model", &cfg.client_model)?;
        let server_model = model("server_model", &cfg.server_model)?;
        Ok(ConfigFile {
            federation: FederationSection {
                num_clients: cfg.num_clients,
                clients_per_round: cfg.clients_per_round,
                rounds: cfg.rounds,
                strategy: cfg.strategy,
                dirichlet_gamma: cfg.dirichlet_gamma,
                public_set_size: cfg.data.public_set_size,
                seed: cfg.seed,
                distill_epochs: cfg.distill_epochs,
                broadcast: cfg.broadcast,
            },
            data: DataSection {
                num_classes: cfg.data.num_classes,
                feature_dim: cfg.data.feature_dim,
                samples_per_class: cfg.data.samples_per_class,
                test_samples_per_class: cfg.data.test_samples_per_class,
                cluster_spread: cfg.data.cluster_spread,
            },
            client_model,
            server_model,
            lora: LoraSection {
                rank: cfg.client_model.lora_rank,
                alpha: cfg.client_model.lora_alpha,
                scale_projection: cfg.client_model.scale_projection,
            },
            train: cfg.train,
            distill: cfg.distill,
            channel: ChannelSection {
                bandwidth_hz: cfg.channel.bandwidth_hz,
                snr_db_min: cfg.channel.snr_db.0,
                snr_db_max: cfg.channel.snr_db.1,
                eta_min: cfg.channel.eta.0,
                eta_max: cfg.channel.eta.1,
                time_budget_s: cfg.channel.time_budget_s,
                bits_per_entry: cfg.channel.bits_per_entry,
            },
        })
    }

    /// Checks invariants with key paths, then builds and validates the run
    /// configuration.
    pub fn to_fed_config(&self) -> Result<FedConfig, ConfigError> {
        self.check_keys()?;
        let d = &self.data;
        let l = &self.lora;
        let defaults = FedConfig::default();
        let build = |m: &ModelSection, fallback: &ModelSpec| {
            let hidden = m.hidden.clone().unwrap_or_else(|| hidden_sizes(fallback));
            mlp(d.feature_dim, &hidden, d.num_classes, m.activation, l.rank, l.alpha, l.scale_projection)
        };
        let f = &self.federation;
        let c = &self.channel;
        let cfg = FedConfig {
            num_clients: f.num_clients,
            clients_per_round: f.clients_per_round,
            rounds: f.rounds,
            strategy: f.strategy,
            dirichlet_gamma: f.dirichlet_gamma,
            seed: f.seed,
            data: SyntheticSpec {
                num_classes: d.num_classes,
                feature_dim: d.feature_dim,
                samples_per_class: d.samples_per_class,
                test_samples_per_class: d.test_samples_per_class,
                public_set_size: f.public_set_size,
                cluster_spread: d.cluster_spread,
            },
            client_model: build(&self.client_model, &defaults.client_model),
            server_model: build(&self.server_model, &defaults.server_model),
            train: self.train,
            distill: self.distill,
            distill_epochs: f.distill_epochs,
            channel: ChannelModelConfig {
                bandwidth_hz: c.bandwidth_hz,
                snr_db: (c.snr_db_min, c.snr_db_max),
                eta: (c.eta_min, c.eta_max),
                time_budget_s: c.time_budget_s,
                bits_per_entry: c.bits_per_entry,
                seed: 0,
            },
            broadcast: f.broadcast,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    fn check_keys(&self) -> Result<(), ConfigError> {
        let f = &self.federation;
        let positive = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::key(path, format!("must be positive, got {v}")))
            }
        };
        let nonzero = |path: &str, v: usize| {
            if v > 0 {
                Ok(())
            } else {
                Err(ConfigError::key(path, "must be at least 1"))
            }
        };
        nonzero("federation.num_clients", f.num_clients)?;
        if f.clients_per_round > f.num_clients {
            return Err(ConfigError::key(
                "federation.clients_per_round",
                format!("{} exceeds num_clients = {}", f.clients_per_round, f.num_clients),
            ));
        }
        if f.rounds == 0 {
            return Err(ConfigError::key("federation.rounds", "must be at least 1"));
        }
        positive("federation.dirichlet_gamma", f.dirichlet_gamma)?;
        nonzero("federation.public_set_size", f.public_set_size)?;
        if self.data.num_classes < 2 {
            return Err(ConfigError::key("data.num_classes", "must be at least 2"));
        }
        nonzero("data.feature_dim", self.data.feature_dim)?;
        nonzero("data.samples_per_class", self.data.samples_per_class)?;
        nonzero("data.test_samples_per_class", self.data.test_samples_per_class)?;
        if !(self.data.cluster_spread >= 0.0 && self.data.cluster_spread.is_finite()) {
            return Err(ConfigError::key("data.cluster_spread", "must be finite and nonnegative"));
        }
        for (name, m) in [("client_model", &self.client_model), ("server_model", &self.server_model)] {
            let hidden = m.hidden.as_deref().unwrap_or_default();
            if let Some(i) = hidden.iter().position(|&h| h == 0) {
                return Err(ConfigError::key(&format!("{name}.hidden[{i}]"), "must be at least 1"));
            }
            let narrowest = hidden.iter().copied().chain([self.data.feature_dim, self.data.num_classes]).min().unwrap_or(0);
            if self.lora.rank > narrowest {
                return Err(ConfigError::key(
                    "lora.rank",
                    format!("{} exceeds the narrowest {name} layer width {narrowest}", self.lora.rank),
                ));
            }
        }
        nonzero("lora.rank", self.lora.rank)?;
        positive("lora.alpha", self.lora.alpha)?;
        positive("train.learning_rate", self.train.learning_rate)?;
        if !(self.train.weight_decay >= 0.0 && self.train.weight_decay.is_finite()) {
            return Err(ConfigError::key("train.weight_decay", "must be finite and nonnegative"));
        }
        nonzero("train.batch_size", self.train.batch_size)?;
        positive("distill.temperature", self.distill.temperature)?;
        if !(self.distill.lambda_h >= 0.0 && self.distill.lambda_h.is_finite()) {
            return Err(ConfigError::key("distill.lambda_h", "must be finite and nonnegative"));
        }
        let c = &self.channel;
        if !(c.bandwidth_hz >= 0.0 && c.bandwidth_hz.is_finite()) {
            return Err(ConfigError::key("channel.bandwidth_hz", "must be finite and nonnegative"));
        }
        if !(c.snr_db_min.is_finite() && c.snr_db_max.is_finite()) || c.snr_db_min > c.snr_db_max {
            return Err(ConfigError::key("channel.snr_db_max", "must be finite and at least snr_db_min"));
        }
        if !(c.eta_min > 0.0 && c.eta_min < 1.0) {
            return Err(ConfigError::key("channel.eta_min", "must lie in (0, 1)"));
        }
        if !(c.eta_max >= c.eta_min && c.eta_max < 1.0) {
            return Err(ConfigError::key("channel.eta_max", "must lie in [eta_min, 1)"));
        }
        positive("channel.time_budget_s", c.time_budget_s)?;
        if c.bits_per_entry == 0 {
            return Err(ConfigError::key("channel.bits_per_entry", "must be at least 1"));
        }
        Ok(())
    }
}

fn mlp(
    feature_dim: usize,
    hidden: &[usize],
    num_classes: usize,
    activation: Activation,
    rank: usize,
    alpha: f64,
    scale_projection: bool,
) -> ModelSpec {
    let sizes: Vec<usize> = std::iter::once(feature_dim).chain(hidden.iter().copied()).chain([num_classes]).collect();
    ModelSpec { scale_projection, ..ModelSpec::mlp(&sizes, activation, rank, alpha) }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<FedConfig, ConfigError> {
    parse_config_file(text)?.to_fed_config()
}

/// Parses a config document without building the run configuration.
pub fn parse_config_file(text: &str) -> Result<ConfigFile, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let detail = e.into_inner().message().trim().to_string();
        ConfigError::Key { path, detail }
    })
}

/// Writes a configuration back out as a config document.
pub fn serialize_config(cfg: &FedConfig) -> Result<String, ConfigError> {
    let file = ConfigFile::from_fed_config(cfg)?;
    toml::to_string_pretty(&file).map_err(|e| ConfigError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(parse_config("").unwrap(), FedConfig::default());
    }

    #[test]
    fn defaults_carry_the_reference_hyperparameters() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.client_model.lora_rank, 8);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.train.weight_decay, 0.001);
        assert_eq!(cfg.distill.temperature, 2.0);
        assert_eq!(cfg.distill.lambda_h, 0.03);
        assert_eq!(cfg.clients_per_round, 10);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = parse_config("[train]\nlearning_rate = 0.01\n[lora]\nrank = 4\n").unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.client_model.lora_rank, 4);
        assert_eq!(cfg.server_model.lora_rank, 4);
    }

    #[test]
    fn model_sections_default_independently() {
        let cfg = parse_config("[server_model]\nactivation = \"tanh\"\n").unwrap();
        assert_eq!(cfg.server_model.layer_dims, vec![(32, 128), (128, 10)]);
        assert_eq!(cfg.server_model.activation, Activation::Tanh);
        assert_eq!(cfg.client_model.layer_dims, vec![(32, 64), (64, 10)]);
        let cfg = parse_config("[client_model]\nhidden = []\n").unwrap();
        assert_eq!(cfg.client_model.layer_dims, vec![(32, 10)]);
    }

    #[test]
    fn bad_strategy_names_the_key() {
        let err = parse_config("[federation]\nstrategy = \"bogus\"\n").unwrap_err().to_string();
        assert!(err.starts_with("federation.strategy"), "{err}");
        assert!(err.contains("adald") && err.contains("all_logits"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = parse_config("[channel]\nbandwith_hz = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("channel") && err.contains("bandwith_hz"), "{err}");
        assert!(parse_config("[extra]\nx = 1\n").is_err());
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = parse_config("[train]\nbatch_size = \"big\"\n").unwrap_err().to_string();
        assert!(err.starts_with("train.batch_size"), "{err}");
    }

    #[test]
    fn invariant_violations_name_the_key() {
        let err = parse_config("[federation]\nnum_clients = 4\nclients_per_round = 5\n").unwrap_err().to_string();
        assert!(err.starts_with("federation.clients_per_round"), "{err}");
        let err = parse_config("[lora]\nrank = 11\n").unwrap_err().to_string();
        assert!(err.starts_with("lora.rank"), "{err}");
        let err = parse_config("[channel]\neta_min = 0.5\neta_max = 0.2\n").unwrap_err().to_string();
        assert!(err.starts_with("channel.eta_max"), "{err}");
    }

    #[test]
    fn desk_fixture_is_the_default_config() {
        let cfg = parse_config(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(cfg, FedConfig::default());
    }

    #[test]
    fn smoke_fixture_pins_its_overrides() {
        let cfg = parse_config(include_str!("../../../configs/smoke.toml")).unwrap();
        assert_eq!((cfg.num_clients, cfg.clients_per_round, cfg.rounds), (6, 3, 3));
        assert_eq!(cfg.data.public_set_size, 120);
        assert_eq!(cfg.client_model.layer_dims, vec![(8, 16), (16, 4)]);
        assert_eq!(cfg.server_model.layer_dims, vec![(8, 24), (24, 4)]);
        assert_eq!(cfg.client_model.lora_rank, 4);
        assert_eq!(cfg.client_model.projection_layers, vec![1]);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.channel, ChannelModelConfig::default());
    }

    #[test]
    fn serialize_round_trips() {
        let mut cfg = FedConfig::default();
        cfg.strategy = Strategy::AllLogits;
        cfg.channel.snr_db = (3.0, 7.5);
        cfg.distill.mask_uncovered = true;
        cfg.seed = 42;
        let text = serialize_config(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
        assert_eq!(parse_config(&serialize_config(&FedConfig::default()).unwrap()).unwrap(), FedConfig::default());
    }
}
