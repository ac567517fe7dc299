//! Run configuration: flat `key=value` files with `--key value` overrides.
//! Unknown keys are rejected; every field carries its published default.

use std::path::{Path, PathBuf};

use crate::data::PartitionStrategy;
use crate::error::{Error, Result};
use crate::fed::FedConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::vrm::VrmConfig;

/// Environment variable that re-roots relative output directories.
pub const OUT_ROOT_ENV: &str = "PFSR_OUT_ROOT";

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    // Data source: a processed cache takes priority, then a raw TSV, then
    // the synthetic generator.
    pub data_cache: Option<PathBuf>,
    pub data_tsv: Option<PathBuf>,
    pub k_core: u32,
    pub max_seq_len: usize,
    pub synth_users: u32,
    pub synth_items: u32,
    pub synth_clients: usize,
    pub synth_len_min: usize,
    pub synth_len_max: usize,

    // Model.
    pub embed_dim: usize,
    pub state_size: usize,
    pub conv_kernel: usize,
    pub expansion: usize,
    pub num_blocks: usize,
    pub dropout: f64,

    // Variable response mechanism and regularizer.
    pub lambda: f64,
    pub fisher_batches: usize,
    pub gamma1: f64,
    pub gamma2: f64,

    // Federation.
    pub clients: usize,
    pub rounds: u64,
    pub local_epochs: usize,
    pub client_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub partition: PartitionStrategy,

    // Outputs.
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub dump_masks: bool,

    // Standalone evaluation.
    pub checkpoint: Option<PathBuf>,

    // Gradient check; deliberately tiny defaults.
    pub gradcheck_embed_dim: usize,
    pub gradcheck_state_size: usize,
    pub gradcheck_conv_kernel: usize,
    pub gradcheck_expansion: usize,
    pub gradcheck_vocab: u32,
    pub gradcheck_seq_len: usize,
    /// Test fixture: corrupt one gradient before comparison so the check
    /// must fail.
    pub gradcheck_corrupt: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            data_cache: None,
            data_tsv: None,
            k_core: 5,
            max_seq_len: 50,
            synth_users: 200,
            synth_items: 300,
            synth_clients: 8,
            synth_len_min: 20,
            synth_len_max: 40,
            embed_dim: 128,
            state_size: 16,
            conv_kernel: 4,
            expansion: 4,
            num_blocks: 1,
            dropout: 0.1,
            lambda: 0.5,
            fisher_batches: 1,
            gamma1: 0.05,
            gamma2: 0.1,
            clients: 8,
            rounds: 10,
            local_epochs: 1,
            client_fraction: 1.0,
            learning_rate: 1e-2,
            batch_size: 512,
            partition: PartitionStrategy::Uniform,
            eval_interval: 10,
            checkpoint_interval: 0,
            dump_masks: false,
            checkpoint: None,
            gradcheck_embed_dim: 8,
            gradcheck_state_size: 4,
            gradcheck_conv_kernel: 4,
            gradcheck_expansion: 2,
            gradcheck_vocab: 20,
            gradcheck_seq_len: 6,
            gradcheck_corrupt: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for key {key:?} (expected true|false)"
        ))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl RunConfig {
    /// Apply one `key=value` setting; unknown keys are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_cache" => self.data_cache = opt_path(value),
            "data_tsv" => self.data_tsv = opt_path(value),
            "k_core" => self.k_core = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "synth_users" => self.synth_users = parse(key, value)?,
            "synth_items" => self.synth_items = parse(key, value)?,
            "synth_clients" => self.synth_clients = parse(key, value)?,
            "synth_len_min" => self.synth_len_min = parse(key, value)?,
            "synth_len_max" => self.synth_len_max = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "state_size" => self.state_size = parse(key, value)?,
            "conv_kernel" => self.conv_kernel = parse(key, value)?,
            "expansion" => self.expansion = parse(key, value)?,
            "num_blocks" => self.num_blocks = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "fisher_batches" => self.fisher_batches = parse(key, value)?,
            "gamma1" => self.gamma1 = parse(key, value)?,
            "gamma2" => self.gamma2 = parse(key, value)?,
            "clients" => self.clients = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "local_epochs" => self.local_epochs = parse(key, value)?,
            "client_fraction" => self.client_fraction = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "partition" => self.partition = value.parse()?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "dump_masks" => self.dump_masks = parse_bool(key, value)?,
            "checkpoint" => self.checkpoint = opt_path(value),
            "gradcheck_embed_dim" => self.gradcheck_embed_dim = parse(key, value)?,
            "gradcheck_state_size" => self.gradcheck_state_size = parse(key, value)?,
            "gradcheck_conv_kernel" => self.gradcheck_conv_kernel = parse(key, value)?,
            "gradcheck_expansion" => self.gradcheck_expansion = parse(key, value)?,
            "gradcheck_vocab" => self.gradcheck_vocab = parse(key, value)?,
            "gradcheck_seq_len" => self.gradcheck_seq_len = parse(key, value)?,
            "gradcheck_corrupt" => self.gradcheck_corrupt = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Load defaults, then a config file (if given), then CLI overrides.
    pub fn from_sources(
        config_path: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (idx, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(Error::Config(format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        idx + 1
                    )));
                };
                cfg.set(key.trim(), value.trim())?;
            }
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            if !root.is_empty() && cfg.out_dir.is_relative() {
                cfg.out_dir = PathBuf::from(root).join(&cfg.out_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        self.vrm_config().validate()?;
        self.fed_config().validate()?;
        if self.max_seq_len < 3 {
            return Err(Error::Config("max_seq_len must be >= 3".into()));
        }
        if self.k_core < 1 {
            return Err(Error::Config("k_core must be >= 1".into()));
        }
        Ok(())
    }

    /// The effective configuration as sorted `key=value` lines; parsing them
    /// back reproduces this config exactly.
    pub fn echo(&self) -> String {
        let path =
            |p: &Option<PathBuf>| p.as_deref().unwrap_or(Path::new("")).display().to_string();
        let mut lines = vec![
            format!("batch_size={}", self.batch_size),
            format!("checkpoint={}", path(&self.checkpoint)),
            format!("checkpoint_interval={}", self.checkpoint_interval),
            format!("client_fraction={}", self.client_fraction),
            format!("clients={}", self.clients),
            format!("conv_kernel={}", self.conv_kernel),
            format!("data_cache={}", path(&self.data_cache)),
            format!("data_tsv={}", path(&self.data_tsv)),
            format!("dropout={}", self.dropout),
            format!("dump_masks={}", self.dump_masks),
            format!("embed_dim={}", self.embed_dim),
            format!("eval_interval={}", self.eval_interval),
            format!("expansion={}", self.expansion),
            format!("fisher_batches={}", self.fisher_batches),
            format!("gamma1={}", self.gamma1),
            format!("gamma2={}", self.gamma2),
            format!("gradcheck_conv_kernel={}", self.gradcheck_conv_kernel),
            format!("gradcheck_corrupt={}", self.gradcheck_corrupt),
            format!("gradcheck_embed_dim={}", self.gradcheck_embed_dim),
            format!("gradcheck_expansion={}", self.gradcheck_expansion),
            format!("gradcheck_seq_len={}", self.gradcheck_seq_len),
            format!("gradcheck_state_size={}", self.gradcheck_state_size),
            format!("gradcheck_vocab={}", self.gradcheck_vocab),
            format!("k_core={}", self.k_core),
            format!("lambda={}", self.lambda),
            format!("learning_rate={}", self.learning_rate),
            format!("local_epochs={}", self.local_epochs),
            format!("max_seq_len={}", self.max_seq_len),
            format!("num_blocks={}", self.num_blocks),
            format!("out_dir={}", self.out_dir.display()),
            format!("partition={}", self.partition),
            format!("rounds={}", self.rounds),
            format!("seed={}", self.seed),
            format!("state_size={}", self.state_size),
            format!("synth_clients={}", self.synth_clients),
            format!("synth_items={}", self.synth_items),
            format!("synth_len_max={}", self.synth_len_max),
            format!("synth_len_min={}", self.synth_len_min),
            format!("synth_users={}", self.synth_users),
        ];
        lines.push(String::new());
        lines.join("\n")
    }

    pub fn model_config(&self, vocab_size: u32) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            state_size: self.state_size,
            conv_kernel: self.conv_kernel,
            expansion: self.expansion,
            num_blocks: self.num_blocks,
            dropout: self.dropout,
            max_seq_len: self.max_seq_len,
            vocab_size,
        }
    }

    pub fn vrm_config(&self) -> VrmConfig {
        VrmConfig {
            lambda: self.lambda,
            fisher_batches: self.fisher_batches,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            num_clients: self.clients,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            client_fraction: self.client_fraction,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.learning_rate, 1e-2);
        assert_eq!(cfg.embed_dim, 128);
        assert_eq!(cfg.batch_size, 512);
        assert_eq!(cfg.dropout, 0.1);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.gamma1, 0.05);
        assert_eq!(cfg.gamma2, 0.1);
        assert_eq!(cfg.state_size, 16);
        assert_eq!(cfg.conv_kernel, 4);
        assert_eq!(cfg.expansion, 4);
        assert_eq!(cfg.k_core, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.set("no_such_key", "1").unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("rounds", "many").is_err());
        assert!(cfg.set("dump_masks", "yes").is_err());
        assert!(cfg.set("partition", "zipf").is_err());
    }

    #[test]
    fn echo_round_trips_every_field() {
        let mut cfg = RunConfig::default();
        for (key, value) in [
            ("seed", "7"),
            ("out_dir", "elsewhere"),
            ("lambda", "0.75"),
            ("rounds", "3"),
            ("partition", "contiguous"),
            ("dump_masks", "true"),
            ("data_cache", "x/cache.bin"),
            ("client_fraction", "0.5"),
        ] {
            cfg.set(key, value).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        std::fs::write(&path, cfg.echo()).unwrap();
        let reparsed = RunConfig::from_sources(Some(&path), &[]).unwrap();
        assert_eq!(reparsed.echo(), cfg.echo());
        assert_eq!(reparsed.lambda, 0.75);
        assert_eq!(reparsed.partition, PartitionStrategy::Contiguous);
        assert!(reparsed.dump_masks);
    }

    #[test]
    fn overrides_take_precedence_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        std::fs::write(&path, "rounds=5\nlambda=0.9\n").unwrap();
        let cfg = RunConfig::from_sources(Some(&path), &[("rounds".to_string(), "2".to_string())])
            .unwrap();
        assert_eq!(cfg.rounds, 2);
        assert_eq!(cfg.lambda, 0.9);
    }

    #[test]
    fn validation_catches_bad_combinations() {
        let mut cfg = RunConfig::default();
        cfg.set("client_fraction", "0").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("gamma1", "-0.5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
