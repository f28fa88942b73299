use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MnistFiles, NUM_CLASSES};
use crate::dist::{max_workers, CombinationStrategy, HarnessConfig};
use crate::error::{Error, Result};
use crate::net::FineTuneConfig;
use crate::rbm::PretrainConfig;

/// Environment variable that overrides `data_dir`.
pub const DATA_DIR_ENV: &str = "DBN_DATA_DIR";

/// How a run's model comes about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sequential,
    WeightAverage,
    MajorityVote,
    SyncUpdate,
    AsyncUpdate,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Sequential,
        Strategy::WeightAverage,
        Strategy::MajorityVote,
        Strategy::SyncUpdate,
        Strategy::AsyncUpdate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sequential => "sequential",
            Strategy::WeightAverage => CombinationStrategy::WeightAverage.name(),
            Strategy::MajorityVote => CombinationStrategy::MajorityVote.name(),
            Strategy::SyncUpdate => CombinationStrategy::SyncUpdate.name(),
            Strategy::AsyncUpdate => CombinationStrategy::AsyncUpdate.name(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown strategy {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Hidden-unit dropout probabilities; input dropout stays as configured.
    pub dropout_p: Vec<f64>,
    pub repeats: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            dropout_p: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            repeats: 3,
        }
    }
}

/// Everything one experiment needs, loaded from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory with the four MNIST IDX files (optionally gzipped).
    pub data_dir: PathBuf,
    /// Use only the first `n` training examples.
    pub train_limit: Option<usize>,
    /// Use only the first `n` test examples.
    pub test_limit: Option<usize>,
    /// Unit counts from input to output.
    pub layer_sizes: Vec<usize>,
    /// Greedy RBM pre-training of the hidden layers; `null` skips it.
    pub pretrain: Option<PretrainConfig>,
    pub fine_tune: FineTuneConfig,
    pub harness: HarnessConfig,
    pub strategy: Strategy,
    /// Independent runs combined by averaging or voting.
    pub ensemble_size: usize,
    /// Ensemble members start from the same weights.
    pub shared_init: bool,
    /// Training examples (from the front of the set) on which the training
    /// loss of the curve is measured.
    pub loss_probe_size: usize,
    /// Record a curve row every this many epochs; 0 records only the end.
    pub metrics_every: usize,
    pub sweep: SweepConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            layer_sizes: vec![784, 256, 256, 10],
            pretrain: None,
            fine_tune: FineTuneConfig {
                epochs: 30,
                ..Default::default()
            },
            harness: HarnessConfig::default(),
            strategy: Strategy::Sequential,
            ensemble_size: 7,
            shared_init: true,
            loss_probe_size: 10_000,
            metrics_every: 1,
            sweep: SweepConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks value ranges; does not touch the file system.
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer_sizes must list at least an input and an output size, all positive; got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.last() != Some(&NUM_CLASSES) {
            return Err(Error::Config(format!("the output layer must have {NUM_CLASSES} units")));
        }
        if let Some(p) = &self.pretrain {
            p.validate()?;
            if self.layer_sizes.len() < 3 {
                return Err(Error::Config("pre-training needs at least one hidden layer".into()));
            }
        }
        self.fine_tune.validate()?;
        self.harness.validate()?;
        if self.harness.partition {
            let limit = max_workers(self.fine_tune.hidden_dropout_p)?;
            if self.harness.n_workers > limit {
                return Err(Error::Config(format!(
                    "partitioned training with p = {} supports at most {limit} workers",
                    self.fine_tune.hidden_dropout_p
                )));
            }
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        if self.sweep.repeats == 0 || self.sweep.dropout_p.is_empty() {
            return Err(Error::Config("sweep needs at least one probability and one repeat".into()));
        }
        if let Some(p) = self.sweep.dropout_p.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::Config(format!("sweep probability {p} outside [0, 1)")));
        }
        Ok(())
    }

    /// `data_dir`, unless the environment overrides it.
    pub fn resolved_data_dir(&self) -> PathBuf {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.data_dir.clone(),
        }
    }

    pub fn data_files(&self) -> MnistFiles {
        MnistFiles::in_dir(&self.resolved_data_dir())
    }

    /// Fails with an I/O error naming the first missing data file.
    pub fn check_data_files(&self) -> Result<()> {
        let files = self.data_files();
        for p in [&files.train_images, &files.train_labels, &files.test_images, &files.test_labels] {
            if !p.is_file() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "data file not found")));
            }
        }
        Ok(())
    }

    /// Training and test sets, truncated to the configured limits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = self.data_files().load()?;
        let train = match self.train_limit {
            Some(n) => train.head(n),
            None => train,
        };
        let test = match self.test_limit {
            Some(n) => test.head(n),
            None => test,
        };
        if train.n_features() != self.layer_sizes[0] {
            return Err(Error::shape(
                "ExperimentConfig::load_data",
                format!("images have {} pixels, layer_sizes starts with {}", train.n_features(), self.layer_sizes[0]),
            ));
        }
        Ok((train, test))
    }

    /// Applies a seed to every stochastic component.
    pub fn set_seed(&mut self, seed: u64) {
        self.fine_tune.seed = seed;
        if let Some(p) = &mut self.pretrain {
            p.seed = seed;
        }
    }
}
