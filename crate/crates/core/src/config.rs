//! Experiment configuration: named tasks, acquisition, network, training
//! and evaluation settings, study grids and seed derivation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffnet::{AdamConfig, NetworkSpec, PretrainConfig};
use crate::error::{invalid, Error, Result};
use crate::evaluation::EvaluationConfig;
use crate::imaging::AcquisitionConfig;
use crate::numerics::RandomStream;
use crate::phantom::{BackgroundParams, SignalModel, TaskSpec};
use crate::training::{HybridConfig, ObserverKind};

/// Weight grid swept by the trade-off studies.
pub const LAMBDA_GRID: [f64; 7] = [0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99];
/// Trainable-layer counts swept by the layer study.
pub const N_TRAIN_GRID: [usize; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub background: BackgroundParams,
    pub signal: SignalModel,
}

impl TaskConfig {
    pub fn build(&self) -> Result<TaskSpec> {
        TaskSpec::new(self.background.build()?, self.signal.clone())
    }
}

/// Samples per class in each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train_per_class: usize,
    pub validation_per_class: usize,
    pub test_per_class: usize,
}

/// Everything a fine-tuning cell needs besides λ, N_train and the
/// observer kind, which come from the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_present: usize,
    pub batch_absent: usize,
    pub adam: AdamConfig,
    #[serde(default)]
    pub observer_learning_rate: Option<f64>,
    #[serde(default)]
    pub freeze_bn_stats: bool,
    pub patience: usize,
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
}

impl FinetuneSettings {
    pub fn hybrid(&self, lambda: f64, n_train: usize, observer: ObserverKind) -> HybridConfig {
        HybridConfig {
            lambda,
            observer,
            n_train,
            epochs: self.epochs,
            batch_present: self.batch_present,
            batch_absent: self.batch_absent,
            adam: self.adam,
            observer_learning_rate: self.observer_learning_rate,
            freeze_bn_stats: self.freeze_bn_stats,
            patience: self.patience,
            max_batches_per_epoch: self.max_batches_per_epoch,
        }
    }
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        let h = HybridConfig::default();
        Self {
            epochs: h.epochs,
            batch_present: h.batch_present,
            batch_absent: h.batch_absent,
            adam: h.adam,
            observer_learning_rate: h.observer_learning_rate,
            freeze_bn_stats: h.freeze_bn_stats,
            patience: h.patience,
            max_batches_per_epoch: h.max_batches_per_epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lambdas: Vec<f64>,
    pub n_train: Vec<usize>,
    pub depths: Vec<usize>,
    pub observers: Vec<ObserverKind>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { lambdas: LAMBDA_GRID.to_vec(), n_train: vec![3], depths: vec![9], observers: vec![ObserverKind::SlnnNo] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskShiftPair {
    pub source: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stream in a study is derived from it.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Task used for pretraining and for the single-task studies.
    pub primary_task: String,
    pub tasks: BTreeMap<String, TaskConfig>,
    pub acquisition: AcquisitionConfig,
    pub sizes: SplitSizes,
    pub network: NetworkSpec,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneSettings,
    pub evaluation: EvaluationConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub task_shift: Vec<TaskShiftPair>,
}

fn default_output_dir() -> String {
    "out".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return invalid("config defines no tasks");
        }
        self.task(&self.primary_task)?;
        for pair in &self.task_shift {
            let a = self.task(&pair.source)?;
            let b = self.task(&pair.target)?;
            if a.background.grid_size != b.background.grid_size {
                return invalid(format!("tasks {} and {} differ in grid size", pair.source, pair.target));
            }
        }
        let grid_size = self.grid_size()?;
        for (name, t) in &self.tasks {
            if t.background.grid_size != grid_size {
                return invalid(format!("task {name} has grid size {}, expected {grid_size}", t.background.grid_size));
            }
            t.build().map_err(|e| Error::InvalidInput(format!("task {name}: {e}")))?;
        }
        self.acquisition.validate_for(grid_size)?;
        self.network.validate()?;
        let s = &self.sizes;
        if s.train_per_class == 0 || s.validation_per_class == 0 || s.test_per_class == 0 {
            return invalid("every split needs samples of both classes");
        }
        let g = &self.grid;
        if g.lambdas.is_empty() || g.n_train.is_empty() || g.depths.is_empty() || g.observers.is_empty() {
            return invalid("study grids must be non-empty");
        }
        if let Some(l) = g.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return invalid(format!("lambda {l} outside [0, 1]"));
        }
        for &d in &g.depths {
            let spec = self.network_spec(d)?;
            if let Some(n) = g.n_train.iter().find(|&&n| n > d) {
                return invalid(format!("n_train {n} exceeds depth {d}"));
            }
            for &obs in &g.observers {
                self.finetune.hybrid(g.lambdas[0], 0, obs).validate(&spec)?;
            }
        }
        if self.evaluation.observers.is_empty() {
            return invalid("no evaluation observers requested");
        }
        Ok(())
    }

    pub fn task(&self, name: &str) -> Result<&TaskConfig> {
        self.tasks.get(name).ok_or_else(|| Error::InvalidInput(format!("unknown task {name:?}")))
    }

    pub fn grid_size(&self) -> Result<usize> {
        Ok(self.task(&self.primary_task)?.background.grid_size)
    }

    pub fn network_spec(&self, depth: usize) -> Result<NetworkSpec> {
        let spec = NetworkSpec { depth, ..self.network.clone() };
        spec.validate()?;
        Ok(spec)
    }

    /// Hex SHA-256 of the canonical serialization, truncated to 16 digits.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn master_stream(&self) -> RandomStream {
        RandomStream::new(self.seed)
    }

    /// Seed of a named unit of work (a split, a pretraining run, a grid
    /// cell), a pure function of the master seed and the label.
    pub fn derived_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

/// Mixes `label` into `master` through SHA-256.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&d[..8]);
    u64::from_le_bytes(bytes)
}
