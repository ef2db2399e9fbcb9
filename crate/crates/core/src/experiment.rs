//! Study drivers: data and pretraining per config, grid cells, sweeps and
//! the task-shift comparison.

use std::collections::BTreeMap;

use crate::config::ExperimentConfig;
use crate::dataset::{simulate_dataset, Dataset};
use crate::diffnet::{pretrain, ParameterSet, PretrainResult};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{evaluate, EvalObserver, ObserverScore, Splits};
use crate::metrics::RocResult;
use crate::numerics::{RandomStream, SpectrumResult};
use crate::training::{finetune, FinetuneResult, ObserverKind};

/// Train, validation and test splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn splits(&self) -> Splits<'_> {
        Splits { train: &self.train, validation: &self.validation, test: &self.test }
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "validation", "test"];

pub fn split_seed(config: &ExperimentConfig, task: &str, split: &str) -> u64 {
    config.derived_seed(&format!("data/{task}/{split}"))
}

pub fn generate_split(config: &ExperimentConfig, task: &str, split: &str) -> Result<Dataset> {
    let spec = config.task(task)?.build()?;
    let per_class = match split {
        "train" => config.sizes.train_per_class,
        "validation" => config.sizes.validation_per_class,
        "test" => config.sizes.test_per_class,
        _ => return invalid(format!("unknown split {split:?}")),
    };
    let mut stream = RandomStream::new(split_seed(config, task, split));
    simulate_dataset(&mut stream, &spec, &config.acquisition, per_class, per_class)
}

pub fn generate_task_data(config: &ExperimentConfig, task: &str) -> Result<TaskData> {
    Ok(TaskData {
        train: generate_split(config, task, "train")?,
        validation: generate_split(config, task, "validation")?,
        test: generate_split(config, task, "test")?,
    })
}

pub fn pretrain_seed(config: &ExperimentConfig, depth: usize) -> u64 {
    config.derived_seed(&format!("pretrain/{}/depth={depth}", config.primary_task))
}

/// Pretrains the depth-`depth` denoiser on the primary task.
pub fn pretrain_model(config: &ExperimentConfig, data: &TaskData, depth: usize) -> Result<PretrainResult> {
    let spec = config.network_spec(depth)?;
    let mut stream = RandomStream::new(pretrain_seed(config, depth));
    pretrain(&spec, &data.train, &data.validation, &config.pretrain, &mut stream)
}

/// One unit of a study. A cell without a training observer evaluates the
/// pretrained network as is.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub lambda: f64,
    pub n_train: usize,
    pub depth: usize,
    pub train_observer: Option<ObserverKind>,
    pub source_task: String,
    pub target_task: String,
}

impl Cell {
    pub fn new(lambda: f64, n_train: usize, depth: usize, observer: ObserverKind, source: &str, target: &str) -> Self {
        Self { lambda, n_train, depth, train_observer: Some(observer), source_task: source.into(), target_task: target.into() }
    }

    pub fn baseline(depth: usize, task: &str) -> Self {
        Self { lambda: 1.0, n_train: 0, depth, train_observer: None, source_task: task.into(), target_task: task.into() }
    }

    pub fn is_baseline(&self) -> bool {
        self.train_observer.is_none()
    }

    pub fn observer_name(&self) -> &'static str {
        self.train_observer.map_or("none", ObserverKind::name)
    }

    pub fn key(&self) -> String {
        format!(
            "cell/lambda={}/n_train={}/depth={}/observer={}/source={}/target={}",
            self.lambda,
            self.n_train,
            self.depth,
            self.observer_name(),
            self.source_task,
            self.target_task
        )
    }

    pub fn seed(&self, config: &ExperimentConfig) -> u64 {
        config.derived_seed(&self.key())
    }
}

/// Outcome of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub cell: Cell,
    pub seed: u64,
    pub master_seed: u64,
    pub config_hash: String,
    pub rmse: f64,
    pub ssim: f64,
    pub scores: Vec<ObserverScore>,
    pub condition_proxy: Option<f64>,
    /// Kept in memory only; spectra are persisted separately.
    pub spectrum: Option<SpectrumResult>,
}

impl ExperimentRecord {
    pub fn auc(&self, observer: EvalObserver) -> Option<RocResult> {
        self.scores.iter().find(|s| s.observer == observer).map(|s| s.roc)
    }

    pub fn require_auc(&self, observer: EvalObserver) -> Result<RocResult> {
        self.auc(observer).ok_or_else(|| Error::State(format!("record {} has no {observer} score", self.cell.key())))
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.rmse.is_finite()
            && self.ssim.is_finite()
            && self.condition_proxy.is_none_or(f64::is_finite)
            && self.scores.iter().all(|s| s.roc.auc.is_finite() && s.roc.standard_error.is_finite());
        if !finite {
            return invalid(format!("record {} has non-finite metrics", self.cell.key()));
        }
        Ok(())
    }
}

/// Seed of the evaluation stream. Shared by every cell evaluated on the
/// same target task so that AUC differences between cells are not
/// dominated by the observer's own training noise.
pub fn evaluation_seed(config: &ExperimentConfig, target: &str) -> u64 {
    config.derived_seed(&format!("evaluate/{target}"))
}

/// Fine-tunes the pretrained network as `cell` prescribes, with the stream
/// `seed.derive(0)`. Baseline cells return `None`.
pub fn finetune_cell(config: &ExperimentConfig, cell: &Cell, seed: u64, pretrained: &ParameterSet, source: &TaskData) -> Result<Option<FinetuneResult>> {
    let spec = config.network_spec(cell.depth)?;
    pretrained.check(&spec)?;
    let Some(kind) = cell.train_observer else {
        return Ok(None);
    };
    let hybrid = config.finetune.hybrid(cell.lambda, cell.n_train, kind);
    finetune(pretrained, &spec, &source.train, &source.validation, &hybrid, &mut RandomStream::new(seed).derive(0)).map(Some)
}

/// Fine-tunes (unless the cell is a baseline), then evaluates on the
/// target task.
pub fn run_cell(
    config: &ExperimentConfig,
    cell: &Cell,
    seed: u64,
    pretrained: &ParameterSet,
    source: &TaskData,
    target: &TaskData,
) -> Result<(ExperimentRecord, Option<FinetuneResult>)> {
    let spec = config.network_spec(cell.depth)?;
    let tuned = finetune_cell(config, cell, seed, pretrained, source)?;
    let params = tuned.as_ref().map_or(pretrained, |t| &t.params);
    let mut eval_stream = RandomStream::new(evaluation_seed(config, &cell.target_task));
    let eval = evaluate(params, &spec, target.splits(), &config.evaluation, &mut eval_stream)?;
    let record = ExperimentRecord {
        cell: cell.clone(),
        seed,
        master_seed: config.seed,
        config_hash: config.hash()?,
        rmse: eval.rmse,
        ssim: eval.ssim,
        scores: eval.scores,
        condition_proxy: eval.condition_proxy,
        spectrum: eval.spectrum,
    };
    record.validate()?;
    Ok((record, tuned))
}

/// Fine-tuning cells of the configured grid at one depth, on the primary
/// task, in (observer, n_train, λ) order.
pub fn grid_cells(config: &ExperimentConfig, depth: usize) -> Vec<Cell> {
    let task = &config.primary_task;
    let g = &config.grid;
    let mut cells = Vec::new();
    for &obs in &g.observers {
        for &n in &g.n_train {
            for &lambda in &g.lambdas {
                cells.push(Cell::new(lambda, n, depth, obs, task, task));
            }
        }
    }
    cells
}

/// Task data by name.
pub type DataBank = BTreeMap<String, TaskData>;

fn task_data<'a>(data: &'a DataBank, name: &str) -> Result<&'a TaskData> {
    data.get(name).ok_or_else(|| Error::InvalidInput(format!("no data for task {name:?}")))
}

/// Runs `cells` from the shared pretrained snapshot, each with its
/// config-derived seed.
pub fn sweep(config: &ExperimentConfig, cells: &[Cell], pretrained: &ParameterSet, data: &DataBank) -> Result<Vec<ExperimentRecord>> {
    cells
        .iter()
        .map(|cell| {
            let (source, target) = (task_data(data, &cell.source_task)?, task_data(data, &cell.target_task)?);
            run_cell(config, cell, cell.seed(config), pretrained, source, target).map(|(r, _)| r)
        })
        .collect()
}

/// Shifted (tuned on the source task) and reference (tuned on the target
/// task) records at one λ, both evaluated on the target task.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftOutcome {
    pub lambda: f64,
    pub shifted: ExperimentRecord,
    pub reference: ExperimentRecord,
}

impl ShiftOutcome {
    /// Reference AUC minus shifted AUC and the combined standard error.
    pub fn gap(&self, observer: EvalObserver) -> Result<(f64, f64)> {
        let (r, s) = (self.reference.require_auc(observer)?, self.shifted.require_auc(observer)?);
        Ok((r.auc - s.auc, r.standard_error.hypot(s.standard_error)))
    }
}

/// Cells of a task-shift comparison: (shifted, reference) per λ.
pub fn task_shift_cells(lambdas: &[f64], n_train: usize, depth: usize, observer: ObserverKind, source: &str, target: &str) -> Vec<(Cell, Cell)> {
    lambdas
        .iter()
        .map(|&l| (Cell::new(l, n_train, depth, observer, source, target), Cell::new(l, n_train, depth, observer, target, target)))
        .collect()
}

pub fn task_shift_experiment(
    config: &ExperimentConfig,
    source: &str,
    target: &str,
    lambdas: &[f64],
    n_train: usize,
    depth: usize,
    observer: ObserverKind,
    pretrained: &ParameterSet,
    data: &DataBank,
) -> Result<Vec<ShiftOutcome>> {
    let s = config.task(source)?;
    let t = config.task(target)?;
    if s.background.grid_size != t.background.grid_size {
        return invalid("source and target tasks differ in grid size");
    }
    task_shift_cells(lambdas, n_train, depth, observer, source, target)
        .into_iter()
        .map(|(shifted, reference)| {
            let mut records = sweep(config, &[shifted, reference], pretrained, data)?;
            let reference = records.pop().expect("two records");
            let shifted = records.pop().expect("two records");
            Ok(ShiftOutcome { lambda: shifted.cell.lambda, shifted, reference })
        })
        .collect()
}
