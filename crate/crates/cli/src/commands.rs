//! Subcommand implementations.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use log::{info, warn};
use tidn_core::config::ExperimentConfig;
use tidn_core::dataset::Dataset;
use tidn_core::diffnet::{denoise, ParameterSet};
use tidn_core::experiment::{finetune_cell, generate_split, grid_cells, pretrain_model, pretrain_seed, run_cell, task_shift_cells, Cell, ExperimentRecord, TaskData, SPLIT_NAMES};
use tidn_core::harness::{acceptance_config, run_acceptance, HarnessOptions, Suite};
use tidn_core::io::{
    atomic_write, encode_csv, finetune_log_rows, pretrain_log_rows, read_checkpoint, read_dataset, read_records, write_checkpoint, write_dataset, write_records, Checkpoint, Provenance,
    SpectrumRow, FINETUNE_LOG_COLUMNS, PRETRAIN_LOG_COLUMNS, SPECTRUM_COLUMNS,
};
use tidn_core::metrics::{condition_proxy, covariance_spectrum, rmse};
use tidn_core::training::ObserverKind;

use crate::layout::Layout;
use crate::pool::run_processes;
use crate::report::build_report;
use crate::svg::{LinePlot, Series};

/// Resolved config, output layout and worker budget.
pub struct Context {
    pub config: ExperimentConfig,
    pub layout: Layout,
    pub provenance: Provenance,
    pub workers: usize,
}

impl Context {
    /// Loads `path`, applies the command-line overrides and records the
    /// resolved config as `<out>/config.toml`, which worker processes read.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>, workers: usize) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config = ExperimentConfig::from_toml(&text)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(o) = out {
            config.output_dir = o.to_string_lossy().into_owned();
        }
        config.validate()?;
        let layout = Layout::new(&config.output_dir);
        let resolved = config.to_toml()?;
        if fs::read_to_string(layout.config()).ok().as_deref() != Some(resolved.as_str()) {
            atomic_write(&layout.config(), resolved.as_bytes())?;
        }
        let provenance = Provenance { config_hash: config.hash()?, master_seed: config.seed };
        Ok(Self { config, layout, provenance, workers: workers.max(1) })
    }

    fn check_provenance(&self, what: &Path, found: &Provenance) {
        if *found != self.provenance {
            warn!(
                "{} was written under config {} (seed {}), current config is {} (seed {})",
                what.display(),
                found.config_hash,
                found.master_seed,
                self.provenance.config_hash,
                self.provenance.master_seed
            );
        }
    }

    fn split(&self, task: &str, split: &str) -> Result<Dataset> {
        let path = self.layout.dataset(task, split);
        let (ds, prov) = read_dataset(&path).with_context(|| format!("dataset {} unavailable; run `tidn gen-data` first", path.display()))?;
        self.check_provenance(&path, &prov);
        Ok(ds)
    }

    pub fn task_data(&self, task: &str) -> Result<TaskData> {
        self.config.task(task)?;
        Ok(TaskData { train: self.split(task, "train")?, validation: self.split(task, "validation")?, test: self.split(task, "test")? })
    }

    pub fn pretrained(&self, depth: usize) -> Result<ParameterSet> {
        let path = self.layout.pretrained(depth);
        let ckpt = read_checkpoint(&path).with_context(|| format!("checkpoint {} unavailable; run `tidn pretrain` first", path.display()))?;
        self.check_provenance(&path, &ckpt.provenance);
        ckpt.params.check(&self.config.network_spec(depth)?)?;
        Ok(ckpt.params)
    }

    fn default_depths(&self, depths: &[usize]) -> Vec<usize> {
        if depths.is_empty() {
            self.config.grid.depths.clone()
        } else {
            depths.to_vec()
        }
    }
}

pub fn gen_data(ctx: &Context, tasks: &[String]) -> Result<()> {
    let names: Vec<String> = if tasks.is_empty() { ctx.config.tasks.keys().cloned().collect() } else { tasks.to_vec() };
    for task in &names {
        for split in SPLIT_NAMES {
            let ds = generate_split(&ctx.config, task, split)?;
            let path = ctx.layout.dataset(task, split);
            write_dataset(&path, &ds, &ctx.provenance)?;
            info!("{task}/{split}: {} samples -> {}", ds.len(), path.display());
        }
    }
    Ok(())
}

pub fn pretrain(ctx: &Context, depths: &[usize]) -> Result<()> {
    let task = ctx.config.primary_task.clone();
    let data = ctx.task_data(&task)?;
    for depth in ctx.default_depths(depths) {
        info!("pretraining depth {depth} on {task}");
        let result = pretrain_model(&ctx.config, &data, depth)?;
        let spec = ctx.config.network_spec(depth)?;
        let test_rmse = rmse(&denoise(&result.params, &spec, &data.test.noisy_images(), 64)?, &data.test.targets())?;
        let noisy_rmse = rmse(&data.test.noisy_images(), &data.test.targets())?;
        let metadata = BTreeMap::from([
            ("task".to_string(), task.clone()),
            ("seed".to_string(), pretrain_seed(&ctx.config, depth).to_string()),
            ("epochs_run".to_string(), result.log.len().to_string()),
            ("best_epoch".to_string(), result.best_epoch.to_string()),
            ("best_val_mse".to_string(), format!("{:e}", result.best_val_mse)),
            ("test_rmse".to_string(), format!("{test_rmse:e}")),
            ("noisy_test_rmse".to_string(), format!("{noisy_rmse:e}")),
        ]);
        let path = ctx.layout.pretrained(depth);
        write_checkpoint(&path, &Checkpoint { spec, params: result.params, provenance: ctx.provenance.clone(), metadata })?;
        atomic_write(&ctx.layout.pretrain_log(depth), &encode_csv(&pretrain_log_rows(&result.log, &ctx.provenance), &PRETRAIN_LOG_COLUMNS)?)?;
        info!("depth {depth}: best epoch {}, test RMSE {test_rmse:.5} (noisy input {noisy_rmse:.5}) -> {}", result.best_epoch, path.display());
    }
    Ok(())
}

/// Cell named on the command line; `observer = "none"` selects the
/// pretrained baseline on the target task.
pub fn parse_cell(ctx: &Context, lambda: f64, n_train: usize, depth: Option<usize>, observer: Option<&str>, source: Option<&str>, target: Option<&str>) -> Result<Cell> {
    let depth = depth.unwrap_or(ctx.config.network.depth);
    let primary = ctx.config.primary_task.as_str();
    let target = target.unwrap_or(primary);
    let source = source.unwrap_or(target);
    ctx.config.task(source)?;
    ctx.config.task(target)?;
    let cell = match observer {
        Some("none") => Cell::baseline(depth, target),
        Some(name) => Cell::new(lambda, n_train, depth, name.parse::<ObserverKind>()?, source, target),
        None => Cell::new(lambda, n_train, depth, ctx.config.grid.observers[0], source, target),
    };
    if !(0.0..=1.0).contains(&cell.lambda) {
        bail!("lambda {} outside [0, 1]", cell.lambda);
    }
    if cell.n_train > depth {
        bail!("n_train {} exceeds depth {depth}", cell.n_train);
    }
    Ok(cell)
}

/// Fine-tunes and evaluates one cell in this process and persists its
/// record, loss log and fine-tuned checkpoint.
pub fn run_one(ctx: &Context, cell: &Cell, seed: Option<u64>) -> Result<ExperimentRecord> {
    let seed = seed.unwrap_or_else(|| cell.seed(&ctx.config));
    let pretrained = ctx.pretrained(cell.depth)?;
    let source = ctx.task_data(&cell.source_task)?;
    let target = if cell.target_task == cell.source_task { None } else { Some(ctx.task_data(&cell.target_task)?) };
    info!("running {} (seed {seed})", cell.key());
    let (record, tuned) = run_cell(&ctx.config, cell, seed, &pretrained, &source, target.as_ref().unwrap_or(&source))?;
    if let Some(t) = tuned {
        let metadata = BTreeMap::from([
            ("cell".to_string(), cell.key()),
            ("seed".to_string(), seed.to_string()),
            ("best_epoch".to_string(), t.best_epoch.to_string()),
        ]);
        let spec = ctx.config.network_spec(cell.depth)?;
        write_checkpoint(&ctx.layout.finetuned(cell), &Checkpoint { spec, params: t.params, provenance: ctx.provenance.clone(), metadata })?;
        atomic_write(&ctx.layout.finetune_log(cell), &encode_csv(&finetune_log_rows(&cell.key(), &t.log, &ctx.provenance), &FINETUNE_LOG_COLUMNS)?)?;
    }
    write_records(&ctx.layout.record(cell), std::slice::from_ref(&record))?;
    let scores: Vec<String> = record.scores.iter().map(|s| format!("{} {:.4}±{:.4}", s.observer, s.roc.auc, s.roc.standard_error)).collect();
    info!("{}: rmse {:.5} ssim {:.4} {}", cell.key(), record.rmse, record.ssim, scores.join(", "));
    Ok(record)
}

fn stored_record(ctx: &Context, cell: &Cell) -> Option<ExperimentRecord> {
    let records = read_records(&ctx.layout.record(cell)).ok()?;
    match records.as_slice() {
        [r] if r.cell == *cell && r.seed == cell.seed(&ctx.config) && r.config_hash == ctx.provenance.config_hash => Some(r.clone()),
        _ => None,
    }
}

fn worker_args(ctx: &Context, cell: &Cell) -> Vec<OsString> {
    let observer = cell.observer_name();
    let mut args: Vec<OsString> = vec!["--config".into(), ctx.layout.config().into(), "--workers".into(), "1".into(), "finetune".into()];
    for (flag, value) in [
        ("--lambda", cell.lambda.to_string()),
        ("--n-train", cell.n_train.to_string()),
        ("--depth", cell.depth.to_string()),
        ("--observer", observer.to_string()),
        ("--source", cell.source_task.clone()),
        ("--target", cell.target_task.clone()),
    ] {
        args.push(flag.into());
        args.push(value.into());
    }
    args
}

/// Records of `cells` in order. Cells with a stored record from the same
/// config and seed are reused unless `recompute`; the rest run in-process
/// or, with more than one worker, as `tidn finetune` child processes.
pub fn run_cells(ctx: &Context, cells: &[Cell], recompute: bool) -> Result<Vec<ExperimentRecord>> {
    let pending: Vec<&Cell> = cells.iter().filter(|c| recompute || stored_record(ctx, c).is_none()).collect();
    info!("{} cells, {} to run, {} worker(s)", cells.len(), pending.len(), ctx.workers);
    if ctx.workers <= 1 {
        for cell in &pending {
            run_one(ctx, cell, None)?;
        }
    } else if !pending.is_empty() {
        let exe = std::env::current_exe().context("locating the tidn executable")?;
        let failed = run_processes(&exe, pending.iter().map(|c| worker_args(ctx, c)).collect(), ctx.workers)?;
        if !failed.is_empty() {
            bail!("{} worker process(es) failed", failed.len());
        }
    }
    cells
        .iter()
        .map(|c| stored_record(ctx, c).with_context(|| format!("no valid record for {} after running it", c.key())))
        .collect()
}

pub fn sweep(ctx: &Context, depths: &[usize], baseline: bool, recompute: bool) -> Result<()> {
    for depth in ctx.default_depths(depths) {
        let mut cells = Vec::new();
        if baseline {
            cells.push(Cell::baseline(depth, &ctx.config.primary_task));
        }
        cells.extend(grid_cells(&ctx.config, depth));
        let records = run_cells(ctx, &cells, recompute)?;
        let path = ctx.layout.sweep(depth);
        write_records(&path, &records)?;
        info!("{} records -> {}", records.len(), path.display());
    }
    Ok(())
}

pub fn task_shift(ctx: &Context, depth: Option<usize>, recompute: bool) -> Result<()> {
    if ctx.config.task_shift.is_empty() {
        bail!("config lists no task_shift pairs");
    }
    let depth = depth.unwrap_or(ctx.config.network.depth);
    let n_train = ctx.config.grid.n_train[0];
    let observer = ctx.config.grid.observers[0];
    for pair in &ctx.config.task_shift {
        let cells: Vec<Cell> = task_shift_cells(&ctx.config.grid.lambdas, n_train, depth, observer, &pair.source, &pair.target).into_iter().flat_map(|(s, r)| [s, r]).collect();
        let records = run_cells(ctx, &cells, recompute)?;
        let path = ctx.layout.task_shift(&pair.source, &pair.target);
        write_records(&path, &records)?;
        info!("{}→{}: {} records -> {}", pair.source, pair.target, records.len(), path.display());
    }
    Ok(())
}

fn tuned_params(ctx: &Context, cell: &Cell, pretrained: &ParameterSet, source: &TaskData) -> Result<ParameterSet> {
    let seed = cell.seed(&ctx.config);
    let path = ctx.layout.finetuned(cell);
    if let Ok(ckpt) = read_checkpoint(&path) {
        if ckpt.provenance == ctx.provenance && ckpt.metadata.get("seed") == Some(&seed.to_string()) {
            info!("reusing {}", path.display());
            return Ok(ckpt.params);
        }
    }
    info!("fine-tuning {}", cell.key());
    let tuned = finetune_cell(&ctx.config, cell, seed, pretrained, source)?.context("baseline cells are not fine-tuned")?;
    let metadata = BTreeMap::from([("cell".to_string(), cell.key()), ("seed".to_string(), seed.to_string()), ("best_epoch".to_string(), tuned.best_epoch.to_string())]);
    write_checkpoint(&path, &Checkpoint { spec: ctx.config.network_spec(cell.depth)?, params: tuned.params.clone(), provenance: ctx.provenance.clone(), metadata })?;
    Ok(tuned.params)
}

/// Singular-value spectra of the class-pooled covariance of denoised test
/// images, for the pretrained network and each requested fine-tuned
/// variant.
pub fn spectra(ctx: &Context, lambdas: &[f64], depth: Option<usize>) -> Result<()> {
    let depth = depth.unwrap_or(ctx.config.network.depth);
    let task = ctx.config.primary_task.clone();
    let data = ctx.task_data(&task)?;
    let pretrained = ctx.pretrained(depth)?;
    let spec = ctx.config.network_spec(depth)?;
    let lambdas: Vec<f64> = if lambdas.is_empty() {
        let l = &ctx.config.grid.lambdas;
        vec![l.iter().copied().fold(f64::INFINITY, f64::min), l.iter().copied().fold(f64::NEG_INFINITY, f64::max)]
    } else {
        lambdas.to_vec()
    };
    let n_train = ctx.config.grid.n_train[0];
    let mut variants = vec![("pretrained".to_string(), pretrained.clone())];
    for &obs in &ctx.config.grid.observers {
        for &l in &lambdas {
            let cell = Cell::new(l, n_train, depth, obs, &task, &task);
            variants.push((format!("{} λ={l}", obs.name()), tuned_params(ctx, &cell, &pretrained, &data)?));
        }
    }
    let pixels = data.test.height() * data.test.width();
    let rank = match ctx.config.evaluation.spectrum_rank {
        0 => pixels,
        r => r.min(pixels),
    };
    let labels = data.test.labels();
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (name, params) in &variants {
        let images = denoise(params, &spec, &data.test.noisy_images(), 64)?;
        let sp = covariance_spectrum(&images, Some(&labels), rank)?;
        let proxy = condition_proxy(&sp, ctx.config.evaluation.condition_floor_fraction).ok();
        info!("{name}: condition proxy {proxy:?}");
        let top = sp.singular_values.first().copied().unwrap_or(1.0);
        series.push(Series { label: name.clone(), points: sp.singular_values.iter().enumerate().map(|(k, v)| ((k + 1) as f64, v / top)).collect(), errors: None });
        rows.extend(sp.singular_values.iter().enumerate().map(|(k, &v)| SpectrumRow {
            variant: name.clone(),
            index: k + 1,
            singular_value: v,
            matrix_dimension: sp.matrix_dimension,
            condition_proxy: proxy,
            master_seed: ctx.provenance.master_seed,
            config_hash: ctx.provenance.config_hash.clone(),
        }));
    }
    atomic_write(&ctx.layout.spectra_csv(), &encode_csv(&rows, &SPECTRUM_COLUMNS)?)?;
    let plot = LinePlot { title: format!("Covariance spectra of denoised images (D={depth}, {task})"), x_label: "index".into(), y_label: "σ_k / σ_1".into(), log_y: true, series };
    let svg = plot.render().replacen('\n', &format!("\n<!-- config_hash={} master_seed={} -->\n", ctx.provenance.config_hash, ctx.provenance.master_seed), 1);
    atomic_write(&ctx.layout.spectra_svg(), svg.as_bytes())?;
    info!("{} spectra -> {}", variants.len(), ctx.layout.spectra_csv().display());
    Ok(())
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|f| f.extension().is_some_and(|x| x == "csv")).collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no record files given");
    }
    Ok(files)
}

pub fn report(inputs: &[PathBuf], out_dir: &Path, force: bool) -> Result<()> {
    let mut records = Vec::new();
    for f in expand_inputs(inputs)? {
        records.extend(read_records(&f).with_context(|| format!("reading records from {}", f.display()))?);
    }
    // Task-shift tables repeat the unshifted cells of the sweep.
    let mut unique: Vec<ExperimentRecord> = Vec::with_capacity(records.len());
    for r in records {
        if !unique.contains(&r) {
            unique.push(r);
        }
    }
    let records = unique;
    let artifacts = build_report(&records, force)?;
    for (name, bytes) in &artifacts {
        atomic_write(&out_dir.join(name), bytes)?;
    }
    info!("{} records -> {} files in {}", records.len(), artifacts.len(), out_dir.display());
    Ok(())
}

/// Runs the acceptance suite; returns whether every criterion passed.
pub fn acceptance(config_path: Option<&Path>, scale: &str, suite: Suite, out: &Path, fixtures: Option<&Path>) -> Result<bool> {
    let config = match config_path {
        Some(p) => ExperimentConfig::from_toml(&fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?)?,
        None => acceptance_config(scale)?,
    };
    let layout = Layout::new(out);
    let fixture_dir = fixtures.map_or_else(|| out.join("acceptance").join("fixtures"), Path::to_path_buf);
    let options = HarnessOptions { suite, config, fixture_dir, verbose: true };
    let verdict = run_acceptance(&options, &mut |o| println!("{}", o.line()))?;
    verdict.write(&layout.verdict())?;
    let failed = verdict.failures().len();
    println!("{} of {} criteria passed; verdict -> {}", verdict.outcomes.len() - failed, verdict.outcomes.len(), layout.verdict().display());
    Ok(failed == 0)
}
