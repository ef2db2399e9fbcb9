//! Acceptance suite. The fast selector runs the oracle properties; the
//! full selector adds the trend studies on the synthetic testbed.
//!
//! Datasets and pretrained checkpoints are fixtures: generated on first use
//! from the config's seeds and cached under a directory named after the
//! config hash. Grid cells are always recomputed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::{ExperimentConfig, TaskConfig};
use crate::dataset::Dataset;
use crate::diffnet::gradcheck::{check_layer, check_network};
use crate::diffnet::{denoise, AdamConfig, BnMode, LayerKind, NetworkSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::evaluation::EvalObserver;
use crate::experiment::{generate_split, pretrain_model, pretrain_seed, run_cell, Cell, DataBank, ExperimentRecord, TaskData, SPLIT_NAMES};
use crate::imaging::{apply_transmission_noise, AcquisitionConfig, Scanner, Sinogram};
use crate::io::{atomic_write, encode_csv, encode_records, read_checkpoint, read_dataset, write_checkpoint, write_dataset, Checkpoint, Provenance};
use crate::metrics::{empirical_auc, rmse, spearman, RocResult};
use crate::numerics::{ImageGrid, RandomStream};
use crate::observers::{estimate_class_stats, ho_template, slnn_ho_loss, train_slnn_no, SlnnConfig};
use crate::phantom::LocationPolicy;
use crate::training::{finetune, ObserverKind};

pub const COMPACT_CONFIG: &str = include_str!("../../../configs/acceptance-compact.toml");
pub const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

/// Bumped whenever cached fixtures stop matching what the code generates.
const FIXTURE_VERSION: u32 = 1;

pub const VERDICT_COLUMNS: [&str; 6] = ["criterion_id", "status", "measured", "threshold", "config_hash", "master_seed"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Fast,
    Full,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Suite::Fast),
            "full" => Ok(Suite::Full),
            _ => Err(Error::InvalidInput(format!("unknown suite {s:?} (fast or full)"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Fast => "fast",
            Suite::Full => "full",
        })
    }
}

/// Testbed config by scale name: `compact` (default) or `desk`.
pub fn acceptance_config(scale: &str) -> Result<ExperimentConfig> {
    match scale {
        "compact" => ExperimentConfig::from_toml(COMPACT_CONFIG),
        "desk" => ExperimentConfig::from_toml(DESK_CONFIG),
        _ => Err(Error::InvalidInput(format!("unknown acceptance scale {scale:?} (compact or desk)"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub id: String,
    pub passed: bool,
    pub measured: String,
    pub threshold: String,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:<4} measured: {} | threshold: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.measured,
            self.threshold,
            self.seconds
        )
    }
}

#[derive(Serialize)]
struct VerdictRow<'a> {
    criterion_id: &'a str,
    status: &'static str,
    measured: &'a str,
    threshold: &'a str,
    config_hash: &'a str,
    master_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub suite: Suite,
    pub provenance: Provenance,
    pub outcomes: Vec<Outcome>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&Outcome> {
        self.outcomes.iter().filter(|o| !o.passed).collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let rows: Vec<VerdictRow> = self
            .outcomes
            .iter()
            .map(|o| VerdictRow {
                criterion_id: &o.id,
                status: if o.passed { "pass" } else { "fail" },
                measured: &o.measured,
                threshold: &o.threshold,
                config_hash: &self.provenance.config_hash,
                master_seed: self.provenance.master_seed,
            })
            .collect();
        encode_csv(&rows, &VERDICT_COLUMNS)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_csv()?)
    }
}

#[derive(Clone, Debug)]
pub struct HarnessOptions {
    pub suite: Suite,
    /// Testbed for the full suite and the no-op check.
    pub config: ExperimentConfig,
    pub fixture_dir: PathBuf,
    /// Progress messages on stderr.
    pub verbose: bool,
}

/// Runs the selected criteria in order, handing each outcome to
/// `on_outcome` as soon as it is known. A criterion whose computation fails
/// is reported as failed with the error as its measurement; only fixture
/// setup problems abort the run.
pub fn run_acceptance(options: &HarnessOptions, on_outcome: &mut dyn FnMut(&Outcome)) -> Result<Verdict> {
    let config = &options.config;
    let provenance = Provenance { config_hash: config.hash()?, master_seed: config.seed };
    let mut outcomes = Vec::new();
    let mut emit = |o: Outcome| {
        on_outcome(&o);
        outcomes.push(o);
    };
    let log = |msg: &str| {
        if options.verbose {
            eprintln!("[acceptance] {msg}");
        }
    };

    for check in FAST_CHECKS {
        let t = Instant::now();
        match (check.run)(options) {
            Ok(parts) => parts.into_iter().for_each(|p| emit(p.finish(t))),
            Err(Error::Setup(msg)) => return Err(Error::Setup(msg)),
            Err(e) => emit(Part::error(check.id, &e).finish(t)),
        }
    }
    if options.suite == Suite::Full {
        let mut study = Study::new(config, &options.fixture_dir, options.verbose)?;
        for check in FULL_CHECKS {
            log(&format!("criterion {}", check.id));
            let t = Instant::now();
            match (check.run)(&mut study) {
                Ok(parts) => parts.into_iter().for_each(|p| emit(p.finish(t))),
                Err(Error::Setup(msg)) => return Err(Error::Setup(msg)),
                Err(e) => emit(Part::error(check.id, &e).finish(t)),
            }
        }
    }
    Ok(Verdict { suite: options.suite, provenance, outcomes })
}

/// An outcome before its timing is attached.
struct Part {
    id: String,
    passed: bool,
    measured: String,
    threshold: String,
}

impl Part {
    fn new(id: &str, passed: bool, measured: impl Into<String>, threshold: impl Into<String>) -> Self {
        Self { id: id.into(), passed, measured: measured.into(), threshold: threshold.into() }
    }

    fn error(id: &str, e: &Error) -> Self {
        Self::new(id, false, format!("error: {e}"), "completes without error")
    }

    fn finish(self, started: Instant) -> Outcome {
        Outcome { id: self.id, passed: self.passed, measured: self.measured, threshold: self.threshold, seconds: started.elapsed().as_secs_f64() }
    }
}

struct FastCheck {
    id: &'static str,
    run: fn(&HarnessOptions) -> Result<Vec<Part>>,
}

struct FullCheck {
    id: &'static str,
    run: fn(&mut Study) -> Result<Vec<Part>>,
}

const FAST_CHECKS: [FastCheck; 4] = [
    FastCheck { id: "1", run: |_| criterion_gradients() },
    FastCheck { id: "2", run: |_| criterion_observer_oracles() },
    FastCheck { id: "3", run: |_| criterion_imaging() },
    FastCheck { id: "4", run: criterion_noop },
];

const FULL_CHECKS: [FullCheck; 6] = [
    FullCheck { id: "5", run: criterion_tradeoff },
    FullCheck { id: "6", run: criterion_layer_sweep },
    FullCheck { id: "7", run: criterion_depth },
    FullCheck { id: "8", run: criterion_conditioning },
    FullCheck { id: "9", run: criterion_task_shift },
    FullCheck { id: "10", run: criterion_reproducibility },
];

// ---------------------------------------------------------------- fixtures

/// Cached datasets and pretrained checkpoints of one config.
pub struct Fixtures {
    dir: PathBuf,
    config: ExperimentConfig,
    provenance: Provenance,
    verbose: bool,
}

impl Fixtures {
    pub fn new(root: &Path, config: &ExperimentConfig, verbose: bool) -> Result<Self> {
        let hash = config.hash()?;
        let dir = root.join(format!("{hash}-v{FIXTURE_VERSION}"));
        fs::create_dir_all(&dir).map_err(|e| Error::Setup(format!("cannot create fixture directory {}: {e}", dir.display())))?;
        let toml = config.to_toml()?;
        atomic_write(&dir.join("config.toml"), toml.as_bytes()).map_err(|e| Error::Setup(format!("fixture directory {} is not writable: {e}", dir.display())))?;
        Ok(Self { dir, config: config.clone(), provenance: Provenance { config_hash: hash, master_seed: config.seed }, verbose })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("[fixtures] {msg}");
        }
    }

    fn split(&self, task: &str, split: &str) -> Result<Dataset> {
        let path = self.dir.join(format!("data-{task}-{split}.tidn"));
        if let Ok((ds, prov)) = read_dataset(&path) {
            if prov == self.provenance {
                return Ok(ds);
            }
        }
        self.log(&format!("generating {task}/{split}"));
        let ds = generate_split(&self.config, task, split)?;
        write_dataset(&path, &ds, &self.provenance)?;
        Ok(ds)
    }

    pub fn task_data(&self, task: &str) -> Result<TaskData> {
        let [train, validation, test] = SPLIT_NAMES.map(|s| self.split(task, s));
        Ok(TaskData { train: train?, validation: validation?, test: test? })
    }

    /// Pretrained network of the given depth, trained on the primary task.
    pub fn pretrained(&self, depth: usize, primary: &TaskData) -> Result<ParameterSet> {
        let spec = self.config.network_spec(depth)?;
        let path = self.dir.join(format!("pretrained-d{depth}.ckpt"));
        if let Ok(ckpt) = read_checkpoint(&path) {
            if ckpt.provenance == self.provenance && ckpt.spec == spec {
                return Ok(ckpt.params);
            }
        }
        self.log(&format!("pretraining depth {depth}"));
        let result = pretrain_model(&self.config, primary, depth)?;
        let metadata = BTreeMap::from([
            ("seed".to_string(), pretrain_seed(&self.config, depth).to_string()),
            ("task".to_string(), self.config.primary_task.clone()),
            ("best_epoch".to_string(), result.best_epoch.to_string()),
        ]);
        write_checkpoint(&path, &Checkpoint { spec, params: result.params.clone(), provenance: self.provenance.clone(), metadata })?;
        Ok(result.params)
    }
}

// ------------------------------------------------------------ fast checks

fn criterion_gradients() -> Result<Vec<Part>> {
    let mut worst = 0.0f64;
    let mut probes = 0;
    let kinds = [LayerKind::ConvRelu, LayerKind::ConvBnRelu, LayerKind::ConvBn, LayerKind::Conv];
    for (i, kind) in kinds.into_iter().enumerate() {
        let c = check_layer(kind, 101 + i as u64)?;
        worst = worst.max(c.max_rel_err);
        probes += c.probes;
    }
    let spec = NetworkSpec::new(5, 3)?;
    for (i, mode) in [BnMode::Batch, BnMode::Running].into_iter().enumerate() {
        let c = check_network(&spec, &[mode; 5], 111 + i as u64, 12, 16)?;
        worst = worst.max(c.max_rel_err);
        probes += c.probes;
    }
    Ok(vec![Part::new("1", worst < 1e-4, format!("max relative error {worst:.2e} over {probes} probes"), "< 1e-4")])
}

/// Equal-covariance Gaussian classes with known mean difference.
struct GaussianToy {
    covariance: DMatrix<f64>,
    mean_diff: DVector<f64>,
}

impl GaussianToy {
    const DIM: usize = 8;

    /// Covariance `I + 0.3·AAᵀ/d` and a random mean difference scaled to the
    /// requested Hotelling SNR.
    fn new(snr: f64, stream: &mut RandomStream) -> Self {
        let d = Self::DIM;
        let a = DMatrix::from_fn(d, d, |_, _| stream.normal());
        let covariance = DMatrix::identity(d, d) + &a * a.transpose() * (0.3 / d as f64);
        let dir = DVector::from_fn(d, |_, _| stream.normal());
        let raw = dir.dot(&covariance.clone().cholesky().expect("positive definite").solve(&dir)).sqrt();
        Self { covariance, mean_diff: dir * (snr / raw) }
    }

    fn hotelling(&self) -> DVector<f64> {
        self.covariance.clone().cholesky().expect("positive definite").solve(&self.mean_diff)
    }

    fn snr(&self) -> f64 {
        self.mean_diff.dot(&self.hotelling()).sqrt()
    }

    fn sample(&self, n: usize, present: bool, stream: &mut RandomStream) -> Vec<Vec<f64>> {
        let l = self.covariance.clone().cholesky().expect("positive definite").l();
        (0..n)
            .map(|_| {
                let z = DVector::from_fn(Self::DIM, |_, _| stream.normal());
                let mut x = &l * z;
                if present {
                    x += &self.mean_diff;
                }
                x.iter().copied().collect()
            })
            .collect()
    }
}

fn pooled_sample_hotelling(x0: &[Vec<f64>], x1: &[Vec<f64>]) -> DVector<f64> {
    let d = x0[0].len();
    let mean = |xs: &[Vec<f64>]| DVector::from_fn(d, |i, _| xs.iter().map(|x| x[i]).sum::<f64>() / xs.len() as f64);
    let cov = |xs: &[Vec<f64>], m: &DVector<f64>| {
        let mut k = DMatrix::zeros(d, d);
        for x in xs {
            let c = DVector::from_column_slice(x) - m;
            k += &c * c.transpose();
        }
        k / (xs.len() as f64 - 1.0)
    };
    let (m0, m1) = (mean(x0), mean(x1));
    let k = (cov(x0, &m0) + cov(x1, &m1)) * 0.5;
    k.cholesky().expect("positive definite").solve(&(m1 - m0))
}

fn cosine(a: &DVector<f64>, b: &[f64]) -> f64 {
    let b = DVector::from_column_slice(b);
    a.dot(&b) / (a.norm() * b.norm())
}

fn criterion_observer_oracles() -> Result<Vec<Part>> {
    let mut parts = Vec::new();

    // (a) Exact agreement with pairwise counting, ties included. The
    // counting oracle divides two exact integers once, so the correctly
    // rounded quotient must come out bit for bit.
    let mut s = RandomStream::new(201);
    let mut mismatches = 0;
    for instance in 0..100 {
        let (n0, n1) = (1 + s.below(60), 1 + s.below(60));
        let draw = |s: &mut RandomStream| if instance % 2 == 0 { s.below(6) as f64 } else { s.normal() };
        let t0: Vec<f64> = (0..n0).map(|_| draw(&mut s)).collect();
        let t1: Vec<f64> = (0..n1).map(|_| draw(&mut s)).collect();
        let mut twice: u64 = 0;
        for a in &t1 {
            for b in &t0 {
                twice += match a.partial_cmp(b).expect("finite") {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        let brute = twice as f64 / (2 * n0 * n1) as f64;
        if empirical_auc(&t0, &t1)?.auc != brute {
            mismatches += 1;
        }
    }
    parts.push(Part::new("2a", mismatches == 0, format!("{mismatches} of 100 instances differ"), "0 differ (exact equality)"));

    let mut s = RandomStream::new(202);
    let toy = GaussianToy::new(1.466, &mut s);
    let n_train = 10_000;
    let n_test = 100_000;
    let train0 = toy.sample(n_train, false, &mut s.derive(1));
    let train1 = toy.sample(n_train, true, &mut s.derive(2));

    // (b) Hotelling observer against Φ(SNR/√2).
    let stats = estimate_class_stats(&train0, &train1)?;
    let ho = ho_template(&stats)?;
    let test0 = toy.sample(n_test, false, &mut s.derive(3));
    let test1 = toy.sample(n_test, true, &mut s.derive(4));
    let roc = empirical_auc(&ho.apply_all(&test0)?, &ho.apply_all(&test1)?)?;
    let analytic = Normal::standard().cdf(toy.snr() / 2f64.sqrt());
    let err = (roc.auc - analytic).abs();
    parts.push(Part::new("2b", err <= 0.005, format!("AUC {:.4} vs analytic {analytic:.4} (|diff| {err:.4})", roc.auc), "|diff| <= 0.005"));
    drop((test0, test1));

    // (c) SLNN-NO direction against the true K⁻¹Δf̄.
    let features: Vec<&[f64]> = train0.iter().chain(&train1).map(|v| v.as_slice()).collect();
    let labels: Vec<u8> = (0..2 * n_train).map(|i| u8::from(i >= n_train)).collect();
    let cfg = SlnnConfig { epochs: 30, batch_present: 50, batch_absent: 50, adam: AdamConfig::with_learning_rate(1e-2) };
    let slnn = train_slnn_no(&features, &labels, &cfg, &mut s.derive(5))?;
    let cos = cosine(&toy.hotelling(), &slnn.weights);
    parts.push(Part::new("2c", cos >= 0.95, format!("cosine {cos:.4}"), ">= 0.95"));

    // (d) Minimizer of the SLNN-HO loss by full-batch gradient descent,
    // against the sample K⁻¹Δf̄ of the same data.
    let n = 2_000;
    let (x0, x1) = (&train0[..n], &train1[..n]);
    let outputs: Vec<&[f64]> = x0.iter().chain(x1).map(|v| v.as_slice()).collect();
    let labels: Vec<u8> = (0..2 * n).map(|i| u8::from(i >= n)).collect();
    let target = pooled_sample_hotelling(x0, x1);
    let trace: f64 = outputs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / outputs.len() as f64;
    let step = 1.0 / (2.0 * trace);
    let mut w = vec![0.0; GaussianToy::DIM];
    for _ in 0..2_000 {
        let g = slnn_ho_loss(&outputs, &labels, &w)?;
        for (wi, gi) in w.iter_mut().zip(&g.d_weights) {
            *wi -= step * gi;
        }
    }
    let rel = (DVector::from_column_slice(&w) - &target).norm() / target.norm();
    parts.push(Part::new("2d", rel < 0.02, format!("relative error {rel:.2e}"), "< 0.02"));
    Ok(parts)
}

/// Soft-edged body with two Gaussian inserts.
fn smooth_phantom(n: usize) -> ImageGrid {
    let c = (n as f64 - 1.0) / 2.0;
    let mut img = ImageGrid::zeros(n, n);
    for r in 0..n {
        for col in 0..n {
            let (y, x) = (r as f64 - c, col as f64 - c);
            let rho = (x * x + y * y).sqrt();
            let body = 1.0 / (1.0 + ((rho - 22.0) / 1.5).exp());
            let insert = 0.5 * (-((x - 6.0).powi(2) + (y + 4.0).powi(2)) / 18.0).exp();
            let cavity = -0.3 * (-((x + 8.0).powi(2) + (y - 7.0).powi(2)) / 30.0).exp();
            img.set(r, col, body + insert + cavity * body);
        }
    }
    img
}

fn criterion_imaging() -> Result<Vec<Part>> {
    let n = 64;
    let cfg = AcquisitionConfig { n_views: 180, n_bins: 96, incident_flux: 500.0, normalization: 10.0, count_floor: 1 };
    let scanner = Scanner::new(&cfg, n)?;
    let phantom = smooth_phantom(n);
    let recon = scanner.fbp(&scanner.radon(&phantom)?)?;
    let err: f64 = recon.data().iter().zip(phantom.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let norm: f64 = phantom.data().iter().map(|v| v * v).sum();
    let rel = (err / norm).sqrt();
    let mut parts = vec![Part::new("3a", rel < 0.05, format!("relative RMSE {rel:.4}"), "< 0.05")];

    // Counts recovered from the noisy line integrals must have Poisson
    // mean and variance at every attenuation level.
    let (views, bins) = (200, 100);
    let m = (views * bins) as f64;
    let mut worst_z = 0.0f64;
    let mut worst_dispersion = 0.0f64;
    for (k, g) in [0.0, 5.0, 15.0, 30.0].into_iter().enumerate() {
        let sino = Sinogram { n_views: views, n_bins: bins, data: vec![g; views * bins] };
        let noisy = apply_transmission_noise(&sino, &cfg, &RandomStream::new(301 + k as u64))?;
        let counts: Vec<f64> = noisy.data.iter().map(|v| (cfg.incident_flux * (-v / cfg.normalization).exp()).round()).collect();
        let expected = cfg.incident_flux * (-g / cfg.normalization).exp();
        let mean = counts.iter().sum::<f64>() / m;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (m - 1.0);
        worst_z = worst_z.max((mean - expected).abs() / (expected / m).sqrt());
        worst_dispersion = worst_dispersion.max((var / mean - 1.0).abs());
    }
    let ok = worst_z < 4.0 && worst_dispersion < 0.05;
    parts.push(Part::new(
        "3b",
        ok,
        format!("max mean z-score {worst_z:.2}, max |var/mean - 1| {worst_dispersion:.4}"),
        "z < 4 and |var/mean - 1| < 0.05",
    ));
    Ok(parts)
}

/// A miniature of the testbed: 16×16 images, a depth-5 network and a few
/// pretraining epochs, enough to give batch norm nontrivial statistics.
pub fn noop_config(base: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    for t in c.tasks.values_mut() {
        shrink_task(t);
    }
    c.acquisition = AcquisitionConfig { n_views: 30, n_bins: 24, ..c.acquisition };
    c.sizes.train_per_class = 32;
    c.sizes.validation_per_class = 16;
    c.sizes.test_per_class = 32;
    c.network.depth = 5;
    c.network.filters = 4;
    c.pretrain.epochs = 3;
    c.finetune.epochs = 2;
    c.grid.depths = vec![5];
    c.grid.n_train = vec![0];
    c.validate()?;
    Ok(c)
}

fn shrink_task(t: &mut TaskConfig) {
    t.background.grid_size = 16;
    t.background.mean_lump_count = 5.0;
    t.background.lump_width = 2.0;
    if let LocationPolicy::UniformInDisk { radius } = &mut t.signal.location_policy {
        *radius = radius.min(2.0);
    }
}

fn criterion_noop(options: &HarnessOptions) -> Result<Vec<Part>> {
    let config = noop_config(&options.config)?;
    let fixtures = Fixtures::new(&options.fixture_dir, &config, options.verbose)?;
    let data = fixtures.task_data(&config.primary_task)?;
    let depth = config.network.depth;
    let spec = config.network_spec(depth)?;
    let pretrained = fixtures.pretrained(depth, &data)?;
    let noisy = data.test.noisy_images();
    let targets = data.test.targets();
    let reference = denoise(&pretrained, &spec, &noisy, 64)?;
    let reference_rmse = rmse(&reference, &targets)?;

    let (mut runs, mut differing, mut worst_rmse) = (0, 0usize, 0.0f64);
    for kind in [ObserverKind::SlnnNo, ObserverKind::SlnnHo] {
        for &lambda in &config.grid.lambdas {
            let hybrid = config.finetune.hybrid(lambda, 0, kind);
            let mut stream = RandomStream::new(config.derived_seed(&format!("noop/{kind:?}/{lambda}")));
            let tuned = finetune(&pretrained, &spec, &data.train, &data.validation, &hybrid, &mut stream)?;
            let out = denoise(&tuned.params, &spec, &noisy, 64)?;
            differing += out
                .iter()
                .zip(&reference)
                .map(|(a, b)| a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count())
                .sum::<usize>();
            worst_rmse = worst_rmse.max((rmse(&out, &targets)? - reference_rmse).abs());
            runs += 1;
        }
    }
    Ok(vec![Part::new(
        "4",
        differing == 0 && worst_rmse == 0.0,
        format!("{differing} differing output values over {runs} runs, max |RMSE diff| {worst_rmse:e}"),
        "0 differing values and RMSE identical",
    )])
}

// ------------------------------------------------------------ full checks

/// Lazily materialized data, pretrained networks and cell records.
pub struct Study {
    config: ExperimentConfig,
    fixtures: Fixtures,
    data: DataBank,
    pretrained: BTreeMap<usize, ParameterSet>,
    records: BTreeMap<String, ExperimentRecord>,
    verbose: bool,
}

impl Study {
    pub fn new(config: &ExperimentConfig, fixture_dir: &Path, verbose: bool) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            fixtures: Fixtures::new(fixture_dir, config, verbose)?,
            data: DataBank::new(),
            pretrained: BTreeMap::new(),
            records: BTreeMap::new(),
            verbose,
        })
    }

    fn task_data(&mut self, task: &str) -> Result<&TaskData> {
        if !self.data.contains_key(task) {
            let d = self.fixtures.task_data(task)?;
            self.data.insert(task.to_string(), d);
        }
        Ok(&self.data[task])
    }

    fn pretrained(&mut self, depth: usize) -> Result<ParameterSet> {
        if let Some(p) = self.pretrained.get(&depth) {
            return Ok(p.clone());
        }
        let primary = self.config.primary_task.clone();
        self.task_data(&primary)?;
        let p = self.fixtures.pretrained(depth, &self.data[&primary])?;
        self.pretrained.insert(depth, p.clone());
        Ok(p)
    }

    /// Runs `cell` with `seed`, bypassing the record cache.
    pub fn run_fresh(&mut self, cell: &Cell, seed: u64) -> Result<ExperimentRecord> {
        let pretrained = self.pretrained(cell.depth)?;
        self.task_data(&cell.source_task)?;
        self.task_data(&cell.target_task)?;
        if self.verbose {
            eprintln!("[acceptance] cell {}", cell.key());
        }
        let t = Instant::now();
        let (record, _) = run_cell(&self.config, cell, seed, &pretrained, &self.data[&cell.source_task], &self.data[&cell.target_task])?;
        if self.verbose {
            let auc = record.auc(EvalObserver::SlnnNo).map_or(f64::NAN, |r| r.auc);
            eprintln!("[acceptance]   auc {auc:.4} rmse {:.4} cond {:?} ({:.0}s)", record.rmse, record.condition_proxy, t.elapsed().as_secs_f64());
        }
        Ok(record)
    }

    pub fn record(&mut self, cell: &Cell) -> Result<ExperimentRecord> {
        let key = cell.key();
        if let Some(r) = self.records.get(&key) {
            return Ok(r.clone());
        }
        let record = self.run_fresh(cell, cell.seed(&self.config))?;
        self.records.insert(key, record.clone());
        Ok(record)
    }

    pub fn records(&self) -> impl Iterator<Item = &ExperimentRecord> {
        self.records.values()
    }

    fn primary(&self) -> String {
        self.config.primary_task.clone()
    }

    fn depth(&self) -> usize {
        self.config.network.depth
    }

    fn n_train(&self) -> usize {
        self.config.grid.n_train[0]
    }

    /// Smallest and largest λ of the grid.
    fn lambda_ends(&self) -> (f64, f64) {
        let l = &self.config.grid.lambdas;
        (l.iter().copied().fold(f64::INFINITY, f64::min), l.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    fn tuned(&self, lambda: f64, n_train: usize, depth: usize, observer: ObserverKind) -> Cell {
        let task = self.primary();
        Cell::new(lambda, n_train, depth, observer, &task, &task)
    }

    fn auc(&mut self, cell: &Cell) -> Result<RocResult> {
        self.record(cell)?.require_auc(EvalObserver::SlnnNo)
    }
}

fn combined_se(a: &RocResult, b: &RocResult) -> f64 {
    a.standard_error.hypot(b.standard_error)
}

fn criterion_tradeoff(study: &mut Study) -> Result<Vec<Part>> {
    let (lo, hi) = study.lambda_ends();
    let (depth, n) = (study.depth(), study.n_train());
    let baseline = study.auc(&Cell::baseline(depth, &study.primary()))?;
    let mut aucs = Vec::new();
    let mut rmses = BTreeMap::new();
    for &lambda in &study.config.grid.lambdas.clone() {
        let r = study.record(&study.tuned(lambda, n, depth, ObserverKind::SlnnNo))?;
        aucs.push((lambda, r.require_auc(EvalObserver::SlnnNo)?));
        rmses.insert(lambda.to_bits(), r.rmse);
    }
    let at = |l: f64| aucs.iter().find(|(x, _)| *x == l).map(|(_, r)| *r).expect("grid lambda");
    let (a_lo, a_hi) = (at(lo), at(hi));
    let se = combined_se(&a_lo, &a_hi);
    let (r_lo, r_hi) = (rmses[&lo.to_bits()], rmses[&hi.to_bits()]);
    let one_minus: Vec<f64> = aucs.iter().map(|(l, _)| 1.0 - l).collect();
    let values: Vec<f64> = aucs.iter().map(|(_, r)| r.auc).collect();
    let rho = spearman(&one_minus, &values)?;
    Ok(vec![
        Part::new(
            "5a",
            a_lo.auc - a_hi.auc > 2.0 * se,
            format!("AUC(λ={lo}) - AUC(λ={hi}) = {:.4} - {:.4} = {:.4}, 2×SE {:.4}", a_lo.auc, a_hi.auc, a_lo.auc - a_hi.auc, 2.0 * se),
            "difference > 2×combined SE",
        ),
        Part::new("5b", a_hi.auc > baseline.auc, format!("AUC(λ={hi}) {:.4}, pretrained {:.4}", a_hi.auc, baseline.auc), "AUC(λ=0.99) > pretrained AUC"),
        Part::new("5c", r_lo > r_hi, format!("RMSE(λ={lo}) {r_lo:.5}, RMSE(λ={hi}) {r_hi:.5}"), "RMSE(λ=0.01) > RMSE(λ=0.99)"),
        Part::new("5d", rho > 0.0, format!("Spearman ρ(1-λ, AUC) {rho:.3} over {} points", aucs.len()), "> 0"),
    ])
}

fn criterion_layer_sweep(study: &mut Study) -> Result<Vec<Part>> {
    let (lo, _) = study.lambda_ends();
    let depth = study.depth();
    let baseline = study.auc(&Cell::baseline(depth, &study.primary()))?;
    let mut gains = Vec::new();
    for n in 2..=4 {
        gains.push((n, study.auc(&study.tuned(lo, n, depth, ObserverKind::SlnnNo))?));
    }
    let two = gains[0].1;
    let se = combined_se(&two, &baseline);
    // Pair closest to (or furthest past) its bound.
    let mut tightest = (0.0, 0.0);
    let mut spread_ok = true;
    for i in 0..gains.len() {
        for j in i + 1..gains.len() {
            let (a, b) = (gains[i].1, gains[j].1);
            let (d, bound) = ((a.auc - b.auc).abs(), 2.0 * combined_se(&a, &b));
            spread_ok &= d <= bound;
            if i + j == 1 || d - bound > tightest.0 - tightest.1 {
                tightest = (d, bound);
            }
        }
    }
    let listing = gains.iter().map(|(n, r)| format!("N={n}: {:.4}", r.auc)).collect::<Vec<_>>().join(", ");
    Ok(vec![
        Part::new(
            "6a",
            two.auc - baseline.auc > 2.0 * se,
            format!("AUC(N_train=2) {:.4} - pretrained {:.4} = {:.4}, 2×SE {:.4}", two.auc, baseline.auc, two.auc - baseline.auc, 2.0 * se),
            "gain > 2×combined SE",
        ),
        Part::new(
            "6b",
            spread_ok,
            format!("{listing}; tightest pair |diff| {:.4} vs 2×SE {:.4}", tightest.0, tightest.1),
            "pairwise |AUC diff| <= 2×combined SE for N_train 2..4",
        ),
    ])
}

fn criterion_depth(study: &mut Study) -> Result<Vec<Part>> {
    let (lo, _) = study.lambda_ends();
    let n = study.n_train();
    let mut depths = study.config.grid.depths.clone();
    depths.sort_unstable();
    let mut rows = Vec::new();
    for &d in &depths {
        let pre = study.auc(&Cell::baseline(d, &study.primary()))?;
        let tuned = study.auc(&study.tuned(lo, n, d, ObserverKind::SlnnNo))?;
        rows.push((d, pre, tuned));
    }
    let monotone = rows.windows(2).all(|w| w[1].1.auc <= w[0].1.auc + combined_se(&w[0].1, &w[1].1));
    let improved = rows.iter().all(|(_, pre, tuned)| tuned.auc - pre.auc > 2.0 * combined_se(pre, tuned));
    let pre_list = rows.iter().map(|(d, p, _)| format!("D={d}: {:.4}±{:.4}", p.auc, p.standard_error)).collect::<Vec<_>>().join(", ");
    let gain_list = rows
        .iter()
        .map(|(d, p, t)| format!("D={d}: {:.4} (2×SE {:.4})", t.auc - p.auc, 2.0 * combined_se(p, t)))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(vec![
        Part::new("7a", monotone, format!("pretrained AUC {pre_list}"), "non-increasing in D within combined SE"),
        Part::new("7b", improved, format!("fine-tuned gain {gain_list}"), "gain > 2×combined SE at every depth"),
    ])
}

fn criterion_conditioning(study: &mut Study) -> Result<Vec<Part>> {
    let (lo, hi) = study.lambda_ends();
    let (depth, n) = (study.depth(), study.n_train());
    let cond = |r: ExperimentRecord| r.condition_proxy.ok_or_else(|| Error::State(format!("record {} has no spectrum", r.cell.key())));
    let base = cond(study.record(&Cell::baseline(depth, &study.primary()))?)?;
    let ho = cond(study.record(&study.tuned(lo, n, depth, ObserverKind::SlnnHo))?)?;
    let no = cond(study.record(&study.tuned(hi, n, depth, ObserverKind::SlnnNo))?)?;
    Ok(vec![
        Part::new("8a", ho < base, format!("SLNN-HO λ={lo}: {ho:.4e}, pretrained {base:.4e}"), "strictly smaller than pretrained"),
        Part::new("8b", no >= 0.9 * base, format!("SLNN-NO λ={hi}: {no:.4e}, pretrained {base:.4e} (ratio {:.3})", no / base), ">= 0.9 × pretrained"),
    ])
}

fn is_fixed(config: &ExperimentConfig, task: &str) -> Result<bool> {
    Ok(matches!(config.task(task)?.signal.location_policy, LocationPolicy::FixedCenter))
}

/// (reference − shifted) AUC gap and its combined SE.
struct Gap {
    lambda: f64,
    shifted: RocResult,
    reference: RocResult,
}

impl Gap {
    fn value(&self) -> f64 {
        self.reference.auc - self.shifted.auc
    }

    fn se(&self) -> f64 {
        combined_se(&self.reference, &self.shifted)
    }
}

fn shift_gaps(study: &mut Study, source: &str, target: &str) -> Result<Vec<Gap>> {
    let (depth, n) = (study.depth(), study.n_train());
    let mut gaps = Vec::new();
    for &lambda in &study.config.grid.lambdas.clone() {
        let shifted = study.auc(&Cell::new(lambda, n, depth, ObserverKind::SlnnNo, source, target))?;
        let reference = study.auc(&Cell::new(lambda, n, depth, ObserverKind::SlnnNo, target, target))?;
        gaps.push(Gap { lambda, shifted, reference });
    }
    Ok(gaps)
}

fn criterion_task_shift(study: &mut Study) -> Result<Vec<Part>> {
    let config = study.config.clone();
    let mut fixed_to_random = None;
    let mut random_to_fixed = None;
    for pair in &config.task_shift {
        match (is_fixed(&config, &pair.source)?, is_fixed(&config, &pair.target)?) {
            (true, false) => fixed_to_random = Some(pair.clone()),
            (false, true) => random_to_fixed = Some(pair.clone()),
            _ => {}
        }
    }
    let (fr, rf) = match (fixed_to_random, random_to_fixed) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidInput("task shift needs a fixed→random and a random→fixed pair".into())),
    };
    let (lo, hi) = study.lambda_ends();
    let gaps_fr = shift_gaps(study, &fr.source, &fr.target)?;
    let gaps_rf = shift_gaps(study, &rf.source, &rf.target)?;

    let violations: Vec<String> = gaps_fr
        .iter()
        .map(|g| ("fixed→random", g))
        .chain(gaps_rf.iter().map(|g| ("random→fixed", g)))
        .filter(|(_, g)| g.shifted.auc > g.reference.auc + g.se())
        .map(|(name, g)| format!("{name} λ={}: shifted {:.4} > reference {:.4} + SE {:.4}", g.lambda, g.shifted.auc, g.reference.auc, g.se()))
        .collect();
    let at = |gaps: &[Gap], l: f64| gaps.iter().position(|g| g.lambda == l).expect("grid lambda");
    let (fr_lo, fr_hi) = (&gaps_fr[at(&gaps_fr, lo)], &gaps_fr[at(&gaps_fr, hi)]);
    let rf_lo = &gaps_rf[at(&gaps_rf, lo)];
    let rf_hi = &gaps_rf[at(&gaps_rf, hi)];
    let direction_se = fr_lo.se().hypot(rf_lo.se());
    let worst = gaps_fr
        .iter()
        .chain(&gaps_rf)
        .map(|g| (g.shifted.auc - g.reference.auc) / g.se())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![
        Part::new(
            "9a",
            violations.is_empty(),
            if violations.is_empty() { format!("largest (shifted - reference)/SE {worst:.2} over {} comparisons", gaps_fr.len() + gaps_rf.len()) } else { violations.join("; ") },
            "shifted AUC <= reference AUC + combined SE at every λ, both directions",
        ),
        Part::new(
            "9b",
            fr_lo.value() > fr_hi.value(),
            format!(
                "fixed→random gap λ={lo}: {:.4}, λ={hi}: {:.4} (random→fixed: {:.4}, {:.4})",
                fr_lo.value(),
                fr_hi.value(),
                rf_lo.value(),
                rf_hi.value()
            ),
            "gap(λ=0.01) > gap(λ=0.99) for fixed→random",
        ),
        Part::new(
            "9c",
            fr_lo.value() - rf_lo.value() > 2.0 * direction_se,
            format!("gap fixed→random {:.4} - random→fixed {:.4} = {:.4}, 2×SE {:.4}", fr_lo.value(), rf_lo.value(), fr_lo.value() - rf_lo.value(), 2.0 * direction_se),
            "difference > 2×combined SE at λ=0.01",
        ),
    ])
}

fn criterion_reproducibility(study: &mut Study) -> Result<Vec<Part>> {
    let (lo, _) = study.lambda_ends();
    let cell = study.tuned(lo, study.n_train(), study.depth(), ObserverKind::SlnnNo);
    let first = study.record(&cell)?;
    let again = study.run_fresh(&cell, first.seed)?;
    let (a, b) = (encode_records(&[first])?, encode_records(&[again])?);
    let same = a == b;
    let measured = if same {
        format!("{} bytes identical for {}", a.len(), cell.key())
    } else {
        let at = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
        format!("records differ from byte {at} ({} vs {} bytes)", a.len(), b.len())
    };
    Ok(vec![Part::new("10", same, measured, "byte-identical record on rerun")])
}
