use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tidn_core::diffnet::{denoise, mse_loss};
use tidn_core::io::{decode_csv, read_checkpoint, read_dataset, read_records, SpectrumRow, SPECTRUM_COLUMNS};
use tidn_core::metrics::covariance_spectrum;

const CONFIG: &str = r#"
seed = 11
output_dir = "unused"
primary_task = "random"

[tasks.random.background]
grid_size = 16
mean_lump_count = 5.0
lump_amplitude = 0.3
lump_width = 2.0
dc_offset = 0.2
mask_semi_axes = [0.85, 0.9]

[tasks.random.signal]
amplitude_range = [0.3, 0.4]
width_range = [1.5, 2.0]

[tasks.random.signal.location_policy]
kind = "uniform-in-disk"
radius = 2.0

[tasks.fixed.background]
grid_size = 16
mean_lump_count = 5.0
lump_amplitude = 0.3
lump_width = 2.0
dc_offset = 0.2
mask_semi_axes = [0.85, 0.9]

[tasks.fixed.signal]
amplitude_range = [0.3, 0.4]
width_range = [1.5, 2.0]

[tasks.fixed.signal.location_policy]
kind = "fixed-center"

[acquisition]
n_views = 24
n_bins = 24
incident_flux = 500.0
normalization = 10.0
count_floor = 1

[sizes]
train_per_class = 8
validation_per_class = 4
test_per_class = 8

[network]
depth = 5
filters = 2
bn_eps = 0.00001
bn_momentum = 0.99

[pretrain]
epochs = 2
batch_present = 4
batch_absent = 4
patience = 10

[pretrain.adam]
learning_rate = 0.003
beta1 = 0.9
beta2 = 0.999
epsilon = 0.00000001

[finetune]
epochs = 1
batch_present = 4
batch_absent = 4
patience = 10

[finetune.adam]
learning_rate = 0.002
beta1 = 0.9
beta2 = 0.999
epsilon = 0.00000001

[evaluation]
observers = ["slnn-no", "rho"]
cho_noise_repeats = 2
spectrum_rank = 16
condition_floor_fraction = 0.5

[evaluation.slnn]
epochs = 2
batch_present = 4
batch_absent = 4

[evaluation.slnn.adam]
learning_rate = 0.001
beta1 = 0.9
beta2 = 0.999
epsilon = 0.00000001

[evaluation.dog]
sigma0 = 0.005
dilation = 1.4
q = 1.67
count = 10

[evaluation.internal_noise]
epsilon = 2.5

[grid]
lambdas = [0.01, 0.99]
n_train = [1, 2]
depths = [5]
observers = ["slnn-no"]

[[task_shift]]
source = "fixed"
target = "random"
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.toml");
        fs::write(&config, CONFIG).unwrap();
        let out = dir.path().join("out");
        Self { _dir: dir, config, out }
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_in(&self.out, args)
    }

    fn run_in(&self, out: &Path, args: &[&str]) -> Output {
        let output = Command::new(env!("CARGO_BIN_EXE_tidn"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(out)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        output
    }

    fn ok(&self, args: &[&str]) {
        let o = self.run(args);
        assert!(o.status.success(), "tidn {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn gen_data_is_balanced_and_reproducible() {
    let ws = Workspace::new();
    ws.ok(&["gen-data", "--task", "random"]);
    let path = ws.out.join("data/random-train.tidn");
    let first = fs::read(&path).unwrap();
    let (ds, prov) = read_dataset(&path).unwrap();
    assert_eq!(ds.len(), 16);
    assert_eq!(ds.labels().iter().map(|&l| l as usize).sum::<usize>(), 8);
    assert_eq!(prov.master_seed, 11);
    assert!(!ws.out.join("data/fixed-train.tidn").exists());

    ws.ok(&["gen-data", "--task", "random"]);
    assert_eq!(fs::read(&path).unwrap(), first);

    let o = ws.run(&["--seed", "12", "gen-data", "--task", "random"]);
    assert!(o.status.success());
    assert_ne!(fs::read(&path).unwrap(), first);
}

#[test]
fn pipeline_from_data_to_report() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    ws.ok(&["pretrain"]);

    // The checkpoint reproduces its recorded validation MSE and the log has
    // one row per epoch.
    let ckpt = read_checkpoint(&ws.out.join("checkpoints/pretrained-d5.ckpt")).unwrap();
    let (val, _) = read_dataset(&ws.out.join("data/random-validation.tidn")).unwrap();
    let out = denoise(&ckpt.params, &ckpt.spec, &val.noisy_images(), 64).unwrap();
    let mse = mse_loss(&out, &val.targets()).unwrap();
    let recorded: f64 = ckpt.metadata["best_val_mse"].parse().unwrap();
    assert!((mse - recorded).abs() <= 1e-10 * recorded.max(1.0), "{mse} vs {recorded}");
    let log = fs::read_to_string(ws.out.join("logs/pretrain-d5.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + ckpt.metadata["epochs_run"].parse::<usize>().unwrap());

    ws.ok(&["sweep"]);
    let sweep = read_records(&ws.out.join("records/sweep-d5.csv")).unwrap();
    assert_eq!(sweep.len(), 1 + 2 * 2);
    let hash = &sweep[0].config_hash;
    assert!(sweep.iter().all(|r| &r.config_hash == hash && r.master_seed == 11 && r.scores.len() == 2));

    // A single cell rerun with its recorded seed reproduces its record.
    let cell = sweep.iter().find(|r| !r.cell.is_baseline()).unwrap();
    let cell_file = fs::read_dir(ws.out.join("records/cells")).unwrap().map(|e| e.unwrap().path()).find(|p| read_records(p).unwrap()[0] == *cell).unwrap();
    let before = fs::read(&cell_file).unwrap();
    fs::remove_file(&cell_file).unwrap();
    let (lambda, n, seed) = (cell.cell.lambda.to_string(), cell.cell.n_train.to_string(), cell.seed.to_string());
    ws.ok(&["finetune", "--lambda", &lambda, "--n-train", &n, "--depth", "5", "--observer", "slnn-no", "--cell-seed", &seed]);
    assert_eq!(fs::read(&cell_file).unwrap(), before);

    ws.ok(&["report", ws.out.join("records/sweep-d5.csv").to_str().unwrap()]);
    let report = ws.out.join("report");
    let summary = fs::read_to_string(report.join("summary.csv")).unwrap();
    assert!(summary.starts_with("lambda,n_train,depth,observer,auc,auc_se,rmse,ssim,seed"));
    let svg = fs::read_to_string(report.join("auc-vs-lambda-slnn-no-n1-d5-random-random.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(&format!("config_hash={hash}")));
    assert!(report.join("auc-vs-ntrain-slnn-no-d5-random.svg").exists());
    // The same records given twice are counted once.
    let sweep_file = ws.out.join("records/sweep-d5.csv");
    ws.ok(&["report", sweep_file.to_str().unwrap(), sweep_file.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(report.join("summary.csv")).unwrap(), summary);

    // Records from another seed are refused unless forced.
    let other = ws.out.join("other");
    let o = ws.run_in(&other, &["--seed", "5", "finetune", "--observer", "none", "--depth", "5"]);
    assert!(!o.status.success(), "the other output dir has no data or checkpoint yet");
    for args in [&["--seed", "5", "gen-data", "--task", "random"][..], &["--seed", "5", "pretrain"], &["--seed", "5", "finetune", "--observer", "none", "--depth", "5"]] {
        let o = ws.run_in(&other, args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let sweep_path = ws.out.join("records/sweep-d5.csv");
    let other_records = other.join("records/cells");
    let mixed = ws.run(&["report", sweep_path.to_str().unwrap(), other_records.to_str().unwrap()]);
    assert!(!mixed.status.success());
    assert!(String::from_utf8_lossy(&mixed.stderr).contains("--force"));
    ws.ok(&["report", "--force", sweep_path.to_str().unwrap(), other_records.to_str().unwrap()]);
}

#[test]
fn parallel_sweep_matches_sequential() {
    let ws = Workspace::new();
    ws.ok(&["gen-data", "--task", "random"]);
    ws.ok(&["pretrain"]);
    ws.ok(&["sweep", "--no-baseline"]);
    let sequential = fs::read(ws.out.join("records/sweep-d5.csv")).unwrap();
    ws.ok(&["--workers", "2", "sweep", "--no-baseline", "--recompute"]);
    assert_eq!(fs::read(ws.out.join("records/sweep-d5.csv")).unwrap(), sequential);
}

#[test]
fn spectra_and_task_shift() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    ws.ok(&["pretrain"]);
    ws.ok(&["spectra"]);
    let rows: Vec<SpectrumRow> = decode_csv(&fs::read(ws.out.join("spectra/spectra.csv")).unwrap(), &SPECTRUM_COLUMNS).unwrap();
    let mut variants: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    variants.dedup();
    assert_eq!(variants, ["pretrained", "slnn-no λ=0.01", "slnn-no λ=0.99"]);
    let svg = fs::read_to_string(ws.out.join("spectra/spectra.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);

    // The pretrained spectrum is the metrics routine's output, unchanged.
    let ckpt = read_checkpoint(&ws.out.join("checkpoints/pretrained-d5.ckpt")).unwrap();
    let (test, _) = read_dataset(&ws.out.join("data/random-test.tidn")).unwrap();
    let images = denoise(&ckpt.params, &ckpt.spec, &test.noisy_images(), 64).unwrap();
    let expected = covariance_spectrum(&images, Some(&test.labels()), 16).unwrap();
    let stored: Vec<f64> = rows.iter().filter(|r| r.variant == "pretrained").map(|r| r.singular_value).collect();
    assert_eq!(stored, expected.singular_values);

    ws.ok(&["task-shift"]);
    let shift = read_records(&ws.out.join("records/task-shift-fixed-random.csv")).unwrap();
    assert_eq!(shift.len(), 2 * 2);
    assert!(shift.iter().all(|r| r.cell.target_task == "random"));
    assert_eq!(shift.iter().filter(|r| r.cell.source_task == "fixed").count(), 2);
}

#[test]
fn commands_without_inputs_fail_cleanly() {
    let ws = Workspace::new();
    let o = ws.run(&["pretrain"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));
    let o = Command::new(env!("CARGO_BIN_EXE_tidn")).args(["sweep"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));
}
