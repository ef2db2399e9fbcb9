//! On-disk formats: binary datasets, checkpoints, record and auxiliary
//! CSV files. Every file carries the config hash and master seed, and every
//! write goes through a temporary file renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffnet::{EpochLog, NetworkSpec, ParameterSet};
use crate::error::{Error, Result};
use crate::evaluation::{EvalObserver, ObserverScore};
use crate::experiment::{Cell, ExperimentRecord};
use crate::metrics::RocResult;
use crate::numerics::{ImageGrid, RandomStream};
use crate::phantom::{LabeledSample, SignalTruth};
use crate::training::{LossLog, ObserverKind};

pub const DATASET_MAGIC: &[u8; 4] = b"TIDN";
pub const DATASET_VERSION: u16 = 1;
const TRAILER_MAGIC: &[u8; 4] = b"META";
const CHECKPOINT_HEADER: &str = "tidn-checkpoint 1";
const MANIFEST_END: &str = "end-manifest";

/// Where an output came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().ok_or_else(|| format_err(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("file is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f64::from(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"))))
    }
}

// ---------------------------------------------------------------- datasets

/// Binary dataset layout: magic, version, height, width, count, then per
/// sample the label, the truth block (present flag, row, col, amplitude,
/// width), object pixels and noisy pixels, all little-endian single
/// precision; a trailer holds the master seed and config hash.
pub fn encode_dataset(dataset: &Dataset, provenance: &Provenance) -> Result<Vec<u8>> {
    let (h, w) = (dataset.height(), dataset.width());
    let mut out = Vec::with_capacity(18 + dataset.len() * (21 + 8 * h * w));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [h, w, dataset.len()] {
        let v = u32::try_from(v).map_err(|_| format_err("dataset dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    let push = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for s in dataset.samples() {
        out.push(s.label);
        let t = s.signal_truth;
        push(&mut out, if t.is_some() { 1.0 } else { 0.0 });
        let t = t.unwrap_or(SignalTruth { row: 0.0, col: 0.0, amplitude: 0.0, width: 0.0 });
        for v in [t.row, t.col, t.amplitude, t.width] {
            push(&mut out, v);
        }
        for &v in s.object.data() {
            push(&mut out, v);
        }
        for &v in s.noisy.as_ref().expect("datasets carry noisy images").data() {
            push(&mut out, v);
        }
    }
    out.extend_from_slice(TRAILER_MAGIC);
    out.extend_from_slice(&provenance.master_seed.to_le_bytes());
    let hash = provenance.config_hash.as_bytes();
    out.extend_from_slice(&u32::try_from(hash.len()).map_err(|_| format_err("hash too long"))?.to_le_bytes());
    out.extend_from_slice(hash);
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Dataset, Provenance)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(format_err("not a dataset file (bad magic)"));
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(format_err(format!("unsupported dataset version {version}")));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let count = r.u32()? as usize;
    let per_sample = 21usize.checked_add(h.checked_mul(w).and_then(|p| p.checked_mul(8)).ok_or_else(|| format_err("dimensions overflow"))?);
    if per_sample.and_then(|p| p.checked_mul(count)).is_none_or(|need| need > bytes.len()) {
        return Err(format_err("file is truncated"));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let label = r.u8()?;
        let present = r.f32()?;
        let (row, col, amplitude, width) = (r.f32()?, r.f32()?, r.f32()?, r.f32()?);
        let signal_truth = match present {
            p if p == 1.0 => Some(SignalTruth { row, col, amplitude, width }),
            p if p == 0.0 => None,
            _ => return Err(format_err(format!("sample {i} has a bad truth flag"))),
        };
        let mut grid = || -> Result<ImageGrid> { ImageGrid::new(h, w, (0..h * w).map(|_| r.f32()).collect::<Result<_>>()?) };
        let object = grid()?;
        let noisy = grid()?;
        samples.push(LabeledSample { object, noisy: Some(noisy), label, signal_truth });
    }
    if r.take(4)? != TRAILER_MAGIC {
        return Err(format_err("dataset trailer is missing"));
    }
    let master_seed = r.u64()?;
    let len = r.u32()? as usize;
    let config_hash = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| format_err("config hash is not UTF-8"))?;
    if r.pos != bytes.len() {
        return Err(format_err("trailing bytes after dataset"));
    }
    let dataset = Dataset::new(h, w, samples).map_err(|e| format_err(format!("dataset: {e}")))?;
    Ok((dataset, Provenance { config_hash, master_seed }))
}

pub fn write_dataset(path: &Path, dataset: &Dataset, provenance: &Provenance) -> Result<()> {
    atomic_write(path, &encode_dataset(dataset, provenance)?)
}

pub fn read_dataset(path: &Path) -> Result<(Dataset, Provenance)> {
    decode_dataset(&fs::read(path)?)
}

// ------------------------------------------------------------- checkpoints

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
    pub provenance: Provenance,
    /// Free-form training provenance (seed, epochs, selected epoch, ...).
    pub metadata: BTreeMap<String, String>,
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(format_err(format!("{what} {s:?} must be a non-empty token without spaces or '='")));
    }
    Ok(())
}

/// Text manifest terminated by an end marker, followed by the parameter
/// values as little-endian doubles in manifest order.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.params.check(&ckpt.spec)?;
    let mut m = String::new();
    m.push_str(CHECKPOINT_HEADER);
    m.push('\n');
    let s = &ckpt.spec;
    m.push_str(&format!("depth = {}\nfilters = {}\nbn_eps = {}\nbn_momentum = {}\n", s.depth, s.filters, s.bn_eps, s.bn_momentum));
    m.push_str(&format!("config_hash = {}\nmaster_seed = {}\n", ckpt.provenance.config_hash, ckpt.provenance.master_seed));
    for (k, v) in &ckpt.metadata {
        check_token(k, "metadata key")?;
        if v.contains('\n') {
            return Err(format_err("metadata values must be single-line"));
        }
        m.push_str(&format!("meta.{k} = {v}\n"));
    }
    let mut blob = Vec::new();
    let mut offset = 0usize;
    for info in ckpt.params.tensor_infos() {
        let values = ckpt.params.tensor(info.layer, info.role).expect("listed tensor exists");
        let shape: Vec<String> = info.shape.iter().map(usize::to_string).collect();
        m.push_str(&format!("tensor {} shape={} offset={} len={}\n", info.name, shape.join("x"), offset, values.len()));
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += values.len();
    }
    m.push_str(MANIFEST_END);
    m.push('\n');
    let mut out = m.into_bytes();
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let marker = format!("\n{MANIFEST_END}\n");
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker.as_bytes())
        .ok_or_else(|| format_err("checkpoint manifest is unterminated"))?;
    let manifest = std::str::from_utf8(&bytes[..split]).map_err(|_| format_err("checkpoint manifest is not UTF-8"))?;
    let blob = &bytes[split + marker.len()..];
    let mut lines = manifest.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(format_err("not a checkpoint (bad header)"));
    }
    let mut keys = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split(' ');
            let name = parts.next().unwrap_or_default().to_string();
            let mut field = |key: &str| -> Result<String> {
                parts
                    .next()
                    .and_then(|p| p.strip_prefix(key))
                    .and_then(|p| p.strip_prefix('='))
                    .map(str::to_string)
                    .ok_or_else(|| format_err(format!("tensor line {line:?} lacks {key}")))
            };
            let shape = field("shape")?;
            let offset: usize = field("offset")?.parse().map_err(|_| format_err("bad tensor offset"))?;
            let len: usize = field("len")?.parse().map_err(|_| format_err("bad tensor length"))?;
            tensors.push((name, shape, offset, len));
            continue;
        }
        let (k, v) = line.split_once(" = ").ok_or_else(|| format_err(format!("bad manifest line {line:?}")))?;
        match k.strip_prefix("meta.") {
            Some(meta) => metadata.insert(meta.to_string(), v.to_string()),
            None => keys.insert(k.to_string(), v.to_string()),
        };
    }
    let get = |k: &str| keys.get(k).ok_or_else(|| format_err(format!("manifest lacks {k}")));
    let parse_f = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| format_err(format!("bad {k}"))) };
    let parse_u = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| format_err(format!("bad {k}"))) };
    let spec = NetworkSpec { depth: parse_u("depth")? as usize, filters: parse_u("filters")? as usize, bn_eps: parse_f("bn_eps")?, bn_momentum: parse_f("bn_momentum")? };
    spec.validate()?;
    let provenance = Provenance { config_hash: get("config_hash")?.clone(), master_seed: parse_u("master_seed")? };
    if blob.len() % 8 != 0 {
        return Err(format_err("checkpoint blob is not a whole number of doubles"));
    }
    let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut params = ParameterSet::init(&spec, &mut RandomStream::new(0))?;
    let infos = params.tensor_infos();
    if infos.len() != tensors.len() {
        return Err(format_err(format!("checkpoint lists {} tensors, network has {}", tensors.len(), infos.len())));
    }
    let mut expected_offset = 0;
    for (info, (name, shape, offset, len)) in infos.iter().zip(&tensors) {
        let want_shape: Vec<String> = info.shape.iter().map(usize::to_string).collect();
        if *name != info.name || *shape != want_shape.join("x") || *offset != expected_offset {
            return Err(format_err(format!("tensor {name} does not match the network layout")));
        }
        let dst = params.tensor_mut(info.layer, info.role).expect("listed tensor exists");
        if *len != dst.len() || offset + len > values.len() {
            return Err(format_err(format!("tensor {name} has the wrong length")));
        }
        dst.copy_from_slice(&values[*offset..offset + len]);
        expected_offset += len;
    }
    if expected_offset != values.len() {
        return Err(format_err("checkpoint blob has trailing values"));
    }
    if params.layers.iter().flat_map(|l| l.bn.iter()).any(|bn| bn.running_var.iter().any(|&v| !(v > 0.0))) {
        return Err(format_err("running variances must be positive"));
    }
    Ok(Checkpoint { spec, params, provenance, metadata })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ckpt)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

// ----------------------------------------------------------------- records

/// One CSV row: one observer score of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub lambda: f64,
    pub n_train: usize,
    pub depth: usize,
    pub observer: String,
    pub auc: f64,
    pub auc_se: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub seed: u64,
    pub train_observer: String,
    pub source_task: String,
    pub target_task: String,
    pub n0: usize,
    pub n1: usize,
    pub selected: Option<f64>,
    pub condition_proxy: Option<f64>,
    pub master_seed: u64,
    pub config_hash: String,
}

pub const RECORD_COLUMNS: [&str; 18] = [
    "lambda",
    "n_train",
    "depth",
    "observer",
    "auc",
    "auc_se",
    "rmse",
    "ssim",
    "seed",
    "train_observer",
    "source_task",
    "target_task",
    "n0",
    "n1",
    "selected",
    "condition_proxy",
    "master_seed",
    "config_hash",
];

pub fn record_rows(record: &ExperimentRecord) -> Vec<RecordRow> {
    let c = &record.cell;
    record
        .scores
        .iter()
        .map(|s| RecordRow {
            lambda: c.lambda,
            n_train: c.n_train,
            depth: c.depth,
            observer: s.observer.name().to_string(),
            auc: s.roc.auc,
            auc_se: s.roc.standard_error,
            rmse: record.rmse,
            ssim: record.ssim,
            seed: record.seed,
            train_observer: c.observer_name().to_string(),
            source_task: c.source_task.clone(),
            target_task: c.target_task.clone(),
            n0: s.roc.n0,
            n1: s.roc.n1,
            selected: s.selected,
            condition_proxy: record.condition_proxy,
            master_seed: record.master_seed,
            config_hash: record.config_hash.clone(),
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    format_err(format!("csv: {e}"))
}

pub fn encode_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| format_err(format!("csv: {e}")))
}

pub fn decode_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8], header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let found: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if found != header {
        return Err(format_err(format!("unexpected CSV header {found:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn encode_records(records: &[ExperimentRecord]) -> Result<Vec<u8>> {
    let rows: Vec<RecordRow> = records.iter().flat_map(record_rows).collect();
    encode_csv(&rows, &RECORD_COLUMNS)
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    atomic_write(path, &encode_records(records)?)
}

pub fn read_record_rows(path: &Path) -> Result<Vec<RecordRow>> {
    decode_csv(&fs::read(path)?, &RECORD_COLUMNS)
}

/// Regroups rows into records; consecutive rows with the same cell and
/// seed form one record.
pub fn records_from_rows(rows: &[RecordRow]) -> Result<Vec<ExperimentRecord>> {
    let mut out: Vec<ExperimentRecord> = Vec::new();
    for row in rows {
        let train_observer = match row.train_observer.as_str() {
            "none" => None,
            name => Some(name.parse::<ObserverKind>()?),
        };
        let cell = Cell {
            lambda: row.lambda,
            n_train: row.n_train,
            depth: row.depth,
            train_observer,
            source_task: row.source_task.clone(),
            target_task: row.target_task.clone(),
        };
        let score = ObserverScore {
            observer: row.observer.parse::<EvalObserver>()?,
            roc: RocResult { auc: row.auc, standard_error: row.auc_se, n0: row.n0, n1: row.n1 },
            selected: row.selected,
        };
        match out.last_mut() {
            Some(last) if last.cell == cell && last.seed == row.seed && last.config_hash == row.config_hash => last.scores.push(score),
            _ => out.push(ExperimentRecord {
                cell,
                seed: row.seed,
                master_seed: row.master_seed,
                config_hash: row.config_hash.clone(),
                rmse: row.rmse,
                ssim: row.ssim,
                scores: vec![score],
                condition_proxy: row.condition_proxy,
                spectrum: None,
            }),
        }
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    records_from_rows(&read_record_rows(path)?)
}

// ------------------------------------------------------------- other tables

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub variant: String,
    pub index: usize,
    pub singular_value: f64,
    pub matrix_dimension: usize,
    pub condition_proxy: Option<f64>,
    pub master_seed: u64,
    pub config_hash: String,
}

pub const SPECTRUM_COLUMNS: [&str; 7] = ["variant", "index", "singular_value", "matrix_dimension", "condition_proxy", "master_seed", "config_hash"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub master_seed: u64,
    pub config_hash: String,
}

pub const PRETRAIN_LOG_COLUMNS: [&str; 5] = ["epoch", "train_loss", "val_loss", "master_seed", "config_hash"];

pub fn pretrain_log_rows(log: &[EpochLog], provenance: &Provenance) -> Vec<PretrainLogRow> {
    log.iter()
        .map(|e| PretrainLogRow { epoch: e.epoch, train_loss: e.train_loss, val_loss: e.val_loss, master_seed: provenance.master_seed, config_hash: provenance.config_hash.clone() })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogRow {
    pub cell: String,
    pub epoch: usize,
    pub physical: f64,
    pub task: f64,
    pub hybrid: f64,
    pub val_physical: f64,
    pub val_task: f64,
    pub val_hybrid: f64,
    pub master_seed: u64,
    pub config_hash: String,
}

pub const FINETUNE_LOG_COLUMNS: [&str; 10] = ["cell", "epoch", "physical", "task", "hybrid", "val_physical", "val_task", "val_hybrid", "master_seed", "config_hash"];

pub fn finetune_log_rows(cell: &str, log: &[LossLog], provenance: &Provenance) -> Vec<FinetuneLogRow> {
    log.iter()
        .map(|e| FinetuneLogRow {
            cell: cell.to_string(),
            epoch: e.epoch,
            physical: e.physical,
            task: e.task,
            hybrid: e.hybrid,
            val_physical: e.val_physical,
            val_task: e.val_task,
            val_hybrid: e.val_hybrid,
            master_seed: provenance.master_seed,
            config_hash: provenance.config_hash.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::NetworkSpec;

    fn prov() -> Provenance {
        Provenance { config_hash: "0123456789abcdef".into(), master_seed: 42 }
    }

    fn toy_dataset() -> Dataset {
        let mut s = RandomStream::new(3);
        let samples = (0..4)
            .map(|i| {
                let grid = |s: &mut RandomStream| ImageGrid::new(3, 5, (0..15).map(|_| s.normal()).collect()).unwrap();
                let label = (i % 2) as u8;
                let truth = (label == 1).then(|| SignalTruth { row: s.uniform(), col: 2.5, amplitude: 0.3, width: 1.25 });
                LabeledSample { object: grid(&mut s), noisy: Some(grid(&mut s)), label, signal_truth: truth }
            })
            .collect();
        let mut ds = Dataset::new(3, 5, samples).unwrap();
        ds.quantize_f32();
        ds
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let ds = toy_dataset();
        let bytes = encode_dataset(&ds, &prov()).unwrap();
        let (back, p) = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(p, prov());
        assert_eq!(encode_dataset(&back, &p).unwrap(), bytes);
    }

    #[test]
    fn dataset_header_layout() {
        let ds = toy_dataset();
        let bytes = encode_dataset(&ds, &prov()).unwrap();
        assert_eq!(&bytes[..4], b"TIDN");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 4);
        assert_eq!(bytes[18], ds.label(0));
        let first_object = f32::from_le_bytes(bytes[39..43].try_into().unwrap());
        assert_eq!(f64::from(first_object), ds.target(0).data()[0]);
    }

    #[test]
    fn corrupt_datasets_are_rejected() {
        let bytes = encode_dataset(&toy_dataset(), &prov()).unwrap();
        assert!(decode_dataset(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_dataset(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_dataset(&long).is_err());
    }

    fn toy_checkpoint() -> Checkpoint {
        let spec = NetworkSpec::new(5, 3).unwrap();
        let mut params = ParameterSet::init(&spec, &mut RandomStream::new(9)).unwrap();
        params.layers[2].bn.as_mut().unwrap().running_var[1] = 0.37;
        let metadata = BTreeMap::from([("best_epoch".to_string(), "4".to_string()), ("best_val_mse".to_string(), format!("{}", 0.1 + 0.2))]);
        Checkpoint { spec, params, provenance: prov(), metadata }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let c = toy_checkpoint();
        let bytes = encode_checkpoint(&c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.metadata["best_val_mse"].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_blob_follows_manifest_order() {
        let c = toy_checkpoint();
        let bytes = encode_checkpoint(&c).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("tidn-checkpoint 1\n"));
        assert!(text.contains("tensor layer1.weight shape=3x1x3x3 offset=0 len=27"));
        let n: usize = c.params.tensor_infos().iter().map(|i| i.shape.iter().product::<usize>()).sum();
        let blob = &bytes[bytes.len() - 8 * n..];
        assert_eq!(f64::from_le_bytes(blob[..8].try_into().unwrap()), c.params.layers[0].weight[0]);
    }

    #[test]
    fn truncated_checkpoints_are_rejected() {
        let bytes = encode_checkpoint(&toy_checkpoint()).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    fn toy_record(lambda: f64) -> ExperimentRecord {
        let score = |observer, auc: f64| ObserverScore { observer, roc: RocResult { auc, standard_error: auc / 97.0, n0: 10, n1: 12 }, selected: Some(1e-3) };
        ExperimentRecord {
            cell: Cell::new(lambda, 3, 9, ObserverKind::SlnnNo, "random", "fixed"),
            seed: u64::MAX - 5,
            master_seed: 42,
            config_hash: "0123456789abcdef".into(),
            rmse: 0.1 + 0.2,
            ssim: 1.0 / 3.0,
            scores: vec![score(EvalObserver::SlnnNo, 0.7123456789012345), score(EvalObserver::Rho, 2.0 / 3.0)],
            condition_proxy: Some(1.0e10 / 7.0),
            spectrum: None,
        }
    }

    #[test]
    fn records_round_trip_bit_exactly() {
        let mut base = Cell::baseline(9, "random");
        base.lambda = 1.0;
        let mut b = toy_record(1.0);
        b.cell = base;
        b.condition_proxy = None;
        b.scores[1].selected = None;
        let records = vec![toy_record(0.01), toy_record(0.1), b];
        let bytes = encode_records(&records).unwrap();
        let rows = decode_csv::<RecordRow>(&bytes, &RECORD_COLUMNS).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(records_from_rows(&rows).unwrap(), records);
        let header = String::from_utf8_lossy(&bytes).lines().next().unwrap().to_string();
        assert!(header.starts_with("lambda,n_train,depth,observer,auc,auc_se,rmse,ssim,seed"));
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp_files() {
        let dir = std::env::temp_dir().join(format!("tidn-io-{}", std::process::id()));
        let path = dir.join("nested/file.bin");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let entries: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(entries.len(), 1);
        fs::remove_dir_all(dir).unwrap();
    }
}
