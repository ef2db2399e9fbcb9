//! Tables and plots derived from record files alone.

use std::collections::{BTreeMap, BTreeSet};

use anyhow::{bail, Result};
use serde::Serialize;
use tidn_core::evaluation::EvalObserver;
use tidn_core::experiment::ExperimentRecord;
use tidn_core::io::encode_csv;

use crate::svg::{LinePlot, Series};

/// A named output file and its contents.
pub type Artifact = (String, Vec<u8>);

pub const SUMMARY_COLUMNS: [&str; 14] = [
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
    "master_seed",
    "config_hash",
];

#[derive(Serialize)]
struct SummaryRow<'a> {
    lambda: f64,
    n_train: usize,
    depth: usize,
    observer: &'static str,
    auc: f64,
    auc_se: f64,
    rmse: f64,
    ssim: f64,
    seed: u64,
    train_observer: &'static str,
    source_task: &'a str,
    target_task: &'a str,
    master_seed: u64,
    config_hash: &'a str,
}

pub const DEPTH_COLUMNS: [&str; 11] =
    ["depth", "variant", "lambda", "n_train", "train_observer", "auc", "auc_se", "rmse", "ssim", "master_seed", "config_hash"];

#[derive(Serialize)]
struct DepthRow<'a> {
    depth: usize,
    variant: &'static str,
    lambda: f64,
    n_train: usize,
    train_observer: &'static str,
    auc: f64,
    auc_se: f64,
    rmse: f64,
    ssim: f64,
    master_seed: u64,
    config_hash: &'a str,
}

pub const SHIFT_COLUMNS: [&str; 13] = [
    "lambda",
    "n_train",
    "depth",
    "train_observer",
    "source_task",
    "target_task",
    "shifted_auc",
    "reference_auc",
    "gap",
    "gap_se",
    "observer",
    "master_seed",
    "config_hash",
];

#[derive(Serialize)]
struct ShiftRow<'a> {
    lambda: f64,
    n_train: usize,
    depth: usize,
    train_observer: &'static str,
    source_task: &'a str,
    target_task: &'a str,
    shifted_auc: f64,
    reference_auc: f64,
    gap: f64,
    gap_se: f64,
    observer: &'static str,
    master_seed: u64,
    config_hash: &'a str,
}

/// The single config hash and master seed shared by `records`. Mixed
/// inputs are an error unless `force` is set, in which case the
/// provenance reads "mixed".
pub fn common_provenance(records: &[ExperimentRecord], force: bool) -> Result<(String, String)> {
    let hashes: BTreeSet<&str> = records.iter().map(|r| r.config_hash.as_str()).collect();
    let seeds: BTreeSet<u64> = records.iter().map(|r| r.master_seed).collect();
    match (hashes.len(), seeds.len()) {
        (0, _) => bail!("no records to report on"),
        (1, 1) => Ok((hashes.into_iter().next().unwrap_or_default().to_string(), seeds.into_iter().next().unwrap_or_default().to_string())),
        _ if force => Ok(("mixed".into(), "mixed".into())),
        _ => bail!("records come from {} config hashes and {} master seeds {:?}; pass --force to combine them", hashes.len(), seeds.len(), hashes),
    }
}

fn stamp(svg: String, hash: &str, seed: &str) -> Vec<u8> {
    let mut lines = svg.splitn(2, '\n');
    let head = lines.next().unwrap_or_default();
    let rest = lines.next().unwrap_or_default();
    format!("{head}\n<!-- config_hash={hash} master_seed={seed} -->\n{rest}").into_bytes()
}

fn observers_in(records: &[&ExperimentRecord]) -> Vec<EvalObserver> {
    let set: BTreeSet<EvalObserver> = records.iter().flat_map(|r| r.scores.iter().map(|s| s.observer)).collect();
    set.into_iter().collect()
}

type GroupKey = (&'static str, usize, usize, String, String);

fn group_key(r: &ExperimentRecord) -> GroupKey {
    let c = &r.cell;
    (c.observer_name(), c.n_train, c.depth, c.source_task.clone(), c.target_task.clone())
}

/// Every table and plot the records support.
pub fn build_report(records: &[ExperimentRecord], force: bool) -> Result<Vec<Artifact>> {
    let (hash, seed) = common_provenance(records, force)?;
    let mut out = Vec::new();

    let rows: Vec<SummaryRow> = records
        .iter()
        .flat_map(|r| {
            r.scores.iter().map(move |s| SummaryRow {
                lambda: r.cell.lambda,
                n_train: r.cell.n_train,
                depth: r.cell.depth,
                observer: s.observer.name(),
                auc: s.roc.auc,
                auc_se: s.roc.standard_error,
                rmse: r.rmse,
                ssim: r.ssim,
                seed: r.seed,
                train_observer: r.cell.observer_name(),
                source_task: &r.cell.source_task,
                target_task: &r.cell.target_task,
                master_seed: r.master_seed,
                config_hash: &r.config_hash,
            })
        })
        .collect();
    out.push(("summary.csv".to_string(), encode_csv(&rows, &SUMMARY_COLUMNS)?));

    // AUC against λ, one polyline per evaluation observer.
    let mut groups: BTreeMap<GroupKey, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.cell.is_baseline()) {
        groups.entry(group_key(r)).or_default().push(r);
    }
    for ((obs, n, d, src, tgt), members) in &groups {
        let mut members = members.clone();
        members.sort_by(|a, b| a.cell.lambda.total_cmp(&b.cell.lambda));
        let series = observers_in(&members)
            .into_iter()
            .map(|o| {
                let scored: Vec<_> = members.iter().filter_map(|r| r.auc(o).map(|a| (r.cell.lambda, a))).collect();
                Series { label: o.name().to_string(), points: scored.iter().map(|(l, a)| (*l, a.auc)).collect(), errors: Some(scored.iter().map(|(_, a)| a.standard_error).collect()) }
            })
            .collect();
        let plot = LinePlot {
            title: format!("AUC vs λ ({obs}, N_train={n}, D={d}, {src}→{tgt})"),
            x_label: "λ".into(),
            y_label: "AUC".into(),
            log_y: false,
            series,
        };
        out.push((format!("auc-vs-lambda-{obs}-n{n}-d{d}-{src}-{tgt}.svg"), stamp(plot.render(), &hash, &seed)));
    }

    out.extend(ntrain_plots(records, &hash, &seed));
    if let Some(a) = depth_table(records, &hash)? {
        out.push(a);
    }
    out.extend(shift_outputs(records, &hash, &seed)?);
    Ok(out)
}

fn baseline_for<'a>(records: &'a [ExperimentRecord], depth: usize, target: &str) -> Option<&'a ExperimentRecord> {
    records.iter().find(|r| r.cell.is_baseline() && r.cell.depth == depth && r.cell.target_task == target)
}

/// SLNN-NO AUC against the number of trainable layers, one polyline per λ,
/// with the pretrained baseline as N_train = 0.
fn ntrain_plots(records: &[ExperimentRecord], hash: &str, seed: &str) -> Vec<Artifact> {
    let mut by: BTreeMap<(&'static str, usize, String), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.cell.is_baseline() && r.cell.source_task == r.cell.target_task) {
        by.entry((r.cell.observer_name(), r.cell.depth, r.cell.target_task.clone())).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((obs, d, task), members) in by {
        let n_values: BTreeSet<usize> = members.iter().map(|r| r.cell.n_train).collect();
        if n_values.len() < 2 {
            continue;
        }
        let base = baseline_for(records, d, &task).and_then(|b| b.auc(EvalObserver::SlnnNo));
        let mut lambdas: Vec<f64> = members.iter().map(|r| r.cell.lambda).collect();
        lambdas.sort_by(f64::total_cmp);
        lambdas.dedup();
        let series = lambdas
            .iter()
            .map(|&l| {
                let mut pts: Vec<(f64, f64, f64)> = base.map(|b| (0.0, b.auc, b.standard_error)).into_iter().collect();
                let mut tuned: Vec<_> = members.iter().filter(|r| r.cell.lambda == l).filter_map(|r| r.auc(EvalObserver::SlnnNo).map(|a| (r.cell.n_train as f64, a.auc, a.standard_error))).collect();
                tuned.sort_by(|a, b| a.0.total_cmp(&b.0));
                pts.extend(tuned);
                Series { label: format!("λ={l}"), points: pts.iter().map(|p| (p.0, p.1)).collect(), errors: Some(pts.iter().map(|p| p.2).collect()) }
            })
            .collect();
        let plot = LinePlot { title: format!("SLNN-NO AUC vs trainable layers ({obs}, D={d}, {task})"), x_label: "N_train".into(), y_label: "AUC".into(), log_y: false, series };
        out.push((format!("auc-vs-ntrain-{obs}-d{d}-{task}.svg"), stamp(plot.render(), hash, seed)));
    }
    out
}

/// Pretrained and fine-tuned rows per depth, when more than one depth has
/// a baseline.
fn depth_table(records: &[ExperimentRecord], hash: &str) -> Result<Option<Artifact>> {
    let depths: BTreeSet<usize> = records.iter().filter(|r| r.cell.is_baseline()).map(|r| r.cell.depth).collect();
    if depths.len() < 2 {
        return Ok(None);
    }
    let mut rows = Vec::new();
    for r in records.iter().filter(|r| depths.contains(&r.cell.depth) && r.cell.source_task == r.cell.target_task) {
        let Some(a) = r.auc(EvalObserver::SlnnNo) else { continue };
        rows.push(DepthRow {
            depth: r.cell.depth,
            variant: if r.cell.is_baseline() { "pretrained" } else { "fine-tuned" },
            lambda: r.cell.lambda,
            n_train: r.cell.n_train,
            train_observer: r.cell.observer_name(),
            auc: a.auc,
            auc_se: a.standard_error,
            rmse: r.rmse,
            ssim: r.ssim,
            master_seed: r.master_seed,
            config_hash: hash,
        });
    }
    rows.sort_by(|a, b| (a.depth, a.variant != "pretrained", a.n_train).cmp(&(b.depth, b.variant != "pretrained", b.n_train)).then(a.lambda.total_cmp(&b.lambda)));
    Ok(Some(("depth.csv".to_string(), encode_csv(&rows, &DEPTH_COLUMNS)?)))
}

/// Shifted records paired with the reference tuned on the target task.
fn shift_outputs(records: &[ExperimentRecord], hash: &str, seed: &str) -> Result<Vec<Artifact>> {
    let mut rows = Vec::new();
    let mut curves: BTreeMap<(String, String), Vec<(f64, f64, f64)>> = BTreeMap::new();
    for s in records.iter().filter(|r| r.cell.source_task != r.cell.target_task) {
        let c = &s.cell;
        let Some(reference) = records.iter().find(|r| {
            let rc = &r.cell;
            rc.source_task == c.target_task && rc.target_task == c.target_task && rc.lambda == c.lambda && rc.n_train == c.n_train && rc.depth == c.depth && rc.train_observer == c.train_observer
        }) else {
            continue;
        };
        for o in observers_in(&[s]) {
            let (Some(a), Some(b)) = (s.auc(o), reference.auc(o)) else { continue };
            let gap = b.auc - a.auc;
            let gap_se = a.standard_error.hypot(b.standard_error);
            rows.push(ShiftRow {
                lambda: c.lambda,
                n_train: c.n_train,
                depth: c.depth,
                train_observer: c.observer_name(),
                source_task: &c.source_task,
                target_task: &c.target_task,
                shifted_auc: a.auc,
                reference_auc: b.auc,
                gap,
                gap_se,
                observer: o.name(),
                master_seed: s.master_seed,
                config_hash: hash,
            });
            if o == EvalObserver::SlnnNo {
                curves.entry((c.source_task.clone(), c.target_task.clone())).or_default().push((c.lambda, gap, gap_se));
            }
        }
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let series = curves
        .into_iter()
        .map(|((src, tgt), mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label: format!("{src}→{tgt}"), points: pts.iter().map(|p| (p.0, p.1)).collect(), errors: Some(pts.iter().map(|p| p.2).collect()) }
        })
        .collect();
    let plot = LinePlot { title: "Task-shift AUC gap (reference − shifted)".into(), x_label: "λ".into(), y_label: "SLNN-NO AUC gap".into(), log_y: false, series };
    Ok(vec![("task-shift.csv".to_string(), encode_csv(&rows, &SHIFT_COLUMNS)?), ("task-shift-gap.svg".to_string(), stamp(plot.render(), hash, seed))])
}

#[cfg(test)]
mod tests {
    use super::*;
    use tidn_core::evaluation::ObserverScore;
    use tidn_core::experiment::Cell;
    use tidn_core::metrics::RocResult;
    use tidn_core::training::ObserverKind;

    fn record(cell: Cell, auc: f64, hash: &str) -> ExperimentRecord {
        let score = |o, a: f64| ObserverScore { observer: o, roc: RocResult { auc: a, standard_error: 0.01, n0: 100, n1: 100 }, selected: None };
        ExperimentRecord {
            cell,
            seed: 1,
            master_seed: 9,
            config_hash: hash.into(),
            rmse: 0.1,
            ssim: 0.9,
            scores: vec![score(EvalObserver::SlnnNo, auc), score(EvalObserver::Rho, auc - 0.02)],
            condition_proxy: None,
            spectrum: None,
        }
    }

    fn grid() -> Vec<ExperimentRecord> {
        let mut v = vec![record(Cell::baseline(9, "random"), 0.7, "h")];
        for (k, l) in [0.01, 0.5, 0.99].into_iter().enumerate() {
            for n in [2, 3] {
                v.push(record(Cell::new(l, n, 9, ObserverKind::SlnnNo, "random", "random"), 0.8 - 0.03 * k as f64, "h"));
            }
            v.push(record(Cell::new(l, 3, 9, ObserverKind::SlnnNo, "fixed", "random"), 0.75 - 0.01 * k as f64, "h"));
        }
        v
    }

    fn artifact<'a>(arts: &'a [Artifact], name: &str) -> &'a [u8] {
        &arts.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("missing {name}")).1
    }

    #[test]
    fn auc_plot_has_one_polyline_per_observer() {
        let arts = build_report(&grid(), false).unwrap();
        let svg = String::from_utf8(artifact(&arts, "auc-vs-lambda-slnn-no-n3-d9-random-random.svg").to_vec()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("config_hash=h master_seed=9"));
    }

    #[test]
    fn summary_schema_leads_with_the_record_columns() {
        let arts = build_report(&grid(), false).unwrap();
        let text = String::from_utf8(artifact(&arts, "summary.csv").to_vec()).unwrap();
        assert!(text.starts_with("lambda,n_train,depth,observer,auc,auc_se,rmse,ssim,seed,"));
        assert_eq!(text.lines().count(), 1 + 2 * grid().len());
    }

    #[test]
    fn task_shift_pairs_with_reference() {
        let arts = build_report(&grid(), false).unwrap();
        let text = String::from_utf8(artifact(&arts, "task-shift.csv").to_vec()).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        artifact(&arts, "task-shift-gap.svg");
        artifact(&arts, "auc-vs-ntrain-slnn-no-d9-random.svg");
    }

    #[test]
    fn mixed_hashes_need_force() {
        let mut v = grid();
        v.push(record(Cell::baseline(9, "fixed"), 0.7, "other"));
        assert!(build_report(&v, false).is_err());
        assert!(build_report(&v, true).is_ok());
        assert!(build_report(&[], true).is_err());
    }

    #[test]
    fn report_is_deterministic() {
        assert_eq!(build_report(&grid(), false).unwrap(), build_report(&grid(), false).unwrap());
    }
}
