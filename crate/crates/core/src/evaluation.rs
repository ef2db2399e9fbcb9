//! Evaluation protocol for a denoiser: observers are fitted on the
//! denoised training split, tuned on the denoised validation split and
//! scored on the denoised test split.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffnet::{denoise, NetworkSpec, ParameterSet};
use crate::error::{invalid, Error, Result};
use crate::metrics::{condition_proxy, covariance_spectrum, empirical_auc, hanley_mcneil_se, mean_ssim, rmse, RocResult};
use crate::numerics::{ImageGrid, RandomStream, SpectrumResult};
use crate::observers::{
    build_dog_channels, cho_statistic, estimate_class_stats, ho_template, select_rho_alpha, train_slnn_no_validated, DogParams, InternalNoiseConfig,
    SlnnConfig,
};

/// Observers available for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalObserver {
    SlnnNo,
    Ho,
    Rho,
    Cho,
}

impl EvalObserver {
    pub const ALL: [EvalObserver; 4] = [EvalObserver::SlnnNo, EvalObserver::Ho, EvalObserver::Rho, EvalObserver::Cho];

    pub fn name(self) -> &'static str {
        match self {
            EvalObserver::SlnnNo => "slnn-no",
            EvalObserver::Ho => "ho",
            EvalObserver::Rho => "rho",
            EvalObserver::Cho => "cho",
        }
    }
}

impl fmt::Display for EvalObserver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EvalObserver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalObserver::ALL.into_iter().find(|o| o.name() == s).ok_or_else(|| Error::InvalidInput(format!("unknown observer '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub observers: Vec<EvalObserver>,
    pub slnn: SlnnConfig,
    #[serde(default)]
    pub dog: DogParams,
    #[serde(default)]
    pub internal_noise: InternalNoiseConfig,
    /// Internal-noise realizations averaged for the CHO AUC.
    #[serde(default = "default_noise_repeats")]
    pub cho_noise_repeats: usize,
    /// Keep this many covariance singular values of the denoised test
    /// outputs (0 = skip the spectrum).
    #[serde(default)]
    pub spectrum_rank: usize,
    #[serde(default = "default_floor_fraction")]
    pub condition_floor_fraction: f64,
}

fn default_noise_repeats() -> usize {
    5
}

fn default_floor_fraction() -> f64 {
    0.5
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            observers: EvalObserver::ALL.to_vec(),
            slnn: SlnnConfig::default(),
            dog: DogParams::default(),
            internal_noise: InternalNoiseConfig::default(),
            cho_noise_repeats: default_noise_repeats(),
            spectrum_rank: 0,
            condition_floor_fraction: default_floor_fraction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObserverScore {
    pub observer: EvalObserver,
    pub roc: RocResult,
    /// Selected RHO threshold or SLNN epoch, when applicable.
    pub selected: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rmse: f64,
    pub ssim: f64,
    pub scores: Vec<ObserverScore>,
    pub spectrum: Option<SpectrumResult>,
    pub condition_proxy: Option<f64>,
    /// Observers that could not be evaluated, with the reason.
    pub skipped: Vec<(EvalObserver, String)>,
}

impl Evaluation {
    pub fn score(&self, observer: EvalObserver) -> Option<&ObserverScore> {
        self.scores.iter().find(|s| s.observer == observer)
    }

    pub fn auc(&self, observer: EvalObserver) -> Option<RocResult> {
        self.score(observer).map(|s| s.roc)
    }
}

/// Denoised images with labels; the unit observers are fitted on.
#[derive(Clone, Debug)]
pub struct DenoisedSplit {
    pub images: Vec<ImageGrid>,
    pub labels: Vec<u8>,
}

impl DenoisedSplit {
    pub fn new(params: &ParameterSet, spec: &NetworkSpec, ds: &Dataset) -> Result<Self> {
        Ok(Self { images: denoise(params, spec, &ds.noisy_images(), 64)?, labels: ds.labels() })
    }

    pub fn class(&self, label: u8) -> Vec<&[f64]> {
        self.images.iter().zip(&self.labels).filter(|(_, &l)| l == label).map(|(i, _)| i.data()).collect()
    }

    fn split_scores(&self, scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut s0 = Vec::new();
        let mut s1 = Vec::new();
        for (&s, &l) in scores.iter().zip(&self.labels) {
            if l == 1 { s1.push(s) } else { s0.push(s) }
        }
        (s0, s1)
    }
}

/// Train/validation/test datasets of one task.
#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub test: &'a Dataset,
}

/// Denoises the three splits and evaluates them.
pub fn evaluate(params: &ParameterSet, spec: &NetworkSpec, splits: Splits<'_>, config: &EvaluationConfig, stream: &mut RandomStream) -> Result<Evaluation> {
    let train = DenoisedSplit::new(params, spec, splits.train)?;
    let validation = DenoisedSplit::new(params, spec, splits.validation)?;
    let test = DenoisedSplit::new(params, spec, splits.test)?;
    let (lo, hi) = splits.test.target_range();
    evaluate_denoised(&train, &validation, &test, &splits.test.targets(), hi - lo, config, stream)
}

/// Evaluation on already denoised splits; `targets` pair with `test`.
pub fn evaluate_denoised(
    train: &DenoisedSplit,
    validation: &DenoisedSplit,
    test: &DenoisedSplit,
    targets: &[ImageGrid],
    dynamic_range: f64,
    config: &EvaluationConfig,
    stream: &mut RandomStream,
) -> Result<Evaluation> {
    if targets.len() != test.images.len() {
        return invalid("one target per test image is required");
    }
    let rmse = rmse(&test.images, targets)?;
    let ssim = mean_ssim(&test.images, targets, if dynamic_range > 0.0 { dynamic_range } else { 1.0 })?;
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    let needs_stats = config.observers.iter().any(|o| matches!(o, EvalObserver::Ho | EvalObserver::Rho));
    let stats = if needs_stats { Some(estimate_class_stats(&train.class(0), &train.class(1))?) } else { None };
    for (k, &observer) in config.observers.iter().enumerate() {
        let mut sub = stream.derive(k as u64);
        match observer {
            EvalObserver::SlnnNo => {
                let sel = train_slnn_no_validated(&train.images, &train.labels, &validation.images, &validation.labels, &config.slnn, &mut sub)?;
                let (s0, s1) = test.split_scores(&sel.template.apply_all(&test.images)?);
                scores.push(ObserverScore { observer, roc: empirical_auc(&s0, &s1)?, selected: Some(sel.best_epoch as f64) });
            }
            EvalObserver::Ho => match ho_template(stats.as_ref().expect("computed above")) {
                Ok(t) => {
                    let (s0, s1) = test.split_scores(&t.apply_all(&test.images)?);
                    scores.push(ObserverScore { observer, roc: empirical_auc(&s0, &s1)?, selected: None });
                }
                Err(Error::IllConditioned { condition }) => skipped.push((observer, format!("covariance condition {condition:.3e}"))),
                Err(e) => return Err(e),
            },
            EvalObserver::Rho => {
                let sel = select_rho_alpha(stats.as_ref().expect("computed above"), &validation.class(0), &validation.class(1))?;
                let (s0, s1) = test.split_scores(&sel.template.apply_all(&test.images)?);
                scores.push(ObserverScore { observer, roc: empirical_auc(&s0, &s1)?, selected: Some(sel.alpha) });
            }
            EvalObserver::Cho => {
                let grid = test.images.first().map_or(0, |i| i.height());
                let channels = build_dog_channels(grid, config.dog)?;
                let v0 = channels.channelize_all(&train.class(0))?;
                let v1 = channels.channelize_all(&train.class(1))?;
                let cstats = estimate_class_stats(&v0, &v1)?;
                let v_test = channels.channelize_all(&test.images)?;
                let repeats = config.cho_noise_repeats.max(1);
                let mut auc = 0.0;
                let (mut n0, mut n1) = (0, 0);
                for r in 0..repeats {
                    let t = cho_statistic(&v_test, &cstats, config.internal_noise, &mut sub.derive(r as u64))?;
                    let (s0, s1) = test.split_scores(&t);
                    let roc = empirical_auc(&s0, &s1)?;
                    auc += roc.auc / repeats as f64;
                    (n0, n1) = (roc.n0, roc.n1);
                }
                let roc = RocResult { auc, standard_error: hanley_mcneil_se(auc, n0, n1), n0, n1 };
                scores.push(ObserverScore { observer, roc, selected: None });
            }
        }
    }
    let (spectrum, proxy) = if config.spectrum_rank > 0 {
        let sp = covariance_spectrum(&test.images, Some(&test.labels), config.spectrum_rank)?;
        let full = SpectrumResult { singular_values: sp.singular_values.clone(), matrix_dimension: sp.matrix_dimension };
        let proxy = condition_proxy(&full, config.condition_floor_fraction).ok();
        (Some(sp), proxy)
    } else {
        (None, None)
    };
    Ok(Evaluation { rmse, ssim, scores, spectrum, condition_proxy: proxy, skipped })
}
