//! Labeled (noisy, target) image pairs and balanced mini-batch sampling.

use crate::error::{invalid, Result};
use crate::imaging::{AcquisitionConfig, Scanner};
use crate::numerics::{ImageGrid, RandomStream};
use crate::phantom::{generate_dataset, LabeledSample, SignalTruth, TaskSpec};

/// A dataset whose samples all carry a noisy reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, samples: Vec<LabeledSample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            let Some(noisy) = &s.noisy else {
                return invalid(format!("sample {i} has no noisy image"));
            };
            if s.object.height() != height || s.object.width() != width || !noisy.same_shape(&s.object) {
                return invalid(format!("sample {i} has wrong dimensions"));
            }
            if s.label > 1 || (s.label == 0 && s.signal_truth.is_some()) {
                return invalid(format!("sample {i} has an inconsistent label"));
            }
        }
        Ok(Self { height, width, samples })
    }

    /// Dataset from bare (noisy, target, label) triples.
    pub fn from_pairs(noisy: Vec<ImageGrid>, targets: Vec<ImageGrid>, labels: Vec<u8>) -> Result<Self> {
        if noisy.len() != targets.len() || noisy.len() != labels.len() {
            return invalid("noisy, target and label counts differ");
        }
        let Some(first) = targets.first() else {
            return invalid("dataset is empty");
        };
        let (h, w) = (first.height(), first.width());
        let samples = noisy
            .into_iter()
            .zip(targets)
            .zip(labels)
            .map(|((n, t), label)| LabeledSample { object: t, noisy: Some(n), label, signal_truth: None })
            .collect();
        Self::new(h, w, samples)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn noisy(&self, i: usize) -> &ImageGrid {
        self.samples[i].noisy.as_ref().expect("validated at construction")
    }

    pub fn target(&self, i: usize) -> &ImageGrid {
        &self.samples[i].object
    }

    pub fn label(&self, i: usize) -> u8 {
        self.samples[i].label
    }

    pub fn truth(&self, i: usize) -> Option<SignalTruth> {
        self.samples[i].signal_truth
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn noisy_images(&self) -> Vec<ImageGrid> {
        (0..self.len()).map(|i| self.noisy(i).clone()).collect()
    }

    pub fn targets(&self) -> Vec<ImageGrid> {
        self.samples.iter().map(|s| s.object.clone()).collect()
    }

    pub fn class_indices(&self, label: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].label == label).collect()
    }

    /// (min, max) over all target pixels; the SSIM dynamic range source.
    pub fn target_range(&self) -> (f64, f64) {
        self.samples.iter().flat_map(|s| s.object.data().iter().copied()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    /// Rounds every pixel to single precision, matching the on-disk format.
    pub fn quantize_f32(&mut self) {
        for s in &mut self.samples {
            s.object.quantize_f32();
            if let Some(n) = s.noisy.as_mut() {
                n.quantize_f32();
            }
            if let Some(t) = s.signal_truth.as_mut() {
                t.row = t.row as f32 as f64;
                t.col = t.col as f32 as f64;
                t.amplitude = t.amplitude as f32 as f64;
                t.width = t.width as f32 as f64;
            }
        }
    }
}

/// Generates objects for `task` and fills their noisy reconstructions.
/// Object `i` is measured with `stream.derive(i).derive(u64::MAX)`. The
/// result is rounded to single precision so in-memory and on-disk datasets
/// are identical.
pub fn simulate_dataset(
    stream: &mut RandomStream,
    task: &TaskSpec,
    acquisition: &AcquisitionConfig,
    n_present: usize,
    n_absent: usize,
) -> Result<Dataset> {
    let grid = task.grid_size();
    let scanner = Scanner::new(acquisition, grid)?;
    let base = stream.clone();
    let mut samples = generate_dataset(stream, task, n_present, n_absent)?;
    for (i, s) in samples.iter_mut().enumerate() {
        let noise_stream = base.derive(i as u64).derive(u64::MAX);
        s.noisy = Some(scanner.simulate_measurement(&s.object, &noise_stream)?);
    }
    let mut ds = Dataset::new(grid, grid, samples)?;
    ds.quantize_f32();
    Ok(ds)
}

/// Draws mini-batches with a fixed number of signal-present and
/// signal-absent samples, reshuffling each class every epoch.
#[derive(Clone, Debug)]
pub struct BalancedBatcher {
    present: Vec<usize>,
    absent: Vec<usize>,
    per_batch_present: usize,
    per_batch_absent: usize,
}

impl BalancedBatcher {
    pub fn new(dataset: &Dataset, per_batch_present: usize, per_batch_absent: usize) -> Result<Self> {
        if per_batch_present + per_batch_absent == 0 {
            return invalid("batch size must be positive");
        }
        Ok(Self {
            present: dataset.class_indices(1),
            absent: dataset.class_indices(0),
            per_batch_present,
            per_batch_absent,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.per_batch_present + self.per_batch_absent
    }

    /// Index batches for one epoch. When one class is empty the batches are
    /// drawn from the other class alone at the full batch size.
    pub fn epoch(&self, stream: &mut RandomStream) -> Vec<Vec<usize>> {
        let mut present = self.present.clone();
        let mut absent = self.absent.clone();
        stream.shuffle(&mut present);
        stream.shuffle(&mut absent);
        if present.is_empty() || absent.is_empty() {
            let mut all: Vec<usize> = present.into_iter().chain(absent).collect();
            stream.shuffle(&mut all);
            let size = self.batch_size();
            let n_batches = (all.len() / size).max(usize::from(!all.is_empty()));
            return (0..n_batches).map(|b| all[b * size..((b + 1) * size).min(all.len())].to_vec()).collect();
        }
        let n_batches = (present.len() / self.per_batch_present.max(1))
            .min(absent.len() / self.per_batch_absent.max(1))
            .max(1);
        (0..n_batches)
            .map(|b| {
                let mut idx: Vec<usize> = Vec::with_capacity(self.batch_size());
                for k in 0..self.per_batch_present {
                    idx.push(present[(b * self.per_batch_present + k) % present.len()]);
                }
                for k in 0..self.per_batch_absent {
                    idx.push(absent[(b * self.per_batch_absent + k) % absent.len()]);
                }
                idx
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n1: usize, n0: usize) -> Dataset {
        let img = ImageGrid::zeros(4, 4);
        let labels: Vec<u8> = std::iter::repeat_n(1, n1).chain(std::iter::repeat_n(0, n0)).collect();
        Dataset::from_pairs(vec![img.clone(); n1 + n0], vec![img; n1 + n0], labels).unwrap()
    }

    #[test]
    fn batches_are_balanced_and_disjoint_within_epoch() {
        let ds = toy(100, 100);
        let b = BalancedBatcher::new(&ds, 10, 10).unwrap();
        let batches = b.epoch(&mut RandomStream::new(1));
        assert_eq!(batches.len(), 10);
        let mut seen = std::collections::HashSet::new();
        for batch in &batches {
            assert_eq!(batch.iter().filter(|&&i| ds.label(i) == 1).count(), 10);
            for &i in batch {
                assert!(seen.insert(i));
            }
        }
    }

    #[test]
    fn single_class_falls_back_to_plain_batches() {
        let ds = toy(0, 30);
        let b = BalancedBatcher::new(&ds, 5, 5).unwrap();
        let batches = b.epoch(&mut RandomStream::new(1));
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|x| x.len() == 10));
    }

    #[test]
    fn dataset_validation() {
        let img = ImageGrid::zeros(4, 4);
        let s = LabeledSample { object: img.clone(), noisy: None, label: 0, signal_truth: None };
        assert!(Dataset::new(4, 4, vec![s]).is_err());
        assert!(Dataset::from_pairs(vec![img.clone()], vec![], vec![0]).is_err());
    }
}
