//! Stochastic object model: lumpy backgrounds inside an elliptical support,
//! Gaussian signals, and labeled samples for binary detection tasks.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{sample_poisson, ImageGrid, RandomStream};

/// Lumpy background: a Poisson number of Gaussian lumps placed uniformly
/// over the support mask, on top of a constant offset.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundModel {
    pub grid_size: usize,
    pub mean_lump_count: f64,
    pub lump_amplitude: f64,
    pub lump_width: f64,
    pub dc_offset: f64,
    pub support_mask: ImageGrid,
}

/// Serializable description of a background model; the mask is always an
/// axis-aligned ellipse centered on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    pub grid_size: usize,
    pub mean_lump_count: f64,
    pub lump_amplitude: f64,
    pub lump_width: f64,
    pub dc_offset: f64,
    /// Ellipse semi-axes as fractions of half the grid size (rows, cols).
    pub mask_semi_axes: [f64; 2],
}

impl BackgroundParams {
    pub fn build(&self) -> Result<BackgroundModel> {
        let mask = elliptical_mask(self.grid_size, self.mask_semi_axes[0], self.mask_semi_axes[1])?;
        BackgroundModel::new(
            self.grid_size,
            self.mean_lump_count,
            self.lump_amplitude,
            self.lump_width,
            self.dc_offset,
            mask,
        )
    }
}

/// Binary mask of an ellipse centered on a `size × size` grid. Semi-axes are
/// fractions of `size / 2`.
pub fn elliptical_mask(size: usize, semi_rows: f64, semi_cols: f64) -> Result<ImageGrid> {
    if size == 0 || semi_rows <= 0.0 || semi_cols <= 0.0 {
        return invalid("mask size and semi-axes must be positive");
    }
    let half = size as f64 / 2.0;
    let c = (size as f64 - 1.0) / 2.0;
    let (ar, ac) = (semi_rows * half, semi_cols * half);
    let mut mask = ImageGrid::zeros(size, size);
    for r in 0..size {
        for col in 0..size {
            let dr = (r as f64 - c) / ar;
            let dc = (col as f64 - c) / ac;
            if dr * dr + dc * dc <= 1.0 {
                mask.set(r, col, 1.0);
            }
        }
    }
    Ok(mask)
}

impl BackgroundModel {
    pub fn new(
        grid_size: usize,
        mean_lump_count: f64,
        lump_amplitude: f64,
        lump_width: f64,
        dc_offset: f64,
        support_mask: ImageGrid,
    ) -> Result<Self> {
        if grid_size == 0 {
            return invalid("grid size must be positive");
        }
        if !(lump_width > 0.0) {
            return invalid("lump width must be positive");
        }
        if !(mean_lump_count >= 0.0) || !mean_lump_count.is_finite() {
            return invalid("mean lump count must be finite and non-negative");
        }
        if support_mask.height() != grid_size || support_mask.width() != grid_size {
            return invalid("support mask must match the grid size");
        }
        Ok(Self { grid_size, mean_lump_count, lump_amplitude, lump_width, dc_offset, support_mask })
    }

    /// Row-major indices of mask pixels.
    pub fn mask_pixels(&self) -> Vec<(usize, usize)> {
        let n = self.grid_size;
        (0..n * n)
            .filter(|&i| self.support_mask.data()[i] > 0.5)
            .map(|i| (i / n, i % n))
            .collect()
    }

    pub fn in_mask(&self, row: usize, col: usize) -> bool {
        self.support_mask.get(row, col) > 0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LocationPolicy {
    FixedCenter,
    UniformInMask,
    /// Uniform over support pixels within `radius` pixels of the center.
    UniformInDisk { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    pub amplitude_range: [f64; 2],
    pub width_range: [f64; 2],
    pub location_policy: LocationPolicy,
}

impl SignalModel {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("amplitude", self.amplitude_range), ("width", self.width_range)] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return invalid(format!("{name} range must satisfy 0 < low <= high, got {r:?}"));
            }
        }
        Ok(())
    }
}

/// Full statistical description of a binary detection task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub background: BackgroundModel,
    pub signal: SignalModel,
}

impl TaskSpec {
    pub fn new(background: BackgroundModel, signal: SignalModel) -> Result<Self> {
        signal.validate()?;
        Ok(Self { background, signal })
    }

    pub fn grid_size(&self) -> usize {
        self.background.grid_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignalTruth {
    pub row: f64,
    pub col: f64,
    pub amplitude: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub object: ImageGrid,
    pub noisy: Option<ImageGrid>,
    pub label: u8,
    pub signal_truth: Option<SignalTruth>,
}

fn gaussian_blob(image: &mut ImageGrid, row: f64, col: f64, amplitude: f64, width: f64) {
    let inv = 1.0 / (2.0 * width * width);
    // Contributions below exp(-40) are far under f64 resolution of the
    // image values; skip them.
    let reach = (width * (80.0f64).sqrt()).ceil();
    let r0 = ((row - reach).floor().max(0.0)) as usize;
    let r1 = ((row + reach).ceil().min(image.height() as f64 - 1.0)).max(0.0) as usize;
    let c0 = ((col - reach).floor().max(0.0)) as usize;
    let c1 = ((col + reach).ceil().min(image.width() as f64 - 1.0)).max(0.0) as usize;
    for r in r0..=r1 {
        let dr = r as f64 - row;
        for c in c0..=c1 {
            let dc = c as f64 - col;
            let v = image.get(r, c) + amplitude * (-(dr * dr + dc * dc) * inv).exp();
            image.set(r, c, v);
        }
    }
}

pub fn generate_background(stream: &mut RandomStream, model: &BackgroundModel) -> Result<ImageGrid> {
    let pixels = model.mask_pixels();
    if pixels.is_empty() {
        return invalid("support mask is empty");
    }
    let n = model.grid_size;
    let mut image = ImageGrid::filled(n, n, model.dc_offset);
    let count = sample_poisson(stream, model.mean_lump_count)?;
    for _ in 0..count {
        let (r, c) = pixels[stream.below(pixels.len())];
        gaussian_blob(&mut image, r as f64, c as f64, model.lump_amplitude, model.lump_width);
    }
    for (v, m) in image.data_mut().iter_mut().zip(model.support_mask.data()) {
        if *m <= 0.5 {
            *v = model.dc_offset;
        }
    }
    Ok(image)
}

/// Adds `amplitude · exp(−‖r − location‖² / (2·width²))` to `background`.
pub fn insert_signal(background: &ImageGrid, location: (f64, f64), amplitude: f64, width: f64) -> Result<ImageGrid> {
    let (row, col) = location;
    if !(width > 0.0) {
        return invalid("signal width must be positive");
    }
    if !(row >= 0.0 && col >= 0.0 && row <= (background.height() - 1) as f64 && col <= (background.width() - 1) as f64) {
        return invalid(format!("signal location ({row}, {col}) lies outside the grid"));
    }
    let mut out = background.clone();
    gaussian_blob(&mut out, row, col, amplitude, width);
    Ok(out)
}

fn draw_location(stream: &mut RandomStream, task: &TaskSpec) -> Result<(f64, f64)> {
    match task.signal.location_policy {
        LocationPolicy::FixedCenter => {
            let c = (task.grid_size() / 2) as f64;
            Ok((c, c))
        }
        LocationPolicy::UniformInMask => {
            let pixels = task.background.mask_pixels();
            if pixels.is_empty() {
                return invalid("support mask is empty");
            }
            let (r, c) = pixels[stream.below(pixels.len())];
            Ok((r as f64, c as f64))
        }
        LocationPolicy::UniformInDisk { radius } => {
            let c = (task.grid_size() / 2) as f64;
            let pixels: Vec<(usize, usize)> = task
                .background
                .mask_pixels()
                .into_iter()
                .filter(|&(r, col)| (r as f64 - c).hypot(col as f64 - c) <= radius)
                .collect();
            if pixels.is_empty() {
                return invalid(format!("no support pixel lies within {radius} pixels of the center"));
            }
            let (r, col) = pixels[stream.below(pixels.len())];
            Ok((r as f64, col as f64))
        }
    }
}

/// Draws one object under hypothesis `label` (0 = signal absent).
pub fn sample_task(stream: &mut RandomStream, task: &TaskSpec, label: u8) -> Result<LabeledSample> {
    if label > 1 {
        return invalid("label must be 0 or 1");
    }
    let background = generate_background(stream, &task.background)?;
    if label == 0 {
        return Ok(LabeledSample { object: background, noisy: None, label, signal_truth: None });
    }
    let [a0, a1] = task.signal.amplitude_range;
    let [w0, w1] = task.signal.width_range;
    let amplitude = stream.uniform_range(a0, a1);
    let width = stream.uniform_range(w0, w1);
    let (row, col) = draw_location(stream, task)?;
    let object = insert_signal(&background, (row, col), amplitude, width)?;
    Ok(LabeledSample {
        object,
        noisy: None,
        label,
        signal_truth: Some(SignalTruth { row, col, amplitude, width }),
    })
}

/// Balanced labeled objects in a stream-determined order. Sample `i` is
/// drawn from `stream.derive(i)`.
pub fn generate_dataset(
    stream: &mut RandomStream,
    task: &TaskSpec,
    n_present: usize,
    n_absent: usize,
) -> Result<Vec<LabeledSample>> {
    let mut labels: Vec<u8> = std::iter::repeat_n(1u8, n_present).chain(std::iter::repeat_n(0u8, n_absent)).collect();
    stream.shuffle(&mut labels);
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| sample_task(&mut stream.derive(i as u64), task, label))
        .collect()
}
