//! Numerical observers for binary signal detection: Hotelling (HO), its
//! truncated-spectrum regularization (RHO), channelized Hotelling with
//! difference-of-Gaussians channels and internal noise, and the
//! single-layer neural observers trained with BCE or the Hotelling
//! surrogate loss.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::diffnet::{adam_step, AdamConfig, AdamState};
use crate::error::{invalid, Error, Result};
use crate::metrics::empirical_auc;
use crate::numerics::{RandomStream, SymmetricSpectrum};

/// Largest condition number accepted by [`ho_template`].
pub const MAX_HO_CONDITION: f64 = 1e12;

/// Regularization thresholds swept by [`select_rho_alpha`].
pub const RHO_ALPHAS: [f64; 7] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7];

/// First- and second-order class statistics.
#[derive(Clone, Debug)]
pub struct ClassStats {
    pub mean0: DVector<f64>,
    pub mean1: DVector<f64>,
    /// `mean1 − mean0`.
    pub mean_diff: DVector<f64>,
    /// Pooled covariance `½(K₀ + K₁)`, per-class divisor `n − 1`.
    pub covariance: DMatrix<f64>,
    pub n0: usize,
    pub n1: usize,
}

impl ClassStats {
    pub fn dimension(&self) -> usize {
        self.mean_diff.len()
    }
}

fn data_matrix<A: AsRef<[f64]>>(images: &[A], dim: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(images.len(), dim);
    for (r, img) in images.iter().enumerate() {
        let img = img.as_ref();
        if img.len() != dim {
            return invalid("images have mismatched dimensions");
        }
        for (c, &v) in img.iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    Ok(m)
}

/// Centers the rows of `x` in place and returns the column means.
fn center_rows(x: &mut DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    for (mut col, m) in x.column_iter_mut().zip(mean.iter()) {
        col.add_scalar_mut(-m);
    }
    mean
}

/// Class-conditional sample means and the pooled sample covariance.
pub fn estimate_class_stats<A: AsRef<[f64]>, B: AsRef<[f64]>>(images0: &[A], images1: &[B]) -> Result<ClassStats> {
    if images0.len() < 2 || images1.len() < 2 {
        return invalid("at least two images per class are required");
    }
    let dim = images0[0].as_ref().len();
    if dim == 0 {
        return invalid("images are empty");
    }
    let mut x0 = data_matrix(images0, dim)?;
    let mut x1 = data_matrix(images1, dim)?;
    let mean0 = center_rows(&mut x0);
    let mean1 = center_rows(&mut x1);
    let (n0, n1) = (images0.len(), images1.len());
    // Stacking the scaled, centered rows gives K = ZᵀZ in a single product.
    x0 *= (0.5 / (n0 - 1) as f64).sqrt();
    x1 *= (0.5 / (n1 - 1) as f64).sqrt();
    let mut z = DMatrix::zeros(n0 + n1, dim);
    z.rows_mut(0, n0).copy_from(&x0);
    z.rows_mut(n0, n1).copy_from(&x1);
    drop((x0, x1));
    let zt = z.transpose();
    let mut covariance = &zt * &z;
    // Exact symmetry regardless of summation order.
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
            covariance[(i, j)] = v;
            covariance[(j, i)] = v;
        }
    }
    if covariance.iter().any(|v| !v.is_finite()) {
        return invalid("covariance is not finite");
    }
    let mean_diff = &mean1 - &mean0;
    Ok(ClassStats { mean0, mean1, mean_diff, covariance, n0, n1 })
}

/// Linear observer `t = w·f + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTemplate {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearTemplate {
    pub fn new(weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
            return invalid("template is not finite");
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { weights: vec![0.0; dim], bias: 0.0 }
    }

    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn apply(&self, image: &[f64]) -> Result<f64> {
        apply_template(self, image)
    }

    pub fn apply_all<A: AsRef<[f64]>>(&self, images: &[A]) -> Result<Vec<f64>> {
        images.iter().map(|img| apply_template(self, img.as_ref())).collect()
    }

    /// Cosine similarity of the weight vectors.
    pub fn cosine(&self, other: &LinearTemplate) -> f64 {
        let dot: f64 = self.weights.iter().zip(&other.weights).map(|(a, b)| a * b).sum();
        let na: f64 = self.weights.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = other.weights.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}

pub fn apply_template(template: &LinearTemplate, image: &[f64]) -> Result<f64> {
    if image.len() != template.weights.len() {
        return invalid(format!("image has {} pixels, template expects {}", image.len(), template.weights.len()));
    }
    Ok(template.weights.iter().zip(image).map(|(w, x)| w * x).sum::<f64>() + template.bias)
}

fn power_iteration(apply: impl Fn(&DVector<f64>) -> DVector<f64>, dim: usize, iterations: usize) -> f64 {
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + (i % 7) as f64 * 0.1);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let w = apply(&v);
        lambda = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 || !norm.is_finite() {
            return lambda;
        }
        v = w / norm;
    }
    lambda
}

/// Hotelling template `w = K⁻¹Δf̄` by Cholesky factorization.
pub fn ho_template(stats: &ClassStats) -> Result<LinearTemplate> {
    let dim = stats.dimension();
    let Some(chol) = stats.covariance.clone().cholesky() else {
        return Err(Error::IllConditioned { condition: f64::INFINITY });
    };
    let k = &stats.covariance;
    let lambda_max = power_iteration(|v| k * v, dim, 50);
    let inv_lambda_min = power_iteration(|v| chol.solve(v), dim, 50);
    let condition = lambda_max * inv_lambda_min;
    if !(condition.is_finite() && condition < MAX_HO_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let w = chol.solve(&stats.mean_diff);
    LinearTemplate::new(w.iter().copied().collect(), 0.0)
}

/// Regularized Hotelling template through the truncated pseudo-inverse.
pub fn rho_template(stats: &ClassStats, alpha: f64) -> Result<LinearTemplate> {
    RhoSolver::new(stats)?.template(alpha)
}

/// Reusable eigendecomposition for sweeping RHO thresholds.
#[derive(Clone, Debug)]
pub struct RhoSolver {
    spectrum: SymmetricSpectrum,
    mean_diff: DVector<f64>,
}

impl RhoSolver {
    pub fn new(stats: &ClassStats) -> Result<Self> {
        Ok(Self { spectrum: SymmetricSpectrum::new(&stats.covariance)?, mean_diff: stats.mean_diff.clone() })
    }

    pub fn spectrum(&self) -> &SymmetricSpectrum {
        &self.spectrum
    }

    pub fn template(&self, alpha: f64) -> Result<LinearTemplate> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
        }
        let w = self.spectrum.truncated_solve(alpha, &self.mean_diff);
        LinearTemplate::new(w.iter().copied().collect(), 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhoSelection {
    pub alpha: f64,
    /// Validation AUC per candidate, in [`RHO_ALPHAS`] order.
    pub validation_aucs: Vec<(f64, f64)>,
    pub template: LinearTemplate,
}

/// Picks the threshold maximizing validation AUC; ties go to the larger
/// threshold.
pub fn select_rho_alpha<A: AsRef<[f64]>, B: AsRef<[f64]>>(stats: &ClassStats, validation0: &[A], validation1: &[B]) -> Result<RhoSelection> {
    let solver = RhoSolver::new(stats)?;
    select_rho_alpha_with(&solver, validation0, validation1)
}

pub fn select_rho_alpha_with<A: AsRef<[f64]>, B: AsRef<[f64]>>(solver: &RhoSolver, validation0: &[A], validation1: &[B]) -> Result<RhoSelection> {
    let mut best: Option<(f64, f64, LinearTemplate)> = None;
    let mut aucs = Vec::with_capacity(RHO_ALPHAS.len());
    for alpha in RHO_ALPHAS {
        let t = solver.template(alpha)?;
        let auc = empirical_auc(&t.apply_all(validation0)?, &t.apply_all(validation1)?)?.auc;
        aucs.push((alpha, auc));
        if best.as_ref().is_none_or(|b| auc > b.1) {
            best = Some((alpha, auc, t));
        }
    }
    let (alpha, _, template) = best.expect("non-empty candidate list");
    Ok(RhoSelection { alpha, validation_aucs: aucs, template })
}

/// Difference-of-Gaussians channel parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DogParams {
    /// Base width in cycles per pixel.
    pub sigma0: f64,
    pub dilation: f64,
    pub q: f64,
    pub count: usize,
}

impl Default for DogParams {
    fn default() -> Self {
        Self { sigma0: 0.005, dilation: 1.4, q: 1.67, count: 10 }
    }
}

impl DogParams {
    pub fn sigma(&self, j: usize) -> f64 {
        self.sigma0 * self.dilation.powi(j as i32)
    }

    /// Radial frequency response of channel `j`.
    pub fn response(&self, j: usize, rho: f64) -> f64 {
        let s = self.sigma(j);
        (-0.5 * (rho / (self.q * s)).powi(2)).exp() - (-0.5 * (rho / s).powi(2)).exp()
    }
}

/// Spatial channel templates, one unit-norm row per channel, centered on
/// the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    pub params: DogParams,
    pub grid_size: usize,
    pub channels: Vec<Vec<f64>>,
}

fn frequency(k: usize, n: usize) -> f64 {
    if k <= n / 2 { k as f64 / n as f64 } else { k as f64 / n as f64 - 1.0 }
}

/// Builds the channels by sampling the radial profile on the DFT lattice,
/// inverse transforming, and shifting the origin to the grid center.
pub fn build_dog_channels(grid_size: usize, params: DogParams) -> Result<ChannelSet> {
    if grid_size == 0 || params.count == 0 {
        return invalid("grid size and channel count must be positive");
    }
    if !(params.sigma0 > 0.0 && params.dilation > 0.0 && params.q > 1.0) {
        return invalid("channel parameters must satisfy sigma0 > 0, dilation > 0, q > 1");
    }
    let n = grid_size;
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut channels = Vec::with_capacity(params.count);
    for j in 0..params.count {
        let mut buf: Vec<Complex64> = (0..n * n)
            .map(|idx| {
                let (r, c) = (idx / n, idx % n);
                let rho = frequency(r, n).hypot(frequency(c, n));
                Complex64::new(params.response(j, rho), 0.0)
            })
            .collect();
        for row in buf.chunks_mut(n) {
            ifft.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = buf[r * n + c];
            }
            ifft.process(&mut col);
            for r in 0..n {
                buf[r * n + c] = col[r];
            }
        }
        let mut spatial = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                spatial[((r + n / 2) % n) * n + (c + n / 2) % n] = buf[r * n + c].re;
            }
        }
        let norm = spatial.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return invalid(format!("channel {j} vanishes on a {n}×{n} grid"));
        }
        spatial.iter_mut().for_each(|v| *v /= norm);
        channels.push(spatial);
    }
    Ok(ChannelSet { params, grid_size, channels })
}

impl ChannelSet {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Channel outputs `v = T f`.
    pub fn channelize(&self, image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.grid_size * self.grid_size {
            return invalid("image does not match the channel grid");
        }
        Ok(self.channels.iter().map(|t| t.iter().zip(image).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn channelize_all<A: AsRef<[f64]>>(&self, images: &[A]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|img| self.channelize(img.as_ref())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InternalNoiseConfig {
    pub epsilon: f64,
}

impl Default for InternalNoiseConfig {
    fn default() -> Self {
        Self { epsilon: 2.5 }
    }
}

/// `(K_v + ε·diag(K_v))⁻¹ Δv̄` from channelized class statistics.
pub fn cho_template(stats: &ClassStats, noise: InternalNoiseConfig) -> Result<LinearTemplate> {
    if !(noise.epsilon >= 0.0) {
        return invalid("internal noise level must be non-negative");
    }
    let mut k = stats.covariance.clone();
    for i in 0..k.nrows() {
        let d = stats.covariance[(i, i)];
        if !(d > 0.0) {
            return invalid(format!("channel {i} has zero variance"));
        }
        k[(i, i)] += noise.epsilon * d;
    }
    let chol = k.cholesky().ok_or(Error::IllConditioned { condition: f64::INFINITY })?;
    let w = chol.solve(&stats.mean_diff);
    LinearTemplate::new(w.iter().copied().collect(), 0.0)
}

/// CHO test statistics `w·(v + v_int)`, one internal-noise draw per image
/// with `v_int ~ N(0, ε·diag(K_v))`.
pub fn cho_statistic<A: AsRef<[f64]>>(
    channel_outputs: &[A],
    stats: &ClassStats,
    noise: InternalNoiseConfig,
    stream: &mut RandomStream,
) -> Result<Vec<f64>> {
    let template = cho_template(stats, noise)?;
    let sd: Vec<f64> = (0..stats.dimension()).map(|i| (noise.epsilon * stats.covariance[(i, i)]).sqrt()).collect();
    channel_outputs
        .iter()
        .map(|v| {
            let v = v.as_ref();
            if v.len() != sd.len() {
                return invalid("channel output has the wrong length");
            }
            let noisy: Vec<f64> = v.iter().zip(&sd).map(|(x, s)| x + s * stream.normal()).collect();
            apply_template(&template, &noisy)
        })
        .collect()
}

/// SLNN training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlnnConfig {
    pub epochs: usize,
    pub batch_present: usize,
    pub batch_absent: usize,
    pub adam: AdamConfig,
}

impl Default for SlnnConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_present: 50, batch_absent: 50, adam: AdamConfig::default() }
    }
}

/// Mean binary cross-entropy of logits `s` and its gradient `∂L/∂s`.
pub fn bce_loss(scores: &[f64], labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return invalid("scores and labels must be non-empty and equally many");
    }
    let j = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        let y = f64::from(y);
        // log(1 + e^s) − y·s, evaluated stably.
        let softplus = s.max(0.0) + (-s.abs()).exp().ln_1p();
        loss += softplus - y * s;
        let sigma = 1.0 / (1.0 + (-s).exp());
        grad.push((sigma - y) / j);
    }
    Ok((loss / j, grad))
}

/// SLNN-HO loss value, template gradient and output gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct SlnnHoLoss {
    pub loss: f64,
    pub d_weights: Vec<f64>,
    /// One row per batch item.
    pub d_outputs: Vec<Vec<f64>>,
}

/// The Hotelling surrogate loss on a balanced batch:
/// `(1/J) Σ_j [w·(F_j − f̄_{y_j})]² − 2 w·(f̄₁ − f̄₀)` with class means
/// `f̄_k = (2/J) Σ_{y_j = k} F_j`. Gradients differentiate through the
/// batch means; their contribution to the quadratic term sums to zero.
pub fn slnn_ho_loss<A: AsRef<[f64]>>(outputs: &[A], labels: &[u8], weights: &[f64]) -> Result<SlnnHoLoss> {
    let j = outputs.len();
    if j == 0 || labels.len() != j {
        return invalid("outputs and labels must be non-empty and equally many");
    }
    let n1 = labels.iter().filter(|&&y| y == 1).count();
    if labels.iter().any(|&y| y > 1) || 2 * n1 != j {
        return invalid("the Hotelling surrogate loss requires a balanced batch");
    }
    let dim = weights.len();
    let jf = j as f64;
    let mut means = [vec![0.0; dim], vec![0.0; dim]];
    for (f, &y) in outputs.iter().zip(labels) {
        let f = f.as_ref();
        if f.len() != dim {
            return invalid("output dimension does not match the template");
        }
        for (m, v) in means[y as usize].iter_mut().zip(f) {
            *m += 2.0 / jf * v;
        }
    }
    let mut loss = 0.0;
    let mut d_weights = vec![0.0; dim];
    let mut d_outputs = Vec::with_capacity(j);
    for (f, &y) in outputs.iter().zip(labels) {
        let d: Vec<f64> = f.as_ref().iter().zip(&means[y as usize]).map(|(a, m)| a - m).collect();
        let a: f64 = weights.iter().zip(&d).map(|(w, x)| w * x).sum();
        loss += a * a / jf;
        for (g, x) in d_weights.iter_mut().zip(&d) {
            *g += 2.0 / jf * a * x;
        }
        let sign = if y == 1 { -1.0 } else { 1.0 };
        d_outputs.push(weights.iter().map(|w| 2.0 / jf * a * w + sign * 4.0 / jf * w).collect());
    }
    for ((g, w), (m1, m0)) in d_weights.iter_mut().zip(weights).zip(means[1].iter().zip(&means[0])) {
        let diff = m1 - m0;
        loss -= 2.0 * w * diff;
        *g -= 2.0 * diff;
    }
    Ok(SlnnHoLoss { loss, d_weights, d_outputs })
}

/// Balanced index batches over a labeled set.
pub(crate) fn balanced_batches(labels: &[u8], per_present: usize, per_absent: usize, stream: &mut RandomStream) -> Vec<Vec<usize>> {
    let mut present: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut absent: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    stream.shuffle(&mut present);
    stream.shuffle(&mut absent);
    let n = (present.len() / per_present.max(1)).min(absent.len() / per_absent.max(1)).max(1);
    (0..n)
        .map(|b| {
            let mut idx = Vec::with_capacity(per_present + per_absent);
            idx.extend((0..per_present).map(|k| present[(b * per_present + k) % present.len()]));
            idx.extend((0..per_absent).map(|k| absent[(b * per_absent + k) % absent.len()]));
            idx
        })
        .collect()
}

fn check_two_classes(labels: &[u8]) -> Result<()> {
    if labels.iter().any(|&y| y > 1) {
        return invalid("labels must be 0 or 1");
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return invalid("both classes are required");
    }
    Ok(())
}

/// One SLNN-NO epoch over balanced mini-batches.
fn slnn_no_epoch<A: AsRef<[f64]>>(
    template: &mut LinearTemplate,
    adam: &mut AdamState,
    features: &[A],
    labels: &[u8],
    config: &SlnnConfig,
    stream: &mut RandomStream,
) -> Result<f64> {
    let dim = template.dimension();
    let batches = balanced_batches(labels, config.batch_present, config.batch_absent, stream);
    let mut total = 0.0;
    for idx in &batches {
        let scores: Vec<f64> = idx.iter().map(|&i| apply_template(template, features[i].as_ref())).collect::<Result<_>>()?;
        let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, ds) = bce_loss(&scores, &y)?;
        total += loss;
        let mut gw = vec![0.0; dim];
        for (&i, g) in idx.iter().zip(&ds) {
            for (acc, x) in gw.iter_mut().zip(features[i].as_ref()) {
                *acc += g * x;
            }
        }
        let gb = vec![ds.iter().sum::<f64>()];
        let mut bias = vec![template.bias];
        adam_step(&mut [&mut template.weights, &mut bias], &[&gw, &gb], adam, &[true, true])?;
        template.bias = bias[0];
    }
    Ok(total / batches.len() as f64)
}

/// Trains a single-layer observer with the BCE loss from a zero start.
pub fn train_slnn_no<A: AsRef<[f64]>>(features: &[A], labels: &[u8], config: &SlnnConfig, stream: &mut RandomStream) -> Result<LinearTemplate> {
    if features.len() != labels.len() || features.is_empty() {
        return invalid("features and labels must be non-empty and equally many");
    }
    check_two_classes(labels)?;
    let dim = features[0].as_ref().len();
    let mut template = LinearTemplate::zeros(dim);
    let mut adam = AdamState::new(config.adam, &[vec![0.0; dim], vec![0.0]]);
    for _ in 0..config.epochs {
        slnn_no_epoch(&mut template, &mut adam, features, labels, config, stream)?;
    }
    Ok(template)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlnnSelection {
    pub template: LinearTemplate,
    pub best_epoch: usize,
    pub validation_auc: f64,
}

/// SLNN-NO training that keeps the epoch with the highest validation AUC
/// (earliest on ties).
pub fn train_slnn_no_validated<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    features: &[A],
    labels: &[u8],
    validation: &[B],
    validation_labels: &[u8],
    config: &SlnnConfig,
    stream: &mut RandomStream,
) -> Result<SlnnSelection> {
    if features.len() != labels.len() || features.is_empty() || validation.len() != validation_labels.len() {
        return invalid("features and labels must be non-empty and equally many");
    }
    check_two_classes(labels)?;
    check_two_classes(validation_labels)?;
    let dim = features[0].as_ref().len();
    let mut template = LinearTemplate::zeros(dim);
    let mut adam = AdamState::new(config.adam, &[vec![0.0; dim], vec![0.0]]);
    let split = |t: &LinearTemplate| -> Result<f64> {
        let s = t.apply_all(validation)?;
        let (mut s0, mut s1) = (Vec::new(), Vec::new());
        for (v, &y) in s.into_iter().zip(validation_labels) {
            if y == 1 { s1.push(v) } else { s0.push(v) }
        }
        Ok(empirical_auc(&s0, &s1)?.auc)
    };
    let mut best: Option<SlnnSelection> = None;
    for epoch in 1..=config.epochs.max(1) {
        slnn_no_epoch(&mut template, &mut adam, features, labels, config, stream)?;
        let auc = split(&template)?;
        if best.as_ref().is_none_or(|b| auc > b.validation_auc) {
            best = Some(SlnnSelection { template: template.clone(), best_epoch: epoch, validation_auc: auc });
        }
    }
    Ok(best.expect("at least one epoch"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_pair(stream: &mut RandomStream, n: usize, shift: &[f64], sd: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let draw = |s: &mut RandomStream, mu: &[f64]| -> Vec<f64> { mu.iter().zip(sd).map(|(m, d)| m + d * s.normal()).collect() };
        let zero = vec![0.0; shift.len()];
        let a = (0..n).map(|_| draw(stream, &zero)).collect();
        let b = (0..n).map(|_| draw(stream, shift)).collect();
        (a, b)
    }

    #[test]
    fn identical_classes_have_zero_mean_difference() {
        let x = vec![vec![1.0, 2.0], vec![3.0, 5.0], vec![0.0, 1.0]];
        let s = estimate_class_stats(&x, &x).unwrap();
        assert!(s.mean_diff.iter().all(|&v| v == 0.0));
        assert_eq!(s.covariance, s.covariance.transpose());
        assert!(estimate_class_stats(&x[..1], &x).is_err());
    }

    #[test]
    fn covariance_matches_hand_computation() {
        let a = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![2.0, 4.0]];
        let b = vec![vec![0.0, 1.0], vec![2.0, 1.0]];
        let s = estimate_class_stats(&a, &b).unwrap();
        // Class 0: mean (2, 2); deviations (−1,−2), (1,0), (0,2).
        let k0 = [[1.0, 1.0], [1.0, 4.0]];
        // Class 1: mean (1, 1); deviations (−1,0), (1,0).
        let k1 = [[2.0, 0.0], [0.0, 0.0]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((s.covariance[(r, c)] - 0.5 * (k0[r][c] + k1[r][c])).abs() < 1e-14);
            }
        }
        assert_eq!(s.mean_diff.as_slice(), &[-1.0, -1.0]);
    }

    #[test]
    fn covariance_estimate_within_standard_errors() {
        let mut s = RandomStream::new(1);
        let n = 50_000;
        let (a, b) = gaussian_pair(&mut s, n, &[1.0, 0.0], &[2f64.sqrt(), 2.0]);
        let st = estimate_class_stats(&a, &b).unwrap();
        // Var of a sample variance of N(0, σ²) is 2σ⁴/(n−1); pooling halves it.
        let se = |var: f64| (2.0 * var * var / (n as f64 - 1.0) / 2.0).sqrt();
        assert!((st.covariance[(0, 0)] - 2.0).abs() < 3.0 * se(2.0));
        assert!((st.covariance[(1, 1)] - 4.0).abs() < 3.0 * se(4.0));
        assert!(st.covariance[(0, 1)].abs() < 3.0 * (2.0 * 4.0 / (2.0 * n as f64)).sqrt());
    }

    fn stats_from(k: DMatrix<f64>, diff: Vec<f64>) -> ClassStats {
        let n = diff.len();
        ClassStats { mean0: DVector::zeros(n), mean1: DVector::from_vec(diff.clone()), mean_diff: DVector::from_vec(diff), covariance: k, n0: 2, n1: 2 }
    }

    #[test]
    fn ho_template_small_cases() {
        let s = stats_from(DMatrix::identity(3, 3), vec![1.0, 0.0, 0.0]);
        assert_eq!(ho_template(&s).unwrap().weights, vec![1.0, 0.0, 0.0]);
        let s = stats_from(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0])), vec![1.0, 1.0]);
        let w = ho_template(&s).unwrap().weights;
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ho_rejects_ill_conditioned_covariance() {
        let s = stats_from(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-14])), vec![1.0, 1.0]);
        assert!(matches!(ho_template(&s), Err(Error::IllConditioned { .. })));
        let s = stats_from(DMatrix::zeros(2, 2), vec![1.0, 1.0]);
        assert!(matches!(ho_template(&s), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn rho_matches_ho_without_truncation() {
        let mut st = RandomStream::new(3);
        let a = DMatrix::from_fn(5, 5, |_, _| st.normal());
        let k = &a * a.transpose() + DMatrix::identity(5, 5);
        let s = stats_from(k, vec![0.3, -1.0, 2.0, 0.5, 0.1]);
        let ho = ho_template(&s).unwrap();
        let rho = rho_template(&s, 1e-7).unwrap();
        for (x, y) in ho.weights.iter().zip(&rho.weights) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn rho_rank_one_and_full_truncation() {
        let u = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let sigma = 3.0;
        let k = &u * u.transpose() * sigma;
        let diff = &u * 2.0;
        let s = stats_from(k, diff.iter().copied().collect());
        let w = rho_template(&s, 1e-3).unwrap();
        let expected = &u * (diff.dot(&u) / sigma);
        for (x, y) in w.weights.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let full = stats_from(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0])), vec![1.0, 1.0]);
        // Only σ_max survives a threshold of 0.6·σ_max.
        let w = rho_template(&full, 0.6).unwrap().weights;
        assert_eq!(w, vec![0.5, 0.0]);
        // A threshold at σ_max removes everything.
        let solver = RhoSolver::new(&full).unwrap();
        assert!(solver.spectrum().truncated_solve(1.0, &full.mean_diff).iter().all(|&v| v == 0.0));
        assert!(rho_template(&full, 1.0).is_err());
    }

    #[test]
    fn alpha_sweep_breaks_ties_toward_regularization() {
        let mut s = RandomStream::new(5);
        let (a, b) = gaussian_pair(&mut s, 200, &[5.0, 5.0], &[1.0, 1.0]);
        let st = estimate_class_stats(&a, &b).unwrap();
        let (va, vb) = gaussian_pair(&mut s, 100, &[5.0, 5.0], &[1.0, 1.0]);
        let sel = select_rho_alpha(&st, &va, &vb).unwrap();
        assert_eq!(sel.validation_aucs.len(), 7);
        let max = sel.validation_aucs.iter().map(|x| x.1).fold(0.0, f64::max);
        let first_max = sel.validation_aucs.iter().find(|x| x.1 == max).unwrap().0;
        assert_eq!(sel.alpha, first_max);
    }

    #[test]
    fn dog_channels_are_unit_norm_and_dc_blocking() {
        let p = DogParams::default();
        let ch = build_dog_channels(32, p).unwrap();
        assert_eq!(ch.len(), 10);
        for t in &ch.channels {
            assert!((t.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            // Zero DC response ⇒ spatial template sums to zero.
            assert!(t.iter().sum::<f64>().abs() < 1e-10);
        }
        for j in 0..10 {
            assert_eq!(p.response(j, 0.0), 0.0);
        }
        // Peak of each radial profile found by a fine scan.
        let peak = |j: usize| (1..20_000).map(|i| i as f64 * 2.5e-5).max_by(|a, b| p.response(j, *a).total_cmp(&p.response(j, *b))).unwrap();
        for j in 1..10 {
            assert!(peak(j) > peak(j - 1));
        }
    }

    #[test]
    fn cho_with_identity_channels_matches_ho_auc() {
        let mut s = RandomStream::new(8);
        let shift: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
        let sd: Vec<f64> = (0..10).map(|i| 1.0 + 0.1 * i as f64).collect();
        let (a, b) = gaussian_pair(&mut s, 500, &shift, &sd);
        let st = estimate_class_stats(&a, &b).unwrap();
        let ho = ho_template(&st).unwrap();
        let mut ns = RandomStream::new(1);
        let t0 = cho_statistic(&a, &st, InternalNoiseConfig { epsilon: 0.0 }, &mut ns).unwrap();
        let t1 = cho_statistic(&b, &st, InternalNoiseConfig { epsilon: 0.0 }, &mut ns).unwrap();
        let h0 = ho.apply_all(&a).unwrap();
        let h1 = ho.apply_all(&b).unwrap();
        assert_eq!(empirical_auc(&t0, &t1).unwrap().auc, empirical_auc(&h0, &h1).unwrap().auc);
    }

    #[test]
    fn internal_noise_does_not_increase_auc() {
        let mut s = RandomStream::new(9);
        let (a, b) = gaussian_pair(&mut s, 2000, &[0.5, 0.3, 0.2], &[1.0, 1.0, 1.0]);
        let st = estimate_class_stats(&a, &b).unwrap();
        let auc = |eps: f64, seed: u64| {
            let mut ns = RandomStream::new(seed);
            let cfg = InternalNoiseConfig { epsilon: eps };
            let t0 = cho_statistic(&a, &st, cfg, &mut ns).unwrap();
            let t1 = cho_statistic(&b, &st, cfg, &mut ns).unwrap();
            empirical_auc(&t0, &t1).unwrap()
        };
        let clean = auc(0.0, 0);
        let noisy: f64 = (0..10).map(|k| auc(2.5, k).auc).sum::<f64>() / 10.0;
        assert!(noisy <= clean.auc + clean.standard_error);
        let zero_var = stats_from(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])), vec![1.0, 1.0]);
        assert!(cho_template(&zero_var, InternalNoiseConfig::default()).is_err());
    }

    #[test]
    fn apply_template_contract() {
        let t = LinearTemplate::new(vec![0.0, 1.0, 0.0], 0.5).unwrap();
        assert_eq!(t.apply(&[3.0, 4.0, 5.0]).unwrap(), 4.5);
        assert!(t.apply(&[1.0]).is_err());
        let z = LinearTemplate { weights: vec![0.0; 2], bias: -2.0 };
        assert_eq!(z.apply(&[7.0, 9.0]).unwrap(), -2.0);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let s = [0.3, -1.2, 2.5, 40.0, -40.0];
        let y = [1, 0, 0, 1, 0];
        let (_, g) = bce_loss(&s, &y).unwrap();
        for i in 0..s.len() {
            let mut p = s;
            p[i] += 1e-6;
            let mut m = s;
            m[i] -= 1e-6;
            let fd = (bce_loss(&p, &y).unwrap().0 - bce_loss(&m, &y).unwrap().0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
        assert!(bce_loss(&[1000.0], &[0]).unwrap().0.is_finite());
    }

    #[test]
    fn slnn_ho_loss_matches_direct_formula_and_gradients() {
        let mut s = RandomStream::new(4);
        let f: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| s.normal()).collect()).collect();
        let y = [1, 0, 1, 0, 0, 1];
        let w = [0.4, -0.7, 1.1];
        let out = slnn_ho_loss(&f, &y, &w).unwrap();
        // Direct evaluation.
        let mut m = [[0.0; 3]; 2];
        for (fi, &yi) in f.iter().zip(&y) {
            for k in 0..3 {
                m[yi as usize][k] += fi[k] / 3.0;
            }
        }
        let mut direct = 0.0;
        for (fi, &yi) in f.iter().zip(&y) {
            let a: f64 = (0..3).map(|k| w[k] * (fi[k] - m[yi as usize][k])).sum();
            direct += a * a / 6.0;
        }
        direct -= 2.0 * (0..3).map(|k| w[k] * (m[1][k] - m[0][k])).sum::<f64>();
        assert!((out.loss - direct).abs() < 1e-10);
        let h = 1e-6;
        for k in 0..3 {
            let mut wp = w;
            wp[k] += h;
            let mut wm = w;
            wm[k] -= h;
            let fd = (slnn_ho_loss(&f, &y, &wp).unwrap().loss - slnn_ho_loss(&f, &y, &wm).unwrap().loss) / (2.0 * h);
            assert!((fd - out.d_weights[k]).abs() < 1e-7);
        }
        for j in 0..6 {
            for k in 0..3 {
                let mut fp = f.clone();
                fp[j][k] += h;
                let mut fm = f.clone();
                fm[j][k] -= h;
                let fd = (slnn_ho_loss(&fp, &y, &w).unwrap().loss - slnn_ho_loss(&fm, &y, &w).unwrap().loss) / (2.0 * h);
                assert!((fd - out.d_outputs[j][k]).abs() < 1e-7);
            }
        }
        assert_eq!(slnn_ho_loss(&f, &y, &[0.0; 3]).unwrap().loss, 0.0);
        assert!(slnn_ho_loss(&f, &[1, 1, 1, 0, 0, 1], &w).is_err());
    }

    #[test]
    fn slnn_no_separates_separable_data() {
        let f: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 2) as f64 * 2.0 - 1.0 + 0.01 * i as f64, 0.5]).collect();
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let cfg = SlnnConfig { epochs: 200, batch_present: 5, batch_absent: 5, adam: AdamConfig::default() };
        let t = train_slnn_no(&f, &y, &cfg, &mut RandomStream::new(1)).unwrap();
        let s = t.apply_all(&f).unwrap();
        let (s0, s1): (Vec<_>, Vec<_>) = s.iter().zip(&y).partition(|(_, &yy)| yy == 0);
        let s0: Vec<f64> = s0.into_iter().map(|x| *x.0).collect();
        let s1: Vec<f64> = s1.into_iter().map(|x| *x.0).collect();
        assert_eq!(empirical_auc(&s0, &s1).unwrap().auc, 1.0);
        // Flipped labels flip the template direction.
        let yf: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let tf = train_slnn_no(&f, &yf, &cfg, &mut RandomStream::new(1)).unwrap();
        assert!(t.cosine(&tf) < -0.99);
        assert!(train_slnn_no(&f, &vec![1; 40], &cfg, &mut RandomStream::new(1)).is_err());
    }
}
