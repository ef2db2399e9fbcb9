//! Figures of merit: empirical ROC area, RMSE, SSIM and covariance spectra.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{ImageGrid, SpectrumResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub standard_error: f64,
    pub n0: usize,
    pub n1: usize,
}

/// Mann–Whitney AUC (ties count ½) with the Hanley–McNeil standard error.
pub fn empirical_auc(t0: &[f64], t1: &[f64]) -> Result<RocResult> {
    if t0.is_empty() || t1.is_empty() {
        return invalid("both classes need at least one statistic");
    }
    if t0.iter().chain(t1).any(|v| !v.is_finite()) {
        return invalid("test statistics must be finite");
    }
    let mut sorted0 = t0.to_vec();
    sorted0.sort_by(f64::total_cmp);
    // For each t1 value: (#t0 below) + ½ (#t0 equal), via two binary searches.
    let mut twice_count: u128 = 0;
    for &v in t1 {
        let below = sorted0.partition_point(|&x| x < v);
        let not_above = sorted0.partition_point(|&x| x <= v);
        twice_count += (2 * below + (not_above - below)) as u128;
    }
    let (n0, n1) = (t0.len(), t1.len());
    let auc = twice_count as f64 / (2.0 * n0 as f64 * n1 as f64);
    Ok(RocResult { auc, standard_error: hanley_mcneil_se(auc, n0, n1), n0, n1 })
}

pub fn hanley_mcneil_se(auc: f64, n0: usize, n1: usize) -> f64 {
    let q1 = auc / (2.0 - auc);
    let q2 = 2.0 * auc * auc / (1.0 + auc);
    let var = (auc * (1.0 - auc) + (n1 as f64 - 1.0) * (q1 - auc * auc) + (n0 as f64 - 1.0) * (q2 - auc * auc)) / (n0 as f64 * n1 as f64);
    var.max(0.0).sqrt()
}

/// Root mean squared difference over all pixels of all images.
pub fn rmse<A: AsRef<[f64]>, B: AsRef<[f64]>>(estimates: &[A], targets: &[B]) -> Result<f64> {
    if estimates.is_empty() || estimates.len() != targets.len() {
        return invalid("estimates and targets must be non-empty and equally many");
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (e, t) in estimates.iter().zip(targets) {
        let (e, t) = (e.as_ref(), t.as_ref());
        if e.len() != t.len() {
            return invalid("estimate and target shapes differ");
        }
        sum += e.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += e.len();
    }
    Ok((sum / count as f64).sqrt())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-0.5 * ((i as f64 - c) / SSIM_SIGMA).powi(2)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filtering over fully contained windows.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5) and constants
/// `C1 = (0.01 L)²`, `C2 = (0.03 L)²`.
pub fn ssim(estimate: &ImageGrid, target: &ImageGrid, dynamic_range: f64) -> Result<f64> {
    if !estimate.same_shape(target) {
        return invalid("estimate and target shapes differ");
    }
    if !(dynamic_range > 0.0) {
        return invalid("dynamic range must be positive");
    }
    let (h, w) = (target.height(), target.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return invalid(format!("images must be at least {SSIM_WINDOW}×{SSIM_WINDOW}"));
    }
    let k = gaussian_window();
    let (x, y) = (estimate.data(), target.data());
    let mu_x = filter_valid(x, h, w, &k);
    let mu_y = filter_valid(y, h, w, &k);
    let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let e_xx = filter_valid(&sq(x, x), h, w, &k);
    let e_yy = filter_valid(&sq(y, y), h, w, &k);
    let e_xy = filter_valid(&sq(x, y), h, w, &k);
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cxy = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Average SSIM over paired image lists.
pub fn mean_ssim(estimates: &[ImageGrid], targets: &[ImageGrid], dynamic_range: f64) -> Result<f64> {
    if estimates.is_empty() || estimates.len() != targets.len() {
        return invalid("estimates and targets must be non-empty and equally many");
    }
    let mut total = 0.0;
    for (e, t) in estimates.iter().zip(targets) {
        total += ssim(e, t, dynamic_range)?;
    }
    Ok(total / estimates.len() as f64)
}

/// Singular values of the sample covariance, pooled over classes when
/// labels are given (`½(K₀ + K₁)`, divisor `n − 1` per class), sorted
/// non-increasing and truncated to `max_rank`.
pub fn covariance_spectrum<A: AsRef<[f64]>>(images: &[A], labels: Option<&[u8]>, max_rank: usize) -> Result<SpectrumResult> {
    if images.len() < 2 {
        return invalid("at least two images are required");
    }
    let dim = images[0].as_ref().len();
    let groups: Vec<Vec<usize>> = match labels {
        Some(l) => {
            if l.len() != images.len() {
                return invalid("one label per image is required");
            }
            let g: Vec<Vec<usize>> = (0..2u8).map(|c| (0..l.len()).filter(|&i| l[i] == c).collect()).collect();
            if g.iter().any(|x| x.len() < 2) {
                return invalid("each class needs at least two images");
            }
            g
        }
        None => vec![(0..images.len()).collect()],
    };
    let weight = 1.0 / groups.len() as f64;
    // Rows of Z are scaled centered samples, so K = ZᵀZ; its nonzero
    // spectrum equals that of the smaller Gram matrix ZZᵀ.
    let rows: usize = groups.iter().map(Vec::len).sum();
    let mut z = DMatrix::zeros(rows, dim);
    let mut r = 0;
    for g in &groups {
        let mut mean = vec![0.0; dim];
        for &i in g {
            let img = images[i].as_ref();
            if img.len() != dim {
                return invalid("images have mismatched dimensions");
            }
            mean.iter_mut().zip(img).for_each(|(m, v)| *m += v / g.len() as f64);
        }
        let scale = (weight / (g.len() - 1) as f64).sqrt();
        for &i in g {
            for (c, (v, m)) in images[i].as_ref().iter().zip(&mean).enumerate() {
                z[(r, c)] = (v - m) * scale;
            }
            r += 1;
        }
    }
    let gram = if rows <= dim { &z * z.transpose() } else { z.transpose() * &z };
    let mut values: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values.resize(dim, 0.0);
    values.truncate(max_rank.min(dim));
    Ok(SpectrumResult { singular_values: values, matrix_dimension: dim })
}

/// `σ_max / σ_k` with `k = ⌈floor_fraction · N⌉` (1-based, clamped to the
/// spectrum length). Lower means better conditioned.
pub fn condition_proxy(spectrum: &SpectrumResult, floor_fraction: f64) -> Result<f64> {
    let s = &spectrum.singular_values;
    if s.is_empty() {
        return invalid("spectrum is empty");
    }
    if !(floor_fraction > 0.0 && floor_fraction <= 1.0) {
        return invalid("floor fraction must lie in (0, 1]");
    }
    let k = ((floor_fraction * spectrum.matrix_dimension as f64).ceil() as usize).clamp(1, s.len());
    if !(s[k - 1] > 0.0) {
        return invalid(format!("spectrum is rank-deficient at index {k}"));
    }
    Ok(s[0] / s[k - 1])
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return invalid("need two equally long series of length ≥ 2");
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}
