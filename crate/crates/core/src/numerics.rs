//! Deterministic numerical primitives: the image container, seeded random
//! streams, Poisson sampling, SVD-based pseudo-inversion and real FFTs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{invalid, Error, Result};

/// A 2-D real-valued image stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("image dimensions must be positive");
        }
        if data.len() != height * width {
            return invalid(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                height,
                width
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("image contains non-finite values");
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Pixel-center coordinates of the grid center.
    pub fn center(&self) -> (f64, f64) {
        ((self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rounds every pixel to the nearest single-precision value.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

impl AsRef<[f64]> for ImageGrid {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

/// Seeded, counter-based random source.
///
/// Child streams are a pure function of `(seed, tag)`, so work can be
/// partitioned across workers without sharing generator state.
#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream identified by `tag`; does not depend on how many
    /// values have already been drawn from `self`.
    pub fn derive(&self, tag: u64) -> RandomStream {
        RandomStream::new(splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        if low == high {
            return low;
        }
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// ln(k!) via the Lanczos approximation of ln Γ(k + 1).
pub(crate) fn ln_factorial(k: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if k < 2.0 {
        return 0.0;
    }
    // Γ(k + 1) with z = k.
    let z = k;
    let mut a = COEF[0];
    let t = z + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (z + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
}

/// Draws from Poisson(`mean`).
///
/// Multiplication method below 30, Hörmann's transformed rejection (PTRS)
/// above.
pub fn sample_poisson(stream: &mut RandomStream, mean: f64) -> Result<u64> {
    if !mean.is_finite() || mean < 0.0 {
        return invalid(format!("Poisson mean must be finite and non-negative, got {mean}"));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    if mean < 30.0 {
        let limit = (-mean).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            p *= stream.uniform();
            if p <= limit {
                return Ok(k);
            }
            k += 1;
        }
    }
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = stream.uniform() - 0.5;
        let v = stream.uniform();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return Ok(k as u64);
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln() <= -mean + k * loglam - ln_factorial(k) {
            return Ok(k as u64);
        }
    }
}

/// Singular value decomposition `M = U diag(s) Vᵀ` with `s` sorted
/// non-increasing.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&self.singular_values));
        &self.u * s * &self.v_t
    }
}

fn check_finite_matrix(m: &DMatrix<f64>) -> Result<()> {
    if m.is_empty() {
        return invalid("matrix is empty");
    }
    if m.iter().any(|v| !v.is_finite()) {
        return invalid("matrix contains non-finite values");
    }
    Ok(())
}

pub fn svd(matrix: &DMatrix<f64>) -> Result<Svd> {
    check_finite_matrix(matrix)?;
    let dec = matrix.clone().svd(true, true);
    let u = dec.u.ok_or_else(|| Error::State("SVD did not produce U".into()))?;
    let v_t = dec.v_t.ok_or_else(|| Error::State("SVD did not produce Vᵀ".into()))?;
    let s = dec.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let u_sorted = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt_sorted = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    Ok(Svd {
        u: u_sorted,
        singular_values: order.iter().map(|&i| s[i].max(0.0)).collect(),
        v_t: vt_sorted,
    })
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return invalid(format!("matrix is not square ({}x{})", m.nrows(), m.ncols()));
    }
    let scale = m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return invalid(format!("matrix is not symmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix, ordered by decreasing
/// magnitude. For PSD input the magnitudes are its singular values.
#[derive(Clone, Debug)]
pub struct SymmetricSpectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SymmetricSpectrum {
    pub fn new(matrix: &DMatrix<f64>) -> Result<Self> {
        check_finite_matrix(matrix)?;
        check_symmetric(matrix)?;
        let sym = (matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let (values, vectors) = if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).all(|v| v.is_finite()) {
            (eig.eigenvalues, eig.eigenvectors)
        } else {
            // The QR iteration can break down on exactly singular blocks; the
            // SVD does not, and the sign of each eigenvalue is the Rayleigh
            // quotient of its singular vector.
            let svd = sym.clone().svd(true, false);
            let u = svd.u.ok_or_else(|| Error::Numerical("singular vectors unavailable".into()))?;
            let values = DVector::from_fn(u.ncols(), |k, _| {
                let col = u.column(k);
                let rayleigh = col.dot(&(&sym * col));
                svd.singular_values[k].copysign(rayleigh)
            });
            (values, u)
        };
        if values.iter().chain(vectors.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("eigendecomposition did not converge".into()));
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()));
        let n = matrix.nrows();
        let vectors = DMatrix::from_fn(n, n, |r, c| vectors[(r, order[c])]);
        Ok(Self {
            eigenvalues: order.iter().map(|&i| values[i]).collect(),
            eigenvectors: vectors,
        })
    }

    pub fn singular_values(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|v| v.abs()).collect()
    }

    pub fn max_singular_value(&self) -> f64 {
        self.eigenvalues.first().map_or(0.0, |v| v.abs())
    }

    /// Pseudo-inverse of the rank truncation keeping singular values
    /// strictly above `alpha · σ_max`.
    pub fn truncated_pseudoinverse(&self, alpha: f64) -> DMatrix<f64> {
        let n = self.eigenvectors.nrows();
        let mut out = DMatrix::zeros(n, n);
        let threshold = alpha * self.max_singular_value();
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            if lambda.abs() <= threshold || lambda == 0.0 {
                break;
            }
            let u = self.eigenvectors.column(k);
            out.ger(1.0 / lambda, &u, &u, 1.0);
        }
        out
    }

    /// `K_α⁺ · rhs` without forming the pseudo-inverse.
    pub fn truncated_solve(&self, alpha: f64, rhs: &DVector<f64>) -> DVector<f64> {
        let n = self.eigenvectors.nrows();
        let mut out = DVector::zeros(n);
        let threshold = alpha * self.max_singular_value();
        for (k, &lambda) in self.eigenvalues.iter().enumerate() {
            if lambda.abs() <= threshold || lambda == 0.0 {
                break;
            }
            let u = self.eigenvectors.column(k);
            let coef = u.dot(rhs) / lambda;
            out.axpy(coef, &u, 1.0);
        }
        out
    }
}

/// Pseudo-inverse of the symmetric PSD `matrix` after discarding singular
/// values at or below `alpha · σ_max`.
pub fn truncated_pseudoinverse(matrix: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    Ok(SymmetricSpectrum::new(matrix)?.truncated_pseudoinverse(alpha))
}

/// Singular values of a covariance matrix, sorted non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumResult {
    pub singular_values: Vec<f64>,
    pub matrix_dimension: usize,
}

/// Forward DFT of a real signal (full complex spectrum, unnormalized).
pub fn fft_real(signal: &[f64]) -> Result<Vec<Complex64>> {
    if signal.is_empty() {
        return invalid("signal must be non-empty");
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return invalid("signal contains non-finite values");
    }
    let mut buf: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    Ok(buf)
}

/// Inverse DFT (normalized by 1/n) returning the real part.
pub fn ifft_real(spectrum: &[Complex64]) -> Result<Vec<f64>> {
    if spectrum.is_empty() {
        return invalid("spectrum must be non-empty");
    }
    let mut buf = spectrum.to_vec();
    FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
    let scale = 1.0 / buf.len() as f64;
    Ok(buf.iter().map(|c| c.re * scale).collect())
}

/// Forward transform, unit spectral multiply, inverse transform.
pub fn real_fft_roundtrip(signal: &[f64]) -> Result<Vec<f64>> {
    let spectrum = fft_real(signal)?;
    ifft_real(&spectrum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_matrix(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut s = RandomStream::new(seed);
        DMatrix::from_fn(n, m, |_, _| s.normal())
    }

    #[test]
    fn image_grid_rejects_bad_shapes() {
        assert!(ImageGrid::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(0, 2, vec![]).is_err());
        assert!(ImageGrid::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(ImageGrid::new(1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let s = svd(&DMatrix::identity(3, 3)).unwrap();
        for v in &s.singular_values {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-14);
        }
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let s = svd(&d).unwrap();
        assert_relative_eq!(s.singular_values[0], 3.0, epsilon = 1e-14);
        assert_relative_eq!(s.singular_values[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let m = random_matrix(8, 8, 11);
        let s = svd(&m).unwrap();
        let err = (s.reconstruct() - &m).norm() / m.norm();
        assert!(err < 1e-10, "reconstruction error {err}");
        for w in s.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let utu = s.u.transpose() * &s.u;
        let vvt = &s.v_t * s.v_t.transpose();
        assert!((utu - DMatrix::identity(8, 8)).amax() < 1e-10);
        assert!((vvt - DMatrix::identity(8, 8)).amax() < 1e-10);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = f64::INFINITY;
        assert!(matches!(svd(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pinv_diagonal_truncation() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.0, 0.001]));
        let p = truncated_pseudoinverse(&d, 0.1).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.5, 0.0]));
        assert!((p - expected).amax() < 1e-14);
    }

    /// Gauss-Jordan inverse with partial pivoting; independent of the
    /// eigen-based path.
    fn gauss_jordan_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        let mut inv = DMatrix::identity(n, n);
        for col in 0..n {
            let pivot = (col..n).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs())).unwrap();
            a.swap_rows(col, pivot);
            inv.swap_rows(col, pivot);
            let p = a[(col, col)];
            for j in 0..n {
                a[(col, j)] /= p;
                inv[(col, j)] /= p;
            }
            for i in 0..n {
                if i != col {
                    let f = a[(i, col)];
                    for j in 0..n {
                        a[(i, j)] -= f * a[(col, j)];
                        inv[(i, j)] -= f * inv[(col, j)];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn pinv_matches_inverse_when_well_conditioned() {
        let b = random_matrix(4, 4, 5);
        let spd = &b * b.transpose() + DMatrix::identity(4, 4);
        let p = truncated_pseudoinverse(&spd, 1e-7).unwrap();
        let inv = gauss_jordan_inverse(&spd);
        assert!((p - inv).amax() < 1e-8);
    }

    #[test]
    fn pinv_zero_matrix_and_errors() {
        let z = DMatrix::zeros(3, 3);
        assert_eq!(truncated_pseudoinverse(&z, 0.3).unwrap(), DMatrix::zeros(3, 3));
        let mut asym = DMatrix::identity(3, 3);
        asym[(0, 2)] = 0.5;
        assert!(truncated_pseudoinverse(&asym, 0.1).is_err());
        assert!(truncated_pseudoinverse(&DMatrix::identity(2, 2), 1.0).is_err());
        assert!(truncated_pseudoinverse(&DMatrix::identity(2, 2), 0.0).is_err());
    }

    #[test]
    fn pinv_penrose_property_on_low_rank() {
        let b = random_matrix(6, 3, 9);
        let k = &b * b.transpose();
        for &alpha in &[1e-1, 1e-3, 1e-7] {
            let p = truncated_pseudoinverse(&k, alpha).unwrap();
            let pkp = &p * &k * &p;
            assert!((pkp - &p).amax() < 1e-8 * p.amax().max(1.0));
        }
    }

    #[test]
    fn poisson_zero_mean_and_errors() {
        let mut s = RandomStream::new(1);
        for _ in 0..10 {
            assert_eq!(sample_poisson(&mut s, 0.0).unwrap(), 0);
        }
        assert!(sample_poisson(&mut s, -1.0).is_err());
        assert!(sample_poisson(&mut s, f64::NAN).is_err());
        assert!(sample_poisson(&mut s, f64::INFINITY).is_err());
    }

    #[test]
    fn poisson_moments_at_500() {
        let mut s = RandomStream::new(2024);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_poisson(&mut s, 500.0).unwrap() as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((mean - 500.0).abs() < 3.0 * (500.0f64 / n as f64).sqrt(), "mean {mean}");
        assert!((var / 500.0 - 1.0).abs() < 0.05, "variance {var}");
    }

    fn poisson_pmf(k: u64, mean: f64) -> f64 {
        (-mean + k as f64 * mean.ln() - ln_factorial(k as f64)).exp()
    }

    /// Upper 0.001 quantile of chi-square via Wilson-Hilferty.
    fn chi2_critical_001(dof: f64) -> f64 {
        let z = 3.090_232_306;
        let h = 2.0 / (9.0 * dof);
        dof * (1.0 - h + z * h.sqrt()).powi(3)
    }

    #[test]
    fn poisson_goodness_of_fit() {
        for (i, &mean) in [0.5, 5.0, 50.0, 500.0].iter().enumerate() {
            let mut s = RandomStream::new(77 + i as u64);
            let n = 100_000usize;
            let mut counts = std::collections::BTreeMap::<u64, usize>::new();
            for _ in 0..n {
                *counts.entry(sample_poisson(&mut s, mean).unwrap()).or_default() += 1;
            }
            // Pool bins so every expected count is at least 5.
            let max_k = (mean + 10.0 * mean.sqrt() + 10.0) as u64;
            let mut bins: Vec<(f64, f64)> = Vec::new();
            let (mut e_acc, mut o_acc) = (0.0, 0.0);
            let mut cumulative = 0.0;
            for k in 0..=max_k {
                let p = poisson_pmf(k, mean);
                cumulative += p;
                e_acc += p * n as f64;
                o_acc += *counts.get(&k).unwrap_or(&0) as f64;
                if e_acc >= 5.0 {
                    bins.push((o_acc, e_acc));
                    e_acc = 0.0;
                    o_acc = 0.0;
                }
            }
            let tail_obs: usize = counts.range((max_k + 1)..).map(|(_, c)| c).sum();
            let last = bins.last_mut().unwrap();
            last.0 += o_acc + tail_obs as f64;
            last.1 += e_acc + (1.0 - cumulative).max(0.0) * n as f64;
            let chi2: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
            let dof = (bins.len() - 1) as f64;
            assert!(chi2 < chi2_critical_001(dof), "mean {mean}: chi2 {chi2} dof {dof}");
        }
    }

    #[test]
    fn ln_factorial_matches_direct_product() {
        let mut acc = 0.0f64;
        for k in 1..60u64 {
            acc += (k as f64).ln();
            assert_relative_eq!(ln_factorial(k as f64), acc, max_relative = 1e-12);
        }
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let mut a = RandomStream::new(42);
        let mut b = RandomStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let c1 = a.derive(3);
        let c2 = RandomStream::new(42).derive(3);
        assert_eq!(c1.seed(), c2.seed());
        assert_ne!(a.derive(3).seed(), a.derive(4).seed());
    }

    fn direct_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (t, &v)| {
                    let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                    acc + Complex64::new(v * ang.cos(), v * ang.sin())
                })
            })
            .collect()
    }

    #[test]
    fn fft_impulse_and_constant() {
        let mut x = vec![0.0; 8];
        x[0] = 1.0;
        for c in fft_real(&x).unwrap() {
            assert_relative_eq!(c.norm(), 1.0, epsilon = 1e-14);
        }
        let spec = fft_real(&[2.5; 16]).unwrap();
        assert_relative_eq!(spec[0].re, 40.0, epsilon = 1e-12);
        for c in &spec[1..] {
            assert!(c.norm() < 1e-12);
        }
    }

    #[test]
    fn fft_roundtrip_parseval_and_direct_dft() {
        let mut s = RandomStream::new(3);
        let x: Vec<f64> = (0..64).map(|_| s.normal()).collect();
        let back = real_fft_roundtrip(&x).unwrap();
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
        let spec = fft_real(&x).unwrap();
        let direct = direct_dft(&x);
        for (a, b) in spec.iter().zip(&direct) {
            assert!((a - b).norm() < 1e-9);
        }
        let e_time: f64 = x.iter().map(|v| v * v).sum();
        let e_freq: f64 = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / 64.0;
        assert!((e_time - e_freq).abs() / e_time < 1e-10);
        assert!(real_fft_roundtrip(&[]).is_err());
        assert!(real_fft_roundtrip(&[f64::NAN]).is_err());
    }
}
