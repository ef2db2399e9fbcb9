//! Stylized parallel-beam CT acquisition: ray-driven Radon transform,
//! Poisson transmission noise and Ram-Lak filtered back-projection.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{sample_poisson, ImageGrid, RandomStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub n_views: usize,
    pub n_bins: usize,
    /// Incident photon count per detector bin.
    pub incident_flux: f64,
    /// Attenuation scale in `T(x) = I0·exp(−x/n)`.
    pub normalization: f64,
    pub count_floor: u64,
}

impl AcquisitionConfig {
    pub fn validate_for(&self, grid_size: usize) -> Result<()> {
        if self.n_views == 0 || self.n_bins == 0 {
            return invalid("view and bin counts must be positive");
        }
        if !(self.incident_flux > 0.0) || !(self.normalization > 0.0) {
            return invalid("incident flux and normalization must be positive");
        }
        if self.count_floor == 0 {
            return invalid("count floor must be at least 1");
        }
        let diagonal = (2.0f64).sqrt() * grid_size as f64;
        if (self.n_bins as f64) < diagonal {
            return invalid(format!("{} detector bins cannot cover the {:.1}-pixel image diagonal", self.n_bins, diagonal));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub n_views: usize,
    pub n_bins: usize,
    /// View-major line integrals.
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(n_views: usize, n_bins: usize) -> Self {
        Self { n_views, n_bins, data: vec![0.0; n_views * n_bins] }
    }

    pub fn view(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_bins..(i + 1) * self.n_bins]
    }
}

/// Precomputed projector/reconstructor for one grid size and geometry.
pub struct Scanner {
    config: AcquisitionConfig,
    grid_size: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    pad_len: usize,
    ramp: Vec<Complex64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Scanner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scanner").field("config", &self.config).field("grid_size", &self.grid_size).finish()
    }
}

impl Scanner {
    pub fn new(config: &AcquisitionConfig, grid_size: usize) -> Result<Self> {
        config.validate_for(grid_size)?;
        let angles: Vec<f64> = (0..config.n_views).map(|i| i as f64 * PI / config.n_views as f64).collect();
        let pad_len = (2 * config.n_bins).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(pad_len);
        let ifft = planner.plan_fft_inverse(pad_len);
        // Band-limited ramp: transform of the sampled Ram-Lak kernel
        // h(0) = 1/4, h(n) = −1/(πn)² for odd n, 0 for even n.
        let mut ramp: Vec<Complex64> = (0..pad_len)
            .map(|k| {
                let n = if k <= pad_len / 2 { k as i64 } else { k as i64 - pad_len as i64 };
                let v = if n == 0 {
                    0.25
                } else if n % 2 != 0 {
                    -1.0 / (PI * n as f64).powi(2)
                } else {
                    0.0
                };
                Complex64::new(v, 0.0)
            })
            .collect();
        fft.process(&mut ramp);
        Ok(Self {
            config: config.clone(),
            grid_size,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
            pad_len,
            ramp,
            fft,
            ifft,
        })
    }

    pub fn config(&self) -> &AcquisitionConfig {
        &self.config
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    fn bin_offset(&self) -> f64 {
        (self.config.n_bins as f64 - 1.0) / 2.0
    }

    fn check_image(&self, image: &ImageGrid) -> Result<()> {
        if image.height() != image.width() {
            return invalid(format!("image must be square, got {}x{}", image.height(), image.width()));
        }
        if image.height() != self.grid_size {
            return invalid(format!("image is {} pixels wide, scanner expects {}", image.height(), self.grid_size));
        }
        Ok(())
    }

    /// Line integrals of the bilinearly interpolated image, sampled at unit
    /// steps along each ray.
    pub fn radon(&self, image: &ImageGrid) -> Result<Sinogram> {
        self.check_image(image)?;
        let n = self.grid_size;
        let c = (n as f64 - 1.0) / 2.0;
        let half_len = ((n as f64) / std::f64::consts::SQRT_2).ceil() as i64 + 1;
        let mut sino = Sinogram::zeros(self.config.n_views, self.config.n_bins);
        let offset = self.bin_offset();
        let data = image.data();
        for v in 0..self.config.n_views {
            let (ct, st) = (self.cos[v], self.sin[v]);
            for b in 0..self.config.n_bins {
                let s = b as f64 - offset;
                let (x0, y0) = (s * ct, s * st);
                let mut acc = 0.0;
                for t in -half_len..=half_len {
                    let t = t as f64;
                    let col = x0 - t * st + c;
                    let row = y0 + t * ct + c;
                    acc += bilinear(data, n, row, col);
                }
                sino.data[v * self.config.n_bins + b] = acc;
            }
        }
        Ok(sino)
    }

    fn check_sinogram(&self, sino: &Sinogram) -> Result<()> {
        if sino.n_views != self.config.n_views || sino.n_bins != self.config.n_bins {
            return invalid("sinogram dimensions do not match the acquisition geometry");
        }
        if sino.data.len() != sino.n_views * sino.n_bins {
            return invalid("sinogram data length does not match its dimensions");
        }
        Ok(())
    }

    /// Ramp-filtered back-projection scaled by π / n_views.
    pub fn fbp(&self, sino: &Sinogram) -> Result<ImageGrid> {
        self.check_sinogram(sino)?;
        let nb = self.config.n_bins;
        let mut filtered = vec![0.0; sino.data.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.pad_len];
        let inv_len = 1.0 / self.pad_len as f64;
        for v in 0..self.config.n_views {
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (z, &g) in buf.iter_mut().zip(sino.view(v)) {
                z.re = g;
            }
            self.fft.process(&mut buf);
            for (z, h) in buf.iter_mut().zip(&self.ramp) {
                *z *= h;
            }
            self.ifft.process(&mut buf);
            for b in 0..nb {
                filtered[v * nb + b] = buf[b].re * inv_len;
            }
        }
        let n = self.grid_size;
        let c = (n as f64 - 1.0) / 2.0;
        let offset = self.bin_offset();
        let mut out = vec![0.0; n * n];
        for v in 0..self.config.n_views {
            let q = &filtered[v * nb..(v + 1) * nb];
            let (ct, st) = (self.cos[v], self.sin[v]);
            for r in 0..n {
                let y = r as f64 - c;
                for col in 0..n {
                    let x = col as f64 - c;
                    let pos = x * ct + y * st + offset;
                    let i0 = pos.floor();
                    let frac = pos - i0;
                    let i0 = i0 as i64;
                    let mut val = 0.0;
                    if i0 >= 0 && (i0 as usize) < nb {
                        val += (1.0 - frac) * q[i0 as usize];
                    }
                    if i0 + 1 >= 0 && ((i0 + 1) as usize) < nb {
                        val += frac * q[(i0 + 1) as usize];
                    }
                    out[r * n + col] += val;
                }
            }
        }
        let scale = PI / self.config.n_views as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        ImageGrid::new(n, n, out)
    }

    /// `ĝ = −n·log(max(Poi(I0·exp(−g/n)), floor) / I0)`, one counter-derived
    /// stream per view.
    pub fn apply_transmission_noise(&self, sino: &Sinogram, stream: &RandomStream) -> Result<Sinogram> {
        self.check_sinogram(sino)?;
        apply_transmission_noise(sino, &self.config, stream)
    }

    pub fn simulate_measurement(&self, object: &ImageGrid, stream: &RandomStream) -> Result<ImageGrid> {
        let sino = self.radon(object)?;
        let noisy = self.apply_transmission_noise(&sino, stream)?;
        self.fbp(&noisy)
    }
}

#[inline]
fn bilinear(data: &[f64], n: usize, row: f64, col: f64) -> f64 {
    if row <= -1.0 || col <= -1.0 || row >= n as f64 || col >= n as f64 {
        return 0.0;
    }
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as i64, c0 as i64);
    let n_i = n as i64;
    let px = |r: i64, c: i64| -> f64 {
        if r >= 0 && c >= 0 && r < n_i && c < n_i {
            data[(r * n_i + c) as usize]
        } else {
            0.0
        }
    };
    (1.0 - fr) * ((1.0 - fc) * px(r0, c0) + fc * px(r0, c0 + 1)) + fr * ((1.0 - fc) * px(r0 + 1, c0) + fc * px(r0 + 1, c0 + 1))
}

pub fn radon(image: &ImageGrid, config: &AcquisitionConfig) -> Result<Sinogram> {
    if image.height() != image.width() {
        return invalid(format!("image must be square, got {}x{}", image.height(), image.width()));
    }
    Scanner::new(config, image.height())?.radon(image)
}

pub fn fbp(sino: &Sinogram, config: &AcquisitionConfig, grid_size: usize) -> Result<ImageGrid> {
    Scanner::new(config, grid_size)?.fbp(sino)
}

pub fn apply_transmission_noise(sino: &Sinogram, config: &AcquisitionConfig, stream: &RandomStream) -> Result<Sinogram> {
    let mut out = sino.clone();
    let i0 = config.incident_flux;
    let n = config.normalization;
    let floor = config.count_floor.max(1);
    for v in 0..sino.n_views {
        let mut s = stream.derive(v as u64);
        for b in 0..sino.n_bins {
            let idx = v * sino.n_bins + b;
            let g = sino.data[idx];
            if !g.is_finite() {
                return invalid("sinogram contains non-finite values");
            }
            let expected = i0 * (-g / n).exp();
            let counts = sample_poisson(&mut s, expected)?.max(floor);
            out.data[idx] = -n * (counts as f64 / i0).ln();
        }
    }
    Ok(out)
}

pub fn simulate_measurement(object: &ImageGrid, config: &AcquisitionConfig, stream: &RandomStream) -> Result<ImageGrid> {
    if object.height() != object.width() {
        return invalid("object must be square");
    }
    Scanner::new(config, object.height())?.simulate_measurement(object, stream)
}
