//! Dense NCHW batch tensors and the 3×3 same-padding convolution kernels.

use crate::error::{invalid, Result};
use crate::numerics::ImageGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_images(images: &[ImageGrid]) -> Result<Self> {
        let Some(first) = images.first() else {
            return invalid("batch is empty");
        };
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.height() != h || img.width() != w {
                return invalid("batch images have mismatched dimensions");
            }
            data.extend_from_slice(img.data());
        }
        Ok(Self { n: images.len(), c: 1, h, w, data })
    }

    pub fn from_slices<V: AsRef<[f64]>>(images: &[V], h: usize, w: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            let img = img.as_ref();
            if img.len() != h * w {
                return invalid("batch images have mismatched dimensions");
            }
            data.extend_from_slice(img);
        }
        Ok(Self { n: images.len(), c: 1, h, w, data })
    }

    pub fn to_images(&self) -> Vec<ImageGrid> {
        assert_eq!(self.c, 1, "only single-channel tensors convert to images");
        self.data
            .chunks(self.h * self.w)
            .map(|chunk| ImageGrid::new(self.h, self.w, chunk.to_vec()).expect("finite tensor values"))
            .collect()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let s = self.c * self.plane();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.c * self.plane();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Selects items by index into a new tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(indices.len(), self.c, self.h, self.w);
        for (k, &i) in indices.iter().enumerate() {
            out.item_mut(k).copy_from_slice(self.item(i));
        }
        out
    }
}

/// Row-major GEMM: `c = alpha · op(a) · op(b) + beta · c` with explicit
/// strides (rows, cols) for each operand.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_row_stride: isize,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose extents cover the strided m×k, k×n
    // and m×n views; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_row_stride,
            1,
        );
    }
}

/// Unfolds a `c × h × w` image into a `(c·9) × (h·w)` patch matrix for a
/// 3×3 kernel with one pixel of zero padding.
pub(crate) fn im2col(input: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), c * 9 * hw);
    for ci in 0..c {
        let src = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&srow[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the image.
pub(crate) fn col2im(col: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let drow = &mut dst[sy as usize * w + s0..][..x_hi - x_lo];
                    for (d, g) in drow.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RandomStream;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (3, 5, 7);
        let mut s = RandomStream::new(4);
        let x: Vec<f64> = (0..c * h * w).map(|_| s.normal()).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|_| s.normal()).collect();
        let mut col = vec![0.0; c * 9 * h * w];
        im2col(&x, c, h, w, &mut col);
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, h, w, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let (c, h, w) = (2, 4, 3);
        let x: Vec<f64> = (0..c * h * w).map(|v| v as f64).collect();
        let mut col = vec![0.0; c * 9 * h * w];
        im2col(&x, c, h, w, &mut col);
        for ci in 0..c {
            assert_eq!(&col[(ci * 9 + 4) * h * w..][..h * w], &x[ci * h * w..(ci + 1) * h * w]);
        }
        // Top-left tap of pixel (0, 0) reads padding.
        assert_eq!(col[0], 0.0);
    }
}
