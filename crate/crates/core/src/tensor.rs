//! Dense NCHW tensors of `f64` and the convolution kernels behind the
//! autograd tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense 4-D array in NCHW order. Scalars are `[1, 1, 1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "{} values cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, h, w] = self.shape;
        self.data[((n * cs + c) * h + y) * w + x]
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        if ph < kernel || pw < kernel {
            return Err(Error::Shape(format!(
                "{height}x{width} input (pad {pad}) is smaller than a {kernel}x{kernel} kernel"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (OH·OW)` matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let ncols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ncols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            line[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `out = a·b + beta·out` with `out` row-major `m × n`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, out: &mut [f64]) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides and extents were derived from slices whose lengths
    // cover `rows * cols` elements, checked above and in `Mat::new`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut out = vec![1.0; 8];
        gemm(Mat::new(&a, 2, 3), Mat::new(&b, 3, 4), 1.0, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum::<f64>() + 1.0;
                assert_eq!(out[i * 4 + j], want);
            }
        }
        // a^T (3x2) · a (2x3)
        let mut out = vec![0.0; 9];
        gemm(Mat::new(&a, 2, 3).t(), Mat::new(&a, 2, 3), 0.0, &mut out);
        assert_eq!(out[0], 9.0);
        assert_eq!(out[8], 4.0 + 25.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 6, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..60).map(|v| (v as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|v| (v as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; 60];
        col2im(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
