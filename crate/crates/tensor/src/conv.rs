//! im2col convolution kernels.
//!
//! The three kernels form a closed family under differentiation: the
//! gradient of each one with respect to either operand is another member
//! of the family, which is what lets the graph differentiate through its
//! own backward pass.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::{Array, Scalar, Shape};

/// Stride and zero padding shared by a conv and its adjoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    /// Output extent of a forward convolution, if integral.
    pub fn out_extent(&self, op: &'static str, extent: usize, kernel: usize) -> Result<usize> {
        let padded = extent + 2 * self.pad;
        if self.stride == 0 || padded < kernel || (padded - kernel) % self.stride != 0 {
            return Err(TensorError::NonIntegralExtent {
                op,
                extent,
                pad: self.pad,
                kernel,
                stride: self.stride,
            });
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution: `(E − 1)·s − 2·p + K`.
    pub fn transposed_extent(&self, extent: usize, kernel: usize) -> Result<usize> {
        let full = (extent.max(1) - 1) * self.stride + kernel;
        if extent == 0 || full <= 2 * self.pad {
            return Err(TensorError::InvalidArgument(format!(
                "conv_transpose2d: extent {extent} with kernel {kernel} and pad {} is empty",
                self.pad
            )));
        }
        Ok(full - 2 * self.pad)
    }
}

struct Dims {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl Dims {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], d: &Dims, g: ConvGeometry, col: &mut [T]) {
    let cols = d.cols();
    for ci in 0..d.c_in {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (ci * d.k + ki) * d.k + kj;
                let out = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..d.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oh * d.wo..(oh + 1) * d.wo];
                    if ih < 0 || ih >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for (ow, v) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= d.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: &Dims, g: ConvGeometry, x: &mut [T]) {
    let cols = d.cols();
    for ci in 0..d.c_in {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (ci * d.k + ki) * d.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..d.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for ow in 0..d.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < d.w {
                            dst[iw as usize] = dst[iw as usize] + src[oh * d.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn check_square_kernel(op: &'static str, w: Shape) -> Result<usize> {
    if w[2] != w[3] || w[2] == 0 {
        return Err(TensorError::InvalidArgument(format!(
            "{op}: kernel must be square and non-empty, got {w:?}"
        )));
    }
    Ok(w[2])
}

/// `y = x ⋆ w` with `x: N×C_in×H×W`, `w: C_out×C_in×K×K`.
pub fn conv2d<T: Scalar>(x: &Array<T>, w: &Array<T>, g: ConvGeometry) -> Result<Array<T>> {
    let [n, c_in, h, wd] = x.shape();
    let ws = w.shape();
    let k = check_square_kernel("conv2d", ws)?;
    if ws[1] != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape(),
            rhs: ws,
        });
    }
    let c_out = ws[0];
    let d = Dims {
        c_in,
        h,
        w: wd,
        k,
        ho: g.out_extent("conv2d", h, k)?,
        wo: g.out_extent("conv2d", wd, k)?,
    };
    let mut y = Array::zeros([n, c_out, d.ho, d.wo]);
    let in_len = c_in * h * wd;
    let out_len = c_out * d.cols();
    if out_len == 0 {
        return Ok(y);
    }
    y.data_mut()
        .par_chunks_mut(out_len)
        .zip(x.data().par_chunks(in_len.max(1)))
        .for_each(|(yn, xn)| {
            let mut col = vec![T::zero(); d.rows() * d.cols()];
            im2col(xn, &d, g, &mut col);
            T::gemm(c_out, d.rows(), d.cols(), w.data(), false, &col, false, yn, false);
        });
    Ok(y)
}

/// Adjoint of [`conv2d`] with respect to its input: `y: N×C_out×H'×W'` and
/// the same `w: C_out×C_in×K×K` produce `N×C_in×H×W`.
pub fn conv_transpose2d<T: Scalar>(
    y: &Array<T>,
    w: &Array<T>,
    g: ConvGeometry,
) -> Result<Array<T>> {
    let [n, c_out, ho, wo] = y.shape();
    let ws = w.shape();
    let k = check_square_kernel("conv_transpose2d", ws)?;
    if ws[0] != c_out {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: y.shape(),
            rhs: ws,
        });
    }
    let c_in = ws[1];
    let d = Dims {
        c_in,
        h: g.transposed_extent(ho, k)?,
        w: g.transposed_extent(wo, k)?,
        k,
        ho,
        wo,
    };
    let mut x = Array::zeros([n, c_in, d.h, d.w]);
    let in_len = c_out * d.cols();
    let out_len = c_in * d.h * d.w;
    if out_len == 0 || in_len == 0 {
        return Ok(x);
    }
    x.data_mut()
        .par_chunks_mut(out_len)
        .zip(y.data().par_chunks(in_len))
        .for_each(|(xn, yn)| {
            let mut col = vec![T::zero(); d.rows() * d.cols()];
            T::gemm(d.rows(), c_out, d.cols(), w.data(), true, yn, false, &mut col, false);
            col2im(&col, &d, g, xn);
        });
    Ok(x)
}

/// Gradient of `⟨conv2d(x, w), gy⟩` with respect to `w`, for a `k×k` kernel.
pub fn conv2d_weight_grad<T: Scalar>(
    x: &Array<T>,
    gy: &Array<T>,
    k: usize,
    g: ConvGeometry,
) -> Result<Array<T>> {
    let [n, c_in, h, wd] = x.shape();
    let [gn, c_out, ho, wo] = gy.shape();
    let d = Dims {
        c_in,
        h,
        w: wd,
        k,
        ho: g.out_extent("conv2d_weight_grad", h, k)?,
        wo: g.out_extent("conv2d_weight_grad", wd, k)?,
    };
    if gn != n || d.ho != ho || d.wo != wo {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_weight_grad",
            lhs: x.shape(),
            rhs: gy.shape(),
        });
    }
    let wlen = c_out * d.rows();
    let in_len = c_in * h * wd;
    let out_len = c_out * d.cols();
    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut col = vec![T::zero(); d.rows() * d.cols()];
            im2col(&x.data()[i * in_len..(i + 1) * in_len], &d, g, &mut col);
            let mut dw = vec![T::zero(); wlen];
            T::gemm(
                c_out,
                d.cols(),
                d.rows(),
                &gy.data()[i * out_len..(i + 1) * out_len],
                false,
                &col,
                true,
                &mut dw,
                false,
            );
            dw
        })
        .collect();
    // Fixed summation order keeps the result independent of thread count.
    let mut dw = vec![T::zero(); wlen];
    for p in &partials {
        for (a, &b) in dw.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    Array::from_vec([c_out, c_in, k, k], dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_identity_kernel_sums_diagonal() {
        let x = Array::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Array::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &w, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.item(), 5.0);
    }

    #[test]
    fn non_integral_extent_is_rejected() {
        let x = Array::<f32>::zeros([1, 1, 5, 5]);
        let w = Array::<f32>::zeros([1, 1, 4, 4]);
        let err = conv2d(&x, &w, ConvGeometry::new(2, 1)).unwrap_err();
        assert!(matches!(err, TensorError::NonIntegralExtent { .. }));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Array::<f32>::zeros([1, 2, 4, 4]);
        let w = Array::<f32>::zeros([1, 3, 3, 3]);
        assert!(conv2d(&x, &w, ConvGeometry::new(1, 1)).is_err());
    }

    #[test]
    fn stride_two_halves_and_transpose_doubles() {
        let g = ConvGeometry::new(2, 1);
        let x = Array::<f32>::zeros([2, 3, 8, 16]);
        let w = Array::<f32>::zeros([5, 3, 4, 4]);
        let y = conv2d(&x, &w, g).unwrap();
        assert_eq!(y.shape(), [2, 5, 4, 8]);
        assert_eq!(conv_transpose2d(&y, &w, g).unwrap().shape(), [2, 3, 8, 16]);
    }

    #[test]
    fn matches_direct_summation() {
        let g = ConvGeometry::new(2, 1);
        let x = Array::<f64>::from_fn([2, 2, 5, 7], |i| ((i * 37) % 11) as f64 - 5.0);
        let w = Array::<f64>::from_fn([3, 2, 3, 3], |i| ((i * 13) % 7) as f64 * 0.25 - 0.5);
        let y = conv2d(&x, &w, g).unwrap();
        let [n, co, ho, wo] = y.shape();
        for b in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (i * 2 + ki) as isize - 1;
                                    let iw = (j * 2 + kj) as isize - 1;
                                    if ih >= 0 && ih < 5 && iw >= 0 && iw < 7 {
                                        acc += x.at(b, c, ih as usize, iw as usize)
                                            * w.at(o, c, ki, kj);
                                    }
                                }
                            }
                        }
                        assert!((acc - y.at(b, o, i, j)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
