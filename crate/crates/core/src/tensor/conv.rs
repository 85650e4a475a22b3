//! 2-D convolution (cross-correlation) and its transpose, lowered to GEMM via im2col.

use super::ops::permute_tensor;
use super::{Tensor, Var};
use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Layout, Scalar};

/// Output extent of a convolution; fails when the window does not tile the padded input.
pub fn conv2d_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(shape_err!("conv2d: stride and kernel must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return Err(shape_err!(
            "conv2d: ({input} + 2·{pad} - {kernel}) / {stride} + 1 is not a positive integer"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv_transpose2d_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return Err(shape_err!("conv_transpose2d: extents, stride and kernel must be positive"));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return Err(shape_err!("conv_transpose2d: padding {pad} consumes the whole output"));
    }
    Ok(full - 2 * pad)
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(col_index, image_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let plane = self.out_h * self.out_w;
        let ncols = self.cols();
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for b in 0..self.batch {
                        let img = (b * self.channels + c) * self.height * self.width;
                        for oy in 0..self.out_h {
                            let iy = (oy * s + ki) as isize - p as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let base_col = row * ncols + b * plane + oy * self.out_w;
                            let base_img = img + iy as usize * self.width;
                            for ox in 0..self.out_w {
                                let ix = (ox * s + kj) as isize - p as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                f(base_col + ox, base_img + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut cols = vec![S::zero(); self.rows() * self.cols()];
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
        cols
    }

    fn col2im<S: Scalar>(&self, cols: &[S]) -> Vec<S> {
        let mut x = vec![S::zero(); self.batch * self.channels * self.height * self.width];
        self.for_each_tap(|ci, xi| x[xi] += cols[ci]);
        x
    }
}

/// `[C, B·plane]` channel-major data to `[B, C, plane]`.
fn channel_major_to_batch<S: Scalar>(data: Vec<S>, channels: usize, batch: usize, h: usize, w: usize) -> Tensor<S> {
    let t = Tensor::new(&[channels, batch, h, w], data).expect("channel-major");
    permute_tensor(&t, &[1, 0, 2, 3])
}

fn batch_to_channel_major<S: Scalar>(t: &Tensor<S>) -> Vec<S> {
    permute_tensor(t, &[1, 0, 2, 3]).into_data()
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(shape_err!("{what} must be 4-D, got {shape:?}")),
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    /// Cross-correlation of `x[B, C, H, W]` with `w[O, C, k, k]`.
    pub fn conv2d(self, w: Var<'g, S>, stride: usize, pad: usize) -> Result<Var<'g, S>> {
        let (x, wt) = (self.value(), w.value());
        let [batch, channels, height, width] = dims4(x.shape(), "conv2d input")?;
        let [out_c, wc, kh, kw] = dims4(wt.shape(), "conv2d weight")?;
        if wc != channels || kh != kw {
            return Err(shape_err!(
                "conv2d: weight {:?} incompatible with input {:?}",
                wt.shape(),
                x.shape()
            ));
        }
        let geo = Geometry {
            batch,
            channels,
            height,
            width,
            kernel: kh,
            stride,
            pad,
            out_h: conv2d_out_extent(height, kh, stride, pad)?,
            out_w: conv2d_out_extent(width, kw, stride, pad)?,
        };
        let cols = geo.im2col(x.data());
        let (rows, ncols) = (geo.rows(), geo.cols());
        let mut out = vec![S::zero(); out_c * ncols];
        gemm(out_c, rows, ncols, S::one(), wt.data(), Layout::N, &cols, Layout::N, S::zero(), &mut out);
        let y = channel_major_to_batch(out, out_c, batch, geo.out_h, geo.out_w);
        let (xs, ws) = (x.shape().to_vec(), wt.shape().to_vec());
        Ok(self.graph.push(
            y,
            &[self, w],
            Box::new(move |g, need| {
                let gcm = batch_to_channel_major(g);
                let dx = need[0].then(|| {
                    let mut dcols = vec![S::zero(); rows * ncols];
                    gemm(rows, out_c, ncols, S::one(), wt.data(), Layout::T, &gcm, Layout::N, S::zero(), &mut dcols);
                    Tensor::new(&xs, geo.col2im(&dcols)).expect("conv dx")
                });
                let dw = need[1].then(|| {
                    let mut d = vec![S::zero(); out_c * rows];
                    gemm(out_c, ncols, rows, S::one(), &gcm, Layout::N, &cols, Layout::T, S::zero(), &mut d);
                    Tensor::new(&ws, d).expect("conv dw")
                });
                vec![dx, dw]
            }),
        ))
    }

    /// Transposed convolution of `x[B, Cin, H, W]` with `w[Cin, Cout, k, k]`;
    /// the adjoint of [`Var::conv2d`] with the same stride and padding.
    pub fn conv_transpose2d(self, w: Var<'g, S>, stride: usize, pad: usize) -> Result<Var<'g, S>> {
        let (x, wt) = (self.value(), w.value());
        let [batch, in_c, height, width] = dims4(x.shape(), "conv_transpose2d input")?;
        let [wc, out_c, kh, kw] = dims4(wt.shape(), "conv_transpose2d weight")?;
        if wc != in_c || kh != kw {
            return Err(shape_err!(
                "conv_transpose2d: weight {:?} incompatible with input {:?}",
                wt.shape(),
                x.shape()
            ));
        }
        let out_h = conv_transpose2d_out_extent(height, kh, stride, pad)?;
        let out_w = conv_transpose2d_out_extent(width, kw, stride, pad)?;
        // Geometry of the forward convolution this op is the adjoint of.
        let geo = Geometry {
            batch,
            channels: out_c,
            height: out_h,
            width: out_w,
            kernel: kh,
            stride,
            pad,
            out_h: height,
            out_w: width,
        };
        debug_assert_eq!(conv2d_out_extent(out_h, kh, stride, pad).ok(), Some(height));
        let (rows, ncols) = (geo.rows(), geo.cols());
        let xcm = batch_to_channel_major(&x);
        let mut cols = vec![S::zero(); rows * ncols];
        gemm(rows, in_c, ncols, S::one(), wt.data(), Layout::T, &xcm, Layout::N, S::zero(), &mut cols);
        let y = Tensor::new(&[batch, out_c, out_h, out_w], geo.col2im(&cols))?;
        let (xs, ws) = (x.shape().to_vec(), wt.shape().to_vec());
        Ok(self.graph.push(
            y,
            &[self, w],
            Box::new(move |g, need| {
                let dcols = geo.im2col(g.data());
                let dx = need[0].then(|| {
                    let mut d = vec![S::zero(); in_c * ncols];
                    gemm(in_c, rows, ncols, S::one(), wt.data(), Layout::N, &dcols, Layout::N, S::zero(), &mut d);
                    let t = channel_major_to_batch(d, in_c, batch, height, width);
                    debug_assert_eq!(t.shape(), &xs[..]);
                    t
                });
                let dw = need[1].then(|| {
                    let mut d = vec![S::zero(); in_c * rows];
                    gemm(in_c, ncols, rows, S::one(), &xcm, Layout::N, &dcols, Layout::T, S::zero(), &mut d);
                    Tensor::new(&ws, d).expect("convT dw")
                });
                vec![dx, dw]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn unit_kernel_scales() {
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.leaf(Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let y = x.conv2d(w, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        assert!(y.value().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn full_window_sums_input() {
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let x = g.leaf(Tensor::from_f64(&[1, 1, 3, 3], &data).unwrap());
        let w = g.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(w, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[45.0]);
    }

    #[test]
    fn non_integral_extent_fails() {
        assert!(conv2d_out_extent(8, 3, 2, 0).is_err());
        assert_eq!(conv2d_out_extent(8, 2, 2, 0).unwrap(), 4);
        assert_eq!(conv2d_out_extent(32, 4, 2, 1).unwrap(), 16);
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 8, 8]));
        let w = g.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(x.conv2d(w, 2, 0).is_err());
    }

    #[test]
    fn transpose_output_extent() {
        assert_eq!(conv_transpose2d_out_extent(4, 2, 2, 0).unwrap(), 8);
        assert_eq!(conv_transpose2d_out_extent(8, 4, 2, 1).unwrap(), 16);
        let g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2, 3, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[3, 5, 2, 2]));
        assert_eq!(x.conv_transpose2d(w, 2, 0).unwrap().shape(), vec![2, 5, 8, 8]);
    }
}
