//! 2-D convolution over NHWC batches.
//!
//! Convention: cross-correlation (filters are not flipped),
//! `out[y][x][f] = bias[f] + sum_{dy,dx,c} in[y+dy-pad][x+dx-pad][c] * w[dy][dx][c][f]`,
//! with zero padding of `pad` cells on every side and stride 1. Filters are
//! laid out `kh x kw x C x F`, so their buffer is already the `(kh*kw*C) x F`
//! matrix used by the im2col product.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub filters: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], filters: &[usize], padding: usize) -> Result<Self> {
        let (batch, height, width, channels) = match *input {
            [n, h, w, c] => (n, h, w, c),
            _ => return Err(Error::shape("conv2d input (NHWC)", input, filters)),
        };
        let (kernel_h, kernel_w, fc, count) = match *filters {
            [kh, kw, c, f] => (kh, kw, c, f),
            _ => return Err(Error::shape("conv2d filters (kh,kw,C,F)", input, filters)),
        };
        if fc != channels {
            return Err(Error::shape("conv2d channels", input, filters));
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if kernel_h > ph || kernel_w > pw {
            return Err(Error::shape("conv2d filter larger than input", input, filters));
        }
        Ok(Self {
            batch,
            height,
            width,
            channels,
            kernel_h,
            kernel_w,
            filters: count,
            padding,
            out_h: ph - kernel_h + 1,
            out_w: pw - kernel_w + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.channels
    }

    pub fn out_rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.filters]
    }
}

/// Source pixel for output cell `(oy, ox)` and kernel tap `(ky, kx)`, or
/// `None` when it falls in the zero padding.
#[inline]
fn source(g: &ConvGeometry, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
    let y = (oy + ky).checked_sub(g.padding)?;
    let x = (ox + kx).checked_sub(g.padding)?;
    (y < g.height && x < g.width).then_some((y, x))
}

fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch_len();
    let c = g.channels;
    let mut cols = vec![T::zero(); g.out_rows() * patch];
    for n in 0..g.batch {
        let image = &input[n * g.height * g.width * c..(n + 1) * g.height * g.width * c];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        if let Some((y, x)) = source(g, oy, ox, ky, kx) {
                            let dst = row + (ky * g.kernel_w + kx) * c;
                            let src = (y * g.width + x) * c;
                            cols[dst..dst + c].copy_from_slice(&image[src..src + c]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch_len();
    let c = g.channels;
    let mut out = vec![T::zero(); g.batch * g.height * g.width * c];
    for n in 0..g.batch {
        let base = n * g.height * g.width * c;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((n * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        if let Some((y, x)) = source(g, oy, ox, ky, kx) {
                            let src = row + (ky * g.kernel_w + kx) * c;
                            let dst = base + (y * g.width + x) * c;
                            out[dst..dst + c]
                                .iter_mut()
                                .zip(&dcols[src..src + c])
                                .for_each(|(o, &d)| *o += d);
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, g: &ConvGeometry) -> Result<()> {
    if bias.len() != g.filters {
        return Err(Error::shape("conv2d bias", bias.shape(), &[g.filters]));
    }
    Ok(())
}

/// Batched forward pass. Returns the output together with the im2col
/// buffer needed by [`conv2d_backward`].
pub fn conv2d_forward_batch<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<(Tensor<T>, Vec<T>, ConvGeometry)> {
    let g = ConvGeometry::new(input.shape(), filters.shape(), padding)?;
    check_bias(bias, &g)?;
    let cols = im2col(input.data(), &g);
    let rows = g.out_rows();
    let mut out = Vec::with_capacity(rows * g.filters);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    T::gemm(
        T::one(),
        MatRef::row_major(&cols, rows, g.patch_len()),
        MatRef::row_major(filters.data(), g.patch_len(), g.filters),
        T::one(),
        &mut out,
    );
    Ok((Tensor::new(g.output_shape().to_vec(), out)?, cols, g))
}

/// Single-image forward pass on an `H x W x C` tensor.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::shape("conv2d input (HWC)", input.shape(), filters.shape()));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batched = input.clone().reshape(&shape)?;
    let (out, _, g) = conv2d_forward_batch(&batched, filters, bias, padding)?;
    out.reshape(&[g.out_h, g.out_w, g.filters])
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub filters: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    cols: &[T],
    g: &ConvGeometry,
    filters: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    if grad_out.shape() != g.output_shape() {
        return Err(Error::shape("conv2d backward", grad_out.shape(), &g.output_shape()));
    }
    let (rows, patch, f) = (g.out_rows(), g.patch_len(), g.filters);
    let dout = grad_out.data();

    let mut dw = vec![T::zero(); patch * f];
    T::gemm(
        T::one(),
        MatRef::transposed(cols, rows, patch),
        MatRef::row_major(dout, rows, f),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); f];
    for row in dout.chunks_exact(f) {
        db.iter_mut().zip(row).for_each(|(b, &d)| *b += d);
    }

    let input = if need_input_grad {
        let mut dcols = vec![T::zero(); rows * patch];
        T::gemm(
            T::one(),
            MatRef::row_major(dout, rows, f),
            MatRef::transposed(filters.data(), patch, f),
            T::zero(),
            &mut dcols,
        );
        let dx = col2im(&dcols, g);
        Some(Tensor::new(vec![g.batch, g.height, g.width, g.channels], dx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        filters: Tensor::new(filters.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![f], db)?,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct nested-loop cross-correlation.
    fn oracle(input: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (h, wd, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (kh, kw, f) = (w.shape()[0], w.shape()[1], w.shape()[3]);
        let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
        let mut out = Tensor::zeros(&[oh, ow, f]);
        for oy in 0..oh {
            for ox in 0..ow {
                for fi in 0..f {
                    let mut s = b.get(&[fi]);
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let (y, x) = (oy as isize + dy as isize - pad as isize, ox as isize + dx as isize - pad as isize);
                            if y < 0 || x < 0 || y >= h as isize || x >= wd as isize {
                                continue;
                            }
                            for ci in 0..c {
                                s += input.get(&[y as usize, x as usize, ci]) * w.get(&[dy, dx, ci, fi]);
                            }
                        }
                    }
                    out.set(&[oy, ox, fi], s);
                }
            }
        }
        out
    }

    #[test]
    fn ones_filter_sums_window() {
        let x = Tensor::<f64>::filled(&[3, 3, 1], 1.0);
        let w = Tensor::<f64>::filled(&[2, 2, 1, 1], 1.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let out = conv2d_forward(&x, &w, &b, 0).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn zero_filters_give_bias() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::random_normal(&[5, 6, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::zeros(&[3, 3, 3, 2]);
        let b = Tensor::<f64>::new(vec![2], vec![0.25, -1.5]).unwrap();
        let out = conv2d_forward(&x, &w, &b, 0).unwrap();
        for cell in out.data().chunks(2) {
            assert_eq!(cell, &[0.25, -1.5]);
        }
    }

    #[test]
    fn random_valid_matches_oracle() {
        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::random_normal(&[8, 8, 2], 1.0, &mut rng);
        let w = Tensor::<f64>::random_normal(&[3, 3, 2, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::random_normal(&[4], 1.0, &mut rng);
        let got = conv2d_forward(&x, &w, &b, 0).unwrap();
        let want = oracle(&x, &w, &b, 0);
        assert_eq!(got.shape(), &[6, 6, 4]);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn random_padded_matches_oracle() {
        let mut rng = Rng::new(9);
        let x = Tensor::<f64>::random_normal(&[5, 7, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::random_normal(&[3, 3, 3, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::random_normal(&[2], 1.0, &mut rng);
        let got = conv2d_forward(&x, &w, &b, 1).unwrap();
        assert_eq!(got.shape(), &[5, 7, 2]);
        assert!(got.max_abs_diff(&oracle(&x, &w, &b, 1)).unwrap() < 1e-12);
    }

    #[test]
    fn filter_larger_than_input_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 2, 1]);
        let w = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 0).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn batch_items_are_independent() {
        let mut rng = Rng::new(10);
        let a = Tensor::<f64>::random_normal(&[6, 6, 2], 1.0, &mut rng);
        let b = Tensor::<f64>::random_normal(&[6, 6, 2], 1.0, &mut rng);
        let w = Tensor::<f64>::random_normal(&[3, 3, 2, 3], 1.0, &mut rng);
        let bias = Tensor::<f64>::random_normal(&[3], 1.0, &mut rng);
        let batch = Tensor::stack(&[&a, &b]).unwrap();
        let (out, _, _) = conv2d_forward_batch(&batch, &w, &bias, 1).unwrap();
        let second = conv2d_forward(&b, &w, &bias, 1).unwrap();
        assert_eq!(out.slice_outer(1, 2).into_data(), second.into_data());
    }
}
