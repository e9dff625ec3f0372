use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat input offsets of each pooled maximum, kept for the backward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Non-overlapping max pooling (stride == window) over `H x W x C` or
/// `N x H x W x C` tensors. Spatial sizes must be divisible by the window.
/// Ties resolve to the first maximum in row-major window order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    window: (usize, usize),
) -> Result<(Tensor<T>, PoolIndices)> {
    let (ph, pw) = window;
    let shape = input.shape();
    let (n, h, w, c) = match *shape {
        [h, w, c] => (1, h, w, c),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(Error::shape("maxpool input", shape, &[ph, pw])),
    };
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::Config(format!(
            "maxpool window {ph}x{pw} does not divide spatial size {h}x{w}"
        )));
    }
    let (oh, ow) = (h / ph, w / pw);
    let data = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let at = ((b * h + oy * ph + dy) * w + ox * pw + dx) * c + ch;
                            if best == usize::MAX || data[at] > data[best] {
                                best = at;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    let out_shape = if shape.len() == 3 { vec![oh, ow, c] } else { vec![n, oh, ow, c] };
    Ok((Tensor::new(out_shape, out)?, PoolIndices { input_shape: shape.to_vec(), argmax }))
}

pub fn maxpool_backward<T: Scalar>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::shape("maxpool backward", grad_out.shape(), &[indices.argmax.len()]));
    }
    let mut dx = Tensor::zeros(&indices.input_shape);
    let buf = dx.data_mut();
    for (&at, &g) in indices.argmax.iter().zip(grad_out.data()) {
        buf[at] += g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn two_by_two_picks_max() {
        let x = Tensor::<f64>::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, idx) = maxpool_forward(&x, (2, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);
    }

    #[test]
    fn constant_input_constant_output() {
        let x = Tensor::<f64>::filled(&[4, 6, 2], -0.75);
        let (out, _) = maxpool_forward(&x, (2, 3)).unwrap();
        assert!(out.data().iter().all(|&v| v == -0.75));
    }

    #[test]
    fn matches_brute_force_window_scan() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f64>::random_normal(&[6, 6, 1], 1.0, &mut rng);
        let (out, _) = maxpool_forward(&x, (3, 3)).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for y in oy * 3..oy * 3 + 3 {
                    for xx in ox * 3..ox * 3 + 3 {
                        m = m.max(x.get(&[y, xx, 0]));
                    }
                }
                assert_eq!(out.get(&[oy, ox, 0]), m);
            }
        }
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let x = Tensor::<f64>::zeros(&[5, 4, 1]);
        assert!(matches!(maxpool_forward(&x, (2, 2)), Err(Error::Config(_))));
    }

    #[test]
    fn backward_routes_to_argmax() {
        let x = Tensor::<f64>::new(vec![1, 2, 2, 1], vec![0.5, 3.0, -1.0, 2.0]).unwrap();
        let (_, idx) = maxpool_forward(&x, (2, 2)).unwrap();
        let g = Tensor::new(vec![1, 1, 1, 1], vec![7.0]).unwrap();
        let dx = maxpool_backward(&idx, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 7.0, 0.0, 0.0]);
    }
}
