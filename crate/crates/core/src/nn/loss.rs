use serde::{Deserialize, Serialize};

use super::forward::sigmoid;
use super::spec::LayerSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Hinge on the pre-sigmoid activation with targets recoded to ±1;
    /// multi-class (Weston–Watkins) hinge for softmax heads.
    #[default]
    Hinge,
    CrossEntropy,
}

/// `max(0, 1 - t*a)` with `t = 2*target - 1`. The subgradient at the hinge
/// point is taken as 0.
pub fn hinge_loss<T: Scalar>(activation: T, target: u8) -> (T, T) {
    let t = if target == 1 { T::one() } else { -T::one() };
    let margin = T::one() - t * activation;
    if margin > T::zero() {
        (margin, -t)
    } else {
        (T::zero(), T::zero())
    }
}

/// Logistic loss on the pre-sigmoid activation.
pub fn sigmoid_cross_entropy<T: Scalar>(activation: T, target: u8) -> (T, T) {
    let y = if target == 1 { T::one() } else { T::zero() };
    // log(1 + e^a) - y*a, computed stably
    let a = activation;
    let softplus = a.max(T::zero()) + (-(a.abs())).exp().ln_1p();
    (softplus - y * a, sigmoid(a) - y)
}

fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize, grad: &mut [T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&v| (v - max).exp()).sum();
    let log_total = total.ln() + max;
    for (k, (g, &v)) in grad.iter_mut().zip(logits).enumerate() {
        *g = (v - log_total).exp() - if k == label { T::one() } else { T::zero() };
    }
    log_total - logits[label]
}

fn multiclass_hinge<T: Scalar>(logits: &[T], label: usize, grad: &mut [T]) -> T {
    let mut loss = T::zero();
    grad.iter_mut().for_each(|g| *g = T::zero());
    for k in 0..logits.len() {
        if k == label {
            continue;
        }
        let m = T::one() + logits[k] - logits[label];
        if m > T::zero() {
            loss += m;
            grad[k] += T::one();
            grad[label] -= T::one();
        }
    }
    loss
}

/// Mean loss over a batch and its gradient with respect to the logits.
/// `targets` are class indices for softmax heads and 0/1 for sigmoid heads.
pub fn batch_loss<T: Scalar>(
    head: &LayerSpec,
    kind: LossKind,
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(Error::shape("loss targets", logits.shape(), &[targets.len()]));
    }
    let scale = T::one() / T::from_usize_lossy(n);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    match head {
        LayerSpec::SigmoidOutput => {
            for (i, (&a, &t)) in logits.data().iter().zip(targets).enumerate() {
                if t > 1 {
                    return Err(Error::Data(format!("binary target {t} at row {i}")));
                }
                let (l, g) = match kind {
                    LossKind::Hinge => hinge_loss(a, t as u8),
                    LossKind::CrossEntropy => sigmoid_cross_entropy(a, t as u8),
                };
                total += l;
                grad.data_mut()[i] = g * scale;
            }
        }
        LayerSpec::SoftmaxOutput => {
            let g = grad.data_mut();
            for (i, (row, &t)) in logits.data().chunks_exact(k).zip(targets).enumerate() {
                if t >= k {
                    return Err(Error::Data(format!("class {t} at row {i} outside {k} outputs")));
                }
                let gi = &mut g[i * k..(i + 1) * k];
                total += match kind {
                    LossKind::Hinge => multiclass_hinge(row, t, gi),
                    LossKind::CrossEntropy => softmax_cross_entropy(row, t, gi),
                };
                gi.iter_mut().for_each(|v| *v *= scale);
            }
        }
        other => return Err(Error::Config(format!("{} is not an output head", other.kind()))),
    }
    Ok((total * scale, grad))
}

/// Predicted classes: argmax for softmax heads, `q > 0.5` for sigmoid heads.
pub fn predictions<T: Scalar>(head: &LayerSpec, output: &Tensor<T>) -> Vec<usize> {
    let k = output.shape()[1];
    match head {
        LayerSpec::SigmoidOutput => output.data().iter().map(|&q| usize::from(q > T::lit(0.5))).collect(),
        _ => output
            .data()
            .chunks_exact(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_loss(5.0, 1), (0.0, 0.0));
        assert_eq!(hinge_loss(0.0, 1), (1.0, -1.0));
        assert_eq!(hinge_loss(-0.5, 0), (0.5, 1.0));
        // hinge point: margin exactly zero
        assert_eq!(hinge_loss(1.0, 1), (0.0, 0.0));
        assert_eq!(hinge_loss(-1.0, 0), (0.0, 0.0));
    }

    #[test]
    fn logistic_loss_matches_definition() {
        for &a in &[-30.0, -2.0, 0.0, 0.7, 25.0] {
            for t in [0u8, 1] {
                let (l, g) = sigmoid_cross_entropy(a, t);
                let q = 1.0 / (1.0 + f64::exp(-a));
                let want = (1.0 + f64::exp(a)).ln() - t as f64 * a;
                assert!((l - want).abs() < 1e-9 * (1.0 + want.abs()), "{a} {t}");
                assert!((g - (q - t as f64)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_gradient_by_finite_differences() {
        let logits = Tensor::<f64>::new(vec![1, 3], vec![0.2, -1.0, 0.5]).unwrap();
        let (_, grad) = batch_loss(&LayerSpec::SoftmaxOutput, LossKind::CrossEntropy, &logits, &[1]).unwrap();
        for j in 0..3 {
            let mut up = logits.clone();
            up.data_mut()[j] += 1e-6;
            let mut down = logits.clone();
            down.data_mut()[j] -= 1e-6;
            let lu = batch_loss(&LayerSpec::SoftmaxOutput, LossKind::CrossEntropy, &up, &[1]).unwrap().0;
            let ld = batch_loss(&LayerSpec::SoftmaxOutput, LossKind::CrossEntropy, &down, &[1]).unwrap().0;
            assert!(((lu - ld) / 2e-6 - grad.data()[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn multiclass_hinge_zero_when_margin_met() {
        let logits = Tensor::<f64>::new(vec![1, 3], vec![3.0, 0.5, 1.9]).unwrap();
        let (l, g) = batch_loss(&LayerSpec::SoftmaxOutput, LossKind::Hinge, &logits, &[0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_mean_scaling() {
        let logits = Tensor::<f64>::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let (l, g) = batch_loss(&LayerSpec::SigmoidOutput, LossKind::Hinge, &logits, &[1, 0]).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn argmax_and_threshold_predictions() {
        let p = Tensor::<f64>::new(vec![2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.2, 0.3]).unwrap();
        assert_eq!(predictions(&LayerSpec::SoftmaxOutput, &p), vec![1, 0]);
        let q = Tensor::<f64>::new(vec![3, 1], vec![0.2, 0.5, 0.51]).unwrap();
        assert_eq!(predictions(&LayerSpec::SigmoidOutput, &q), vec![0, 0, 1]);
    }
}
