//! Central finite-difference check of [`backward`] against the loss.

use super::forward::{backward, forward, Mode};
use super::loss::{batch_loss, LossKind};
use super::params::NetworkParams;
use super::spec::NetworkSpec;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gradients smaller than this in magnitude are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Layer index and flat position (weights first, then bias) of the worst component.
    pub worst: (usize, usize),
    pub components: usize,
}

fn loss(spec: &NetworkSpec, params: &NetworkParams<f64>, input: &Tensor<f64>, targets: &[usize], kind: LossKind, seed: u64) -> Result<f64> {
    let (out, _) = forward(spec, params, input, Mode::Train, &mut Rng::new(seed))?;
    Ok(batch_loss(spec.output_layer(), kind, &out.logits, targets)?.0)
}

/// Writes `value` at one flat parameter position and returns the previous value.
fn set(p: &mut NetworkParams<f64>, fc: bool, layer: usize, pos: usize, value: f64) -> f64 {
    let lp = if fc { p.fc.get_mut(layer) } else { p.conv.get_mut(layer) }.expect("same layout");
    let nw = lp.weight.len();
    let slot = if pos < nw { &mut lp.weight.data_mut()[pos] } else { &mut lp.bias.data_mut()[pos - nw] };
    std::mem::replace(slot, value)
}

/// Compares every analytic gradient component with `(L(p+h) - L(p-h)) / 2h`.
/// Dropout masks are replayed from `seed` so every evaluation sees the same
/// network. The error is `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn gradient_check(
    spec: &NetworkSpec,
    params: &NetworkParams<f64>,
    input: &Tensor<f64>,
    targets: &[usize],
    kind: LossKind,
    h: f64,
    seed: u64,
) -> Result<GradCheck> {
    let (out, cache) = forward(spec, params, input, Mode::Train, &mut Rng::new(seed))?;
    let (_, dlogits) = batch_loss(spec.output_layer(), kind, &out.logits, targets)?;
    let grads = backward(spec, params, &cache, &dlogits)?;

    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), components: 0 };
    let mut probe = params.clone();
    let parts = [(&grads.conv, false), (&grads.fc, true)];
    for (store, is_fc) in parts {
        for (layer, g) in store.iter() {
            let analytic: Vec<f64> = g.weight.data().iter().chain(g.bias.data()).copied().collect();
            for (pos, &a) in analytic.iter().enumerate() {
                let orig = set(&mut probe, is_fc, layer, pos, f64::NAN);
                set(&mut probe, is_fc, layer, pos, orig + h);
                let up = loss(spec, &probe, input, targets, kind, seed)?;
                set(&mut probe, is_fc, layer, pos, orig - h);
                let down = loss(spec, &probe, input, targets, kind, seed)?;
                set(&mut probe, is_fc, layer, pos, orig);
                let numeric = (up - down) / (2.0 * h);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = (layer, pos);
                }
                report.components += 1;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec as L;

    fn check(spec: NetworkSpec, batch: usize, kind: LossKind, seed: u64) {
        let mut rng = Rng::new(seed);
        let params = NetworkParams::<f64>::init(&spec, &mut rng).unwrap();
        assert!(params.param_count() < 1000);
        let mut shape = vec![batch];
        shape.extend(&spec.input_shape);
        let x = Tensor::random_uniform(&shape, -1.0, 1.0, &mut rng);
        let k = spec.output_units();
        let targets: Vec<usize> = (0..batch).map(|i| if k == 1 { i % 2 } else { i % k }).collect();
        let r = gradient_check(&spec, &params, &x, &targets, kind, 1e-5, seed).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.components, params.param_count());
    }

    fn conv_softmax() -> NetworkSpec {
        let layers = vec![
            L::Conv { kernel: [3, 3], filters: 2, padding: 1 },
            L::Relu,
            L::MaxPool { window: [2, 2] },
            L::Dropout { rate: 0.3 },
            L::Flatten,
            L::FullyConnected { units: 8 },
            L::Relu,
            L::Dropout { rate: 0.5 },
            L::FullyConnected { units: 3 },
            L::SoftmaxOutput,
        ];
        NetworkSpec::new(vec![6, 6, 1], layers, 5).unwrap()
    }

    fn stacked_conv_sigmoid() -> NetworkSpec {
        let layers = vec![
            L::Conv { kernel: [2, 2], filters: 3, padding: 0 },
            L::Relu,
            L::Conv { kernel: [3, 3], filters: 2, padding: 1 },
            L::MaxPool { window: [2, 2] },
            L::Flatten,
            L::FullyConnected { units: 1 },
            L::SigmoidOutput,
        ];
        NetworkSpec::new(vec![5, 5, 2], layers, 5).unwrap()
    }

    #[test]
    fn conv_pool_dropout_softmax_cross_entropy() {
        check(conv_softmax(), 4, LossKind::CrossEntropy, 1);
    }

    #[test]
    fn conv_pool_dropout_softmax_hinge() {
        check(conv_softmax(), 4, LossKind::Hinge, 2);
    }

    #[test]
    fn stacked_conv_sigmoid_both_losses() {
        check(stacked_conv_sigmoid(), 3, LossKind::CrossEntropy, 3);
        check(stacked_conv_sigmoid(), 3, LossKind::Hinge, 4);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let spec = stacked_conv_sigmoid();
        let params = NetworkParams::<f64>::init(&spec, &mut Rng::new(5)).unwrap();
        let x = Tensor::random_uniform(&[2, 5, 5, 2], -1.0, 1.0, &mut Rng::new(6));
        let good = gradient_check(&spec, &params, &x, &[0, 1], LossKind::CrossEntropy, 1e-5, 0).unwrap();
        let skewed = gradient_check(&spec, &params, &x, &[0, 1], LossKind::CrossEntropy, 1e-1, 0).unwrap();
        assert!(good.max_rel_error < skewed.max_rel_error);
    }
}
