//! Batched forward and backward passes.
//!
//! Activations flow as batches: `N x H x W x C` in the convolutional part and
//! `N x D` after flattening. Output layers are identities in the pass itself;
//! the pass returns the pre-output activations ("logits") and the head
//! function is applied separately, so losses and gradients are expressed with
//! respect to the logits.

use super::params::{LayerParams, NetworkParams, ParamStore};
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{MatRef, Scalar};
use crate::tensor::{
    conv2d_backward, conv2d_forward_batch, maxpool_backward, maxpool_forward, ConvGeometry, PoolIndices,
    Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active (inverted scaling).
    Train,
    /// Deterministic; the rng is never touched.
    Eval,
}

enum LayerCache<T> {
    Conv { cols: Vec<T>, geom: ConvGeometry },
    Relu { active: Vec<bool> },
    Pool { indices: PoolIndices },
    Flatten { shape: Vec<usize> },
    Dense { input: Tensor<T> },
    Dropout { mask: Option<Vec<T>> },
    Identity,
}

/// Activations recorded by [`forward_part`] for one part of a network.
pub struct PartCache<T> {
    layers: Vec<LayerCache<T>>,
    offset: usize,
    batch: usize,
}

impl<T> PartCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn params_for<'a, T: Scalar>(store: &'a ParamStore<T>, index: usize, layer: &LayerSpec) -> Result<&'a LayerParams<T>> {
    store.get(index).ok_or_else(|| Error::Layer {
        layer: index,
        kind: layer.kind(),
        detail: "no parameters stored for this layer".into(),
    })
}

fn sample_shape<T: Scalar>(t: &Tensor<T>) -> &[usize] {
    &t.shape()[1..]
}

/// Runs `layers` (whose first element has global index `offset`) on a batch.
/// The cache is only recorded when `record` is set.
pub fn forward_part<T: Scalar>(
    layers: &[LayerSpec],
    offset: usize,
    store: &ParamStore<T>,
    input: Tensor<T>,
    mode: Mode,
    rng: &mut Rng,
    record: bool,
) -> Result<(Tensor<T>, Option<PartCache<T>>)> {
    let batch = input.shape()[0];
    let mut caches = Vec::with_capacity(if record { layers.len() } else { 0 });
    let mut x = input;
    for (i, layer) in layers.iter().enumerate() {
        let index = offset + i;
        let out_sample = layer.output_shape(index, sample_shape(&x))?;
        let (y, cache) = match layer {
            LayerSpec::Conv { padding, .. } => {
                let p = params_for(store, index, layer)?;
                let (y, cols, geom) = conv2d_forward_batch(&x, &p.weight, &p.bias, *padding)
                    .map_err(|e| Error::Layer { layer: index, kind: layer.kind(), detail: e.to_string() })?;
                (y, record.then_some(LayerCache::Conv { cols, geom }))
            }
            LayerSpec::Relu => {
                let active: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
                let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
                (y, record.then_some(LayerCache::Relu { active }))
            }
            LayerSpec::MaxPool { window: [ph, pw] } => {
                let (y, indices) = maxpool_forward(&x, (*ph, *pw))?;
                (y, record.then_some(LayerCache::Pool { indices }))
            }
            LayerSpec::Flatten => {
                let shape = x.shape().to_vec();
                let y = x.reshape(&[batch, out_sample[0]])?;
                (y, record.then_some(LayerCache::Flatten { shape }))
            }
            LayerSpec::FullyConnected { units } => {
                let p = params_for(store, index, layer)?;
                let d = x.shape()[1];
                if p.weight.shape() != [d, *units] {
                    return Err(Error::Layer {
                        layer: index,
                        kind: layer.kind(),
                        detail: format!("weight {:?} does not accept input width {d}", p.weight.shape()),
                    });
                }
                let mut out = Vec::with_capacity(batch * units);
                for _ in 0..batch {
                    out.extend_from_slice(p.bias.data());
                }
                T::gemm(
                    T::one(),
                    MatRef::row_major(x.data(), batch, d),
                    MatRef::row_major(p.weight.data(), d, *units),
                    T::one(),
                    &mut out,
                );
                let y = Tensor::new(vec![batch, *units], out)?;
                (y, record.then_some(LayerCache::Dense { input: x }))
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Train && *rate > 0.0 {
                    let keep = T::lit(1.0 / (1.0 - rate));
                    let mask: Vec<T> =
                        (0..x.len()).map(|_| if rng.uniform() < *rate { T::zero() } else { keep }).collect();
                    let mut y = x;
                    y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
                    (y, record.then_some(LayerCache::Dropout { mask: Some(mask) }))
                } else {
                    (x, record.then_some(LayerCache::Dropout { mask: None }))
                }
            }
            LayerSpec::SigmoidOutput | LayerSpec::SoftmaxOutput => (x, record.then_some(LayerCache::Identity)),
        };
        if let Some(c) = cache {
            caches.push(c);
        }
        x = y;
    }
    let cache = record.then_some(PartCache { layers: caches, offset, batch });
    Ok((x, cache))
}

/// Backpropagates `grad` (same shape as the part's output) through a part.
/// Returns parameter gradients keyed like `store`, and the gradient with
/// respect to the part input when `need_input_grad` is set.
pub fn backward_part<T: Scalar>(
    layers: &[LayerSpec],
    store: &ParamStore<T>,
    cache: &PartCache<T>,
    grad: Tensor<T>,
    need_input_grad: bool,
) -> Result<(ParamStore<T>, Option<Tensor<T>>)> {
    if cache.layers.len() != layers.len() {
        return Err(Error::Data(format!(
            "stale cache: {} recorded layers for a {}-layer part",
            cache.layers.len(),
            layers.len()
        )));
    }
    if grad.shape()[0] != cache.batch {
        return Err(Error::shape("backward batch", grad.shape(), &[cache.batch]));
    }
    let mut grads = ParamStore::new();
    let mut g = grad;
    for (i, (layer, lc)) in layers.iter().zip(&cache.layers).enumerate().rev() {
        let index = cache.offset + i;
        let want_input = need_input_grad || i > 0;
        let mismatch = || Error::Layer { layer: index, kind: layer.kind(), detail: "cache does not match layer".into() };
        g = match (layer, lc) {
            (LayerSpec::Conv { .. }, LayerCache::Conv { cols, geom }) => {
                let p = params_for(store, index, layer)?;
                let cg = conv2d_backward(cols, geom, &p.weight, &g, want_input)?;
                grads.insert(index, LayerParams { weight: cg.filters, bias: cg.bias });
                match cg.input {
                    Some(dx) => dx,
                    None => break,
                }
            }
            (LayerSpec::Relu, LayerCache::Relu { active }) => {
                let mut dx = g;
                dx.data_mut().iter_mut().zip(active).for_each(|(v, &a)| {
                    if !a {
                        *v = T::zero();
                    }
                });
                dx
            }
            (LayerSpec::MaxPool { .. }, LayerCache::Pool { indices }) => maxpool_backward(indices, &g)?,
            (LayerSpec::Flatten, LayerCache::Flatten { shape }) => g.reshape(shape)?,
            (LayerSpec::FullyConnected { units }, LayerCache::Dense { input }) => {
                let p = params_for(store, index, layer)?;
                let (n, d) = (input.shape()[0], input.shape()[1]);
                let mut dw = vec![T::zero(); d * units];
                T::gemm(
                    T::one(),
                    MatRef::transposed(input.data(), n, d),
                    MatRef::row_major(g.data(), n, *units),
                    T::zero(),
                    &mut dw,
                );
                let mut db = vec![T::zero(); *units];
                for row in g.data().chunks_exact(*units) {
                    db.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
                }
                grads.insert(
                    index,
                    LayerParams { weight: Tensor::new(vec![d, *units], dw)?, bias: Tensor::new(vec![*units], db)? },
                );
                if !want_input {
                    break;
                }
                let mut dx = vec![T::zero(); n * d];
                T::gemm(
                    T::one(),
                    MatRef::row_major(g.data(), n, *units),
                    MatRef::transposed(p.weight.data(), d, *units),
                    T::zero(),
                    &mut dx,
                );
                Tensor::new(vec![n, d], dx)?
            }
            (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => {
                let mut dx = g;
                if let Some(mask) = mask {
                    dx.data_mut().iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
                }
                dx
            }
            (LayerSpec::SigmoidOutput | LayerSpec::SoftmaxOutput, LayerCache::Identity) => g,
            _ => return Err(mismatch()),
        };
    }
    let input_grad = need_input_grad.then_some(g);
    Ok((grads, input_grad))
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Applies the output head to a batch of logits.
pub fn apply_head<T: Scalar>(head: &LayerSpec, logits: &Tensor<T>) -> Tensor<T> {
    match head {
        LayerSpec::SigmoidOutput => logits.map(sigmoid),
        LayerSpec::SoftmaxOutput => {
            let k = logits.shape()[1];
            let mut out = logits.clone();
            for row in out.data_mut().chunks_exact_mut(k) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                row.iter_mut().for_each(|v| *v = (*v - max).exp());
                let total: T = row.iter().copied().sum();
                row.iter_mut().for_each(|v| *v /= total);
            }
            out
        }
        _ => logits.clone(),
    }
}

pub struct Forward<T> {
    /// Pre-output activations, `N x K`.
    pub logits: Tensor<T>,
    /// Head applied to the logits: probabilities, `N x K`.
    pub output: Tensor<T>,
}

pub struct ForwardCache<T> {
    fingerprint: u64,
    conv: PartCache<T>,
    fc: PartCache<T>,
}

fn batched_input<T: Scalar>(spec: &NetworkSpec, input: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = input.shape();
    let batched = match shape.len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(shape);
            input.clone().reshape(&s)?
        }
        4 => input.clone(),
        _ => return Err(Error::Layer { layer: 0, kind: "input", detail: format!("input rank {}", shape.len()) }),
    };
    if batched.shape()[1..] != spec.input_shape[..] {
        let kind = spec.layers.first().map_or("input", LayerSpec::kind);
        return Err(Error::Layer {
            layer: 0,
            kind,
            detail: format!("input shape {:?} does not match declared {:?}", shape, spec.input_shape),
        });
    }
    Ok(batched)
}

fn run<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &mut Rng,
    record: bool,
) -> Result<(Forward<T>, Option<ForwardCache<T>>)> {
    let x = batched_input(spec, input)?;
    let (features, conv) = forward_part(spec.conv_layers(), 0, &params.conv, x, mode, rng, record)?;
    let (logits, fc) = forward_part(spec.fc_layers(), spec.split, &params.fc, features, mode, rng, record)?;
    let output = apply_head(spec.output_layer(), &logits);
    let cache = match (conv, fc) {
        (Some(conv), Some(fc)) => Some(ForwardCache { fingerprint: spec.fingerprint(), conv, fc }),
        _ => None,
    };
    Ok((Forward { logits, output }, cache))
}

/// Forward pass over one `H x W x C` sample or an `N x H x W x C` batch,
/// recording the activations needed by [`backward`].
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Forward<T>, ForwardCache<T>)> {
    let (out, cache) = run(spec, params, input, mode, rng, true)?;
    Ok((out, cache.expect("recorded")))
}

/// Eval-mode forward pass without recording a cache.
pub fn infer<T: Scalar>(spec: &NetworkSpec, params: &NetworkParams<T>, input: &Tensor<T>) -> Result<Forward<T>> {
    let mut unused = Rng::new(0);
    Ok(run(spec, params, input, Mode::Eval, &mut unused, false)?.0)
}

/// Gradients of a scalar loss with respect to every parameter, given the loss
/// gradient with respect to the logits (`N x K`).
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    cache: &ForwardCache<T>,
    logits_grad: &Tensor<T>,
) -> Result<NetworkParams<T>> {
    if cache.fingerprint != spec.fingerprint() {
        return Err(Error::Data("stale cache: recorded for a different network spec".into()));
    }
    let expected = [cache.fc.batch, spec.output_units()];
    if logits_grad.shape() != expected {
        return Err(Error::shape("logits gradient", logits_grad.shape(), &expected));
    }
    let (fc, dfeatures) = backward_part(spec.fc_layers(), &params.fc, &cache.fc, logits_grad.clone(), true)?;
    let dfeatures = dfeatures.expect("requested");
    let (conv, _) = backward_part(spec.conv_layers(), &params.conv, &cache.conv, dfeatures, false)?;
    Ok(NetworkParams { conv, fc })
}

#[cfg(test)]
mod tests {
    use super::super::params::NetworkParams;
    use super::super::spec::{nist_classifier, LayerSpec, NetworkSpec};
    use super::*;

    fn tiny_sigmoid() -> NetworkSpec {
        NetworkSpec::new(
            vec![1, 1, 1],
            vec![LayerSpec::Flatten, LayerSpec::FullyConnected { units: 1 }, LayerSpec::SigmoidOutput],
            1,
        )
        .unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let spec = nist_classifier(5).unwrap();
        let mut rng = Rng::new(1);
        let params = NetworkParams::<f64>::init(&spec, &mut rng).unwrap();
        let x = Tensor::random_uniform(&[3, 32, 32, 1], 0.0, 1.0, &mut rng);
        let out = infer(&spec, &params, &x).unwrap();
        for row in out.output.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_sigmoid_gives_half() {
        let spec = tiny_sigmoid();
        let params = NetworkParams::<f64>::init(&spec, &mut Rng::new(0)).unwrap();
        let zeroed = params.zeros_like();
        let x = Tensor::filled(&[1, 1, 1], 3.0);
        let out = infer(&spec, &zeroed, &x).unwrap();
        assert_eq!(out.output.data(), &[0.5]);
    }

    #[test]
    fn scalar_linear_chain_rule() {
        let spec = tiny_sigmoid();
        let mut params = NetworkParams::<f64>::init(&spec, &mut Rng::new(0)).unwrap();
        params.fc.get_mut(1).unwrap().weight.data_mut()[0] = 0.3;
        let x = Tensor::filled(&[1, 1, 1], 2.0);
        let (_, cache) = forward(&spec, &params, &x, Mode::Train, &mut Rng::new(0)).unwrap();
        let g = backward(&spec, &params, &cache, &Tensor::filled(&[1, 1], 1.0)).unwrap();
        assert_eq!(g.fc.get(1).unwrap().weight.data(), &[2.0]);
        assert_eq!(g.fc.get(1).unwrap().bias.data(), &[1.0]);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let spec = nist_classifier(3).unwrap();
        let mut rng = Rng::new(4);
        let params = NetworkParams::<f64>::init(&spec, &mut rng).unwrap();
        let x = Tensor::random_uniform(&[2, 32, 32, 1], 0.0, 1.0, &mut rng);
        let (_, cache) = forward(&spec, &params, &x, Mode::Train, &mut rng).unwrap();
        let g = backward(&spec, &params, &cache, &Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(g.conv.max_abs(), 0.0);
        assert_eq!(g.fc.max_abs(), 0.0);
        g.check_against(&spec).unwrap();
    }

    #[test]
    fn input_shape_mismatch_names_layer() {
        let spec = nist_classifier(3).unwrap();
        let params = NetworkParams::<f64>::init(&spec, &mut Rng::new(0)).unwrap();
        let err = infer(&spec, &params, &Tensor::zeros(&[28, 28, 1])).err().unwrap().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = tiny_sigmoid();
        let other = NetworkSpec::new(
            vec![1, 1, 1],
            vec![
                LayerSpec::Flatten,
                LayerSpec::FullyConnected { units: 2 },
                LayerSpec::Relu,
                LayerSpec::FullyConnected { units: 1 },
                LayerSpec::SigmoidOutput,
            ],
            1,
        )
        .unwrap();
        let params = NetworkParams::<f64>::init(&spec, &mut Rng::new(0)).unwrap();
        let other_params = NetworkParams::<f64>::init(&other, &mut Rng::new(0)).unwrap();
        let x = Tensor::filled(&[1, 1, 1], 1.0);
        let (_, cache) = forward(&other, &other_params, &x, Mode::Train, &mut Rng::new(0)).unwrap();
        assert!(backward(&spec, &params, &cache, &Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn eval_ignores_rng() {
        let spec = nist_classifier(2).unwrap();
        let mut rng = Rng::new(6);
        let params = NetworkParams::<f64>::init(&spec, &mut rng).unwrap();
        let x = Tensor::random_uniform(&[32, 32, 1], 0.0, 1.0, &mut rng);
        let (a, _) = forward(&spec, &params, &x, Mode::Eval, &mut Rng::new(1)).unwrap();
        let (b, _) = forward(&spec, &params, &x, Mode::Eval, &mut Rng::new(2)).unwrap();
        assert_eq!(a.logits, b.logits);
    }
}
