use std::collections::BTreeMap;

use super::spec::{infer_shapes, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Parameter tensors of one network part, keyed by global layer index.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<usize, LayerParams<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, layer: usize, params: LayerParams<T>) {
        self.entries.insert(layer, params);
    }

    pub fn get(&self, layer: usize) -> Option<&LayerParams<T>> {
        self.entries.get(&layer)
    }

    pub fn get_mut(&mut self, layer: usize) -> Option<&mut LayerParams<T>> {
        self.entries.get_mut(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LayerParams<T>)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut LayerParams<T>)> {
        self.entries.iter_mut().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(&k, p)| {
                    (k, LayerParams { weight: Tensor::zeros(p.weight.shape()), bias: Tensor::zeros(p.bias.shape()) })
                })
                .collect(),
        }
    }

    /// `self += alpha * other`; both stores must have identical layout.
    pub fn axpy(&mut self, alpha: T, other: &ParamStore<T>) -> Result<()> {
        self.check_layout(other)?;
        for (k, p) in self.entries.iter_mut() {
            let o = &other.entries[k];
            p.weight.axpy(alpha, &o.weight)?;
            p.bias.axpy(alpha, &o.bias)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for p in self.entries.values_mut() {
            p.weight.scale(alpha);
            p.bias.scale(alpha);
        }
    }

    pub fn check_layout(&self, other: &ParamStore<T>) -> Result<()> {
        let keys: Vec<_> = self.entries.keys().collect();
        let other_keys: Vec<_> = other.entries.keys().collect();
        if keys != other_keys {
            return Err(Error::Data(format!("parameter layers {keys:?} vs {other_keys:?}")));
        }
        for (k, p) in &self.entries {
            let o = &other.entries[k];
            if p.weight.shape() != o.weight.shape() || p.bias.shape() != o.bias.shape() {
                return Err(Error::shape("parameter layout", p.weight.shape(), o.weight.shape()));
            }
        }
        Ok(())
    }

    /// All values in key order (weight then bias), for checksums and
    /// finite-difference probes.
    pub fn flat_values(&self) -> Vec<T> {
        self.entries
            .values()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()).copied())
            .collect()
    }

    pub fn max_abs(&self) -> T {
        self.flat_values().into_iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.weight.is_finite() && p.bias.is_finite())
    }
}

/// Parameters of a network split into its convolutional part (`conv`) and
/// fully connected part (`fc`).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetworkParams<T> {
    pub conv: ParamStore<T>,
    pub fc: ParamStore<T>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        let conv = init_part(spec.conv_layers(), 0, &spec.input_shape, rng)?;
        let conv_out = spec.conv_output_shape()?;
        let fc = init_part(spec.fc_layers(), spec.split, &conv_out, rng)?;
        Ok(Self { conv, fc })
    }

    pub fn zeros_like(&self) -> Self {
        Self { conv: self.conv.zeros_like(), fc: self.fc.zeros_like() }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.fc.param_count()
    }

    /// Checks that every parameterized layer of `spec` has one entry of the
    /// right shape and nothing else is present.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        check_part(&self.conv, spec.conv_layers(), 0, &spec.input_shape)?;
        check_part(&self.fc, spec.fc_layers(), spec.split, &spec.conv_output_shape()?)
    }

    pub fn is_finite(&self) -> bool {
        self.conv.is_finite() && self.fc.is_finite()
    }
}

/// Weight and bias shapes for a parameterized layer.
pub fn param_shapes(layer: &LayerSpec, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
    match layer {
        LayerSpec::Conv { kernel: [kh, kw], filters, .. } => {
            Some((vec![*kh, *kw, input[2], *filters], vec![*filters]))
        }
        LayerSpec::FullyConnected { units } => Some((vec![input[0], *units], vec![*units])),
        _ => None,
    }
}

/// Initializes a part: He-normal (`std = sqrt(2 / fan_in)`) for hidden layers,
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for the layer feeding an output head,
/// zero biases.
pub fn init_part<T: Scalar>(
    layers: &[LayerSpec],
    offset: usize,
    input: &[usize],
    rng: &mut Rng,
) -> Result<ParamStore<T>> {
    let shapes = infer_shapes(layers, offset, input)?;
    let mut store = ParamStore::new();
    for (i, layer) in layers.iter().enumerate() {
        let layer_in = if i == 0 { input } else { &shapes[i - 1] };
        let Some((w_shape, b_shape)) = param_shapes(layer, layer_in) else { continue };
        let fan_in: usize = w_shape[..w_shape.len() - 1].iter().product();
        let feeds_output = layers[i + 1..]
            .iter()
            .find(|l| l.has_params() || l.is_output())
            .is_some_and(|l| l.is_output());
        let weight = if feeds_output {
            let s = 1.0 / (fan_in as f64).sqrt();
            Tensor::random_uniform(&w_shape, -s, s, rng)
        } else {
            Tensor::random_normal(&w_shape, (2.0 / fan_in as f64).sqrt(), rng)
        };
        store.insert(offset + i, LayerParams { weight, bias: Tensor::zeros(&b_shape) });
    }
    Ok(store)
}

pub fn check_part<T: Scalar>(
    store: &ParamStore<T>,
    layers: &[LayerSpec],
    offset: usize,
    input: &[usize],
) -> Result<()> {
    let shapes = infer_shapes(layers, offset, input)?;
    let mut expected = 0;
    for (i, layer) in layers.iter().enumerate() {
        let layer_in = if i == 0 { input } else { &shapes[i - 1] };
        let Some((w_shape, b_shape)) = param_shapes(layer, layer_in) else { continue };
        expected += 1;
        let index = offset + i;
        let p = store.get(index).ok_or_else(|| Error::Layer {
            layer: index,
            kind: layer.kind(),
            detail: "missing parameters".into(),
        })?;
        if p.weight.shape() != w_shape.as_slice() || p.bias.shape() != b_shape.as_slice() {
            return Err(Error::Layer {
                layer: index,
                kind: layer.kind(),
                detail: format!(
                    "parameter shapes {:?}/{:?}, expected {w_shape:?}/{b_shape:?}",
                    p.weight.shape(),
                    p.bias.shape()
                ),
            });
        }
    }
    if store.len() != expected {
        return Err(Error::Data(format!(
            "parameter store has {} entries, spec part needs {expected}",
            store.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::spec::nist_classifier;
    use super::*;

    #[test]
    fn init_matches_spec_and_is_seeded() {
        let spec = nist_classifier(5).unwrap();
        let a = NetworkParams::<f64>::init(&spec, &mut Rng::new(1)).unwrap();
        let b = NetworkParams::<f64>::init(&spec, &mut Rng::new(1)).unwrap();
        a.check_against(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.conv.len(), 3);
        assert_eq!(a.fc.len(), 2);
        assert_eq!(a.fc.get(spec.split).unwrap().weight.shape(), &[2048, 800]);
    }

    #[test]
    fn output_feeding_layer_is_small_uniform() {
        let spec = nist_classifier(5).unwrap();
        let p = NetworkParams::<f64>::init(&spec, &mut Rng::new(2)).unwrap();
        let last = p.fc.get(spec.layers.len() - 2).unwrap();
        let bound = 1.0 / (800f64).sqrt();
        assert!(last.weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn layout_check_catches_mismatch() {
        let spec = nist_classifier(5).unwrap();
        let other = nist_classifier(4).unwrap();
        let p = NetworkParams::<f64>::init(&other, &mut Rng::new(3)).unwrap();
        assert!(p.check_against(&spec).is_err());
    }
}
