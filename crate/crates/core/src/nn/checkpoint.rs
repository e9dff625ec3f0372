//! Checkpoint files.
//!
//! One file: a single-line JSON manifest terminated by `\n`, followed by a blob
//! of little-endian `f64` values. The manifest lists the spec, seed, and every
//! tensor with its byte offset and element count inside the blob, in
//! declaration order (conv part, then FC part, ascending layer index, weight
//! before bias).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{LayerParams, NetworkParams, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "desk-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    part: String,
    layer: usize,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    spec: serde_json::Value,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Parameters plus the spec (as JSON) they belong to. `kind` distinguishes
/// classifier and Siamese checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub spec: serde_json::Value,
    pub seed: u64,
    pub params: NetworkParams<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        for (part, store) in [("conv", &self.params.conv), ("fc", &self.params.fc)] {
            for (layer, p) in store.iter() {
                for (which, t) in [("weight", &p.weight), ("bias", &p.bias)] {
                    entries.push(TensorEntry {
                        name: format!("{part}.{layer}.{which}"),
                        part: part.into(),
                        layer,
                        shape: t.shape().to_vec(),
                        offset: blob.len(),
                        len: t.len(),
                    });
                    for v in t.data() {
                        blob.extend_from_slice(&v.as_f64().to_le_bytes());
                    }
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind.clone(),
            spec: self.spec.clone(),
            seed: self.seed,
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        out.extend(blob);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "missing manifest line"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::format(path, format!("manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
            ));
        }
        let blob = &bytes[newline + 1..];
        let mut conv = ParamStore::new();
        let mut fc = ParamStore::new();
        let mut pending: Option<(String, usize, Tensor<T>)> = None;
        for e in &manifest.tensors {
            let end = e.offset + e.len * 8;
            let raw = blob.get(e.offset..end).ok_or_else(|| Error::Truncated {
                path: path.display().to_string(),
                expected: newline + 1 + end,
                found: bytes.len(),
            })?;
            let data = raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::format(path, format!("{}: {err}", e.name)))?;
            match (e.name.rsplit('.').next(), pending.take()) {
                (Some("weight"), None) => pending = Some((e.part.clone(), e.layer, t)),
                (Some("bias"), Some((part, layer, weight))) if part == e.part && layer == e.layer => {
                    let store = match part.as_str() {
                        "conv" => &mut conv,
                        "fc" => &mut fc,
                        other => return Err(Error::format(path, format!("unknown part `{other}`"))),
                    };
                    store.insert(layer, LayerParams { weight, bias: t });
                }
                _ => return Err(Error::format(path, format!("unexpected tensor `{}`", e.name))),
            }
        }
        if pending.is_some() {
            return Err(Error::format(path, "weight without bias"));
        }
        Ok(Self { kind: manifest.kind, spec: manifest.spec, seed: manifest.seed, params: NetworkParams { conv, fc } })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Deserializes the stored spec.
    pub fn spec_as<S: serde::de::DeserializeOwned>(&self) -> Result<S> {
        Ok(serde_json::from_value(self.spec.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::spec::nist_classifier;
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = nist_classifier(5).unwrap();
        let params = NetworkParams::<f64>::init(&spec, &mut Rng::new(9)).unwrap();
        let ck = Checkpoint { kind: "classifier".into(), spec: serde_json::to_value(&spec).unwrap(), seed: 9, params };
        let bytes = ck.encode();
        let back = Checkpoint::<f64>::decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.spec_as::<crate::nn::NetworkSpec>().unwrap(), spec);
    }

    #[test]
    fn truncated_blob_is_reported() {
        let spec = nist_classifier(2).unwrap();
        let params = NetworkParams::<f64>::init(&spec, &mut Rng::new(1)).unwrap();
        let ck = Checkpoint { kind: "classifier".into(), spec: serde_json::Value::Null, seed: 1, params };
        let mut bytes = ck.encode();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::<f64>::decode(&bytes, Path::new("x")), Err(Error::Truncated { .. })));
        assert!(Checkpoint::<f64>::decode(b"not json\n", Path::new("x")).is_err());
    }
}
