//! Siamese similarity network.
//!
//! Both inputs run through one convolutional stack (a single parameter store,
//! so the twins can never diverge). Their flattened features are fused and
//! passed through a fully connected stack ending in one sigmoid unit whose
//! output `q = g(x_i, x_j)` estimates the probability that the two images
//! share a class.
//!
//! Layer indices are global: the conv part occupies `0..split` and the FC part
//! `split..`, matching a classification network with the same conv part, so
//! donor parameters transplant by index.

mod train;

pub use train::{pair_accuracy, pair_gradients, pair_scores, train_siamese};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::forward::{forward_part, sigmoid, Mode};
use crate::nn::params::{check_part, init_part, param_shapes, NetworkParams};
use crate::nn::spec::{fnv1a, infer_shapes, nist_conv_part, nist_fc_hidden, LayerSpec, NetworkSpec};
use crate::nn::Checkpoint;
use crate::rng::Rng;
use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `[f_i, f_j]`
    #[default]
    Concat,
    /// `|f_i - f_j|`, elementwise.
    AbsDiff,
}

#[allow(non_camel_case_types)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransferScheme {
    /// Conv and FC both trained on target pairs.
    TConv_TFC,
    /// Donor conv frozen, FC trained on target pairs.
    NConv_TFC,
    /// Donor conv frozen, FC trained on non-target pairs.
    NConv_NFC,
}

impl TransferScheme {
    pub fn conv_frozen(self) -> bool {
        !matches!(self, TransferScheme::TConv_TFC)
    }

    /// Whether the FC part is trained on target-class pairs.
    pub fn fc_on_target(self) -> bool {
        !matches!(self, TransferScheme::NConv_NFC)
    }
}

impl fmt::Display for TransferScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferScheme::TConv_TFC => "TConv_TFC",
            TransferScheme::NConv_TFC => "NConv_TFC",
            TransferScheme::NConv_NFC => "NConv_NFC",
        })
    }
}

impl FromStr for TransferScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "tconv_tfc" => Ok(TransferScheme::TConv_TFC),
            "nconv_tfc" => Ok(TransferScheme::NConv_TFC),
            "nconv_nfc" => Ok(TransferScheme::NConv_NFC),
            _ => Err(Error::Config(format!("unknown transfer scheme `{s}` (TConv_TFC, NConv_TFC, NConv_NFC)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiameseSpec {
    /// Per-image input shape, `H x W x C`.
    pub input_shape: Vec<usize>,
    pub conv: Vec<LayerSpec>,
    pub fusion: Fusion,
    pub fc: Vec<LayerSpec>,
}

impl SiameseSpec {
    pub fn new(input_shape: Vec<usize>, conv: Vec<LayerSpec>, fusion: Fusion, fc: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { input_shape, conv, fusion, fc };
        spec.validate()?;
        Ok(spec)
    }

    /// NIST column twins: the classification conv stack, concatenation, then
    /// FC 800 and a single sigmoid unit.
    pub fn nist_column(conv_dropout: f64, fc_dropout: f64) -> Result<Self> {
        let mut fc = nist_fc_hidden(fc_dropout);
        fc.push(LayerSpec::FullyConnected { units: 1 });
        fc.push(LayerSpec::SigmoidOutput);
        Self::new(vec![32, 32, 1], nist_conv_part(conv_dropout), Fusion::Concat, fc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("input shape {:?} is not HxWxC", self.input_shape)));
        }
        if let Some(i) = self.conv.iter().position(|l| matches!(l, LayerSpec::FullyConnected { .. }) || l.is_output()) {
            return Err(Error::Config(format!("conv part layer {i} ({}) is not allowed", self.conv[i].kind())));
        }
        if let Some(i) = self.fc.iter().position(|l| matches!(l, LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. })) {
            return Err(Error::Config(format!(
                "fc part layer {} ({}) is not allowed",
                self.split() + i,
                self.fc[i].kind()
            )));
        }
        if self.fc.last() != Some(&LayerSpec::SigmoidOutput)
            || self.fc.iter().filter(|l| l.is_output()).count() != 1
        {
            return Err(Error::Config("fc part must end in its only output layer, a sigmoid".into()));
        }
        for l in self.conv.iter().chain(&self.fc) {
            if let LayerSpec::Dropout { rate } = l {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
                }
            }
        }
        let features = self.feature_shape()?;
        if features.len() != 1 {
            return Err(Error::Config(format!("conv part must end flattened, got {features:?}")));
        }
        let out = infer_shapes(&self.fc, self.split(), &[self.fused_width()?])?;
        if out.last().map(|s| s.as_slice()) != Some(&[1][..]) {
            return Err(Error::Config("similarity output must be a single unit".into()));
        }
        Ok(())
    }

    /// Global index of the first FC-part layer.
    pub fn split(&self) -> usize {
        self.conv.len()
    }

    pub fn feature_shape(&self) -> Result<Vec<usize>> {
        Ok(infer_shapes(&self.conv, 0, &self.input_shape)?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    /// Length of one image's flattened conv features.
    pub fn feature_width(&self) -> Result<usize> {
        Ok(self.feature_shape()?.iter().product())
    }

    pub fn fused_width(&self) -> Result<usize> {
        let d = self.feature_width()?;
        Ok(match self.fusion {
            Fusion::Concat => 2 * d,
            Fusion::AbsDiff => d,
        })
    }

    /// The spec with dropout rates replaced per part.
    pub fn with_dropout(&self, conv: Option<f64>, fc: Option<f64>) -> Result<Self> {
        let mut out = self.clone();
        for (layers, rate) in [(&mut out.conv, conv), (&mut out.fc, fc)] {
            if let Some(r) = rate {
                for l in layers.iter_mut() {
                    if let LayerSpec::Dropout { rate } = l {
                        *rate = r;
                    }
                }
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// Whether a classification network's conv part has the same layers.
    pub fn conv_matches(&self, classifier: &NetworkSpec) -> bool {
        let strip = |ls: &[LayerSpec]| -> Vec<LayerSpec> {
            ls.iter()
                .map(|l| match l {
                    LayerSpec::Dropout { .. } => LayerSpec::Dropout { rate: 0.0 },
                    other => other.clone(),
                })
                .collect()
        };
        classifier.input_shape == self.input_shape && strip(classifier.conv_layers()) == strip(&self.conv)
    }
}

/// Row-major matrix of per-image conv features, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    pub rows: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.width);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self { rows: rows.len(), width: self.width, data }
    }
}

pub(crate) fn fuse_into<T: Scalar>(fusion: Fusion, a: &[T], b: &[T], out: &mut Vec<T>) {
    match fusion {
        Fusion::Concat => {
            out.extend_from_slice(a);
            out.extend_from_slice(b);
        }
        Fusion::AbsDiff => out.extend(a.iter().zip(b).map(|(&x, &y)| (x - y).abs())),
    }
}

fn checksum<T: Scalar>(store: &crate::nn::ParamStore<T>) -> u64 {
    let mut bytes = Vec::new();
    for (layer, p) in store.iter() {
        bytes.extend_from_slice(&(layer as u64).to_le_bytes());
        for v in p.weight.data().iter().chain(p.bias.data()) {
            bytes.extend_from_slice(&v.as_f64().to_bits().to_le_bytes());
        }
    }
    fnv1a(&bytes)
}

const FEATURE_CHUNK: usize = 128;
const SCORE_CHUNK: usize = 512;

/// A Siamese network: spec, parameters, and the checksum of the donor conv
/// part when the conv weights were transplanted.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseNet<T> {
    pub spec: SiameseSpec,
    pub params: NetworkParams<T>,
    pub donor: Option<u64>,
}

impl<T: Scalar> SiameseNet<T> {
    /// Fresh seeded initialization of both parts.
    pub fn init(spec: SiameseSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let conv = init_part(&spec.conv, 0, &spec.input_shape, rng)?;
        let fc = init_part(&spec.fc, spec.split(), &[spec.fused_width()?], rng)?;
        Ok(Self { spec, params: NetworkParams { conv, fc }, donor: None })
    }

    /// Copies a donor's conv parameters bit for bit and initializes the FC
    /// part from `rng`.
    pub fn transplant_conv(donor: &NetworkParams<T>, spec: SiameseSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let shapes = infer_shapes(&spec.conv, 0, &spec.input_shape)?;
        let mut expected = BTreeSet::new();
        for (i, layer) in spec.conv.iter().enumerate() {
            let input = if i == 0 { &spec.input_shape } else { &shapes[i - 1] };
            if let Some((w, b)) = param_shapes(layer, input) {
                expected.insert(i);
                let p = donor.conv.get(i).ok_or_else(|| Error::Layer {
                    layer: i,
                    kind: layer.kind(),
                    detail: "donor has no parameters for this layer".into(),
                })?;
                if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                    return Err(Error::Layer {
                        layer: i,
                        kind: layer.kind(),
                        detail: format!(
                            "donor shapes {:?}/{:?}, expected {w:?}/{b:?}",
                            p.weight.shape(),
                            p.bias.shape()
                        ),
                    });
                }
            }
        }
        if let Some((extra, _)) = donor.conv.iter().find(|(i, _)| !expected.contains(i)) {
            return Err(Error::Layer {
                layer: extra,
                kind: "conv",
                detail: "donor has a parameterized layer the Siamese conv part lacks".into(),
            });
        }
        let fc = init_part(&spec.fc, spec.split(), &[spec.fused_width()?], rng)?;
        let conv = donor.conv.clone();
        let donor_sum = checksum(&conv);
        Ok(Self { spec, params: NetworkParams { conv, fc }, donor: Some(donor_sum) })
    }

    pub fn check(&self) -> Result<()> {
        self.spec.validate()?;
        check_part(&self.params.conv, &self.spec.conv, 0, &self.spec.input_shape)?;
        check_part(&self.params.fc, &self.spec.fc, self.spec.split(), &[self.spec.fused_width()?])
    }

    /// Digest of the conv parameter values.
    pub fn conv_checksum(&self) -> u64 {
        checksum(&self.params.conv)
    }

    fn check_image(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.spec.input_shape.as_slice() {
            return Err(Error::Layer {
                layer: 0,
                kind: self.spec.conv.first().map_or("input", LayerSpec::kind),
                detail: format!("input shape {:?} does not match declared {:?}", x.shape(), self.spec.input_shape),
            });
        }
        Ok(())
    }

    /// Eval-mode conv features, one row per image.
    pub fn conv_features(&self, images: &[&Tensor<T>]) -> Result<FeatureMatrix<T>> {
        let width = self.spec.feature_width()?;
        let mut data = Vec::with_capacity(images.len() * width);
        let mut unused = Rng::new(0);
        for chunk in images.chunks(FEATURE_CHUNK) {
            for x in chunk {
                self.check_image(x)?;
            }
            let batch = Tensor::stack(chunk)?;
            let (f, _) = forward_part(&self.spec.conv, 0, &self.params.conv, batch, Mode::Eval, &mut unused, false)?;
            data.extend_from_slice(f.data());
        }
        Ok(FeatureMatrix { rows: images.len(), width, data })
    }

    /// Pre-sigmoid FC activations for a batch of fused rows.
    pub(crate) fn fc_logits(&self, fused: Vec<T>, rows: usize) -> Result<Vec<T>> {
        let width = self.spec.fused_width()?;
        let x = Tensor::new(vec![rows, width], fused)?;
        let mut unused = Rng::new(0);
        let (y, _) = forward_part(&self.spec.fc, self.spec.split(), &self.params.fc, x, Mode::Eval, &mut unused, false)?;
        Ok(y.into_data())
    }

    /// `g(x_i, x_j)` computed from cached features.
    pub fn similarity_from_features(&self, f_i: &[T], f_j: &[T]) -> Result<T> {
        let d = self.spec.feature_width()?;
        if f_i.len() != d || f_j.len() != d {
            return Err(Error::shape("feature pair", &[f_i.len()], &[f_j.len(), d]));
        }
        let mut fused = Vec::with_capacity(self.spec.fused_width()?);
        fuse_into(self.spec.fusion, f_i, f_j, &mut fused);
        Ok(sigmoid(self.fc_logits(fused, 1)?[0]))
    }

    /// `g(x_i, x_j)` in eval mode. Not symmetric in its arguments in general.
    pub fn similarity(&self, x_i: &Tensor<T>, x_j: &Tensor<T>) -> Result<T> {
        let f = self.conv_features(&[x_i, x_j])?;
        self.similarity_from_features(f.row(0), f.row(1))
    }

    /// Similarity grids between two feature sets: `forward[r][c] = g(row_r,
    /// col_c)` and `reverse[r][c] = g(col_c, row_r)`, both `rows x cols`.
    ///
    /// With concatenation fusion and a leading FC layer the first layer is
    /// evaluated per image (`[f_i, f_j] W = f_i W_top + f_j W_bottom`), which
    /// makes a grid cost one hidden-width add per cell.
    pub fn score_grids(&self, rows: &FeatureMatrix<T>, cols: &FeatureMatrix<T>, with_reverse: bool) -> Result<(Vec<T>, Option<Vec<T>>)> {
        if rows.rows == 0 || cols.rows == 0 {
            return Err(Error::Data("similarity grid over an empty image list".into()));
        }
        let d = self.spec.feature_width()?;
        if rows.width != d || cols.width != d {
            return Err(Error::shape("feature grid", &[rows.width], &[cols.width, d]));
        }
        match (self.spec.fusion, self.spec.fc.first()) {
            (Fusion::Concat, Some(LayerSpec::FullyConnected { units })) => {
                let p = self.params.fc.get(self.spec.split()).expect("checked");
                let h = *units;
                let w = p.weight.data();
                let top = MatRef { data: w, rows: d, cols: h, row_stride: h, col_stride: 1 };
                let bottom = MatRef { data: &w[d * h..], rows: d, cols: h, row_stride: h, col_stride: 1 };
                let project = |f: &FeatureMatrix<T>, m: MatRef<'_, T>| {
                    let mut out = vec![T::zero(); f.rows * h];
                    T::gemm(T::one(), MatRef::row_major(&f.data, f.rows, d), m, T::zero(), &mut out);
                    out
                };
                let row_top = project(rows, top);
                let col_bottom = project(cols, bottom);
                let forward = self.grid_from_projections(&row_top, &col_bottom, p.bias.data(), rows.rows, cols.rows)?;
                let reverse = if with_reverse {
                    let col_top = project(cols, top);
                    let row_bottom = project(rows, bottom);
                    let rev_t = self.grid_from_projections(&col_top, &row_bottom, p.bias.data(), cols.rows, rows.rows)?;
                    Some(transpose(&rev_t, cols.rows, rows.rows))
                } else {
                    None
                };
                Ok((forward, reverse))
            }
            _ => {
                let forward = self.grid_direct(rows, cols)?;
                let reverse = if with_reverse {
                    Some(transpose(&self.grid_direct(cols, rows)?, cols.rows, rows.rows))
                } else {
                    None
                };
                Ok((forward, reverse))
            }
        }
    }

    fn grid_from_projections(&self, left: &[T], right: &[T], bias: &[T], n: usize, m: usize) -> Result<Vec<T>> {
        let h = bias.len();
        let rest = &self.spec.fc[1..];
        let mut unused = Rng::new(0);
        let mut out = Vec::with_capacity(n * m);
        let mut hidden = Vec::with_capacity(m * h);
        for r in 0..n {
            hidden.clear();
            let a = &left[r * h..(r + 1) * h];
            for c in 0..m {
                let b = &right[c * h..(c + 1) * h];
                hidden.extend(a.iter().zip(b).zip(bias).map(|((&x, &y), &z)| x + y + z));
            }
            let x = Tensor::new(vec![m, h], std::mem::take(&mut hidden))?;
            let (y, _) =
                forward_part(rest, self.spec.split() + 1, &self.params.fc, x, Mode::Eval, &mut unused, false)?;
            out.extend(y.data().iter().map(|&v| sigmoid(v)));
            hidden = Vec::with_capacity(m * h);
        }
        Ok(out)
    }

    fn grid_direct(&self, rows: &FeatureMatrix<T>, cols: &FeatureMatrix<T>) -> Result<Vec<T>> {
        let width = self.spec.fused_width()?;
        let mut out = Vec::with_capacity(rows.rows * cols.rows);
        for r in 0..rows.rows {
            for chunk in (0..cols.rows).collect::<Vec<_>>().chunks(SCORE_CHUNK) {
                let mut fused = Vec::with_capacity(chunk.len() * width);
                for &c in chunk {
                    fuse_into(self.spec.fusion, rows.row(r), cols.row(c), &mut fused);
                }
                out.extend(self.fc_logits(fused, chunk.len())?.into_iter().map(sigmoid));
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint<T> {
        let mut spec = serde_json::to_value(&self.spec).expect("spec serializes");
        spec["split"] = serde_json::json!(self.spec.split());
        spec["donor"] = serde_json::json!(self.donor.map(|d| format!("{d:016x}")));
        Checkpoint { kind: "siamese".into(), spec, seed, params: self.params.clone() }
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        if ck.kind != "siamese" {
            return Err(Error::Data(format!("expected a siamese checkpoint, found `{}`", ck.kind)));
        }
        let mut value = ck.spec.clone();
        let donor = value
            .get("donor")
            .and_then(|d| d.as_str())
            .map(|s| u64::from_str_radix(s, 16))
            .transpose()
            .map_err(|e| Error::Data(format!("donor checksum: {e}")))?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("split");
            obj.remove("donor");
        }
        let spec: SiameseSpec = serde_json::from_value(value)?;
        let net = Self { spec, params: ck.params, donor };
        net.check()?;
        Ok(net)
    }
}

fn transpose<T: Copy>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| m[r * cols + c]));
    }
    out
}
