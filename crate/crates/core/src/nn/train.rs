//! Minibatch SGD with validation-accuracy early stopping.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::forward::{backward, forward, infer, Mode};
use super::loss::{batch_loss, predictions, LossKind};
use super::params::NetworkParams;
use super::sgd::Momentum;
use super::spec::{LayerSpec, NetworkSpec};
use crate::data::{LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without sufficient improvement before stopping.
    pub patience: usize,
    /// Minimum validation-accuracy gain (as a fraction) that counts as an
    /// improvement.
    pub improvement_threshold: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Replaces every dropout rate in the convolutional part.
    pub conv_dropout: Option<f64>,
    /// Replaces every dropout rate in the fully connected part.
    pub fc_dropout: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 30,
            patience: 3,
            improvement_threshold: 0.001,
            seed: 0,
            loss: LossKind::Hinge,
            conv_dropout: None,
            fc_dropout: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.improvement_threshold >= 0.0) {
            return Err(Error::Config("improvement threshold must be non-negative".into()));
        }
        for rate in [self.conv_dropout, self.fc_dropout].into_iter().flatten() {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// `spec` with the configured dropout overrides applied.
    pub fn apply_dropout(&self, spec: &NetworkSpec) -> Result<NetworkSpec> {
        let mut out = spec.clone();
        for (i, layer) in out.layers.iter_mut().enumerate() {
            if let LayerSpec::Dropout { rate } = layer {
                let replacement = if i < spec.split { self.conv_dropout } else { self.fc_dropout };
                if let Some(r) = replacement {
                    *rate = r;
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy,improved\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.9},{:.6},{}", e.epoch, e.train_loss, e.val_accuracy, u8::from(e.improved));
        }
        out
    }
}

/// Validation-accuracy stopping rule.
///
/// An epoch improves when its accuracy exceeds the last improving epoch's by
/// more than `threshold` (the first epoch always improves). Training stops
/// after `patience` consecutive non-improving epochs. The best parameters are
/// tracked separately, by strictly highest accuracy.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    threshold: f64,
    patience: usize,
    reference: Option<f64>,
    stale: usize,
    best: Option<(usize, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub new_best: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(threshold: f64, patience: usize) -> Self {
        Self { threshold, patience, reference: None, stale: 0, best: None }
    }

    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> Observation {
        let improved = self.reference.map_or(true, |r| accuracy > r + self.threshold);
        if improved {
            self.reference = Some(accuracy);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let new_best = self.best.map_or(true, |(_, b)| accuracy > b);
        if new_best {
            self.best = Some((epoch, accuracy));
        }
        Observation { improved, new_best, stop: self.stale >= self.patience }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Shared epoch loop: runs `train_epoch` until the stopping rule fires and
/// returns the parameters of the best validation epoch.
pub(crate) fn run_epochs<P: Clone>(
    config: &TrainConfig,
    params: &mut P,
    label: &str,
    mut train_epoch: impl FnMut(&mut P, usize) -> Result<f64>,
    mut validate: impl FnMut(&P) -> Result<f64>,
) -> Result<(P, TrainHistory)> {
    let mut stopping = EarlyStopping::new(config.improvement_threshold, config.patience);
    let mut history = TrainHistory::default();
    let mut best = params.clone();
    for epoch in 1..=config.max_epochs {
        let train_loss = train_epoch(params, epoch)?;
        if !train_loss.is_finite() {
            return Err(Error::NonConvergence { what: "sgd (loss diverged)", iterations: epoch });
        }
        let val_accuracy = validate(params)?;
        let obs = stopping.observe(epoch, val_accuracy);
        log::info!("{label} epoch {epoch}: loss {train_loss:.5} val acc {val_accuracy:.4}");
        history.epochs.push(EpochRecord { epoch, train_loss, val_accuracy, improved: obs.improved });
        if obs.new_best {
            best = params.clone();
        }
        if obs.stop {
            history.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    if let Some((epoch, acc)) = stopping.best() {
        history.best_epoch = Some(epoch);
        history.best_val_accuracy = Some(acc);
    }
    Ok((best, history))
}

pub(crate) fn stack_images<T: Scalar>(set: &LabeledImageSet<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let images: Vec<&Tensor<T>> = indices.iter().map(|&i| set.image(i)).collect();
    Tensor::stack(&images)
}

const EVAL_CHUNK: usize = 256;

/// Fraction of `indices` whose predicted class matches its label.
pub fn classifier_accuracy<T: Scalar>(
    spec: &NetworkSpec,
    params: &NetworkParams<T>,
    set: &LabeledImageSet<T>,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Data("accuracy over an empty split".into()));
    }
    let mut correct = 0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let out = infer(spec, params, &stack_images(set, chunk)?)?;
        let predicted = predictions(spec.output_layer(), &out.output);
        correct += predicted.iter().zip(chunk).filter(|(p, &i)| **p == set.label(i)).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Trains a classification network from a seeded initialization on the
/// `Train` split, stopping on `Validation` accuracy.
pub fn train_classifier<T: Scalar>(
    spec: &NetworkSpec,
    data: &LabeledImageSet<T>,
    config: &TrainConfig,
) -> Result<(NetworkParams<T>, TrainHistory)> {
    let init = NetworkParams::init(spec, &mut Rng::new(config.seed).derive("init"))?;
    train_classifier_from(spec, init, data, config)
}

pub fn train_classifier_from<T: Scalar>(
    spec: &NetworkSpec,
    mut params: NetworkParams<T>,
    data: &LabeledImageSet<T>,
    config: &TrainConfig,
) -> Result<(NetworkParams<T>, TrainHistory)> {
    config.validate()?;
    let spec = config.apply_dropout(spec)?;
    params.check_against(&spec)?;
    if spec.output_units() != data.num_classes() && *spec.output_layer() == LayerSpec::SoftmaxOutput {
        return Err(Error::Config(format!(
            "network has {} outputs for {} classes",
            spec.output_units(),
            data.num_classes()
        )));
    }
    let train = data.indices(Split::Train);
    let val = data.indices(Split::Validation);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!("{} train and {} validation samples; both must be nonempty", train.len(), val.len())));
    }
    let root = Rng::new(config.seed);
    let mut order_rng = root.derive("batch-order");
    let mut dropout_rng = root.derive("dropout");
    let mut conv_opt = Momentum::new(config.learning_rate, config.momentum);
    let mut fc_opt = Momentum::new(config.learning_rate, config.momentum);
    let head = spec.output_layer().clone();
    let mut order = train.clone();

    run_epochs(
        config,
        &mut params,
        "classifier",
        |params, _| {
            order_rng.shuffle(&mut order);
            let mut total = 0.0;
            for batch in order.chunks(config.batch_size) {
                let x = stack_images(data, batch)?;
                let targets: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
                let (out, cache) = forward(&spec, params, &x, Mode::Train, &mut dropout_rng)?;
                let (loss, dlogits) = batch_loss(&head, config.loss, &out.logits, &targets)?;
                total += loss.as_f64() * batch.len() as f64;
                let grads = backward(&spec, params, &cache, &dlogits)?;
                conv_opt.step(&mut params.conv, &grads.conv)?;
                fc_opt.step(&mut params.fc, &grads.fc)?;
            }
            Ok(total / order.len() as f64)
        },
        |params| classifier_accuracy(&spec, params, data, &val),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopping_rule_edges() {
        let mut s = EarlyStopping::new(1.0, 1);
        assert!(!s.observe(1, 0.5).stop);
        assert!(s.observe(2, 0.9).stop);

        let mut s = EarlyStopping::new(0.01, 2);
        let obs: Vec<_> = [0.5, 0.505, 0.6, 0.6, 0.59].iter().enumerate().map(|(e, &a)| s.observe(e + 1, a)).collect();
        assert!(obs[0].improved && !obs[1].improved && obs[2].improved);
        assert!(obs[1].new_best, "strictly better counts for the saved params");
        assert!(!obs[3].stop && obs[4].stop);
        assert_eq!(s.best(), Some((3, 0.6)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { fc_dropout: Some(1.0), ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn dropout_overrides_by_part() {
        let spec = super::super::spec::nist_classifier(3).unwrap();
        let cfg = TrainConfig { conv_dropout: Some(0.1), fc_dropout: Some(0.0), ..Default::default() };
        let out = cfg.apply_dropout(&spec).unwrap();
        let rates: Vec<(usize, f64)> = out
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| if let LayerSpec::Dropout { rate } = l { Some((i, *rate)) } else { None })
            .collect();
        assert!(rates.iter().all(|&(i, r)| if i < spec.split { r == 0.1 } else { r == 0.0 }));
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            epochs: vec![EpochRecord { epoch: 1, train_loss: 0.5, val_accuracy: 0.75, improved: true }],
            ..Default::default()
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,val_accuracy,improved\n1,0.500000000,0.750000,1\n");
    }
}
