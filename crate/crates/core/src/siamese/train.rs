use std::collections::BTreeMap;

use super::{fuse_into, FeatureMatrix, Fusion, SiameseNet, TransferScheme, SCORE_CHUNK};
use crate::data::{LabeledImageSet, PairBatch};
use crate::error::{Error, Result};
use crate::nn::forward::{backward_part, forward_part, sigmoid, Mode};
use crate::nn::loss::{batch_loss, LossKind};
use crate::nn::spec::LayerSpec;
use crate::nn::train::run_epochs;
use crate::nn::{Momentum, NetworkParams, TrainConfig, TrainHistory};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Image indices referenced by `batches`, mapped to feature rows.
fn referenced(batches: &[&PairBatch]) -> (Vec<usize>, BTreeMap<usize, usize>) {
    let mut map = BTreeMap::new();
    for b in batches {
        for p in &b.pairs {
            map.entry(p.i).or_insert(0);
            map.entry(p.j).or_insert(0);
        }
    }
    let order: Vec<usize> = map.keys().copied().collect();
    for (row, idx) in order.iter().enumerate() {
        map.insert(*idx, row);
    }
    (order, map)
}

fn features_for<T: Scalar>(
    net: &SiameseNet<T>,
    data: &LabeledImageSet<T>,
    batches: &[&PairBatch],
) -> Result<(FeatureMatrix<T>, BTreeMap<usize, usize>)> {
    let (order, map) = referenced(batches);
    let images: Vec<&Tensor<T>> = order.iter().map(|&i| data.image(i)).collect();
    Ok((net.conv_features(&images)?, map))
}

/// Pre-sigmoid activations for every pair, from cached features.
fn pair_logits<T: Scalar>(
    net: &SiameseNet<T>,
    feats: &FeatureMatrix<T>,
    rows: &BTreeMap<usize, usize>,
    pairs: &PairBatch,
    swapped: bool,
) -> Result<Vec<T>> {
    let width = net.spec.fused_width()?;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.pairs.chunks(SCORE_CHUNK) {
        let mut fused = Vec::with_capacity(chunk.len() * width);
        for p in chunk {
            let (a, b) = if swapped { (p.j, p.i) } else { (p.i, p.j) };
            fuse_into(net.spec.fusion, feats.row(rows[&a]), feats.row(rows[&b]), &mut fused);
        }
        out.extend(net.fc_logits(fused, chunk.len())?);
    }
    Ok(out)
}

/// Similarity score per pair. With `symmetric`, each score is the average of
/// both input orders, matching the symmetrized kernel.
pub fn pair_scores<T: Scalar>(
    net: &SiameseNet<T>,
    data: &LabeledImageSet<T>,
    pairs: &PairBatch,
    symmetric: bool,
) -> Result<Vec<T>> {
    pairs.check_source(data)?;
    let (feats, rows) = features_for(net, data, &[pairs])?;
    let forward: Vec<T> = pair_logits(net, &feats, &rows, pairs, false)?.into_iter().map(sigmoid).collect();
    if !symmetric {
        return Ok(forward);
    }
    let reverse = pair_logits(net, &feats, &rows, pairs, true)?;
    Ok(forward.iter().zip(reverse).map(|(&a, b)| (a + sigmoid(b)) / T::lit(2.0)).collect())
}

/// Fraction of pairs whose output thresholded at 0.5 matches the target.
pub fn pair_accuracy<T: Scalar>(net: &SiameseNet<T>, data: &LabeledImageSet<T>, pairs: &PairBatch) -> Result<f64> {
    pairs.check_source(data)?;
    let (feats, rows) = features_for(net, data, &[pairs])?;
    accuracy_from(net, &feats, &rows, pairs)
}

fn accuracy_from<T: Scalar>(
    net: &SiameseNet<T>,
    feats: &FeatureMatrix<T>,
    rows: &BTreeMap<usize, usize>,
    pairs: &PairBatch,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("accuracy over an empty pair batch".into()));
    }
    let logits = pair_logits(net, feats, rows, pairs, false)?;
    let correct = logits.iter().zip(&pairs.pairs).filter(|(&a, p)| (a > T::zero()) == (p.target == 1)).count();
    Ok(correct as f64 / pairs.len() as f64)
}

fn unfuse<T: Scalar>(fusion: Fusion, fused_grad: &[T], a: &[T], b: &[T], ga: &mut [T], gb: &mut [T]) {
    match fusion {
        Fusion::Concat => {
            let d = a.len();
            ga.copy_from_slice(&fused_grad[..d]);
            gb.copy_from_slice(&fused_grad[d..]);
        }
        Fusion::AbsDiff => {
            for k in 0..a.len() {
                let diff = a[k] - b[k];
                let s = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                ga[k] = s * fused_grad[k];
                gb[k] = -s * fused_grad[k];
            }
        }
    }
}

/// Mean pair loss and its gradient with respect to every parameter, both
/// twins running through the one conv store. `images` holds the left images
/// of the batch followed by the right images.
pub fn pair_gradients<T: Scalar>(
    net: &SiameseNet<T>,
    images: &[&Tensor<T>],
    targets: &[usize],
    loss: LossKind,
    rng: &mut Rng,
) -> Result<(T, NetworkParams<T>)> {
    let spec = &net.spec;
    let n = targets.len();
    if images.len() != 2 * n {
        return Err(Error::Data(format!("{} images for {n} pairs", images.len())));
    }
    let (split, d, fused_width) = (spec.split(), spec.feature_width()?, spec.fused_width()?);
    let (f, conv_cache) = forward_part(&spec.conv, 0, &net.params.conv, Tensor::stack(images)?, Mode::Train, rng, true)?;
    let fd = f.data();
    let mut fused = Vec::with_capacity(n * fused_width);
    for b in 0..n {
        fuse_into(spec.fusion, &fd[b * d..(b + 1) * d], &fd[(n + b) * d..(n + b + 1) * d], &mut fused);
    }
    let x = Tensor::new(vec![n, fused_width], fused)?;
    let (logits, fc_cache) = forward_part(&spec.fc, split, &net.params.fc, x, Mode::Train, rng, true)?;
    let (value, grad) = batch_loss(&LayerSpec::SigmoidOutput, loss, &logits, targets)?;
    let (fc, dfused) = backward_part(&spec.fc, &net.params.fc, &fc_cache.expect("recorded"), grad, true)?;
    let dfused = dfused.expect("requested");
    let mut dfeat = vec![T::zero(); 2 * n * d];
    let (left, right) = dfeat.split_at_mut(n * d);
    for b in 0..n {
        unfuse(
            spec.fusion,
            &dfused.data()[b * fused_width..(b + 1) * fused_width],
            &fd[b * d..(b + 1) * d],
            &fd[(n + b) * d..(n + b + 1) * d],
            &mut left[b * d..(b + 1) * d],
            &mut right[b * d..(b + 1) * d],
        );
    }
    let dfeat = Tensor::new(f.shape().to_vec(), dfeat)?;
    let (conv, _) = backward_part(&spec.conv, &net.params.conv, &conv_cache.expect("recorded"), dfeat, false)?;
    Ok((value, NetworkParams { conv, fc }))
}

/// Trains a Siamese network on `pairs` (fixed for the run, reshuffled each
/// epoch), stopping on the pair accuracy of `val_pairs` at threshold 0.5.
/// Both batches index into `data`.
///
/// Under `NConv_*` schemes the conv part must come from a donor and is frozen:
/// features are computed once and only the FC part is updated. Under
/// `TConv_TFC` both twins' gradients are summed into the one conv store.
pub fn train_siamese<T: Scalar>(
    net: SiameseNet<T>,
    data: &LabeledImageSet<T>,
    pairs: &PairBatch,
    val_pairs: &PairBatch,
    scheme: TransferScheme,
    config: &TrainConfig,
) -> Result<(SiameseNet<T>, TrainHistory)> {
    config.validate()?;
    net.check()?;
    if scheme.conv_frozen() && net.donor.is_none() {
        return Err(Error::Config(format!("{scheme} needs a donor conv checkpoint")));
    }
    pairs.check_source(data)?;
    val_pairs.check_source(data)?;
    if pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Data("training and validation pair batches must be nonempty".into()));
    }
    let mut net = net;
    let trained_spec = net.spec.with_dropout(config.conv_dropout, config.fc_dropout)?;
    let original_spec = std::mem::replace(&mut net.spec, trained_spec);

    let root = Rng::new(config.seed);
    let mut order_rng = root.derive("pair-order");
    let mut dropout_rng = root.derive("siamese-dropout");
    let mut fc_opt = Momentum::new(config.learning_rate, config.momentum);
    let mut conv_opt = Momentum::new(config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let head = LayerSpec::SigmoidOutput;
    let spec = net.spec.clone();
    let split = spec.split();
    let fused_width = spec.fused_width()?;
    let label = format!("siamese {scheme}");

    let (mut best, history) = if scheme.conv_frozen() {
        let (feats, rows) = features_for(&net, data, &[pairs, val_pairs])?;
        run_epochs(
            config,
            &mut net,
            &label,
            |net, _| {
                order_rng.shuffle(&mut order);
                let mut total = 0.0;
                for batch in order.chunks(config.batch_size) {
                    let mut fused = Vec::with_capacity(batch.len() * fused_width);
                    let mut targets = Vec::with_capacity(batch.len());
                    for &k in batch {
                        let p = pairs.pairs[k];
                        fuse_into(spec.fusion, feats.row(rows[&p.i]), feats.row(rows[&p.j]), &mut fused);
                        targets.push(usize::from(p.target));
                    }
                    let x = Tensor::new(vec![batch.len(), fused_width], fused)?;
                    let (logits, cache) =
                        forward_part(&spec.fc, split, &net.params.fc, x, Mode::Train, &mut dropout_rng, true)?;
                    let (loss, grad) = batch_loss(&head, config.loss, &logits, &targets)?;
                    total += loss.as_f64() * batch.len() as f64;
                    let (grads, _) = backward_part(&spec.fc, &net.params.fc, &cache.expect("recorded"), grad, false)?;
                    fc_opt.step(&mut net.params.fc, &grads)?;
                }
                Ok(total / order.len() as f64)
            },
            |net| accuracy_from(net, &feats, &rows, val_pairs),
        )?
    } else {
        run_epochs(
            config,
            &mut net,
            &label,
            |net, _| {
                order_rng.shuffle(&mut order);
                let mut total = 0.0;
                for batch in order.chunks(config.batch_size) {
                    let mut images: Vec<&Tensor<T>> = batch.iter().map(|&k| data.image(pairs.pairs[k].i)).collect();
                    images.extend(batch.iter().map(|&k| data.image(pairs.pairs[k].j)));
                    let targets: Vec<usize> = batch.iter().map(|&k| usize::from(pairs.pairs[k].target)).collect();
                    let (loss, grads) = pair_gradients(net, &images, &targets, config.loss, &mut dropout_rng)?;
                    total += loss.as_f64() * batch.len() as f64;
                    fc_opt.step(&mut net.params.fc, &grads.fc)?;
                    conv_opt.step(&mut net.params.conv, &grads.conv)?;
                }
                Ok(total / order.len() as f64)
            },
            |net| {
                let (feats, rows) = features_for(net, data, &[val_pairs])?;
                accuracy_from(net, &feats, &rows, val_pairs)
            },
        )?
    };
    best.spec = original_spec;
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_spec;
    use super::*;
    use crate::data::{sample_pairs, PairSampling, Split};
    use crate::nn::params::NetworkParams;

    /// Two classes of 6x6 images: bright left half vs bright right half.
    fn toy(n: usize, seed: u64) -> LabeledImageSet<f64> {
        let mut rng = Rng::new(seed);
        let labels: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let images = labels
            .iter()
            .map(|&l| {
                Tensor::from_fn(&[6, 6, 1], |k| {
                    let col = k % 6;
                    let lit = if l == 0 { col < 3 } else { col >= 3 };
                    (if lit { 0.8 } else { 0.1 }) + 0.1 * rng.uniform()
                })
            })
            .collect();
        LabeledImageSet::from_original_labels(images, &labels, Split::Train, 0).unwrap()
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig { learning_rate: 0.05, max_epochs: epochs, patience: epochs.max(1), batch_size: 8, seed: 3, ..Default::default() }
    }

    fn donor_net(seed: u64) -> SiameseNet<f64> {
        let spec = tiny_spec(Fusion::Concat);
        let donor = SiameseNet::<f64>::init(spec.clone(), &mut Rng::new(seed)).unwrap();
        let donor_params = NetworkParams { conv: donor.params.conv, fc: Default::default() };
        SiameseNet::transplant_conv(&donor_params, spec, &mut Rng::new(seed + 1)).unwrap()
    }

    #[test]
    fn frozen_scheme_needs_donor() {
        let data = toy(10, 1);
        let pairs = sample_pairs(&data, Split::Train, 8, PairSampling::default(), &mut Rng::new(1)).unwrap();
        let net = SiameseNet::<f64>::init(tiny_spec(Fusion::Concat), &mut Rng::new(1)).unwrap();
        let err = train_siamese(net, &data, &pairs, &pairs, TransferScheme::NConv_TFC, &config(1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn frozen_conv_is_untouched() {
        let data = toy(20, 2);
        let pairs = sample_pairs(&data, Split::Train, 40, PairSampling::default(), &mut Rng::new(2)).unwrap();
        let net = donor_net(2);
        let before = net.params.conv.clone();
        let sum = net.conv_checksum();
        let (after, history) = train_siamese(net, &data, &pairs, &pairs, TransferScheme::NConv_NFC, &config(3)).unwrap();
        assert_eq!(after.params.conv, before);
        assert_eq!(after.conv_checksum(), sum);
        assert_eq!(history.epochs.len(), 3);
    }

    #[test]
    fn toy_overfit_reaches_full_pair_accuracy() {
        for scheme in [TransferScheme::NConv_TFC, TransferScheme::TConv_TFC] {
            let data = toy(10, 4);
            let pairs = sample_pairs(&data, Split::Train, 60, PairSampling::default(), &mut Rng::new(4)).unwrap();
            let net = donor_net(4);
            let self_pairs = PairBatch {
                pairs: (0..10).map(|i| crate::data::Pair { i, j: i, target: 1 }).collect(),
                source: data.fingerprint(),
            };
            let loss_before: f64 = pair_scores(&net, &data, &self_pairs, false)
                .unwrap()
                .iter()
                .map(|&q| {
                    let a = (q / (1.0 - q)).ln();
                    (1.0 - a).max(0.0)
                })
                .sum();
            let cfg = TrainConfig { fc_dropout: Some(0.0), ..config(40) };
            let (trained, history) = train_siamese(net, &data, &pairs, &pairs, scheme, &cfg).unwrap();
            assert_eq!(history.best_val_accuracy, Some(1.0), "{scheme}: {:?}", history.epochs.last());
            assert_eq!(pair_accuracy(&trained, &data, &pairs).unwrap(), 1.0);
            let loss_after: f64 = pair_scores(&trained, &data, &self_pairs, false)
                .unwrap()
                .iter()
                .map(|&q| {
                    let a = (q / (1.0 - q)).ln();
                    (1.0 - a).max(0.0)
                })
                .sum();
            assert!(loss_after < loss_before, "{scheme}: {loss_after} !< {loss_before}");
        }
    }

    #[test]
    fn trainable_conv_changes_and_stays_shared() {
        let data = toy(12, 5);
        let pairs = sample_pairs(&data, Split::Train, 24, PairSampling::default(), &mut Rng::new(5)).unwrap();
        let net = donor_net(5);
        let before = net.params.conv.clone();
        let (after, _) = train_siamese(net, &data, &pairs, &pairs, TransferScheme::TConv_TFC, &config(2)).unwrap();
        assert_ne!(after.params.conv, before);
        // one store serves both inputs: swapping the pair swaps only the fusion order
        let x = data.image(0);
        let f = after.conv_features(&[x, x]).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy(12, 6);
        let pairs = sample_pairs(&data, Split::Train, 24, PairSampling::default(), &mut Rng::new(6)).unwrap();
        let run = || train_siamese(donor_net(6), &data, &pairs, &pairs, TransferScheme::NConv_TFC, &config(3)).unwrap();
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn zero_epochs_returns_input() {
        let data = toy(8, 7);
        let pairs = sample_pairs(&data, Split::Train, 8, PairSampling::default(), &mut Rng::new(7)).unwrap();
        let net = donor_net(7);
        let cfg = TrainConfig { max_epochs: 0, ..config(1) };
        let (out, history) = train_siamese(net.clone(), &data, &pairs, &pairs, TransferScheme::NConv_TFC, &cfg).unwrap();
        assert_eq!(out, net);
        assert!(history.epochs.is_empty());
    }

    fn finite_difference_error(fusion: Fusion, seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let net = SiameseNet::<f64>::init(tiny_spec(fusion), &mut rng).unwrap();
        assert!(net.params.param_count() < 1000);
        let imgs: Vec<Tensor<f64>> = (0..6).map(|_| Tensor::random_uniform(&[6, 6, 1], 0.0, 1.0, &mut rng)).collect();
        let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
        let targets = [1, 0, 1];
        let loss_at = |n: &SiameseNet<f64>| pair_gradients(n, &refs, &targets, LossKind::CrossEntropy, &mut Rng::new(9)).unwrap();
        let (_, grads) = loss_at(&net);
        let mut worst = 0.0f64;
        let mut probe = net.clone();
        for fc in [false, true] {
            let store = if fc { &grads.fc } else { &grads.conv };
            for (layer, g) in store.iter() {
                let analytic: Vec<f64> = g.weight.data().iter().chain(g.bias.data()).copied().collect();
                let nw = g.weight.len();
                for (pos, &a) in analytic.iter().enumerate() {
                    let mut eval = |delta: f64| {
                        let part = if fc { &mut probe.params.fc } else { &mut probe.params.conv };
                        let lp = part.get_mut(layer).unwrap();
                        let v = if pos < nw { &mut lp.weight.data_mut()[pos] } else { &mut lp.bias.data_mut()[pos - nw] };
                        *v += delta;
                        let l = loss_at(&probe).0;
                        let part = if fc { &mut probe.params.fc } else { &mut probe.params.conv };
                        let lp = part.get_mut(layer).unwrap();
                        let v = if pos < nw { &mut lp.weight.data_mut()[pos] } else { &mut lp.bias.data_mut()[pos - nw] };
                        *v -= delta;
                        l
                    };
                    let h = 1e-5;
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
                }
            }
        }
        worst
    }

    #[test]
    fn twin_gradients_match_finite_differences() {
        assert!(finite_difference_error(Fusion::Concat, 21) < 1e-4);
        assert!(finite_difference_error(Fusion::AbsDiff, 22) < 1e-4);
    }
}