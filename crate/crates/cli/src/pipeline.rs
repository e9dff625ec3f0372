use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use desk_core::classify::{self, knn_predict, ovo_fit, select_c_holdout, select_k_holdout, KnnModel, OneVsOne};
use desk_core::data::{self, sample_pairs, LabeledImageSet, PairSampling, Split};
use desk_core::kernel::{self, GramMatrix};
use desk_core::nn::{self, Checkpoint, NetworkSpec};
use desk_core::rng::derive_seed;
use desk_core::siamese::{self, SiameseNet, SiameseSpec, TransferScheme};
use desk_core::{Error, Result, Rng};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

type Set = LabeledImageSet<f64>;

struct Holdout {
    k_fit: GramMatrix<f64>,
    fit_labels: Vec<u32>,
    k_val: GramMatrix<f64>,
    val_labels: Vec<u32>,
}

const TEST_ID_BASE: u64 = 1_000_000;

pub const DONOR: &str = "donor.ckpt";
pub const SIAMESE: &str = "siamese.ckpt";
pub const SAMPLES: &str = "samples.csv";
pub const GRAM_TRAIN_RAW: &str = "gram_train_raw.bin";
pub const GRAM_TEST_FWD: &str = "gram_test_fwd.bin";
pub const GRAM_TEST_REV: &str = "gram_test_rev.bin";
pub const GRAM_TRAIN: &str = "gram_train.bin";
pub const GRAM_TEST: &str = "gram_test.bin";
pub const SVM_MODEL: &str = "svm_model.json";

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// `metric,value` table.
pub fn metrics_csv(rows: &[(&str, String)]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

pub fn read_metrics(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("metric,value") {
        return Err(Error::format(path, "expected a `metric,value` header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once(',')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format(path, format!("bad metric line `{l}`")))
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Run {
    pub cfg: ExperimentConfig,
}

struct Datasets {
    target_train: Set,
    nontarget_train: Set,
    target_test: Set,
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        let text = serde_json::to_string_pretty(&cfg)?;
        write(&cfg.out_dir.join("config.json"), text + "\n")?;
        Ok(Self { cfg })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.cfg.seed, stage)
    }

    fn rng(&self, stage: &str) -> Rng {
        Rng::new(self.seed(stage))
    }

    fn load(&self) -> Result<Datasets> {
        self.cfg.check_paths()?;
        let d = &self.cfg.data;
        let frame = (self.cfg.image_size[0], self.cfg.image_size[1]);
        let train: Set = data::standardize(&data::load_idx(&d.train_images, &d.train_labels, Split::Train, 0)?, frame)?;
        let test: Set =
            data::standardize(&data::load_idx(&d.test_images, &d.test_labels, Split::Test, TEST_ID_BASE)?, frame)?;
        let (target_train, nontarget_train) = data::split_classes(&train, &self.cfg.target_classes)?;
        let (target_test, _) = data::split_classes(&test, &self.cfg.target_classes)?;
        Ok(Datasets { target_train, nontarget_train, target_test })
    }

    /// A seeded draw of `n` samples (all when `None`) with a validation carve.
    fn draw(&self, set: &Set, n: Option<usize>, stage: &str, carve: bool) -> Result<Set> {
        let n = n.unwrap_or(set.len());
        if n > set.len() {
            return Err(Error::Data(format!("{stage}: asked for {n} images, only {} available", set.len())));
        }
        let mut order: Vec<usize> = (0..set.len()).collect();
        self.rng(&format!("{stage}-draw")).shuffle(&mut order);
        order.truncate(n);
        order.sort_unstable();
        let mut out = set.subset(&order);
        if carve {
            out.assign_validation(self.cfg.validation_fraction, &mut self.rng(&format!("{stage}-validation")))?;
        }
        Ok(out)
    }

    fn target_training(&self, d: &Datasets) -> Result<Set> {
        self.draw(&d.target_train, Some(self.cfg.train_images), "target", true)
    }

    fn target_testing(&self, d: &Datasets) -> Result<Set> {
        self.draw(&d.target_test, self.cfg.test_images, "test", false)
    }

    pub fn pretrain(&self) -> Result<f64> {
        let d = self.load()?;
        let set = self.draw(&d.nontarget_train, self.cfg.pretrain.images, "pretrain", true)?;
        let spec = nn::spec::nist_classifier(set.num_classes())?;
        let mut train = self.cfg.pretrain.train.clone();
        train.seed = self.seed("pretrain");
        log::info!("pretraining on {} non-target images ({} classes)", set.len(), set.num_classes());
        let (params, history) = nn::train_classifier(&spec, &set, &train)?;
        let ck = Checkpoint { kind: "classifier".into(), spec: serde_json::to_value(&spec)?, seed: train.seed, params };
        let bytes = ck.encode();
        let donor = self.cfg.donor_path();
        write(&donor, &bytes)?;
        write(&self.path("pretrain_history.csv"), history.to_csv())?;
        let acc = history.best_val_accuracy.unwrap_or(f64::NAN);
        write(
            &self.path("pretrain_metrics.csv"),
            metrics_csv(&[
                ("images", set.len().to_string()),
                ("epochs", history.epochs.len().to_string()),
                ("best_epoch", history.best_epoch.map_or("none".into(), |e| e.to_string())),
                ("val_accuracy", format!("{acc:.6}")),
                ("checkpoint_sha256", sha256_hex(&bytes)),
            ]),
        )?;
        Ok(acc)
    }

    fn siamese_net(&self) -> Result<SiameseNet<f64>> {
        let mut spec = SiameseSpec::nist_column(nn::spec::DEFAULT_CONV_DROPOUT, nn::spec::DEFAULT_FC_DROPOUT)?;
        spec.fusion = self.cfg.siamese.fusion;
        spec.validate()?;
        let mut rng = self.rng("siamese-init");
        if self.cfg.siamese.scheme == TransferScheme::TConv_TFC {
            return SiameseNet::init(spec, &mut rng);
        }
        let path = self.cfg.donor_path();
        let ck: Checkpoint<f64> = Checkpoint::load(&path)?;
        if ck.kind != "classifier" {
            return Err(Error::format(&path, format!("expected a classifier checkpoint, found `{}`", ck.kind)));
        }
        let donor_spec: NetworkSpec = ck.spec_as()?;
        if !spec.conv_matches(&donor_spec) {
            return Err(Error::Config(format!("donor {} has a different conv stack", path.display())));
        }
        SiameseNet::transplant_conv(&ck.params, spec, &mut rng)
    }

    /// Trains the similarity net and records held-out pair AUCs.
    pub fn train_siamese(&self) -> Result<(f64, f64)> {
        let sc = &self.cfg.siamese;
        let d = self.load()?;
        let pair_set = if sc.scheme.fc_on_target() {
            self.target_training(&d)?
        } else {
            self.draw(&d.nontarget_train, Some(sc.nontarget_images), "nontarget", true)?
        };
        let sampling = PairSampling::default();
        let pairs = sample_pairs(&pair_set, Split::Train, sc.pairs, sampling, &mut self.rng("pairs"))?;
        let val_pairs =
            sample_pairs(&pair_set, Split::Validation, sc.validation_pairs, sampling, &mut self.rng("validation-pairs"))?;
        let mut train = sc.train.clone();
        train.seed = self.seed("siamese");
        log::info!("training {} on {} pairs from {} images", sc.scheme, pairs.len(), pair_set.len());
        let net = self.siamese_net()?;
        let (net, history) = siamese::train_siamese(net, &pair_set, &pairs, &val_pairs, sc.scheme, &train)?;
        net.to_checkpoint(train.seed).save(self.path(SIAMESE))?;
        write(&self.path("siamese_history.csv"), history.to_csv())?;

        let targets = |b: &data::PairBatch| b.pairs.iter().map(|p| p.target).collect::<Vec<u8>>();
        let val_auc = kernel::auc_roc(&siamese::pair_scores(&net, &pair_set, &val_pairs, true)?, &targets(&val_pairs))?;
        let val_acc = siamese::pair_accuracy(&net, &pair_set, &val_pairs)?;
        let test = self.target_testing(&d)?;
        let test_pairs = sample_pairs(&test, Split::Test, sc.test_pairs, sampling, &mut self.rng("test-pairs"))?;
        let test_auc = kernel::auc_roc(&siamese::pair_scores(&net, &test, &test_pairs, true)?, &targets(&test_pairs))?;
        let common = |auc: f64, n_pairs: usize| {
            metrics_csv(&[
                ("scheme", sc.scheme.to_string()),
                ("pair_images", pair_set.len().to_string()),
                ("train_pairs", pairs.len().to_string()),
                ("eval_pairs", n_pairs.to_string()),
                ("epochs", history.epochs.len().to_string()),
                ("auc", format!("{auc:.6}")),
            ])
        };
        write(
            &self.path("kernel_validation.csv"),
            common(val_auc, val_pairs.len()) + &format!("pair_accuracy,{val_acc:.6}\n"),
        )?;
        write(&self.path("kernel_generalization.csv"), common(test_auc, test_pairs.len()))?;
        log::info!("validation pair AUC {val_auc:.4}, target test pair AUC {test_auc:.4}");
        Ok((val_auc, test_auc))
    }

    /// Raw train x train gram and both input orders of the test x train block.
    pub fn gram(&self) -> Result<()> {
        let d = self.load()?;
        let train = self.target_training(&d)?;
        let test = self.target_testing(&d)?;
        let ck = Checkpoint::load(self.path(SIAMESE))?;
        let net = SiameseNet::from_checkpoint(ck)?;
        let mut samples = String::from("sample_id,label,role\n");
        for (set, i) in (0..train.len()).map(|i| (&train, i)).chain((0..test.len()).map(|i| (&test, i))) {
            let _ = writeln!(samples, "{},{},{}", set.id(i), set.original_label(i), set.split(i));
        }
        write(&self.path(SAMPLES), samples)?;
        let train_imgs: Vec<_> = train.images().iter().collect();
        let test_imgs: Vec<_> = test.images().iter().collect();
        log::info!("gram: {} training and {} test images", train.len(), test.len());
        let g = kernel::compute_gram(&net, &train_imgs, train.ids(), &train_imgs, train.ids())?;
        kernel::write_gram(self.path(GRAM_TRAIN_RAW), &g)?;
        let (fwd, rev) = kernel::compute_gram_pair(&net, &test_imgs, test.ids(), &train_imgs, train.ids(), true)?;
        kernel::write_gram(self.path(GRAM_TEST_FWD), &fwd)?;
        kernel::write_gram(self.path(GRAM_TEST_REV), &rev.expect("requested"))?;
        Ok(())
    }

    pub fn postprocess(&self) -> Result<()> {
        let raw: GramMatrix<f64> = kernel::read_gram(self.path(GRAM_TRAIN_RAW))?;
        let fwd = kernel::read_gram(self.path(GRAM_TEST_FWD))?;
        let rev = kernel::read_gram(self.path(GRAM_TEST_REV))?;
        let (k, t) = kernel::postprocess(self.cfg.post, &raw, Some((&fwd, &rev)))?;
        kernel::write_gram(self.path(GRAM_TRAIN), &k)?;
        kernel::write_gram(self.path(GRAM_TEST), &t.expect("test rows given"))?;
        Ok(())
    }

    /// Eigenvalues of the symmetrized training gram.
    pub fn spectrum(&self) -> Result<kernel::SpectrumReport> {
        let raw: GramMatrix<f64> = kernel::read_gram(self.path(GRAM_TRAIN_RAW))?;
        let report = kernel::spectrum_report(&kernel::symmetrize(&raw)?)?;
        write(&self.path("spectrum.csv"), report.to_csv())?;
        write(
            &self.path("spectrum_summary.csv"),
            metrics_csv(&[
                ("size", raw.rows().to_string()),
                ("positive_count", report.positive_count.to_string()),
                ("negative_count", report.negative_count.to_string()),
                ("zero_count", report.zero_count.to_string()),
                ("positive_mass", format!("{:.9}", report.positive_mass)),
                ("negative_mass", format!("{:.9}", report.negative_mass)),
                ("mass_ratio", format!("{:.6}", report.mass_ratio())),
                ("negative_fraction", format!("{:.6}", report.negative_fraction())),
            ]),
        )?;
        Ok(report)
    }

    fn samples(&self) -> Result<BTreeMap<u64, (u32, Split)>> {
        let path = self.path(SAMPLES);
        let text = read(&path)?;
        text.lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| {
                let bad = || Error::format(&path, format!("bad sample line `{l}`"));
                let mut it = l.split(',');
                let id = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let label = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let split = it.next().ok_or_else(bad)?.parse()?;
                Ok((id, (label, split)))
            })
            .collect()
    }

    fn labels_for(&self, ids: &[u64]) -> Result<(Vec<u32>, Vec<bool>)> {
        let samples = self.samples()?;
        let mut labels = Vec::with_capacity(ids.len());
        let mut validation = Vec::with_capacity(ids.len());
        for id in ids {
            let &(l, s) = samples.get(id).ok_or_else(|| Error::Data(format!("sample {id} missing from {SAMPLES}")))?;
            labels.push(l);
            validation.push(s == Split::Validation);
        }
        Ok((labels, validation))
    }

    fn training_gram(&self) -> Result<GramMatrix<f64>> {
        kernel::read_gram(self.path(GRAM_TRAIN))
    }

    /// The validation carve treated as unseen: the fitting block is
    /// post-processed alone and validation rows are processed like test rows.
    fn holdout(&self) -> Result<Holdout> {
        let raw: GramMatrix<f64> = kernel::read_gram(self.path(GRAM_TRAIN_RAW))?;
        let (labels, validation) = self.labels_for(raw.row_ids())?;
        let fit = classify::positions(&validation, false);
        let val = classify::positions(&validation, true);
        if fit.is_empty() || val.is_empty() {
            return Err(Error::Data("the training gram needs both fitting and validation samples".into()));
        }
        let (fit_raw, fwd, rev) = kernel::holdout_blocks(&raw, &fit, &val)?;
        let (k_fit, k_val) = kernel::postprocess(self.cfg.post, &fit_raw, Some((&fwd, &rev)))?;
        Ok(Holdout {
            fit_labels: fit.iter().map(|&i| labels[i]).collect(),
            val_labels: val.iter().map(|&i| labels[i]).collect(),
            k_fit,
            k_val: k_val.expect("validation rows given"),
        })
    }

    /// Chooses C on the validation carve, then fits on every training image.
    pub fn fit_svm(&self) -> Result<OneVsOne> {
        let h = self.holdout()?;
        let smo = self.cfg.svm.smo();
        let sel = select_c_holdout(&h.k_fit, &h.fit_labels, &h.k_val, &h.val_labels, &self.cfg.svm.c_grid, &smo)?;
        let k = self.training_gram()?;
        let (labels, _) = self.labels_for(k.row_ids())?;
        let mut csv = String::from("c,validation_accuracy\n");
        for (c, acc) in &sel.scores {
            let _ = writeln!(csv, "{c},{acc:.6}");
        }
        write(&self.path("c_selection.csv"), csv)?;
        log::info!("selected C = {}", sel.c);
        let model = ovo_fit(&k, &labels, sel.c, &smo)?;
        model.save(self.path(SVM_MODEL))?;
        Ok(model)
    }

    fn confusion(classes: &[u32], predicted: &[u32], truth: &[u32]) -> String {
        let mut out = String::from("true\\predicted");
        for c in classes {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for &t in classes {
            let _ = write!(out, "{t}");
            for &p in classes {
                let n = predicted.iter().zip(truth).filter(|(&a, &b)| a == p && b == t).count();
                let _ = write!(out, ",{n}");
            }
            out.push('\n');
        }
        out
    }

    fn write_predictions(&self, tag: &str, ids: &[u64], predicted: &[u32], truth: &[u32], extra: &[(&str, String)]) -> Result<f64> {
        let acc = classify::accuracy(predicted, truth);
        write(&self.path(&format!("predictions_{tag}.csv")), classify::predictions_csv(ids, predicted, truth))?;
        let mut classes: Vec<u32> = truth.iter().chain(predicted).copied().collect();
        classes.sort_unstable();
        classes.dedup();
        write(&self.path(&format!("confusion_{tag}.csv")), Self::confusion(&classes, predicted, truth))?;
        let mut rows = vec![("accuracy", format!("{acc:.6}")), ("test_images", ids.len().to_string())];
        rows.extend(extra.iter().cloned());
        write(&self.path(&format!("{tag}_metrics.csv")), metrics_csv(&rows))?;
        Ok(acc)
    }

    /// Test accuracy of the fitted SVM, plus the training-gram spectrum.
    pub fn eval(&self) -> Result<f64> {
        let model = OneVsOne::load(self.path(SVM_MODEL))?;
        let t: GramMatrix<f64> = kernel::read_gram(self.path(GRAM_TEST))?;
        let (truth, _) = self.labels_for(t.row_ids())?;
        let predicted = model.predict(&t)?;
        let sv: usize = model.machines.iter().map(|m| m.support_ids.len()).sum();
        let acc = self.write_predictions(
            "svm",
            t.row_ids(),
            &predicted,
            &truth,
            &[
                ("train_images", t.cols().to_string()),
                ("post", self.cfg.post.to_string()),
                ("c", model.c.to_string()),
                ("support_vectors", sv.to_string()),
            ],
        )?;
        self.spectrum()?;
        log::info!("SVM test accuracy {acc:.4}");
        Ok(acc)
    }

    pub fn knn_eval(&self) -> Result<f64> {
        let h = self.holdout()?;
        let sel = select_k_holdout(h.k_fit.row_ids(), &h.fit_labels, &h.k_val, &h.val_labels, &self.cfg.knn.k_grid)?;
        let k = self.training_gram()?;
        let (labels, _) = self.labels_for(k.row_ids())?;
        let mut csv = String::from("k,validation_accuracy\n");
        for (kk, acc) in &sel.scores {
            let _ = writeln!(csv, "{kk},{acc:.6}");
        }
        write(&self.path("k_selection.csv"), csv)?;
        let model = KnnModel::new(sel.k, k.row_ids().to_vec(), labels)?;
        let t: GramMatrix<f64> = kernel::read_gram(self.path(GRAM_TEST))?;
        let (truth, _) = self.labels_for(t.row_ids())?;
        let predicted = knn_predict(&model, &t)?;
        let acc = self.write_predictions(
            "knn",
            t.row_ids(),
            &predicted,
            &truth,
            &[("train_images", t.cols().to_string()), ("post", self.cfg.post.to_string()), ("k", sel.k.to_string())],
        )?;
        log::info!("k-NN test accuracy {acc:.4} (k={})", sel.k);
        Ok(acc)
    }
}

/// Runs `gram`, `postprocess`, `fit-svm`, `eval` and `knn-eval` in order.
pub fn classify_stages(run: &Run) -> Result<(f64, f64)> {
    run.gram()?;
    run.postprocess()?;
    run.fit_svm()?;
    let svm = run.eval()?;
    let knn = run.knn_eval()?;
    Ok((svm, knn))
}
