use std::fs;
use std::path::{Path, PathBuf};

use desk_core::classify::{SmoConfig, DEFAULT_C_GRID, DEFAULT_K_GRID};
use desk_core::kernel::PostProcess;
use desk_core::nn::TrainConfig;
use desk_core::siamese::{Fusion, TransferScheme};
use desk_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Non-target training images used; `null` takes all of them.
    pub images: Option<usize>,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { images: None, train: TrainConfig { max_epochs: 15, patience: 2, ..TrainConfig::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiameseConfig {
    pub scheme: TransferScheme,
    pub fusion: Fusion,
    /// Non-target images drawn for pair training under `NConv_NFC`.
    pub nontarget_images: usize,
    pub pairs: usize,
    pub validation_pairs: usize,
    /// Pairs drawn among target test images for the generalization AUC.
    pub test_pairs: usize,
    pub train: TrainConfig,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        Self {
            scheme: TransferScheme::NConv_TFC,
            fusion: Fusion::Concat,
            nontarget_images: 3000,
            pairs: 10_000,
            validation_pairs: 2_000,
            test_pairs: 2_000,
            train: TrainConfig { max_epochs: 20, patience: 3, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c_grid: Vec<f64>,
    pub tolerance: f64,
    pub max_iterations: Option<usize>,
    /// Fit on grams that are not Mercer kernels (post-processing `none`).
    pub unsafe_raw_gram: bool,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c_grid: DEFAULT_C_GRID.to_vec(), tolerance: 1e-3, max_iterations: None, unsafe_raw_gram: false }
    }
}

impl SvmConfig {
    pub fn smo(&self) -> SmoConfig {
        SmoConfig { tolerance: self.tolerance, max_iterations: self.max_iterations, allow_non_mercer: self.unsafe_raw_gram }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k_grid: Vec<usize>,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k_grid: DEFAULT_K_GRID.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub data: DataPaths,
    #[serde(default = "default_targets")]
    pub target_classes: Vec<u32>,
    #[serde(default = "default_frame")]
    pub image_size: [usize; 2],
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    /// Target training images for the kernel and the classifiers.
    #[serde(default = "default_train_images")]
    pub train_images: usize,
    /// Target test images; `null` takes all of them.
    #[serde(default)]
    pub test_images: Option<usize>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub siamese: SiameseConfig,
    #[serde(default)]
    pub post: PostProcess,
    #[serde(default)]
    pub svm: SvmConfig,
    #[serde(default)]
    pub knn: KnnConfig,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Donor classifier checkpoint; `null` means `donor.ckpt` in `out_dir`.
    #[serde(default)]
    pub donor: Option<PathBuf>,
}

fn default_targets() -> Vec<u32> {
    vec![5, 6, 7, 8, 9]
}

fn default_frame() -> [usize; 2] {
    [32, 32]
}

fn default_validation() -> f64 {
    0.2
}

fn default_train_images() -> usize {
    500
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/desk")
}

impl ExperimentConfig {
    pub fn example() -> Self {
        let dir = PathBuf::from("data/mnist-desk");
        Self {
            version: SCHEMA_VERSION,
            seed: 0,
            data: DataPaths {
                train_images: dir.join("train-images-idx3-ubyte.gz"),
                train_labels: dir.join("train-labels-idx1-ubyte.gz"),
                test_images: dir.join("t10k-images-idx3-ubyte.gz"),
                test_labels: dir.join("t10k-labels-idx1-ubyte.gz"),
            },
            target_classes: default_targets(),
            image_size: default_frame(),
            validation_fraction: default_validation(),
            train_images: default_train_images(),
            test_images: None,
            pretrain: PretrainConfig::default(),
            siamese: SiameseConfig::default(),
            post: PostProcess::Psd,
            svm: SvmConfig::default(),
            knn: KnnConfig::default(),
            out_dir: default_out(),
            donor: None,
        }
    }

    /// Reads a config; relative data and output paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train_images,
            &mut cfg.data.train_labels,
            &mut cfg.data.test_images,
            &mut cfg.data.test_labels,
            &mut cfg.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(d) = cfg.donor.as_mut().filter(|d| d.is_relative()) {
            *d = base.join(&*d);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Config(format!("config version {} unsupported (expected {SCHEMA_VERSION})", self.version)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must be in (0, 1)".into()));
        }
        if self.train_images < 2 || self.test_images == Some(0) || self.siamese.nontarget_images < 2 {
            return Err(Error::Config("image counts must be positive".into()));
        }
        for (name, n) in [
            ("pairs", self.siamese.pairs),
            ("validation_pairs", self.siamese.validation_pairs),
            ("test_pairs", self.siamese.test_pairs),
        ] {
            if n == 0 || n % 2 == 1 {
                return Err(Error::Config(format!("siamese.{name} must be even and positive, got {n}")));
            }
        }
        if self.svm.c_grid.is_empty() || self.svm.c_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Config("svm.c_grid must hold positive values".into()));
        }
        if self.knn.k_grid.is_empty() || self.knn.k_grid.contains(&0) {
            return Err(Error::Config("knn.k_grid must hold positive values".into()));
        }
        self.pretrain.train.validate()?;
        self.siamese.train.validate()?;
        Ok(())
    }

    pub fn donor_path(&self) -> PathBuf {
        self.donor.clone().unwrap_or_else(|| self.out_dir.join("donor.ckpt"))
    }

    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.data.train_images, &self.data.train_labels, &self.data.test_images, &self.data.test_labels] {
            if !p.exists() {
                return Err(Error::Data(format!("data file not found: {}", p.display())));
            }
        }
        Ok(())
    }
}
