//! Layers, losses and SGD training for feed-forward convolutional networks.

pub mod checkpoint;
pub mod forward;
pub mod gradcheck;
pub mod loss;
pub mod params;
pub mod sgd;
pub mod spec;
pub mod train;

pub use checkpoint::Checkpoint;
pub use forward::{backward, forward, infer, sigmoid, Forward, ForwardCache, Mode};
pub use gradcheck::{gradient_check, GradCheck};
pub use loss::{batch_loss, hinge_loss, predictions, LossKind};
pub use params::{LayerParams, NetworkParams, ParamStore};
pub use sgd::Momentum;
pub use spec::{LayerSpec, NetworkSpec};
pub use train::{train_classifier, EarlyStopping, EpochRecord, TrainConfig, TrainHistory};
