//! The multi-branch network, its objective and its training loop.

pub mod config;
pub mod loss;
pub mod network;
pub mod objective;
pub mod sampler;
pub mod train;

pub use config::{FeaturePath, RmglConfig};
pub use loss::{batch_hard_triplet_loss, cross_entropy_loss, triplet_loss, LossValue, Margin, Reduction};
pub use network::{build_model, build_model_with_arch, BundleGrad, FeatureBundle, ForwardCache, Head, HeadKey, Model, ParamGroup};
pub use objective::{total_loss, zero_grad, LossBreakdown};
pub use sampler::{sample_pk_batch, TripletBatch};
pub use train::{train, Sgd, TrainLog, TrainSchedule};
