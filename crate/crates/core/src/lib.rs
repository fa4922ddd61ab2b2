pub mod checkpoint;
pub mod config;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod hcnn;
mod init;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod probe;
pub mod retrieval;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod train;
pub mod transfer;

pub use config::{Config, LossWeights, ModelConfig, ModelKind, TrainConfig};
pub use error::{CheckpointError, Error, Result};
pub use exec::Exec;
pub use metrics::{compute_metrics, MetricsReport, RankingGroup};
pub use model::{Model, MtHcnn};
pub use text::{ConversationExample, Domain, Vocab};
