pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gru;
pub mod hier;
pub mod loss;
pub mod readout;
pub mod session;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};

pub use baselines::{fit_item_knn, fit_ppop, KnnModel, PopModel};
pub use checkpoint::{train_model, Checkpoint, Model, ModelConfig, ModelKind};
pub use corpus::{Corpus, Session, UserHistory, Vocab};
pub use eval::{evaluate_model, EvalConfig, Evaluation, MetricsReport, Recommender};
pub use hier::{HrnnConfig, HrnnModel, UserGradMode, Variant};
pub use loss::LossKind;
pub use session::{EpochStats, SessionRnn, TrainConfig};
pub use tensor::{Matrix, Rng};
