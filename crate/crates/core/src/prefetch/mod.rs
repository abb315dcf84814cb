//! Prefetch policies: the expander-side decider and host-side baselines.

pub mod baselines;
pub mod classifier;
pub mod decider;
pub mod features;
pub mod model;
pub mod oracle;
pub mod predictor;
pub mod timing;
pub mod train;
pub mod vocab;
pub mod weights;
pub mod window;

pub use baselines::{BestOffset, TemporalTable};
pub use classifier::{BehaviorClassifier, DecisionTree, CATEGORIES};
pub use decider::{AddressSource, Belief, Decider, Observation, ObservationKind, Plan};
pub use model::{AddressModel, ModelDims};
pub use oracle::OracleSource;
pub use predictor::{AddressPredictor, OnlineConfig, PredictError};
pub use timing::{compute_issue_cycle, TimingError, TimingHistory};
pub use train::{evaluate, train_predictor, TrainConfig, TrainError};
pub use vocab::DeltaVocab;
pub use weights::{Weights, WeightsError};
pub use window::{SlidingWindow, WindowEntry};
