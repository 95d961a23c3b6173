//! Training-free noisy-label cleaning: surrogate scoring, clean-sample
//! selection, transition-matrix and class-prior estimation, the NABM loss,
//! a linear-head trainer and a synthetic noise lab.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod noise;
pub mod priors;
pub mod scorer;
pub mod selection;
pub mod trainer;

pub use data::{Dataset, LabelSpace, Sample, ScoreMatrix};
pub use error::{Error, Result};
pub use losses::MarginConfig;
pub use priors::{ClassPrior, TransitionMatrix};
pub use selection::{Criterion, SelectionMask};
pub use trainer::{LinearClassifier, TrainConfig, TrainReport};
