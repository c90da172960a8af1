//! Learned screening for fast top-k softmax inference.
//!
//! A screening model routes each context vector to one of `r` clusters and
//! scores only that cluster's candidate labels, turning an `O(L·d)` softmax
//! into `O((r + L̄)·d)`. Clusters are trained end to end with a Gumbel
//! straight-through relaxation; candidate sets are chosen by a greedy
//! knapsack under an average-size budget.

pub mod bench;
pub mod error;
pub mod io;
pub mod kmeans;
pub mod knapsack;
pub mod rng;
pub mod screen;
pub mod softmax;
pub mod svd;
pub mod synth;
pub mod tensor;
pub mod train;

pub use bench::{BenchConfig, BenchReport, PerplexityReport};
pub use error::{Error, Result};
pub use rng::Rng;
pub use screen::{CandidateSet, ScreenedPrediction, ScreeningModel};
pub use softmax::{ContextSet, Labels, SoftmaxLayer, TopKResult};
pub use synth::{SynthData, SynthSpec};
pub use tensor::{DenseMatrix, DenseVector};
pub use train::{TrainConfig, TrainMode, Trained};
