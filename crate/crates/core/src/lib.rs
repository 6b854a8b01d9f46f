//! Closed-loop transcription of a linear discriminative representation (LDR)
//! memory: rate-reduction objectives, a constrained minimax trainer over an
//! encoder/decoder pair, subspace prototype memory, nearest-subspace
//! classification, and weakly supervised review cycles.
//!
//! Module map:
//! - [`linalg`] — dense matrices, Cholesky log-det, SPD solve, Jacobi eigen
//! - [`rate`] — coding rate R(Z), rate reduction ΔR, pairwise ΔR, gradients
//! - [`network`] — encoder/decoder layers with explicit backprop and Adam
//! - [`memory`] — prototype sampling, subspace models, the prototype store
//! - [`trainer`] — joint and constrained minimax loops, review cycles
//! - [`evalkit`] — nearest-subspace classifier, accuracy metrics, affinity
//! - [`dataio`] — IDX/CIFAR parsers, synthetic subspace data, PGM/PPM export
//! - [`gradcheck`] — finite-difference suites for every analytic gradient

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod linalg;
pub mod memory;
pub mod network;
pub mod rate;
pub mod rng;
pub mod trainer;

pub use dataio::{LabeledImages, Task, TaskStream};
pub use error::{CoreError, Result};
pub use evalkit::{EvalOutcome, MetricsRecord};
pub use linalg::{Matrix, SpectralDecomposition};
pub use memory::{ClassMemory, DimRule, PrototypeStore, SubspaceModel};
pub use network::{AdamHyper, AdamState, LayerSpec, NetworkParams, Shape};
pub use rate::{ClassPartition, RateConfig};
pub use rng::{RngState, RunRng};
pub use trainer::{LossWeights, StepReport, TrainConfig};
