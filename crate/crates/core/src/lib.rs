//! Amortized proposals for importance sampling and sequential Monte Carlo in
//! directed graphical models.
//!
//! A model's dependency graph is inverted into factors that generate latents
//! given observations ([`inverse`]). Each factor is approximated by a masked
//! autoregressive network ([`made`]) trained offline on ancestral samples
//! ([`train`]), and the trained networks serve as proposals in [`smc`].

pub mod cli;
pub mod graph;
pub mod inverse;
pub mod made;
pub mod models;
pub mod rng;
pub mod smc;
pub mod train;

pub use graph::{Assignment, Distribution, DistributionSpec, Family, GraphError, GraphModel, Role, VariableId};
pub use inverse::{InverseFactor, InverseModel};
pub use made::{MaskedNetwork, NetworkShape};
pub use models::{build_example, Example, ModelError};
pub use smc::{ParticleSystem, ResamplingKind, ResamplingScheme, SmcError};
pub use train::{TrainArtifact, TrainConfig, TrainError};
