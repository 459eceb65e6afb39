//! Permutable anisotropic convolution (PAI-Conv) for point clouds.
//!
//! Each point's K nearest neighbors are softly permuted onto a fixed set of
//! kernel directions (a Fibonacci lattice on the unit sphere) with
//! dot-product attention followed by sparsemax. A shared anisotropic filter
//! is then applied to the resampled neighborhood, exactly like a regular
//! convolution on a grid.
//!
//! Module map:
//!
//! - [`numkit`]: dense matrices, ELU, sparsemax/softmax, seeded RNG
//! - [`lattice`]: kernel point sets
//! - [`neighbors`]: KNN tables and random downsampling
//! - [`paiconv`]: the operator, forward and backward, with ablation variants
//! - [`netcls`]: classification network and cross-entropy
//! - [`train`]: SGD with momentum, cosine schedule, metrics, ablations
//! - [`dataio`]: synthetic shapes, OFF/XYZ files, normalization, augmentation
//! - [`checkpoint`]: model files
//! - [`check`]: the self-verification property suite

pub mod check;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod lattice;
pub mod neighbors;
pub mod netcls;
pub mod numkit;
pub mod paiconv;
pub mod train;

pub use error::{Error, Result};
pub use lattice::KernelLattice;
pub use neighbors::{NeighborIndex, PointCloud, SampleMap};
pub use netcls::{ClassifierConfig, ClassifierState, Pooling};
pub use numkit::{Matrix, Rng, Stream};
pub use paiconv::{PaiConvLayer, PermutationTensor, Variant};
pub use train::{Metrics, TrainConfig};
