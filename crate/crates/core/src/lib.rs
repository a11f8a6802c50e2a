//! Graph-based semi-supervised classification and sequential active learning
//! over precomputed feature embeddings.
//!
//! The pipeline: build a self-tuning k-NN similarity graph ([`graph`]),
//! compute the bottom of its Laplacian spectrum ([`spectral`]), classify with
//! Laplace learning ([`ssl`]), and pick query points with acquisition
//! functions driven by a spectrally truncated Gaussian Regression covariance
//! ([`active`]). [`session`] composes these into a persistent, journaled
//! labeling loop; [`sim`] runs oracle-driven experiments on top of it.

pub mod active;
pub mod data;
pub mod error;
pub mod graph;
pub mod session;
pub mod sim;
pub mod solver;
pub mod sparse;
pub mod spectral;
pub mod ssl;

pub use active::{AcquisitionKind, CovarianceState, QueryRecord};
pub use data::{FeatureFormat, FeatureMatrix, LabelFile, SarImagePair, ThreeChannelImage};
pub use error::{Error, ErrorClass, Result};
pub use graph::{GraphConfig, Kernel, LaplacianKind, Metric, SimilarityGraph};
pub use session::{ActiveSession, LabelSource, SessionConfig, SessionSetup, Split};
pub use sim::{AccuracyCurve, ExperimentConfig, SynthKind, SynthSpec};
pub use spectral::SpectralData;
pub use ssl::{LabelState, NodeFunction, Prediction};
