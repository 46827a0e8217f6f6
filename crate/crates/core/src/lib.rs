//! Speech-driven 3D facial animation: feature extraction, a parametric head
//! model, a conditioned encoder-decoder regressor, training, and animation.

pub mod anim;
pub mod audio;
pub mod data;
pub mod error;
pub mod head;
pub mod io_util;
pub mod mat;
pub mod mesh;
pub mod net;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Result, VocaError};
pub use mat::Mat;
pub use scalar::Scalar;

/// Single-precision aliases for the usual concrete instantiation. The
/// generic types stay available for double-precision work such as gradient
/// checking.
pub type MatF = mat::Mat<f32>;
pub type FeatureSequenceF = audio::FeatureSequence<f32>;
pub type WindowSequenceF = audio::WindowSequence<f32>;
pub type MeshF = mesh::Mesh<f32>;
pub type MeshSequenceF = mesh::MeshSequence<f32>;
pub type HeadModelF = head::HeadModel<f32>;
pub type PoseF = head::Pose<f32>;
pub type ConditionF = net::Condition<f32>;
pub type NetworkParamsF = net::NetworkParams<f32>;
pub type PCABasisF = net::PCABasis<f32>;
pub type DatasetF = data::Dataset<f32>;
pub type TrainSampleF = train::TrainSample<f32>;
pub type StyleWeightsF = anim::StyleWeights<f32>;
pub type LipMetricSeriesF = anim::LipMetricSeries<f32>;
