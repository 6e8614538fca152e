pub mod audio;
pub mod autograd;
pub mod bias;
pub mod checkpoint;
pub mod config;
mod conv;
pub mod corpus;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod features;
mod gemm;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod presets;
pub mod prune;
pub mod synth;
pub mod tensor;
pub mod train;

pub use audio::AudioClip;
pub use autograd::{Gradients, Tape, Var};
pub use bias::{Affine, BiasTransform};
pub use degrade::{DegradationSpec, OracleQuality};
pub use error::{Error, Result};
pub use features::FeatureTensor;
pub use model::{HeadSpec, QualityModel, StudentConfig};
pub use tensor::{Param, ParamId, ParamSet, Tensor};
