//! Differentiable 4D gaussian splatting with neighbor-aware deformation.

pub mod deformnet;
pub mod diffcore;
pub mod error;
pub mod encoders;
pub mod gaussians;
pub mod gradcheck;
pub mod imageio;
pub mod linalg;
pub mod nn;
pub mod rasterizer;
pub mod scalar;
pub mod synthdata;
pub mod training;

pub use diffcore::{Array, Tape, Var};
pub use error::{Error, Result};
pub use gaussians::{Camera, CloudVars, GaussianCloud};
pub use scalar::Scalar;

pub type Array32 = Array<f32>;
pub type Array64 = Array<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Cloud32 = GaussianCloud<f32>;
pub type Cloud64 = GaussianCloud<f64>;
pub type Camera32 = Camera<f32>;
pub type Camera64 = Camera<f64>;
