//! Gaussian splatting with per-view tone-curve enhancement.
//!
//! A scene of anisotropic Gaussians is trained jointly with a per-view color
//! matrix, a shared 256-entry tone curve, and two small attention networks
//! that predict a per-view curve bias and curve-shape prior. The curves turn
//! badly exposed inputs into pseudo-enhanced targets; each Gaussian learns an
//! affine color adjustment that reproduces those targets, and only the
//! adjusted colors are used for novel views.

pub mod colorspace;
pub mod error;
pub mod exec;
pub mod generators;
pub mod img;
pub mod instrument;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod refine;
pub mod render;
pub mod scene;
pub mod tonecurve;

pub use error::{Error, Result};
pub use img::Image;
