//! Minimal differentiable substrate: convolution, batch normalisation,
//! linear heads and SGD with momentum. Gradients are written by hand.
//!
//! Feature maps travel through the backbone in channel-major layout
//! `(C, N, H, W)` so that convolutions reduce to a single matrix product over
//! an im2col matrix. Public entry points take and return the conventional
//! `(N, C, H, W)` layout.

pub mod backbone;
pub mod batchnorm;
pub mod head;
pub mod ops;
pub mod optim;
pub mod params;

pub use backbone::{BackboneSpec, FeatureExtractor, ForwardCache, Mode, StageSpec};
pub use head::{ClassifierHead, HeadRole};
pub use optim::{MultiStepLr, Sgd};
pub use params::{checksum, Checksum, ParamVisitor};
