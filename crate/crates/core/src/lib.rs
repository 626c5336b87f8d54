//! Source-free semi-supervised domain adaptation by mutual enhancement of
//! label propagation and entropy minimisation.
//!
//! A source-pretrained network (encoder, bottleneck, classifier) is adapted
//! to a target domain from a few labeled target rows and many unlabeled
//! ones. The classifier stays frozen; encoder and bottleneck are trained
//! with labeled cross-entropy, propagated pseudo labels, entropy, virtual
//! adversarial and diversity terms. Propagation seeds are augmented with the
//! lowest-uncertainty unlabeled sample per predicted class.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod propagation;
pub mod trainer;
pub mod uncertainty;

pub use config::{Ablation, AdaptConfig};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{init_model, Activation, Group, ModelParams};
pub use trainer::{adapt, evaluate, init_and_pretrain, pretrain_source, TargetTask, TrainReport};
