//! Continual object detection at desk scale: a miniature anchor-free dense
//! detector trained over multi-step class-incremental protocols with
//! importance-weighted regularisation, task-specific dilatable adapters,
//! and old-class pseudo annotation.

pub mod autodiff;
pub mod bbox;
pub mod continual;
pub mod detector;
pub mod dilation;
pub mod error;
pub mod eval;
pub mod optim;
pub mod pseudo;
pub mod runner;
pub mod scenario;
pub mod tensor;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use tensor::{GroupKind, GroupTag, ParameterStore, Tensor};
