//! End-to-end neural mixture-model clustering.
//!
//! A network's final-layer neurons, normalized over the batch and squeezed
//! through the near-linear region of a sigmoid, approximate per-cluster
//! probability density functions. Training alternates batch-wise between an
//! EM-style likelihood step and (for images) a KL consistency step against
//! augmented twins. The crate bundles the differentiable tensor engine, the
//! mixture losses, architecture builders, data loading/augmentation,
//! classical baselines and evaluation metrics behind one library surface.

pub mod adam;
pub mod arch;
pub mod data;
pub mod error;
pub mod layers;
pub mod mixture;
pub mod model;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use arch::{parse_arch, ArchSpec};
pub use error::{Error, Result};
pub use model::{build_model, Model};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
