//! Learned-group-convolution segmentation of cardiac cine MRI.
//!
//! The crate covers the whole path from a cine volume to clinical indices:
//! heart localization ([`roi`]), a condense-block encoder/decoder whose
//! convolutions prune themselves during training ([`lg_conv`], [`net`]),
//! the weighted cross-entropy + Dice objective ([`loss`]), Simpson's-rule
//! volumes ([`clinical`]) and evaluation metrics ([`metrics`]). Everything
//! numeric runs on the small tensor/tape engine in [`tensor`]; training,
//! phantoms and data handling live in [`pipeline`].

pub mod checkpoint;
pub mod clinical;
pub mod error;
pub mod lg_conv;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod roi;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor, Var};
