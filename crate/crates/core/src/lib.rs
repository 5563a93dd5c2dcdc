//! Open-vocabulary detection mechanics at desk scale.
//!
//! The crate covers the pieces that make a one-stage detector open-vocabulary:
//! text embeddings as an offline vocabulary ([`text`]), vision-language fusion
//! ([`pan`]), a contrastive detection head ([`head`]), region-text training
//! losses with analytic gradients ([`loss`], [`grad`]), deployment-time folding
//! of text into convolution weights ([`reparam`]) and the caption
//! pseudo-labeling pipeline ([`autolabel`]). [`detect`] runs inference end to end
//! and [`cli`] backs the `ovw` binary.

pub mod autolabel;
pub mod bbox;
pub mod cli;
pub mod detect;
pub mod error;
pub mod grad;
pub mod head;
pub mod io;
pub mod loss;
pub mod pan;
pub mod reparam;
pub mod rng;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::Tensor;
