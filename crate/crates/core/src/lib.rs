//! Language-aware encoder (LAE) toolkit for bilingual and code-switched
//! sequence recognition with CTC.
pub mod config;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod ngram;
pub mod nnet;
pub mod sim;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{Architecture, Encoded, LaeModel, ModelConfig};
pub use vocab::{Lang, Tag, Vocabulary};
