//! Knowledge-graph augmented conversational recommendation with
//! dialogue-conditioned knowledge-tree prompts.

pub mod align;
pub mod autograd;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod gradcheck;
pub mod kg;
pub mod ktree;
pub mod model;
pub mod optim;
pub mod params;
pub mod reference;
pub mod selftest;
pub mod tokenizer;
pub mod train;
pub mod transformer;
pub mod user_pref;

pub use error::{Error, Result};
