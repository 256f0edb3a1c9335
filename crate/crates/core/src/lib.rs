pub mod cli;
pub mod diversity;
pub mod ensemble_adapt;
pub mod error;
pub mod inference;
pub mod selection;
pub mod sute;
pub mod synthzoo;
pub mod tensorio;

pub use error::{Error, Result};
