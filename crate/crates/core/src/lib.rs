pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod ordering;
pub mod par;
pub mod scoring;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
