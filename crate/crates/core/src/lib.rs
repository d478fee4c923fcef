pub mod cli;
pub mod datamodel;
pub mod error;
pub mod harness;
pub mod inference;
pub mod infotheory;
pub mod io;
pub mod model;
pub mod oracle;
pub mod structure;
pub mod training;

pub use error::{DbmError, Result};
