pub mod error;
pub mod graph;
pub mod harness;
pub mod kge;
pub mod metapath;
pub mod model;
pub mod numeric;
pub mod robust;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
