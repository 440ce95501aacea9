pub mod archive;
pub mod assembly;
pub mod attacks;
pub mod backbone;
pub mod batch;
pub mod checkpoint;
pub mod cli;
pub mod complexity;
pub mod data;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod spectral;
pub mod sr;
pub mod training;

pub use batch::ImageBatch;
pub use error::{Error, Result};
pub use model::{ArchitectureDescriptor, Classifier};
