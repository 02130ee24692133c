pub mod audio;
pub mod config;
pub mod corpus;
pub mod error;
pub mod lip2ind;
pub mod lips;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod trainer;
pub mod vc;

pub use config::AnalysisConfig;
pub use error::CoreError;
