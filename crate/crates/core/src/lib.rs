pub mod bundle;
pub mod dataset;
pub mod ddpm;
pub mod env;
pub mod eval;
pub mod error;
pub mod expert;
pub mod filter;
pub mod net;
pub mod plant;
pub mod rollout;
pub mod seeds;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{EpisodeOutcome, Observation, Termination, Wrench};
