//! Multi-agent best-of-N sampling under a compute budget.
//!
//! A pool of generator agents and a reward scorer produce `N` samples per
//! prompt. Five coordination strategies share one sample registry and one
//! budget ledger:
//!
//! - [`samplers::random_single`]: one agent, independent samples.
//! - [`samplers::parallel_ensemble`]: `N / K` independent samples per agent.
//! - [`samplers::sequential_refine`]: `N / K` chains, each agent refining its predecessor.
//! - [`samplers::mixture_of_agents`]: layered aggregation over all `K` outputs of the previous layer.
//! - [`toa::run_toa`]: reward-guided Monte Carlo tree search over alternating
//!   model/response layers, choosing for every step which agent generates
//!   and which earlier response it refines.
//!
//! Everything runs offline against the synthetic [`testbed`] landscape, or
//! against chat-completions and scalar reward endpoints over HTTP.

pub mod analysis;
pub mod backends;
pub mod compute;
pub mod config;
pub mod domain;
pub mod engine;
pub mod io;
pub mod reward;
pub mod samplers;
pub mod seed;
pub mod testbed;
pub mod toa;

mod error;

pub use config::{validate_config, RunConfig, ValidatedRunConfig};
pub use domain::{AgentSpec, DecodingParams, Sample, SampleSet, Strategy};
pub use engine::{Orchestra, Prompt, StrategyOutput};
pub use error::{Error, Result};
