//! Deterministic discrete-event simulator of an enterprise overlay
//! fabric.
//!
//! The fabric separates endpoint identity (overlay addresses inside
//! 24-bit virtual networks, tagged with 16-bit groups) from location
//! (underlay locators of edge routers). A centralized routing server
//! answers location queries on demand and a policy server authenticates
//! endpoints and distributes group rules; edge routers cache routes
//! reactively with a default route toward full-table border routers. A
//! proactive route-reflector control plane is included as the
//! comparison baseline for mobility experiments.
//!
//! Scenarios are TOML files (see [`scenario`]); runs are a pure function
//! of (scenario, seed) and export CSV metrics (see [`export`]).

pub mod border;
pub mod edge;
pub mod effects;
pub mod export;
pub mod model;
pub mod policy_server;
pub mod proactive;
pub mod routing_server;
pub mod scenario;
pub mod sim;
mod trie;

pub use scenario::{Scenario, ScenarioError, ValidationIssue};
pub use sim::{run_scenario, Metrics, SimError, World};
