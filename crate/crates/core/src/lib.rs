//! Scrip-system economics.
//!
//! Agents pay one unit of scrip to have a request served and earn one unit
//! by serving someone else. This crate computes the steady-state money
//! distribution of a population playing threshold strategies, the best
//! response of a single agent (or colluding group) to population rates,
//! mean-field equilibria with crash detection, and a round-level simulator
//! used to check all of the above.

// Negated float comparisons are how inputs reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod equilibrium;
pub mod error;
pub mod exact;
pub mod exec;
pub mod experiments;
pub mod mdp;
pub mod model;
pub mod output;
pub mod population;
pub mod sim;
pub mod steady_state;

pub use equilibrium::{
    find_equilibrium, find_group_equilibrium, mean_field_rates, social_welfare, EquilibriumOptions,
    EquilibriumResult, Status,
};
pub use error::{Error, Result};
pub use exec::Exec;
pub use mdp::{
    satisfaction_fraction, solve_agent_mdp, solve_group_mdp, utility_of_threshold, AgentRates,
    MdpSolution,
};
pub use model::{
    apply_sybils, internal_probability, make_collusion_spec, validate_spec, AgentType,
    CollusionSpec, MoneyDistribution, RateEstimates, StrategyProfile, SystemSpec, DEFAULT_K_MAX,
};
pub use population::{Population, UnitClass};
pub use sim::{run_rounds, run_with_groups, SimConfig, SimReport};
pub use steady_state::{compute_q, relative_entropy, solve_mstar, LambdaSolve};
