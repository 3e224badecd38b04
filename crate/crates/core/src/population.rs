//! Populations of decision units.
//!
//! A unit is either a single agent or a colluding group that pools its
//! money. Units of one class share a type, a size and a threshold, so the
//! steady state, the mean-field rates and the simulator can all treat plain
//! type populations and collusive ones the same way.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CollusionSpec, StrategyProfile, SystemSpec};
use crate::steady_state::EntropyProblem;
use crate::AgentType;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitClass {
    pub label: String,
    pub agent: AgentType,
    /// Agents per unit.
    pub members: usize,
    /// Number of units in the class.
    pub units: usize,
    /// Probability a member's request can be served inside the unit.
    pub internal: f64,
}

impl UnitClass {
    pub fn agents(&self) -> usize {
        self.members * self.units
    }

    /// Likelihood weight of a unit holding a dollar: earning scales with
    /// `members * beta * chi`, paying outside with `members * rho * (1 - internal)`.
    pub fn omega(&self) -> f64 {
        self.agent.omega() / (1.0 - self.internal)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub classes: Vec<UnitClass>,
    /// Total number of agents; sets the time step `1/n`.
    pub n: usize,
    pub total_money: u64,
}

impl Population {
    /// One class of single-agent units per type, in type order.
    pub fn from_spec(spec: &SystemSpec) -> Result<Self> {
        spec.validate()?;
        let classes = spec
            .types
            .iter()
            .zip(spec.type_counts())
            .enumerate()
            .map(|(t, (&agent, units))| UnitClass {
                label: format!("type{t}"),
                agent,
                members: 1,
                units,
                internal: 0.0,
            })
            .collect();
        Ok(Population {
            classes,
            n: spec.n,
            total_money: spec.total_money(),
        })
    }

    /// Independents first (if any), then groups (if any).
    pub fn from_collusion(spec: &CollusionSpec) -> Result<Self> {
        if spec.internal_prob >= 1.0 {
            return Err(Error::InvalidSpec(
                "groups that always serve themselves never use scrip".into(),
            ));
        }
        let mut classes = Vec::with_capacity(2);
        if spec.independents > 0 {
            classes.push(UnitClass {
                label: "independent".into(),
                agent: spec.agent,
                members: 1,
                units: spec.independents,
                internal: 0.0,
            });
        }
        if spec.groups > 0 {
            classes.push(UnitClass {
                label: "group".into(),
                agent: spec.agent,
                members: spec.group_size,
                units: spec.groups,
                internal: spec.internal_prob,
            });
        }
        Ok(Population {
            classes,
            n: spec.n,
            total_money: spec.total_money(),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn total_units(&self) -> usize {
        self.classes.iter().map(|c| c.units).sum()
    }

    /// Fraction of units in each class. These are the per-class masses of
    /// the money distribution.
    pub fn unit_fractions(&self) -> Vec<f64> {
        let total = self.total_units() as f64;
        self.classes
            .iter()
            .map(|c| c.units as f64 / total)
            .collect()
    }

    pub fn money_per_unit(&self) -> f64 {
        self.total_money as f64 / self.total_units() as f64
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.classes.iter().map(UnitClass::omega).collect()
    }

    pub fn max_gamma(&self) -> f64 {
        self.classes
            .iter()
            .map(|c| c.agent.gamma)
            .fold(0.0, f64::max)
    }

    pub fn entropy_problem(&self, profile: &StrategyProfile) -> EntropyProblem {
        EntropyProblem {
            omegas: self.omegas(),
            fractions: self.unit_fractions(),
            thresholds: profile.thresholds.clone(),
            mean_money: self.money_per_unit(),
        }
    }
}
