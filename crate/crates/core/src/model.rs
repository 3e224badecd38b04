//! Domain types for a scrip economy: agent types, populations, threshold
//! profiles, money distributions and the sybil / collusion rewrites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Global cap on thresholds. Results report when the cap binds.
pub const DEFAULT_K_MAX: u32 = 64;

/// Tolerance used when checking that `f_t * n` and `m * n` are integers.
const INTEGRALITY_TOL: f64 = 1e-9;

/// Behavioral type of a standard agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentType {
    /// Cost of satisfying a request.
    pub alpha: f64,
    /// Probability of being able to satisfy a given request.
    pub beta: f64,
    /// Utility of having a request satisfied.
    pub gamma: f64,
    /// Discount factor per unit of time.
    pub delta: f64,
    /// Relative request rate.
    pub rho: f64,
    /// Relative likelihood of being chosen among volunteers.
    pub chi: f64,
}

impl AgentType {
    pub fn validate(&self) -> Result<()> {
        let AgentType {
            alpha,
            beta,
            gamma,
            delta,
            rho,
            chi,
        } = *self;
        let all = [alpha, beta, gamma, delta, rho, chi];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidType("parameters must be finite".into()));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidType(format!("beta = {beta} outside [0, 1]")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidType(format!(
                "delta = {delta} outside (0, 1)"
            )));
        }
        if rho <= 0.0 {
            return Err(Error::InvalidType(format!("rho = {rho} must be positive")));
        }
        if chi <= 0.0 {
            return Err(Error::InvalidType(format!("chi = {chi} must be positive")));
        }
        if alpha < 0.0 {
            return Err(Error::InvalidType(format!(
                "alpha = {alpha} must be non-negative"
            )));
        }
        if gamma <= alpha {
            return Err(Error::InvalidType(format!(
                "gamma = {gamma} must exceed alpha = {alpha}"
            )));
        }
        Ok(())
    }

    /// Likelihood weight `beta * chi / rho` of holding a dollar.
    pub fn omega(&self) -> f64 {
        self.beta * self.chi / self.rho
    }

    /// Discount applied per round when rounds are `1/n` time units apart.
    pub fn per_round_discount(&self, n: usize) -> f64 {
        self.delta.powf(1.0 / n as f64)
    }
}

/// A population `(T, f, n, m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub types: Vec<AgentType>,
    pub fractions: Vec<f64>,
    pub n: usize,
    pub m: f64,
}

impl SystemSpec {
    pub fn single(agent: AgentType, n: usize, m: f64) -> Self {
        SystemSpec {
            types: vec![agent],
            fractions: vec![1.0],
            n,
            m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::InvalidSpec("at least one type is required".into()));
        }
        if self.types.len() != self.fractions.len() {
            return Err(Error::InvalidSpec(format!(
                "{} types but {} fractions",
                self.types.len(),
                self.fractions.len()
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidSpec("n must be positive".into()));
        }
        for (t, agent) in self.types.iter().enumerate() {
            agent
                .validate()
                .map_err(|e| Error::InvalidSpec(format!("type {t}: {e}")))?;
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!("fractions sum to {sum}, not 1")));
        }
        for (t, &f) in self.fractions.iter().enumerate() {
            let agents = f * self.n as f64;
            if !(f > 0.0)
                || (agents - agents.round()).abs() > INTEGRALITY_TOL
                || agents.round() < 1.0
            {
                return Err(Error::InvalidSpec(format!(
                    "type {t}: f * n = {agents} is not a positive integer"
                )));
            }
        }
        let money = self.m * self.n as f64;
        if !(self.m >= 0.0) || (money - money.round()).abs() > INTEGRALITY_TOL * money.max(1.0) {
            return Err(Error::InvalidSpec(format!(
                "m * n = {money} is not a non-negative integer"
            )));
        }
        Ok(())
    }

    /// Agent count per type. Assumes a validated spec.
    pub fn type_counts(&self) -> Vec<usize> {
        self.fractions
            .iter()
            .map(|f| (f * self.n as f64).round() as usize)
            .collect()
    }

    /// Total scrip `m * n`. Assumes a validated spec.
    pub fn total_money(&self) -> u64 {
        (self.m * self.n as f64).round() as u64
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.types.iter().map(AgentType::omega).collect()
    }

    pub fn max_gamma(&self) -> f64 {
        self.types.iter().map(|t| t.gamma).fold(0.0, f64::max)
    }

    /// Per-agent type index, in type order.
    pub fn agent_types(&self) -> Vec<usize> {
        self.type_counts()
            .into_iter()
            .enumerate()
            .flat_map(|(t, c)| std::iter::repeat_n(t, c))
            .collect()
    }
}

/// Returns the spec iff every population invariant holds.
pub fn validate_spec(spec: SystemSpec) -> Result<SystemSpec> {
    spec.validate()?;
    Ok(spec)
}

/// One threshold per type: volunteer iff money < k.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyProfile {
    pub thresholds: Vec<u32>,
}

impl StrategyProfile {
    pub fn new(thresholds: Vec<u32>) -> Self {
        StrategyProfile { thresholds }
    }

    pub fn uniform(types: usize, k: u32) -> Self {
        StrategyProfile {
            thresholds: vec![k; types],
        }
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn is_trivial(&self) -> bool {
        self.thresholds.iter().all(|&k| k == 0)
    }

    pub fn validate(&self, types: usize, k_max: u32) -> Result<()> {
        if self.thresholds.len() != types {
            return Err(Error::InvalidProfile(format!(
                "{} thresholds for {} types",
                self.thresholds.len(),
                types
            )));
        }
        if let Some(k) = self.thresholds.iter().find(|&&k| k > k_max) {
            return Err(Error::InvalidProfile(format!(
                "threshold {k} exceeds cap {k_max}"
            )));
        }
        Ok(())
    }

    /// True when every entry of `self` is at least the matching entry of `other`.
    pub fn dominates(&self, other: &StrategyProfile) -> bool {
        self.thresholds.len() == other.thresholds.len()
            && self
                .thresholds
                .iter()
                .zip(&other.thresholds)
                .all(|(a, b)| a >= b)
    }
}

/// `mass[t][i]`: fraction of the whole population that is of type `t` and
/// holds `i` dollars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoneyDistribution {
    pub mass: Vec<Vec<f64>>,
}

impl MoneyDistribution {
    pub fn type_mass(&self, t: usize) -> f64 {
        self.mass[t].iter().sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().flatten().sum()
    }

    pub fn mean_money(&self) -> f64 {
        self.mass
            .iter()
            .map(|levels| {
                levels
                    .iter()
                    .enumerate()
                    .map(|(i, d)| i as f64 * d)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Mass with no money, summed over types.
    pub fn zero_mass(&self) -> f64 {
        self.mass.iter().map(|levels| levels[0]).sum()
    }

    /// Mass at each type's threshold, summed over types.
    pub fn threshold_mass(&self, profile: &StrategyProfile) -> f64 {
        self.mass
            .iter()
            .zip(&profile.thresholds)
            .map(|(levels, &k)| levels.get(k as usize).copied().unwrap_or(0.0))
            .sum()
    }

    /// Euclidean distance over the union of supports.
    pub fn l2_distance(&self, other: &MoneyDistribution) -> f64 {
        let types = self.mass.len().max(other.mass.len());
        let mut ss = 0.0;
        for t in 0..types {
            let a = self.mass.get(t).map(Vec::as_slice).unwrap_or(&[]);
            let b = other.mass.get(t).map(Vec::as_slice).unwrap_or(&[]);
            for i in 0..a.len().max(b.len()) {
                let d = a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0);
                ss += d * d;
            }
        }
        ss.sqrt()
    }

    /// Writes `type_index,money_level,mass` rows, type-major.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["type_index", "money_level", "mass"])?;
        for (t, levels) in self.mass.iter().enumerate() {
            for (i, &d) in levels.iter().enumerate() {
                w.write_record([t.to_string(), i.to_string(), crate::output::fmt_num(d)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-type event probabilities per round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimates {
    /// Chosen to request while some other agent is willing and able.
    pub p_s: Vec<f64>,
    /// Earning a dollar in a round given the agent (or group) volunteers.
    pub p_e: Vec<f64>,
    /// No willing volunteer weight at all although paying requests exist.
    pub starved: bool,
}

impl RateEstimates {
    pub fn zeros(types: usize) -> Self {
        RateEstimates {
            p_s: vec![0.0; types],
            p_e: vec![0.0; types],
            starved: false,
        }
    }
}

/// Gives `target_fraction` of all agents, taken from type `type_index`,
/// `s` sybils each. The sybil sub-population becomes a new type appended at
/// the end with `chi * (1 + s)`; everything else is unchanged.
pub fn apply_sybils(
    spec: &SystemSpec,
    type_index: usize,
    target_fraction: f64,
    s: u32,
) -> Result<SystemSpec> {
    spec.validate()?;
    let Some(&base) = spec.types.get(type_index) else {
        return Err(Error::InvalidSpec(format!(
            "no type with index {type_index}"
        )));
    };
    let f_t = spec.fractions[type_index];
    let sybil_agents = target_fraction * spec.n as f64;
    if !(target_fraction > 0.0)
        || target_fraction > f_t + 1e-12
        || (sybil_agents - sybil_agents.round()).abs() > INTEGRALITY_TOL
    {
        return Err(Error::InvalidSpec(format!(
            "sybil sub-population {sybil_agents} is not an integral part of type {type_index}"
        )));
    }
    let sybil_count = sybil_agents.round() as usize;
    let base_count = (f_t * spec.n as f64).round() as usize - sybil_count;

    let mut types = Vec::with_capacity(spec.types.len() + 1);
    let mut fractions = Vec::with_capacity(spec.types.len() + 1);
    for (t, (&agent, &f)) in spec.types.iter().zip(&spec.fractions).enumerate() {
        if t == type_index {
            if base_count > 0 {
                types.push(agent);
                fractions.push(base_count as f64 / spec.n as f64);
            }
        } else {
            types.push(agent);
            fractions.push(f);
        }
    }
    types.push(AgentType {
        chi: base.chi * (1.0 + s as f64),
        ..base
    });
    fractions.push(sybil_count as f64 / spec.n as f64);
    renormalize(&mut fractions);
    validate_spec(SystemSpec {
        types,
        fractions,
        n: spec.n,
        m: spec.m,
    })
}

/// Merges types with identical parameters, keeping first-seen order.
pub fn merge_equal_types(spec: &SystemSpec) -> SystemSpec {
    let mut types: Vec<AgentType> = Vec::new();
    let mut fractions: Vec<f64> = Vec::new();
    for (agent, &f) in spec.types.iter().zip(&spec.fractions) {
        match types.iter().position(|t| t == agent) {
            Some(i) => fractions[i] += f,
            None => {
                types.push(*agent);
                fractions.push(f);
            }
        }
    }
    SystemSpec {
        types,
        fractions,
        n: spec.n,
        m: spec.m,
    }
}

// Fractions built from integer counts can drift by an ulp.
fn renormalize(fractions: &mut [f64]) {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        for f in fractions.iter_mut() {
            *f /= sum;
        }
    }
}

/// Probability that at least one of the other `c - 1` group members can
/// satisfy a member's request.
pub fn internal_probability(beta: f64, group_size: usize) -> f64 {
    if group_size <= 1 {
        0.0
    } else {
        1.0 - (1.0 - beta).powi(group_size as i32 - 1)
    }
}

/// A single-type population in which some agents pool their money in
/// groups of `group_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollusionSpec {
    pub agent: AgentType,
    pub group_size: usize,
    pub groups: usize,
    /// Agents acting alone, including any remainder that did not fill a group.
    pub independents: usize,
    /// Colluders that could not fill a whole group and act alone.
    pub remainder: usize,
    pub internal_prob: f64,
    pub n: usize,
    pub m: f64,
}

impl CollusionSpec {
    pub fn total_money(&self) -> u64 {
        (self.m * self.n as f64).round() as u64
    }

    pub fn colluders(&self) -> usize {
        self.groups * self.group_size
    }
}

/// Groups `colluding_fraction` of a single-type population into groups of
/// `group_size`.
pub fn make_collusion_spec(
    spec: &SystemSpec,
    group_size: usize,
    colluding_fraction: f64,
) -> Result<CollusionSpec> {
    spec.validate()?;
    if spec.types.len() != 1 {
        return Err(Error::InvalidSpec(
            "collusion requires a single base type".into(),
        ));
    }
    if group_size < 1 {
        return Err(Error::InvalidSpec("group size must be at least 1".into()));
    }
    if group_size > spec.n {
        return Err(Error::InvalidSpec(format!(
            "group size {group_size} exceeds the {} agents of the type",
            spec.n
        )));
    }
    let colluders = colluding_fraction * spec.n as f64;
    if !(0.0..=1.0).contains(&colluding_fraction)
        || (colluders - colluders.round()).abs() > INTEGRALITY_TOL
    {
        return Err(Error::InvalidSpec(format!(
            "colluding population {colluders} is not an integer"
        )));
    }
    let colluders = colluders.round() as usize;
    let groups = colluders / group_size;
    let remainder = colluders - groups * group_size;
    let agent = spec.types[0];
    Ok(CollusionSpec {
        agent,
        group_size,
        groups,
        independents: spec.n - groups * group_size,
        remainder,
        internal_prob: internal_probability(agent.beta, group_size),
        n: spec.n,
        m: spec.m,
    })
}

#[cfg(test)]
pub(crate) use tests::reference_agent;
