//! Single-agent and colluding-group decision problems.
//!
//! A unit's money follows a birth-death chain on `0..=k_max`. Each round it
//! may spend a dollar (reward `gamma`), earn one if it volunteers (reward
//! `-alpha`), or, for groups, have a request served by a member (reward
//! `gamma - alpha`, no money moves). Self-loops are folded into each
//! Bellman update, so the effective contraction per update is far below the
//! raw per-round discount `delta^(1/n)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{internal_probability, AgentType};

const VI_TOL: f64 = 1e-10;
const VI_MAX_SWEEPS: usize = 1_000_000;
const PI_MAX_ROUNDS: usize = 1_000;
const TIE_TOL: f64 = 1e-12;

/// Per-round event probabilities seen by one agent (or one group member).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRates {
    /// Chosen as requester while someone else can serve the request.
    pub p_s: f64,
    /// Earning a dollar, given the agent or group volunteers.
    pub p_e: f64,
}

impl AgentRates {
    pub fn new(p_s: f64, p_e: f64) -> Self {
        AgentRates { p_s, p_e }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_s", self.p_s), ("p_e", self.p_e)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidRates(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Stationary money of a lone agent with threshold `k` and earn/spend
/// ratio `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentChain {
    pub r: f64,
    pub k: u32,
    pub pi: Vec<f64>,
}

impl AgentChain {
    pub fn new(r: f64, k: u32) -> Self {
        assert!(r >= 0.0, "earn/spend ratio must be non-negative");
        let len = k as usize + 1;
        let weights: Vec<f64> = if r.is_infinite() {
            (0..len)
                .map(|i| if i + 1 == len { 1.0 } else { 0.0 })
                .collect()
        } else if r <= 1.0 {
            (0..len).map(|i| r.powi(i as i32)).collect()
        } else {
            // Weights relative to the top level keep r^k from overflowing.
            let s = 1.0 / r;
            (0..len).map(|i| s.powi((len - 1 - i) as i32)).collect()
        };
        let z: f64 = weights.iter().sum();
        AgentChain {
            r,
            k,
            pi: weights.iter().map(|w| w / z).collect(),
        }
    }

    pub fn from_rates(rates: AgentRates, k: u32) -> Self {
        let r = if rates.p_s == 0.0 {
            if rates.p_e == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            rates.p_e / rates.p_s
        };
        Self::new(r, k)
    }

    /// Long-run fraction of satisfiable requests that are paid for.
    pub fn satisfaction(&self) -> f64 {
        if self.k == 0 {
            0.0
        } else {
            1.0 - self.pi[0]
        }
    }

    /// `p_e (1 - pi_k) - p_s (1 - pi_0)`: zero in steady state.
    pub fn flow_imbalance(&self, rates: AgentRates) -> f64 {
        rates.p_e * (1.0 - self.pi[self.k as usize]) - rates.p_s * (1.0 - self.pi[0])
    }
}

/// Fraction of an agent's satisfiable requests that get satisfied when it
/// earns `r` times as often as it spends and uses threshold `k`.
pub fn satisfaction_fraction(r: f64, k: u32) -> f64 {
    AgentChain::new(r, k).satisfaction()
}

/// A colluding group of `c` same-type agents pooling their money.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupChain {
    pub c: usize,
    pub beta_int: f64,
}

impl GroupChain {
    pub fn new(c: usize, beta: f64) -> Self {
        GroupChain {
            c,
            beta_int: internal_probability(beta, c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpSolution {
    /// Expected discounted utility per money level.
    pub values: Vec<f64>,
    pub volunteers: Vec<bool>,
    /// Whether a request with an internal option is served internally at
    /// each level. Always true for a lone agent.
    pub internal: Vec<bool>,
    pub threshold: u32,
    pub per_round_discount: f64,
    pub cap_binding: bool,
    pub iterations: usize,
}

/// Event probabilities and payoffs of one decision unit.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dynamics {
    pub discount: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Pay a dollar outside (only with money).
    pub spend: f64,
    /// A request that a group member could serve.
    pub internal: f64,
    /// Earn a dollar when volunteering.
    pub earn: f64,
    pub k_max: usize,
}

impl Dynamics {
    pub fn agent(agent: &AgentType, rates: AgentRates, n: usize, k_max: u32) -> Result<Self> {
        agent.validate()?;
        rates.validate()?;
        if rates.p_s + rates.p_e > 1.0 + 1e-12 {
            return Err(Error::InvalidRates(format!(
                "p_s + p_e = {} exceeds 1",
                rates.p_s + rates.p_e
            )));
        }
        Ok(Dynamics {
            discount: agent.per_round_discount(n),
            alpha: agent.alpha,
            gamma: agent.gamma,
            spend: rates.p_s,
            internal: 0.0,
            earn: rates.p_e,
            k_max: k_max as usize,
        })
    }

    /// `rates.p_s` is per member; `rates.p_e` is for the whole group.
    pub fn group(
        group: &GroupChain,
        agent: &AgentType,
        rates: AgentRates,
        n: usize,
        k_max: u32,
    ) -> Result<Self> {
        agent.validate()?;
        rates.validate()?;
        if group.c < 1 {
            return Err(Error::InvalidSpec("group size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&group.beta_int) {
            return Err(Error::InvalidSpec(format!(
                "internal probability {} outside [0, 1)",
                group.beta_int
            )));
        }
        let requests = group.c as f64 * rates.p_s;
        if requests + rates.p_e > 1.0 + 1e-12 {
            return Err(Error::InvalidRates(format!(
                "group event probabilities sum to {}",
                requests + rates.p_e
            )));
        }
        Ok(Dynamics {
            discount: agent.per_round_discount(n),
            alpha: agent.alpha,
            gamma: agent.gamma,
            spend: requests * (1.0 - group.beta_int),
            internal: requests * group.beta_int,
            earn: rates.p_e,
            k_max: k_max as usize,
        })
    }

    /// Value of level `i` under one action, with the self-loop solved out.
    fn q(&self, v: &[f64], i: usize, volunteer: bool, internal: bool) -> f64 {
        let (num, stay) = self.terms(v, i, volunteer, internal);
        num / (1.0 - self.discount * stay)
    }

    fn terms(&self, v: &[f64], i: usize, volunteer: bool, internal: bool) -> (f64, f64) {
        let d = self.discount;
        let mut num = 0.0;
        let mut stay = 1.0;
        if i >= 1 {
            num += self.spend * (self.gamma + d * v[i - 1]);
            stay -= self.spend;
        }
        if self.internal > 0.0 {
            if internal || i == 0 {
                num += self.internal * (self.gamma - self.alpha);
            } else {
                num += self.internal * (self.gamma + d * v[i - 1]);
                stay -= self.internal;
            }
        }
        if volunteer && i < self.k_max {
            num += self.earn * (-self.alpha + d * v[i + 1]);
            stay -= self.earn;
        }
        (num, stay.max(0.0))
    }

    /// Internal service at `i` is preferred unless paying outside is
    /// strictly better. Ties go to internal service.
    fn prefers_internal(&self, v: &[f64], i: usize) -> bool {
        if i == 0 || self.internal == 0.0 {
            return true;
        }
        let inside = self.gamma - self.alpha + self.discount * v[i];
        let outside = self.gamma + self.discount * v[i - 1];
        inside >= outside - TIE_TOL * (1.0 + outside.abs())
    }

    /// Greedy action at `i`. Ties go to not volunteering.
    fn greedy(&self, v: &[f64], i: usize) -> (bool, bool) {
        let internal = self.prefers_internal(v, i);
        if i >= self.k_max {
            return (false, internal);
        }
        let idle = self.q(v, i, false, internal);
        let work = self.q(v, i, true, internal);
        (work > idle + TIE_TOL * (1.0 + idle.abs()), internal)
    }

    /// Exact values of a fixed policy via the tridiagonal system.
    pub fn evaluate(&self, volunteers: &[bool], internal: &[bool]) -> Vec<f64> {
        let len = self.k_max + 1;
        let d = self.discount;
        let mut lower = vec![0.0; len];
        let mut diag = vec![0.0; len];
        let mut upper = vec![0.0; len];
        let mut rhs = vec![0.0; len];
        for i in 0..len {
            let mut down = 0.0;
            let mut reward = 0.0;
            if i >= 1 {
                down += self.spend;
                reward += self.spend * self.gamma;
            }
            if self.internal > 0.0 {
                if internal[i] || i == 0 {
                    reward += self.internal * (self.gamma - self.alpha);
                } else {
                    down += self.internal;
                    reward += self.internal * self.gamma;
                }
            }
            let up = if volunteers[i] && i < self.k_max {
                self.earn
            } else {
                0.0
            };
            reward -= up * self.alpha;
            let stay = (1.0 - down - up).max(0.0);
            lower[i] = -d * down;
            diag[i] = 1.0 - d * stay;
            upper[i] = -d * up;
            rhs[i] = reward;
        }
        thomas(&lower, &diag, &upper, &rhs)
    }

    pub fn solve(&self) -> Result<MdpSolution> {
        let len = self.k_max + 1;
        let mut v = vec![0.0; len];
        let mut iterations = 0;
        while iterations < VI_MAX_SWEEPS {
            iterations += 1;
            let mut change: f64 = 0.0;
            for i in 0..len {
                let internal = self.prefers_internal(&v, i);
                let mut best = self.q(&v, i, false, internal);
                if i < self.k_max {
                    best = best.max(self.q(&v, i, true, internal));
                }
                change = change.max((best - v[i]).abs());
                v[i] = best;
            }
            if change <= VI_TOL {
                break;
            }
        }

        // Policy iteration from the value-iteration policy makes the values
        // exact for the policy that is finally reported.
        let mut policy = self.policy_of(&v);
        for _ in 0..PI_MAX_ROUNDS {
            v = self.evaluate(&policy.0, &policy.1);
            iterations += 1;
            let next = self.policy_of(&v);
            if next == policy {
                break;
            }
            policy = next;
        }
        let (volunteers, internal) = policy;

        let threshold = volunteers.iter().take_while(|&&b| b).count();
        if let Some(level) = volunteers[threshold..].iter().position(|&b| b) {
            return Err(Error::NonThresholdPolicy {
                level: threshold + level,
            });
        }
        Ok(MdpSolution {
            values: v,
            volunteers,
            internal,
            threshold: threshold as u32,
            per_round_discount: self.discount,
            cap_binding: threshold == self.k_max,
            iterations,
        })
    }

    fn policy_of(&self, v: &[f64]) -> (Vec<bool>, Vec<bool>) {
        (0..v.len()).map(|i| self.greedy(v, i)).unzip()
    }

    pub fn threshold_values(&self, k: u32) -> Vec<f64> {
        let len = self.k_max + 1;
        let volunteers: Vec<bool> = (0..len).map(|i| i < k as usize).collect();
        let internal: Vec<bool> = (0..len).map(|i| i <= k as usize).collect();
        self.evaluate(&volunteers, &internal)
    }
}

/// Solves a tridiagonal system; `lower[0]` and `upper[last]` are ignored.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / m;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Optimal volunteering policy for a lone agent facing fixed rates.
pub fn solve_agent_mdp(
    agent: &AgentType,
    rates: AgentRates,
    n: usize,
    k_max: u32,
) -> Result<MdpSolution> {
    Dynamics::agent(agent, rates, n, k_max)?.solve()
}

/// Expected discounted utility at money 0 of threshold `k`.
pub fn utility_of_threshold(
    agent: &AgentType,
    rates: AgentRates,
    n: usize,
    k: u32,
    k_max: u32,
) -> Result<f64> {
    Ok(threshold_values(agent, rates, n, k, k_max)?[0])
}

/// Values at every money level of threshold `k`.
pub fn threshold_values(
    agent: &AgentType,
    rates: AgentRates,
    n: usize,
    k: u32,
    k_max: u32,
) -> Result<Vec<f64>> {
    if k > k_max {
        return Err(Error::InvalidProfile(format!(
            "threshold {k} exceeds cap {k_max}"
        )));
    }
    Ok(Dynamics::agent(agent, rates, n, k_max)?.threshold_values(k))
}

/// Optimal policy of a colluding group. `rates.p_s` is the per-member
/// request probability and `rates.p_e` the probability that the group
/// earns in a round where it volunteers.
pub fn solve_group_mdp(
    group: &GroupChain,
    agent: &AgentType,
    rates: AgentRates,
    n: usize,
    k_max: u32,
) -> Result<MdpSolution> {
    Dynamics::group(group, agent, rates, n, k_max)?.solve()
}

/// Group values of threshold `k`, serving requests internally at or below it.
pub fn group_threshold_values(
    group: &GroupChain,
    agent: &AgentType,
    rates: AgentRates,
    n: usize,
    k: u32,
    k_max: u32,
) -> Result<Vec<f64>> {
    if k > k_max {
        return Err(Error::InvalidProfile(format!(
            "threshold {k} exceeds cap {k_max}"
        )));
    }
    Ok(Dynamics::group(group, agent, rates, n, k_max)?.threshold_values(k))
}

/// Writes `money_level,value,volunteers`.
pub fn write_policy_csv<W: std::io::Write>(sol: &MdpSolution, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["money_level", "value", "volunteers"])?;
    for (i, (&v, &b)) in sol.values.iter().zip(&sol.volunteers).enumerate() {
        w.write_record([
            i.to_string(),
            crate::output::fmt_num(v),
            crate::output::bool_cell(b),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference_agent;

    const N: usize = 10_000;

    #[test]
    fn reference_values() {
        assert!((satisfaction_fraction(1.0, 3) - 0.75).abs() < 1e-15);
        assert!((satisfaction_fraction(2.0, 2) - 6.0 / 7.0).abs() < 1e-15);
        assert!((satisfaction_fraction(0.5, 2) - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(satisfaction_fraction(3.0, 0), 0.0);
        assert_eq!(satisfaction_fraction(0.0, 5), 0.0);
        // r^k overflows for these inputs without the reciprocal form.
        assert!((satisfaction_fraction(1e3, 200) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn closed_form_matches_stable_form() {
        for &r in &[0.1f64, 0.5, 0.9, 1.5, 2.0, 4.9] {
            for k in 1..=20u32 {
                let closed = (r - r.powi(k as i32 + 1)) / (1.0 - r.powi(k as i32 + 1));
                assert!((satisfaction_fraction(r, k) - closed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_flow_balances_on_a_grid() {
        for a in 0..100 {
            for k in 1..=20u32 {
                let p_s = 1e-4;
                let p_e = p_s * (0.05 + a as f64 * 0.05);
                let rates = AgentRates::new(p_s, p_e);
                let chain = AgentChain::from_rates(rates, k);
                assert!((chain.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(chain.flow_imbalance(rates).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn satisfaction_limits_and_monotonicity() {
        for &r in &[0.2, 0.7, 1.0, 1.3, 3.0] {
            let mut prev = 0.0;
            for k in 0..400u32 {
                let s = satisfaction_fraction(r, k);
                assert!(s >= prev - 1e-15);
                prev = s;
            }
            assert!((prev - r.min(1.0)).abs() < 3e-3, "r = {r}: {prev}");
        }
        for k in 1..20 {
            let mut prev = 0.0;
            for j in 0..100 {
                let s = satisfaction_fraction(j as f64 * 0.05, k);
                assert!(s >= prev - 1e-15);
                prev = s;
            }
        }
    }

    #[test]
    fn no_spending_means_no_volunteering() {
        let sol = solve_agent_mdp(&reference_agent(), AgentRates::new(0.0, 1e-4), N, 64).unwrap();
        assert_eq!(sol.threshold, 0);
        assert!(sol.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn free_work_binds_the_cap() {
        let agent = AgentType {
            alpha: 0.0,
            ..reference_agent()
        };
        let sol = solve_agent_mdp(&agent, AgentRates::new(1e-4, 1e-4), N, 64).unwrap();
        assert_eq!(sol.threshold, 64);
        assert!(sol.cap_binding);
    }

    #[test]
    fn zero_threshold_is_worth_nothing() {
        let u = utility_of_threshold(&reference_agent(), AgentRates::new(1e-4, 1e-4), N, 0, 64)
            .unwrap();
        assert_eq!(u, 0.0);
    }

    #[test]
    fn optimum_dominates_every_threshold() {
        let agent = reference_agent();
        for &p_e in &[5e-5, 1e-4, 2e-4, 3e-4] {
            let rates = AgentRates::new(1e-4, p_e);
            let sol = solve_agent_mdp(&agent, rates, N, 64).unwrap();
            let at_k = utility_of_threshold(&agent, rates, N, sol.threshold, 64).unwrap();
            assert!((sol.values[0] - at_k).abs() < 1e-12);
            for k in 0..=64 {
                let u = utility_of_threshold(&agent, rates, N, k, 64).unwrap();
                assert!(u <= sol.values[0] + 1e-12, "k = {k}");
            }
            assert!(sol.values.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }
    }

    #[test]
    fn singleton_group_is_an_agent() {
        let agent = reference_agent();
        let rates = AgentRates::new(1e-4, 1.3e-4);
        let a = solve_agent_mdp(&agent, rates, N, 64).unwrap();
        let g = solve_group_mdp(&GroupChain::new(1, agent.beta), &agent, rates, N, 64).unwrap();
        assert_eq!(a.threshold, g.threshold);
        for (x, y) in a.values.iter().zip(&g.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn group_threshold_is_below_the_sum() {
        let agent = reference_agent();
        let rates = AgentRates::new(1e-4, 1e-4);
        let one = solve_agent_mdp(&agent, rates, N, 64).unwrap();
        let group_rates = AgentRates::new(1e-4, 2e-4);
        let two =
            solve_group_mdp(&GroupChain::new(2, agent.beta), &agent, group_rates, N, 64).unwrap();
        assert!(two.threshold > one.threshold);
        assert!(two.threshold < 2 * one.threshold);
    }

    #[test]
    fn always_internal_makes_money_worthless() {
        let agent = reference_agent();
        let group = GroupChain {
            c: 3,
            beta_int: 1.0 - 1e-13,
        };
        let sol = solve_group_mdp(&group, &agent, AgentRates::new(1e-4, 3e-4), N, 64).unwrap();
        assert_eq!(sol.threshold, 0);
    }

    #[test]
    fn rejects_impossible_rates() {
        let agent = reference_agent();
        assert!(solve_agent_mdp(&agent, AgentRates::new(0.7, 0.7), N, 8).is_err());
        assert!(solve_agent_mdp(&agent, AgentRates::new(-0.1, 0.1), N, 8).is_err());
    }
}
