//! Exact stationary distributions for tiny systems.
//!
//! States are full allocations of scrip to individual agents. The product
//! form `w_x = prod_i omega_i^{x_i}` is compared against the one-round
//! transition matrix built directly from the round protocol.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::model::{AgentType, StrategyProfile, SystemSpec};

pub const MAX_AGENTS: usize = 8;
pub const MAX_STATES: usize = 1_000_000;

/// Per-agent view of a small system.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactSystem {
    pub agents: Vec<AgentType>,
    pub caps: Vec<u32>,
    pub money: u32,
}

/// Row-sparse stochastic matrix; each row is sorted by column.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map(|p| self.rows[i][p].1)
            .unwrap_or(0.0)
    }

    /// `pi * P`.
    pub fn left_mul(&self, pi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; pi.len()];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, p) in row {
                out[j] += pi[i] * p;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactStationary {
    pub states: Vec<Vec<u32>>,
    pub probs: Vec<f64>,
}

impl ExactStationary {
    pub fn prob_of(&self, state: &[u32]) -> Option<f64> {
        self.states
            .iter()
            .position(|s| s == state)
            .map(|i| self.probs[i])
    }
}

impl ExactSystem {
    pub fn from_spec(spec: &SystemSpec, profile: &StrategyProfile) -> Result<Self> {
        spec.validate()?;
        profile.validate(spec.types.len(), u32::MAX)?;
        if spec.n > MAX_AGENTS {
            return Err(Error::StateSpaceTooLarge(format!(
                "{} agents; exact enumeration supports at most {MAX_AGENTS}",
                spec.n
            )));
        }
        let types = spec.agent_types();
        let money = u32::try_from(spec.total_money())
            .map_err(|_| Error::StateSpaceTooLarge("total money overflows u32".into()))?;
        Ok(ExactSystem {
            agents: types.iter().map(|&t| spec.types[t]).collect(),
            caps: types.iter().map(|&t| profile.thresholds[t]).collect(),
            money,
        })
    }

    fn check(&self) -> Result<()> {
        if self.money > 0 {
            if let Some(i) = self.agents.iter().position(|a| a.beta == 0.0) {
                return Err(Error::NonErgodic(format!(
                    "agent {i} can never work, so money it holds never moves back"
                )));
            }
        }
        let capacity: u64 = self.caps.iter().map(|&k| k as u64).sum();
        if self.money as u64 > capacity {
            return Err(Error::Infeasible {
                mean: self.money as f64 / self.agents.len() as f64,
                capacity: capacity as f64 / self.agents.len() as f64,
            });
        }
        Ok(())
    }

    /// All allocations with `x_i <= k_i` summing to the money supply, in
    /// lexicographic order.
    pub fn states(&self) -> Result<Vec<Vec<u32>>> {
        self.check()?;
        let n = self.agents.len();
        // Capacity of the suffix starting at each agent, for pruning.
        let mut tail = vec![0u64; n + 1];
        for i in (0..n).rev() {
            tail[i] = tail[i + 1] + self.caps[i] as u64;
        }
        let mut out = Vec::new();
        let mut cur = vec![0u32; n];
        self.enumerate(0, self.money, &tail, &mut cur, &mut out)?;
        Ok(out)
    }

    fn enumerate(
        &self,
        i: usize,
        left: u32,
        tail: &[u64],
        cur: &mut Vec<u32>,
        out: &mut Vec<Vec<u32>>,
    ) -> Result<()> {
        if i == cur.len() {
            if left == 0 {
                if out.len() == MAX_STATES {
                    return Err(Error::StateSpaceTooLarge(format!(
                        "more than {MAX_STATES} states"
                    )));
                }
                out.push(cur.clone());
            }
            return Ok(());
        }
        let lo = (left as u64).saturating_sub(tail[i + 1]) as u32;
        let hi = left.min(self.caps[i]);
        for x in lo..=hi {
            cur[i] = x;
            self.enumerate(i + 1, left - x, tail, cur, out)?;
        }
        cur[i] = 0;
        Ok(())
    }

    pub fn weight(&self, state: &[u32]) -> f64 {
        state
            .iter()
            .zip(&self.agents)
            .map(|(&x, a)| a.omega().powi(x as i32))
            .product()
    }

    /// `pi_x = w_x / Z`.
    pub fn stationary(&self) -> Result<ExactStationary> {
        let states = self.states()?;
        let weights: Vec<f64> = states.iter().map(|s| self.weight(s)).collect();
        let z: f64 = weights.iter().sum();
        Ok(ExactStationary {
            probs: weights.iter().map(|w| w / z).collect(),
            states,
        })
    }

    /// One round of the protocol: pick a requester by `rho`; if it has
    /// money, every other willing agent is independently able with
    /// probability `beta`, and one able volunteer is picked by `chi`.
    pub fn transition_matrix(&self, states: &[Vec<u32>]) -> SparseMatrix {
        let index: HashMap<&[u32], usize> = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_slice(), i))
            .collect();
        let n = self.agents.len();
        let total_rho: f64 = self.agents.iter().map(|a| a.rho).sum();
        let rows = states
            .iter()
            .enumerate()
            .map(|(from, x)| {
                let mut row: BTreeMap<usize, f64> = BTreeMap::new();
                for req in 0..n {
                    let p_req = self.agents[req].rho / total_rho;
                    if x[req] == 0 {
                        *row.entry(from).or_default() += p_req;
                        continue;
                    }
                    let willing: Vec<usize> = (0..n)
                        .filter(|&j| j != req && x[j] < self.caps[j])
                        .collect();
                    for mask in 0u32..(1 << willing.len()) {
                        let mut p_mask = p_req;
                        let mut weight = 0.0;
                        for (b, &j) in willing.iter().enumerate() {
                            let beta = self.agents[j].beta;
                            if mask & (1 << b) != 0 {
                                p_mask *= beta;
                                weight += self.agents[j].chi;
                            } else {
                                p_mask *= 1.0 - beta;
                            }
                        }
                        if p_mask == 0.0 {
                            continue;
                        }
                        if mask == 0 {
                            *row.entry(from).or_default() += p_mask;
                            continue;
                        }
                        for (b, &j) in willing.iter().enumerate() {
                            if mask & (1 << b) == 0 {
                                continue;
                            }
                            let mut y = x.clone();
                            y[req] -= 1;
                            y[j] += 1;
                            let to = index[y.as_slice()];
                            *row.entry(to).or_default() += p_mask * self.agents[j].chi / weight;
                        }
                    }
                }
                row.into_iter().collect()
            })
            .collect();
        SparseMatrix { rows }
    }
}

pub fn exact_stationary(spec: &SystemSpec, profile: &StrategyProfile) -> Result<ExactStationary> {
    ExactSystem::from_spec(spec, profile)?.stationary()
}

/// Stationary vector by power iteration on the lazy chain `(I + P) / 2`,
/// which has the same fixed point and cannot oscillate.
pub fn power_iteration(p: &SparseMatrix, tol: f64, max_iter: usize) -> (Vec<f64>, usize) {
    let len = p.len();
    let mut pi = vec![1.0 / len as f64; len];
    for it in 1..=max_iter {
        let step = p.left_mul(&pi);
        let next: Vec<f64> = pi.iter().zip(&step).map(|(a, b)| 0.5 * (a + b)).collect();
        let sum: f64 = next.iter().sum();
        let next: Vec<f64> = next.iter().map(|v| v / sum).collect();
        let change: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if change <= tol {
            return (pi, it);
        }
    }
    (pi, max_iter)
}

/// Largest `|pi_x P_xy - pi_y P_yx|` over distinct state pairs.
pub fn detailed_balance_residual(pi: &[f64], p: &SparseMatrix) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, row) in p.rows.iter().enumerate() {
        for &(y, pxy) in row {
            if y != x {
                worst = worst.max((pi[x] * pxy - pi[y] * p.get(y, x)).abs());
            }
        }
    }
    worst
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
