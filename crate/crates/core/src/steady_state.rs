//! Reference distribution `q`, the relative-entropy minimizer `M*`, and the
//! monotonicity law relating thresholds to the mass at 0 and at threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MoneyDistribution, StrategyProfile, SystemSpec};
use crate::population::Population;

const LOG_LAMBDA_LO: f64 = -27.631_021_115_928_547; // ln 1e-12
const LOG_LAMBDA_HI: f64 = 27.631_021_115_928_547;
const MAX_BISECTIONS: usize = 200;
/// Target for `|mean(M*) - m|`. Bisection stops earlier only if the bracket
/// collapses to adjacent floats.
const RESIDUAL_TOL: f64 = 1e-13;

/// Outcome of the scalar search for the money multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSolve {
    pub lambda: f64,
    /// Achieved mean money minus the target.
    pub residual: f64,
    pub iterations: usize,
}

/// The entropy program: per-class likelihood weights, class masses,
/// thresholds and the mean money per unit.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyProblem {
    pub omegas: Vec<f64>,
    pub fractions: Vec<f64>,
    pub thresholds: Vec<u32>,
    pub mean_money: f64,
}

impl EntropyProblem {
    pub fn from_spec(spec: &SystemSpec, profile: &StrategyProfile) -> Result<Self> {
        spec.validate()?;
        profile.validate(spec.types.len(), u32::MAX)?;
        Ok(EntropyProblem {
            omegas: spec.omegas(),
            fractions: spec.fractions.clone(),
            thresholds: profile.thresholds.clone(),
            mean_money: spec.m,
        })
    }

    /// Largest mean money any distribution consistent with the thresholds
    /// can hold. Types that cannot earn are pinned at zero.
    pub fn capacity(&self) -> f64 {
        self.fractions
            .iter()
            .zip(&self.thresholds)
            .zip(&self.omegas)
            .map(|((f, &k), &w)| if w > 0.0 { f * k as f64 } else { 0.0 })
            .sum()
    }

    /// `q^t_i = omega_t^i / Z` over every type and level up to its threshold.
    pub fn q(&self) -> Result<MoneyDistribution> {
        if self.omegas.iter().all(|&w| w == 0.0) {
            return Err(Error::DegenerateReference);
        }
        let logs: Vec<Vec<f64>> = self
            .omegas
            .iter()
            .zip(&self.thresholds)
            .map(|(&w, &k)| level_log_weights(w.ln(), k))
            .collect();
        let max = logs
            .iter()
            .flatten()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().flatten().map(|l| (l - max).exp()).sum();
        let log_z = max + z.ln();
        Ok(MoneyDistribution {
            mass: logs
                .into_iter()
                .map(|levels| levels.into_iter().map(|l| (l - log_z).exp()).collect())
                .collect(),
        })
    }

    /// `M*` for a given `ln(lambda)`: per type, `f_t` times the distribution
    /// proportional to `(lambda * omega_t)^i` on `0..=k_t`.
    pub fn distribution_at(&self, log_lambda: f64) -> MoneyDistribution {
        let mass = self
            .omegas
            .iter()
            .zip(&self.thresholds)
            .zip(&self.fractions)
            .map(|((&w, &k), &f)| {
                let logs = level_log_weights(w.ln() + log_lambda, k);
                let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
                logs.iter().map(|l| f * (l - max).exp() / z).collect()
            })
            .collect();
        MoneyDistribution { mass }
    }

    pub fn mean_at(&self, log_lambda: f64) -> f64 {
        self.distribution_at(log_lambda).mean_money()
    }

    /// Minimizes `D(M || q)` subject to per-type masses and the mean-money
    /// constraint.
    pub fn solve(&self) -> Result<(MoneyDistribution, LambdaSolve)> {
        let m = self.mean_money;
        if m == 0.0 {
            let mass = self
                .fractions
                .iter()
                .zip(&self.thresholds)
                .map(|(&f, &k)| {
                    let mut levels = vec![0.0; k as usize + 1];
                    levels[0] = f;
                    levels
                })
                .collect();
            let solve = LambdaSolve {
                lambda: 0.0,
                residual: 0.0,
                iterations: 0,
            };
            return Ok((MoneyDistribution { mass }, solve));
        }
        let capacity = self.capacity();
        if !(m < capacity) {
            return Err(Error::Infeasible { mean: m, capacity });
        }

        let (mut lo, mut hi) = (LOG_LAMBDA_LO, LOG_LAMBDA_HI);
        // Tiny omegas (or means hugging the capacity) can push lambda out of
        // the default bracket.
        while self.mean_at(lo) > m {
            lo -= (hi - lo).max(1.0);
        }
        while self.mean_at(hi) < m {
            hi += (hi - lo).max(1.0);
        }
        let mut iterations = 0;
        let mut mid = 0.5 * (lo + hi);
        let mut residual = self.mean_at(mid) - m;
        while iterations < MAX_BISECTIONS && residual.abs() > RESIDUAL_TOL * m.max(1.0) {
            iterations += 1;
            if residual < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            let next = 0.5 * (lo + hi);
            if next == lo || next == hi {
                break;
            }
            mid = next;
            residual = self.mean_at(mid) - m;
        }
        let solve = LambdaSolve {
            lambda: mid.exp(),
            residual,
            iterations,
        };
        Ok((self.distribution_at(mid), solve))
    }
}

// `i * log_base` for i in 0..=k, with 0 * ln 0 = 0 so omega = 0 keeps only level 0.
fn level_log_weights(log_base: f64, k: u32) -> Vec<f64> {
    (0..=k)
        .map(|i| {
            if i == 0 {
                0.0
            } else if log_base == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                i as f64 * log_base
            }
        })
        .collect()
}

pub fn compute_q(spec: &SystemSpec, profile: &StrategyProfile) -> Result<MoneyDistribution> {
    EntropyProblem::from_spec(spec, profile)?.q()
}

pub fn solve_mstar(
    spec: &SystemSpec,
    profile: &StrategyProfile,
) -> Result<(MoneyDistribution, LambdaSolve)> {
    EntropyProblem::from_spec(spec, profile)?.solve()
}

pub fn solve_population(
    pop: &Population,
    profile: &StrategyProfile,
) -> Result<(MoneyDistribution, LambdaSolve)> {
    profile.validate(pop.len(), u32::MAX)?;
    pop.entropy_problem(profile).solve()
}

/// `D(p || q)` in nats. Levels missing from either side count as zero mass;
/// `p > 0` where `q = 0` gives infinity.
pub fn relative_entropy(p: &MoneyDistribution, q: &MoneyDistribution) -> f64 {
    let mut d = 0.0;
    for (t, levels) in p.mass.iter().enumerate() {
        for (i, &pi) in levels.iter().enumerate() {
            if pi <= 0.0 {
                continue;
            }
            let qi = q.mass.get(t).and_then(|l| l.get(i)).copied().unwrap_or(0.0);
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            d += pi * (pi / qi).ln();
        }
    }
    d
}

/// Changes in the mass at zero and the mass at threshold when moving from
/// `profile` to `raised`: `(M0' - M0, Mk' - Mk)`.
pub fn monotonicity_check(
    spec: &SystemSpec,
    profile: &StrategyProfile,
    raised: &StrategyProfile,
) -> Result<(f64, f64)> {
    if !raised.dominates(profile) {
        return Err(Error::InvalidProfile(
            "raised profile must be entrywise at least the base profile".into(),
        ));
    }
    let (base, _) = solve_mstar(spec, profile)?;
    let (up, _) = solve_mstar(spec, raised)?;
    Ok((
        up.zero_mass() - base.zero_mass(),
        up.threshold_mass(raised) - base.threshold_mass(profile),
    ))
}

/// Writes `type_index,money_level,mass`.
pub fn write_distribution_csv<W: std::io::Write>(dist: &MoneyDistribution, out: W) -> Result<()> {
    dist.write_csv(out)
}
