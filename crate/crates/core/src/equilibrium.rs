//! Mean-field rates, best-response iteration over threshold profiles,
//! crash detection and welfare accounting.
//!
//! Every function works on a [`Population`] of decision units, so plain
//! type populations and populations with colluding groups share one code
//! path. For plain populations a class is a type.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mdp::{AgentRates, Dynamics, GroupChain, MdpSolution};
use crate::model::{
    CollusionSpec, MoneyDistribution, RateEstimates, StrategyProfile, SystemSpec, DEFAULT_K_MAX,
};
use crate::population::Population;
use crate::steady_state::solve_population;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquilibriumOptions {
    /// Largest utility gain from deviating that still counts as converged.
    /// Defaults to `1e-4 * max gamma`.
    pub epsilon: Option<f64>,
    pub max_iter: usize,
    pub k_max: u32,
    pub exec: Exec,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        EquilibriumOptions {
            epsilon: None,
            max_iter: 200,
            k_max: DEFAULT_K_MAX,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    Crash,
    MaxIter,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Converged => "converged",
            Status::Crash => "crash",
            Status::MaxIter => "max_iter",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub status: Status,
    pub profile: StrategyProfile,
    /// Absent when the profile admits no steady state (a crash with money).
    pub mstar: Option<MoneyDistribution>,
    pub lambda: Option<f64>,
    pub rates: RateEstimates,
    /// Utility per unit time summed over the whole population.
    pub welfare_rate: f64,
    /// Per-class discounted utility times the class's agent count.
    pub discounted_welfare: f64,
    /// Expected discounted utility per agent of each class, averaged over
    /// the steady-state money distribution.
    pub per_type_utility: Vec<f64>,
    /// Largest per-class utility gain from a unilateral threshold change.
    pub epsilon: f64,
    pub iterations: usize,
    pub cap_binding: bool,
    pub damped: bool,
    /// Terminal profile of the search started from all zeros.
    pub lower_profile: Option<StrategyProfile>,
    pub multiple_equilibria: bool,
    /// The two profiles the search alternated between, for `max_iter`.
    pub last_profiles: Option<[StrategyProfile; 2]>,
}

/// One best-response pass from a given profile.
#[derive(Clone, Debug)]
pub struct BestResponse {
    pub profile: StrategyProfile,
    pub mstar: MoneyDistribution,
    pub lambda: f64,
    pub rates: RateEstimates,
    pub solutions: Vec<MdpSolution>,
    /// Per-agent utility of the current thresholds, per class.
    pub utility: Vec<f64>,
    /// Per-agent utility gain available from best responding, per class.
    pub gaps: Vec<f64>,
}

impl BestResponse {
    pub fn next_profile(&self) -> StrategyProfile {
        StrategyProfile::new(self.solutions.iter().map(|s| s.threshold).collect())
    }

    pub fn max_gap(&self) -> f64 {
        self.gaps.iter().cloned().fold(0.0, f64::max)
    }
}

/// Mean-field rates for a plain population.
pub fn mean_field_rates(
    spec: &SystemSpec,
    profile: &StrategyProfile,
    mstar: &MoneyDistribution,
) -> Result<RateEstimates> {
    population_rates(&Population::from_spec(spec)?, profile, mstar)
}

/// Per-class rates implied by a steady state.
///
/// `p_s` is per member: picked as requester while at least one eligible
/// agent outside the requester's unit is willing and able (Poisson
/// approximation over the expected able count). `p_e` is per unit: the
/// chance some member is picked to work, given the unit volunteers, using
/// the expected selection weight of everyone else.
pub fn population_rates(
    pop: &Population,
    profile: &StrategyProfile,
    mstar: &MoneyDistribution,
) -> Result<RateEstimates> {
    profile.validate(pop.len(), u32::MAX)?;
    if mstar.mass.len() != pop.len() {
        return Err(Error::InvalidProfile(format!(
            "distribution has {} classes, population has {}",
            mstar.mass.len(),
            pop.len()
        )));
    }
    let fractions = pop.unit_fractions();
    let mut request_weight = 0.0;
    let mut paying = 0.0;
    let mut volunteer_weight = 0.0;
    let mut able = 0.0;
    for ((class, levels), (&f, &k)) in pop
        .classes
        .iter()
        .zip(&mstar.mass)
        .zip(fractions.iter().zip(&profile.thresholds))
    {
        let agents = class.agents() as f64;
        let broke = levels[0] / f;
        let full = levels.get(k as usize).copied().unwrap_or(0.0) / f;
        let willing = if k == 0 { 0.0 } else { (1.0 - full).max(0.0) };
        request_weight += agents * class.agent.rho;
        paying += agents * class.agent.rho * (1.0 - class.internal) * (1.0 - broke).max(0.0);
        volunteer_weight += agents * class.agent.beta * class.agent.chi * willing;
        able += agents * class.agent.beta * willing;
    }
    let p_pay = paying / request_weight;
    let mut rates = RateEstimates::zeros(pop.len());
    for (c, class) in pop.classes.iter().enumerate() {
        let a = &class.agent;
        let members = class.members as f64;
        let own = a.beta * a.chi;
        rates.p_e[c] = p_pay * members * own / (a.chi + (volunteer_weight - own).max(0.0));
        let others_able = (able - members * a.beta).max(0.0);
        rates.p_s[c] = a.rho / request_weight * (1.0 - (-others_able).exp());
    }
    rates.starved = volunteer_weight == 0.0 && p_pay > 0.0;
    Ok(rates)
}

fn class_dynamics(
    pop: &Population,
    c: usize,
    rates: &RateEstimates,
    k_max: u32,
) -> Result<Dynamics> {
    let class = &pop.classes[c];
    let group = GroupChain {
        c: class.members,
        beta_int: class.internal,
    };
    Dynamics::group(
        &group,
        &class.agent,
        AgentRates::new(rates.p_s[c], rates.p_e[c].min(1.0)),
        pop.n,
        k_max,
    )
}

/// Mass-weighted average of level values within class `c`, per agent.
fn class_utility(pop: &Population, mstar: &MoneyDistribution, c: usize, values: &[f64]) -> f64 {
    let levels = &mstar.mass[c];
    let mass: f64 = levels.iter().sum();
    if mass == 0.0 {
        return 0.0;
    }
    let total: f64 = levels.iter().zip(values).map(|(d, v)| d * v).sum();
    total / mass / pop.classes[c].members as f64
}

/// Steady state, rates and each class's best response to `profile`.
/// `Ok(None)` when the profile cannot hold the money supply.
pub fn best_response_pop(
    pop: &Population,
    profile: &StrategyProfile,
    k_max: u32,
    exec: Exec,
) -> Result<Option<BestResponse>> {
    profile.validate(pop.len(), k_max)?;
    let (mstar, solve) = match solve_population(pop, profile) {
        Ok(ok) => ok,
        Err(Error::Infeasible { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let rates = population_rates(pop, profile, &mstar)?;
    let per_class = exec.map_range(pop.len(), |c| -> Result<(MdpSolution, f64, f64)> {
        let dynamics = class_dynamics(pop, c, &rates, k_max)?;
        let sol = dynamics.solve()?;
        let current = dynamics.threshold_values(profile.thresholds[c]);
        let now = class_utility(pop, &mstar, c, &current);
        let best = class_utility(pop, &mstar, c, &sol.values);
        Ok((sol, now, (best - now).max(0.0)))
    });
    let mut solutions = Vec::with_capacity(pop.len());
    let mut utility = Vec::with_capacity(pop.len());
    let mut gaps = Vec::with_capacity(pop.len());
    for r in per_class {
        let (sol, now, gap) = r?;
        solutions.push(sol);
        utility.push(now);
        gaps.push(gap);
    }
    Ok(Some(BestResponse {
        profile: profile.clone(),
        mstar,
        lambda: solve.lambda,
        rates,
        solutions,
        utility,
        gaps,
    }))
}

pub fn best_response(
    spec: &SystemSpec,
    profile: &StrategyProfile,
    opts: &EquilibriumOptions,
) -> Result<Option<BestResponse>> {
    best_response_pop(
        &Population::from_spec(spec)?,
        profile,
        opts.k_max,
        opts.exec,
    )
}

/// Utility per unit time of the whole population in steady state.
pub fn population_welfare(
    pop: &Population,
    profile: &StrategyProfile,
    mstar: &MoneyDistribution,
    rates: &RateEstimates,
) -> f64 {
    if profile.is_trivial() {
        return 0.0;
    }
    let fractions = pop.unit_fractions();
    // Expected cost of the job, weighted by who gets selected.
    let mut weight = 0.0;
    let mut weighted_alpha = 0.0;
    for ((class, levels), (&f, &k)) in pop
        .classes
        .iter()
        .zip(&mstar.mass)
        .zip(fractions.iter().zip(&profile.thresholds))
    {
        let willing = if k == 0 {
            0.0
        } else {
            1.0 - levels[k as usize] / f
        };
        let w = class.agents() as f64 * class.agent.beta * class.agent.chi * willing;
        weight += w;
        weighted_alpha += w * class.agent.alpha;
    }
    let market_alpha = if weight > 0.0 {
        weighted_alpha / weight
    } else {
        0.0
    };
    let per_round: f64 = pop
        .classes
        .iter()
        .enumerate()
        .map(|(c, class)| {
            let a = &class.agent;
            let agents = class.agents() as f64;
            let paid = 1.0 - mstar.mass[c][0] / fractions[c];
            let market = if weight > 0.0 {
                rates.p_s[c] * (1.0 - class.internal) * paid * (a.gamma - market_alpha)
            } else {
                0.0
            };
            let inside = rates.p_s[c] * class.internal * (a.gamma - a.alpha);
            agents * (market + inside)
        })
        .sum();
    per_round * pop.n as f64
}

/// Welfare rate of a result on a plain population.
pub fn social_welfare(spec: &SystemSpec, result: &EquilibriumResult) -> Result<f64> {
    let pop = Population::from_spec(spec)?;
    Ok(match &result.mstar {
        Some(mstar) => population_welfare(&pop, &result.profile, mstar, &result.rates),
        None => 0.0,
    })
}

enum Search {
    Fixed(BestResponse, usize, bool),
    Crash(Option<BestResponse>, usize),
    Cycle([StrategyProfile; 2], usize),
}

fn search(
    pop: &Population,
    start: StrategyProfile,
    eps: f64,
    opts: &EquilibriumOptions,
) -> Result<Search> {
    let mut profile = start;
    let mut history: Vec<StrategyProfile> = Vec::new();
    let mut previous: Option<BestResponse> = None;
    for iter in 1..=opts.max_iter {
        let Some(br) = best_response_pop(pop, &profile, opts.k_max, opts.exec)? else {
            return Ok(Search::Crash(None, iter));
        };
        let next = br.next_profile();
        // With nobody able to earn every threshold ties at zero utility, so
        // the gap test alone would accept any profile.
        let stalled = br.rates.p_e.iter().all(|&p| p == 0.0);
        if next == profile || (br.max_gap() <= eps && !stalled) {
            return Ok(if profile.is_trivial() {
                Search::Crash(Some(br), iter)
            } else {
                Search::Fixed(br, iter, false)
            });
        }
        if let Some(pos) = history.iter().position(|p| *p == next) {
            let two_cycle = pos + 1 == history.len();
            if let (true, Some(prev)) = (two_cycle, previous.as_ref()) {
                if let Some(fixed) = damp(pop, prev, &br, eps, opts)? {
                    return Ok(Search::Fixed(fixed, iter + 1, true));
                }
            }
            let prev = history.last().cloned().expect("a repeat implies history");
            return Ok(Search::Cycle([prev, profile], iter));
        }
        history.push(profile);
        profile = next;
        previous = Some(br);
    }
    let last = history.last().cloned().unwrap_or_else(|| profile.clone());
    Ok(Search::Cycle([last, profile], opts.max_iter))
}

/// Best responds once to the average of two alternating rate vectors and
/// keeps the result if it is a fixed point (up to `eps`).
fn damp(
    pop: &Population,
    a: &BestResponse,
    b: &BestResponse,
    eps: f64,
    opts: &EquilibriumOptions,
) -> Result<Option<BestResponse>> {
    let mut rates = a.rates.clone();
    for c in 0..pop.len() {
        rates.p_s[c] = 0.5 * (a.rates.p_s[c] + b.rates.p_s[c]);
        rates.p_e[c] = 0.5 * (a.rates.p_e[c] + b.rates.p_e[c]);
    }
    let thresholds = (0..pop.len())
        .map(|c| {
            Ok(class_dynamics(pop, c, &rates, opts.k_max)?
                .solve()?
                .threshold)
        })
        .collect::<Result<Vec<u32>>>()?;
    let candidate = StrategyProfile::new(thresholds);
    if candidate.is_trivial() {
        return Ok(None);
    }
    let Some(br) = best_response_pop(pop, &candidate, opts.k_max, opts.exec)? else {
        return Ok(None);
    };
    Ok((br.next_profile() == candidate || br.max_gap() <= eps).then_some(br))
}

fn finish(
    pop: &Population,
    br: BestResponse,
    status: Status,
    iterations: usize,
    damped: bool,
    k_max: u32,
) -> EquilibriumResult {
    let welfare_rate = if status == Status::Converged {
        population_welfare(pop, &br.profile, &br.mstar, &br.rates)
    } else {
        0.0
    };
    let discounted_welfare = br
        .utility
        .iter()
        .zip(&pop.classes)
        .map(|(u, c)| u * c.agents() as f64)
        .sum();
    let cap_binding = br.profile.thresholds.contains(&k_max);
    EquilibriumResult {
        status,
        epsilon: br.max_gap(),
        cap_binding,
        profile: br.profile,
        lambda: Some(br.lambda),
        mstar: Some(br.mstar),
        rates: br.rates,
        welfare_rate,
        discounted_welfare,
        per_type_utility: br.utility,
        iterations,
        damped,
        lower_profile: None,
        multiple_equilibria: false,
        last_profiles: None,
    }
}

fn crashed(
    pop: &Population,
    br: Option<BestResponse>,
    iterations: usize,
    k_max: u32,
) -> EquilibriumResult {
    match br {
        Some(br) => {
            let mut r = finish(pop, br, Status::Crash, iterations, false, k_max);
            r.welfare_rate = 0.0;
            r
        }
        None => EquilibriumResult {
            status: Status::Crash,
            profile: StrategyProfile::uniform(pop.len(), 0),
            mstar: None,
            lambda: None,
            rates: RateEstimates::zeros(pop.len()),
            welfare_rate: 0.0,
            discounted_welfare: 0.0,
            per_type_utility: vec![0.0; pop.len()],
            epsilon: 0.0,
            iterations,
            cap_binding: false,
            damped: false,
            lower_profile: None,
            multiple_equilibria: false,
            last_profiles: None,
        },
    }
}

/// Best-response iteration from the all-`k_max` profile, plus a second
/// search from all zeros to detect multiple equilibria.
pub fn find_population_equilibrium(
    pop: &Population,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumResult> {
    if pop.is_empty() {
        return Err(Error::InvalidSpec("empty population".into()));
    }
    let eps = opts.epsilon.unwrap_or(1e-4 * pop.max_gamma());
    let top = StrategyProfile::uniform(pop.len(), opts.k_max);
    let mut result = match search(pop, top, eps, opts)? {
        Search::Fixed(br, it, damped) => finish(pop, br, Status::Converged, it, damped, opts.k_max),
        Search::Crash(br, it) => crashed(pop, br, it, opts.k_max),
        Search::Cycle(last, it) => {
            let mut r = crashed(pop, None, it, opts.k_max);
            r.status = Status::MaxIter;
            r.profile = last[1].clone();
            r.last_profiles = Some(last);
            r
        }
    };
    let bottom = StrategyProfile::uniform(pop.len(), 0);
    let lower = match search(pop, bottom, eps, opts)? {
        Search::Fixed(br, _, _) => Some(br.profile),
        Search::Crash(_, _) => Some(StrategyProfile::uniform(pop.len(), 0)),
        Search::Cycle(_, _) => None,
    };
    if let Some(lower) = &lower {
        result.multiple_equilibria = *lower != result.profile;
    }
    result.lower_profile = lower;
    Ok(result)
}

pub fn find_equilibrium(spec: &SystemSpec, opts: &EquilibriumOptions) -> Result<EquilibriumResult> {
    find_population_equilibrium(&Population::from_spec(spec)?, opts)
}

/// Equilibrium of a population with colluding groups. Classes are
/// independents first, then groups.
pub fn find_group_equilibrium(
    spec: &CollusionSpec,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumResult> {
    find_population_equilibrium(&Population::from_collusion(spec)?, opts)
}
