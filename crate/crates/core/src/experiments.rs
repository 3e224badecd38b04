//! Experiment drivers behind the CLI subcommands.
//!
//! Each driver returns typed rows so tests can check them directly; `run`
//! renders them into CSV and JSON artifacts. Rows always come out in grid
//! order, whatever the execution mode.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SweepVariable};
use crate::equilibrium::{
    best_response_pop, find_population_equilibrium, EquilibriumOptions, EquilibriumResult, Status,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mdp::{solve_agent_mdp, write_policy_csv, AgentChain, AgentRates};
use crate::model::{apply_sybils, make_collusion_spec, StrategyProfile, SystemSpec};
use crate::output::{bool_cell, fmt_num, opt_num, profile_cell, Table};
use crate::population::Population;
use crate::sim::{run_population, ClassReport, SimConfig, SimReport};
use crate::steady_state::{relative_entropy, solve_population};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    SteadyState,
    BestResponse,
    Equilibrium,
    Simulate,
    Fig1,
    SybilSweep,
    CrashScan,
    CollusionSweep,
    SybilEquivalence,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::SteadyState,
        Command::BestResponse,
        Command::Equilibrium,
        Command::Simulate,
        Command::Fig1,
        Command::SybilSweep,
        Command::CrashScan,
        Command::CollusionSweep,
        Command::SybilEquivalence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::SteadyState => "steady-state",
            Command::BestResponse => "best-response",
            Command::Equilibrium => "equilibrium",
            Command::Simulate => "simulate",
            Command::Fig1 => "fig1",
            Command::SybilSweep => "sybil-sweep",
            Command::CrashScan => "crash-scan",
            Command::CollusionSweep => "collusion-sweep",
            Command::SybilEquivalence => "sybil-equivalence",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunContext {
    pub exec: Exec,
    pub trace: bool,
    pub plot_stub: bool,
    /// Replaces the config's seed list with this single seed.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunOutput {
    pub artifacts: Vec<Artifact>,
    pub seeds: Vec<u64>,
}

impl RunOutput {
    fn csv(&mut self, name: &str, table: &Table) -> Result<()> {
        let mut bytes = Vec::new();
        table.write(&mut bytes)?;
        self.artifacts.push(Artifact {
            name: name.into(),
            bytes,
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.artifacts.push(Artifact {
            name: name.into(),
            bytes,
        });
        Ok(())
    }

    fn raw(&mut self, name: &str, bytes: Vec<u8>) {
        self.artifacts.push(Artifact {
            name: name.into(),
            bytes,
        });
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.artifacts
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.bytes.as_slice())
    }
}

pub fn options(cfg: &ExperimentConfig, ctx: &RunContext) -> EquilibriumOptions {
    let defaults = EquilibriumOptions::default();
    EquilibriumOptions {
        epsilon: cfg.scenario.epsilon,
        max_iter: cfg.scenario.max_iter.unwrap_or(defaults.max_iter),
        k_max: cfg.system.k_max,
        exec: ctx.exec,
    }
}

fn seeds(cfg: &ExperimentConfig, ctx: &RunContext) -> Vec<u64> {
    ctx.seed
        .map(|s| vec![s])
        .unwrap_or_else(|| cfg.scenario.seeds())
}

/// Base spec with the configured sybils applied, if any.
pub fn sybil_spec(
    cfg: &ExperimentConfig,
    base: &SystemSpec,
    fraction: f64,
    count: u32,
) -> Result<SystemSpec> {
    let t = cfg.scenario.sybil_type.unwrap_or(0);
    apply_sybils(base, t, fraction, count)
}

/// The population a non-sweep command works on: colluding groups if
/// `group_size` is set, otherwise sybils if both sybil fields are set,
/// otherwise the plain system.
pub fn scenario_population(cfg: &ExperimentConfig) -> Result<Population> {
    let spec = cfg.spec()?;
    let sc = &cfg.scenario;
    if let Some(c) = sc.group_size {
        let fraction = sc.colluding_fraction.unwrap_or(1.0);
        return Population::from_collusion(&make_collusion_spec(&spec, c, fraction)?);
    }
    if let (Some(f), Some(s)) = (sc.sybil_fraction, sc.sybil_count) {
        return Population::from_spec(&sybil_spec(cfg, &spec, f, s)?);
    }
    Population::from_spec(&spec)
}

fn per_agent(welfare: f64, n: usize) -> f64 {
    welfare / n as f64
}

fn sim_config(
    cfg: &ExperimentConfig,
    seed: u64,
    rounds: u64,
    reference: Option<crate::MoneyDistribution>,
) -> SimConfig {
    SimConfig {
        rounds,
        warmup: cfg.scenario.warmup,
        seed,
        batches: 50,
        trace_every: cfg.scenario.trace_every,
        reference,
        track_units: false,
    }
}

fn relative_error(model: f64, measured: f64) -> f64 {
    if measured == 0.0 {
        if model == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (model - measured).abs() / measured.abs()
    }
}

/// Mean and standard error of `other - base` over paired batches.
pub fn paired_gain(base: &ClassReport, other: &ClassReport) -> (f64, f64) {
    let diffs: Vec<f64> = other
        .batch_utility_rates
        .iter()
        .zip(&base.batch_utility_rates)
        .map(|(a, b)| a - b)
        .collect();
    let k = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / k;
    let var = if diffs.len() > 1 {
        diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    (mean, (var / k).sqrt())
}

// ---------------------------------------------------------------- fig1

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig1Row {
    pub p_e: f64,
    pub p_s: f64,
    pub threshold: u32,
    pub utility: f64,
    pub satisfaction: f64,
    pub cap_binding: bool,
}

/// Optimal threshold and utility at money 0 as `p_e` varies with `p_s` fixed.
pub fn fig1(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<Fig1Row>> {
    let spec = cfg.spec()?;
    if spec.types.len() != 1 {
        return Err(Error::Config("fig1 needs a single-type system".into()));
    }
    let p_s = cfg
        .scenario
        .p_s
        .ok_or_else(|| Error::Config("fig1 needs scenario.p_s".into()))?;
    let grid = cfg.scenario.require_grid("fig1")?;
    let agent = spec.types[0];
    ctx.exec
        .map(&grid, |&p_e| {
            let rates = AgentRates::new(p_s, p_e);
            let sol = solve_agent_mdp(&agent, rates, spec.n, cfg.system.k_max)?;
            Ok(Fig1Row {
                p_e,
                p_s,
                threshold: sol.threshold,
                utility: sol.values[0],
                satisfaction: AgentChain::from_rates(rates, sol.threshold).satisfaction(),
                cap_binding: sol.cap_binding,
            })
        })
        .into_iter()
        .collect()
}

fn fig1_table(rows: &[Fig1Row]) -> Table {
    let mut t = Table::new(&[
        "p_e",
        "p_s",
        "r",
        "threshold",
        "utility",
        "satisfaction",
        "cap_binding",
    ]);
    for r in rows {
        let ratio = if r.p_s > 0.0 { r.p_e / r.p_s } else { f64::NAN };
        t.push(vec![
            fmt_num(r.p_e),
            fmt_num(r.p_s),
            fmt_num(ratio),
            r.threshold.to_string(),
            fmt_num(r.utility),
            fmt_num(r.satisfaction),
            bool_cell(r.cap_binding),
        ]);
    }
    t
}

// ---------------------------------------------------------------- sybils

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SybilRow {
    pub value: f64,
    pub fraction: f64,
    pub sybils: u32,
    pub status: Status,
    pub thresholds: Vec<u32>,
    pub welfare_per_agent: f64,
    /// Absent when every agent of the base type has sybils.
    pub non_sybil_utility: Option<f64>,
    pub sybil_utility: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SybilSweep {
    pub variable: SweepVariable,
    pub baseline_status: Status,
    pub baseline_welfare_per_agent: f64,
    pub baseline_utility: f64,
    pub rows: Vec<SybilRow>,
    /// First grid value whose welfare exceeds the baseline.
    pub first_welfare_gain: Option<f64>,
    /// First grid value whose non-sybil utility exceeds the baseline.
    pub first_non_sybil_gain: Option<f64>,
    /// Grid value ending the largest step change in non-sybil utility.
    pub largest_jump_at: Option<f64>,
}

/// `a > b` beyond rounding noise.
fn exceeds(a: f64, b: f64) -> bool {
    a > b + WELFARE_SLACK * b.abs()
}

pub fn sybil_sweep(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<SybilSweep> {
    let base = cfg.spec()?;
    let sc = &cfg.scenario;
    let variable = sc.variable.unwrap_or(SweepVariable::SybilCount);
    let grid = sc.require_grid("sybil-sweep")?;
    let opts = options(cfg, ctx);
    let t = sc.sybil_type.unwrap_or(0);

    let baseline = find_population_equilibrium(&Population::from_spec(&base)?, &opts)?;
    let points: Vec<(f64, u32)> = grid
        .iter()
        .map(|&v| match variable {
            SweepVariable::SybilCount => {
                let f = sc.sybil_fraction.ok_or_else(|| {
                    Error::Config("sweeping sybil_count needs sybil_fraction".into())
                })?;
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "sybil count {v} is not a whole number"
                    )));
                }
                Ok((f, v as u32))
            }
            SweepVariable::SybilFraction => {
                let s = sc.sybil_count.ok_or_else(|| {
                    Error::Config("sweeping sybil_fraction needs sybil_count".into())
                })?;
                Ok((v, s))
            }
            other => Err(Error::Config(format!("sybil-sweep cannot sweep {other:?}"))),
        })
        .collect::<Result<_>>()?;

    let results = ctx.exec.map(
        &points,
        |&(f, s)| -> Result<(SystemSpec, EquilibriumResult)> {
            let spec = apply_sybils(&base, t, f, s)?;
            let r = find_population_equilibrium(&Population::from_spec(&spec)?, &opts)?;
            Ok((spec, r))
        },
    );

    let baseline_utility = baseline.per_type_utility[t];
    let baseline_welfare = per_agent(baseline.welfare_rate, base.n);
    let mut rows = Vec::with_capacity(points.len());
    for ((&value, &(fraction, sybils)), res) in grid.iter().zip(&points).zip(results) {
        let (spec, r) = res?;
        let last = spec.types.len() - 1;
        // The base type survives at index t unless all of it got sybils.
        let non_sybil = (spec.types.len() == base.types.len() + 1).then(|| r.per_type_utility[t]);
        rows.push(SybilRow {
            value,
            fraction,
            sybils,
            status: r.status,
            thresholds: r.profile.thresholds.clone(),
            welfare_per_agent: per_agent(r.welfare_rate, spec.n),
            non_sybil_utility: non_sybil,
            sybil_utility: r.per_type_utility[last],
        });
    }
    let first_welfare_gain = rows
        .iter()
        .find(|r| exceeds(r.welfare_per_agent, baseline_welfare))
        .map(|r| r.value);
    let first_non_sybil_gain = rows
        .iter()
        .find(|r| {
            r.non_sybil_utility
                .is_some_and(|u| exceeds(u, baseline_utility))
        })
        .map(|r| r.value);
    let largest_jump_at = rows
        .windows(2)
        .filter_map(|w| match (w[0].non_sybil_utility, w[1].non_sybil_utility) {
            (Some(a), Some(b)) => Some(((b - a).abs(), w[1].value)),
            _ => None,
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, v)| v);
    Ok(SybilSweep {
        variable,
        baseline_status: baseline.status,
        baseline_welfare_per_agent: baseline_welfare,
        baseline_utility,
        rows,
        first_welfare_gain,
        first_non_sybil_gain,
        largest_jump_at,
    })
}

fn sybil_table(s: &SybilSweep) -> Table {
    let mut t = Table::new(&[
        "value",
        "sybil_fraction",
        "sybils",
        "status",
        "thresholds",
        "welfare_per_agent",
        "baseline_welfare_per_agent",
        "non_sybil_utility",
        "sybil_utility",
        "baseline_utility",
    ]);
    for r in &s.rows {
        t.push(vec![
            fmt_num(r.value),
            fmt_num(r.fraction),
            r.sybils.to_string(),
            r.status.to_string(),
            profile_cell(&r.thresholds),
            fmt_num(r.welfare_per_agent),
            fmt_num(s.baseline_welfare_per_agent),
            opt_num(r.non_sybil_utility),
            fmt_num(r.sybil_utility),
            fmt_num(s.baseline_utility),
        ]);
    }
    t
}

// ---------------------------------------------------------------- crash scan

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrashRow {
    pub m: f64,
    pub population: String,
    pub status: Status,
    pub thresholds: Vec<u32>,
    pub welfare_per_agent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrashScan {
    pub rows: Vec<CrashRow>,
    /// Largest grid value of `m` that did not crash, per population.
    pub largest_stable: Vec<(String, Option<f64>)>,
    /// A population converged again at a larger `m` after crashing.
    pub reentry: Vec<(String, bool)>,
}

pub fn crash_scan(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<CrashScan> {
    let sc = &cfg.scenario;
    let grid = sc.require_grid("crash-scan")?;
    let opts = options(cfg, ctx);
    let mut populations = vec!["baseline".to_string()];
    let with_sybils = match (sc.sybil_fraction, sc.sybil_count) {
        (Some(f), Some(s)) => {
            populations.push("sybil".into());
            Some((f, s))
        }
        _ => None,
    };
    let points: Vec<(usize, f64)> = (0..populations.len())
        .flat_map(|p| grid.iter().map(move |&m| (p, m)))
        .collect();
    let results = ctx
        .exec
        .map(&points, |&(p, m)| -> Result<EquilibriumResult> {
            let mut spec = cfg.spec_with_m(m)?;
            if p == 1 {
                let (f, s) = with_sybils.expect("sybil population configured");
                spec = sybil_spec(cfg, &spec, f, s)?;
            }
            find_population_equilibrium(&Population::from_spec(&spec)?, &opts)
        });
    let mut rows = Vec::with_capacity(points.len());
    for (&(p, m), r) in points.iter().zip(results) {
        let r = r?;
        rows.push(CrashRow {
            m,
            population: populations[p].clone(),
            status: r.status,
            thresholds: r.profile.thresholds.clone(),
            welfare_per_agent: per_agent(r.welfare_rate, cfg.system.n),
        });
    }
    let mut largest_stable = Vec::new();
    let mut reentry = Vec::new();
    for name in &populations {
        let mine: Vec<&CrashRow> = rows.iter().filter(|r| &r.population == name).collect();
        largest_stable.push((
            name.clone(),
            mine.iter()
                .rev()
                .find(|r| r.status == Status::Converged)
                .map(|r| r.m),
        ));
        // A crash at m = 0 (nothing to trade) does not count.
        let first_live = mine
            .iter()
            .position(|r| r.status == Status::Converged)
            .unwrap_or(mine.len());
        let first_crash = mine[first_live..]
            .iter()
            .position(|r| r.status == Status::Crash)
            .map(|i| i + first_live);
        let back =
            first_crash.is_some_and(|i| mine[i..].iter().any(|r| r.status == Status::Converged));
        reentry.push((name.clone(), back));
    }
    Ok(CrashScan {
        rows,
        largest_stable,
        reentry,
    })
}

fn crash_table(s: &CrashScan) -> Table {
    let mut t = Table::new(&[
        "m",
        "population",
        "status",
        "thresholds",
        "welfare_per_agent",
    ]);
    for r in &s.rows {
        t.push(vec![
            fmt_num(r.m),
            r.population.clone(),
            r.status.to_string(),
            profile_cell(&r.thresholds),
            fmt_num(r.welfare_per_agent),
        ]);
    }
    t
}

// ---------------------------------------------------------------- collusion

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollusionRow {
    pub group_size: usize,
    pub groups: usize,
    pub independents: usize,
    pub beta_int: f64,
    pub status: Status,
    pub thresholds: Vec<u32>,
    pub independent_utility: Option<f64>,
    pub colluder_utility: Option<f64>,
    pub welfare_per_agent: f64,
    /// Share of colluders' served requests that were served inside the group.
    pub internal_fraction: Option<f64>,
    pub phase: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollusionSimRow {
    pub group_size: usize,
    pub seed: u64,
    pub independent_rate: Option<f64>,
    pub colluder_rate: Option<f64>,
    pub independent_gain: Option<(f64, f64)>,
    pub colluder_gain: Option<(f64, f64)>,
    pub internal_fraction: Option<f64>,
    pub max_rate_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CollusionSweep {
    pub colluding_fraction: f64,
    pub rows: Vec<CollusionRow>,
    pub sim: Vec<CollusionSimRow>,
}

fn class_index(pop: &Population, label: &str) -> Option<usize> {
    pop.classes.iter().position(|c| c.label == label)
}

/// Largest relative error between mean-field and measured `p_s`, `p_e`.
pub fn rate_errors(result: &EquilibriumResult, report: &SimReport) -> f64 {
    let mut worst: f64 = 0.0;
    for (c, class) in report.classes.iter().enumerate() {
        worst = worst.max(relative_error(result.rates.p_s[c], class.p_s));
        if let Some(pe) = class.p_e {
            worst = worst.max(relative_error(result.rates.p_e[c], pe));
        }
    }
    worst
}

pub fn collusion_sweep(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<CollusionSweep> {
    let base = cfg.spec()?;
    let sc = &cfg.scenario;
    let grid = sc.require_grid("collusion-sweep")?;
    let fraction = sc.colluding_fraction.unwrap_or(0.5);
    let opts = options(cfg, ctx);
    let sizes: Vec<usize> = grid
        .iter()
        .map(|&c| {
            if c < 1.0 || c.fract() != 0.0 {
                Err(Error::Config(format!(
                    "group size {c} is not a positive integer"
                )))
            } else {
                Ok(c as usize)
            }
        })
        .collect::<Result<_>>()?;
    let mut all_sizes = sizes.clone();
    if !all_sizes.contains(&1) {
        all_sizes.insert(0, 1);
    }

    let results = ctx.exec.map(
        &all_sizes,
        |&c| -> Result<(Population, EquilibriumResult)> {
            let pop = Population::from_collusion(&make_collusion_spec(&base, c, fraction)?)?;
            let r = find_population_equilibrium(&pop, &opts)?;
            Ok((pop, r))
        },
    );
    let results: Vec<(Population, EquilibriumResult)> =
        results.into_iter().collect::<Result<_>>()?;

    let utility = |pop: &Population, r: &EquilibriumResult, label: &str| {
        class_index(pop, label).map(|i| r.per_type_utility[i])
    };
    let (base_pop, base_r) = &results[all_sizes.iter().position(|&c| c == 1).expect("baseline")];
    let baseline =
        utility(base_pop, base_r, "independent").or_else(|| utility(base_pop, base_r, "group"));

    let mut rows = Vec::new();
    let mut prev_independent: Option<f64> = None;
    let mut dipped = false;
    for (&c, (pop, r)) in all_sizes.iter().zip(&results) {
        if !sizes.contains(&c) {
            continue;
        }
        let group = class_index(pop, "group");
        let internal_fraction = group.and_then(|g| {
            let class = &pop.classes[g];
            let mstar = r.mstar.as_ref()?;
            let paid = 1.0 - mstar.mass[g][0] / pop.unit_fractions()[g];
            let inside = class.internal;
            let outside = (1.0 - class.internal) * paid;
            (inside + outside > 0.0).then(|| inside / (inside + outside))
        });
        let independent = utility(pop, r, "independent");
        let colluder = utility(pop, r, "group");
        let phase = match (c, independent, colluder, baseline) {
            (1, ..) => "baseline".to_string(),
            (_, Some(i), Some(g), Some(b)) if r.status == Status::Converged => {
                let falling = prev_independent.is_some_and(|p| i < p);
                if i <= b || g <= b {
                    "below_baseline".into()
                } else if falling {
                    dipped = true;
                    "dip".into()
                } else if dipped {
                    "recovery".into()
                } else {
                    "pareto".into()
                }
            }
            _ => r.status.to_string(),
        };
        prev_independent = independent.or(prev_independent);
        rows.push(CollusionRow {
            group_size: c,
            groups: pop
                .classes
                .get(group.unwrap_or(usize::MAX))
                .map(|g| g.units)
                .unwrap_or(0),
            independents: class_index(pop, "independent")
                .map(|i| pop.classes[i].units)
                .unwrap_or(0),
            beta_int: crate::model::internal_probability(base.types[0].beta, c),
            status: r.status,
            thresholds: r.profile.thresholds.clone(),
            independent_utility: independent,
            colluder_utility: colluder,
            welfare_per_agent: per_agent(r.welfare_rate, base.n),
            internal_fraction,
            phase,
        });
    }

    let mut sim = Vec::new();
    if let Some(rounds) = sc.rounds {
        let seeds = seeds(cfg, ctx);
        let jobs: Vec<(usize, u64)> = all_sizes
            .iter()
            .enumerate()
            .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
            .collect();
        let reports = ctx
            .exec
            .map(&jobs, |&(i, seed)| -> Result<Option<SimReport>> {
                let (pop, r) = &results[i];
                if r.status != Status::Converged {
                    return Ok(None);
                }
                run_population(
                    pop,
                    &r.profile,
                    &sim_config(cfg, seed, rounds, r.mstar.clone()),
                )
                .map(Some)
            });
        let reports: Vec<Option<SimReport>> = reports.into_iter().collect::<Result<_>>()?;
        let base_i = all_sizes.iter().position(|&c| c == 1).expect("baseline");
        for (j, &(i, seed)) in jobs.iter().enumerate() {
            let c = all_sizes[i];
            if !sizes.contains(&c) {
                continue;
            }
            let Some(report) = &reports[j] else { continue };
            let (pop, r) = &results[i];
            let base_report = reports[base_i * seeds.len() + (j % seeds.len())].as_ref();
            let base_pop = &results[base_i].0;
            let pick = |p: &Population, rep: &SimReport, label: &str| {
                class_index(p, label).map(|k| rep.classes[k].clone())
            };
            let gain = |label: &str| {
                let mine = pick(pop, report, label)?;
                let theirs = pick(base_pop, base_report?, label)?;
                Some(paired_gain(&theirs, &mine))
            };
            let group = pick(pop, report, "group");
            sim.push(CollusionSimRow {
                group_size: c,
                seed,
                independent_rate: pick(pop, report, "independent").map(|x| x.utility_rate),
                colluder_rate: group.as_ref().map(|x| x.utility_rate),
                independent_gain: gain("independent"),
                colluder_gain: gain("group"),
                internal_fraction: group.as_ref().and_then(|g| {
                    (g.satisfied > 0).then(|| g.internal as f64 / g.satisfied as f64)
                }),
                max_rate_error: rate_errors(r, report),
            });
        }
    }
    Ok(CollusionSweep {
        colluding_fraction: fraction,
        rows,
        sim,
    })
}

fn collusion_tables(s: &CollusionSweep) -> (Table, Table) {
    let mut t = Table::new(&[
        "group_size",
        "groups",
        "independents",
        "beta_int",
        "status",
        "thresholds",
        "independent_utility",
        "colluder_utility",
        "welfare_per_agent",
        "internal_fraction",
        "phase",
    ]);
    for r in &s.rows {
        t.push(vec![
            r.group_size.to_string(),
            r.groups.to_string(),
            r.independents.to_string(),
            fmt_num(r.beta_int),
            r.status.to_string(),
            profile_cell(&r.thresholds),
            opt_num(r.independent_utility),
            opt_num(r.colluder_utility),
            fmt_num(r.welfare_per_agent),
            opt_num(r.internal_fraction),
            r.phase.clone(),
        ]);
    }
    let mut sim = Table::new(&[
        "group_size",
        "seed",
        "independent_rate",
        "colluder_rate",
        "independent_gain",
        "independent_gain_se",
        "colluder_gain",
        "colluder_gain_se",
        "internal_fraction",
        "max_rate_error",
    ]);
    for r in &s.sim {
        sim.push(vec![
            r.group_size.to_string(),
            r.seed.to_string(),
            opt_num(r.independent_rate),
            opt_num(r.colluder_rate),
            opt_num(r.independent_gain.map(|g| g.0)),
            opt_num(r.independent_gain.map(|g| g.1)),
            opt_num(r.colluder_gain.map(|g| g.0)),
            opt_num(r.colluder_gain.map(|g| g.1)),
            opt_num(r.internal_fraction),
            fmt_num(r.max_rate_error),
        ]);
    }
    (t, sim)
}

// ---------------------------------------------------------------- equivalence

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceRow {
    pub m: f64,
    pub status: Status,
    pub welfare_per_agent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Equivalence {
    /// Only single-type systems are covered by the equivalence argument.
    pub out_of_scope: bool,
    pub sybil_status: Status,
    pub target_welfare_per_agent: f64,
    pub rows: Vec<EquivalenceRow>,
    /// Smallest searched `m'` whose sybil-free welfare reaches the target.
    pub found: Option<f64>,
    pub best: Option<EquivalenceRow>,
}

/// Relative slack when comparing welfare, so a degenerate sybil (same chi)
/// matches its own baseline despite rounding.
const WELFARE_SLACK: f64 = 1e-9;

pub fn sybil_equivalence(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Equivalence> {
    let base = cfg.spec()?;
    let sc = &cfg.scenario;
    let (f, s) = match (sc.sybil_fraction, sc.sybil_count) {
        (Some(f), Some(s)) => (f, s),
        _ => {
            return Err(Error::Config(
                "sybil-equivalence needs sybil_fraction and sybil_count".into(),
            ))
        }
    };
    let opts = options(cfg, ctx);
    let sybil = find_population_equilibrium(
        &Population::from_spec(&sybil_spec(cfg, &base, f, s)?)?,
        &opts,
    )?;
    let target = per_agent(sybil.welfare_rate, base.n);
    let grid = match sc.grid()? {
        g if !g.is_empty() => g,
        _ => (1..=48).map(|i| i as f64 * 0.25).collect(),
    };
    let results = ctx.exec.map(&grid, |&m| -> Result<EquivalenceRow> {
        let r = find_population_equilibrium(&Population::from_spec(&cfg.spec_with_m(m)?)?, &opts)?;
        Ok(EquivalenceRow {
            m,
            status: r.status,
            welfare_per_agent: per_agent(r.welfare_rate, base.n),
        })
    });
    let rows: Vec<EquivalenceRow> = results.into_iter().collect::<Result<_>>()?;
    let reaches = |w: f64| w >= target - WELFARE_SLACK * target.abs();
    let found = rows
        .iter()
        .find(|r| r.status == Status::Converged && reaches(r.welfare_per_agent))
        .map(|r| r.m);
    let best = rows
        .iter()
        .max_by(|a, b| a.welfare_per_agent.total_cmp(&b.welfare_per_agent))
        .cloned();
    Ok(Equivalence {
        out_of_scope: base.types.len() != 1,
        sybil_status: sybil.status,
        target_welfare_per_agent: target,
        rows,
        found,
        best,
    })
}

fn equivalence_table(e: &Equivalence) -> Table {
    let mut t = Table::new(&[
        "m",
        "status",
        "welfare_per_agent",
        "target_welfare_per_agent",
        "reaches_target",
    ]);
    for r in &e.rows {
        t.push(vec![
            fmt_num(r.m),
            r.status.to_string(),
            fmt_num(r.welfare_per_agent),
            fmt_num(e.target_welfare_per_agent),
            bool_cell(
                r.welfare_per_agent
                    >= e.target_welfare_per_agent
                        - WELFARE_SLACK * e.target_welfare_per_agent.abs(),
            ),
        ]);
    }
    t
}

// ---------------------------------------------------------------- single runs

fn profile_or_equilibrium(
    cfg: &ExperimentConfig,
    pop: &Population,
    opts: &EquilibriumOptions,
) -> Result<StrategyProfile> {
    match &cfg.scenario.thresholds {
        Some(k) => {
            let p = StrategyProfile::new(k.clone());
            p.validate(pop.len(), cfg.system.k_max)?;
            Ok(p)
        }
        None => Ok(find_population_equilibrium(pop, opts)?.profile),
    }
}

fn steady_state_run(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<()> {
    let pop = scenario_population(cfg)?;
    let thresholds = cfg
        .scenario
        .thresholds
        .clone()
        .ok_or_else(|| Error::Config("steady-state needs scenario.thresholds".into()))?;
    let profile = StrategyProfile::new(thresholds);
    profile.validate(pop.len(), cfg.system.k_max)?;
    let problem = pop.entropy_problem(&profile);
    let q = problem.q()?;
    let (mstar, solve) = solve_population(&pop, &profile)?;
    let mut bytes = Vec::new();
    mstar.write_csv(&mut bytes)?;
    out.raw("mstar.csv", bytes);
    let mut bytes = Vec::new();
    q.write_csv(&mut bytes)?;
    out.raw("q.csv", bytes);
    #[derive(Serialize)]
    struct Summary {
        thresholds: Vec<u32>,
        lambda: f64,
        residual: f64,
        iterations: usize,
        relative_entropy: f64,
        mean_money: f64,
    }
    out.json(
        "steady_state.json",
        &Summary {
            thresholds: profile.thresholds.clone(),
            lambda: solve.lambda,
            residual: solve.residual,
            iterations: solve.iterations,
            relative_entropy: relative_entropy(&mstar, &q),
            mean_money: mstar.mean_money(),
        },
    )
}

fn best_response_run(cfg: &ExperimentConfig, ctx: &RunContext, out: &mut RunOutput) -> Result<()> {
    let sc = &cfg.scenario;
    if sc.thresholds.is_none() {
        // Lone agent against given rates.
        let (Some(p_s), Some(p_e)) = (sc.p_s, sc.p_e) else {
            return Err(Error::Config(
                "best-response needs scenario.thresholds or both p_s and p_e".into(),
            ));
        };
        let spec = cfg.spec()?;
        let sol = solve_agent_mdp(
            &spec.types[0],
            AgentRates::new(p_s, p_e),
            spec.n,
            cfg.system.k_max,
        )?;
        let mut bytes = Vec::new();
        write_policy_csv(&sol, &mut bytes)?;
        out.raw("policy.csv", bytes);
        return out.json("best_response.json", &sol);
    }
    let pop = scenario_population(cfg)?;
    let opts = options(cfg, ctx);
    let profile = profile_or_equilibrium(cfg, &pop, &opts)?;
    let Some(br) = best_response_pop(&pop, &profile, cfg.system.k_max, ctx.exec)? else {
        return Err(Error::Config(format!(
            "profile {:?} cannot hold the money supply",
            profile.thresholds
        )));
    };
    let mut t = Table::new(&[
        "class",
        "label",
        "threshold",
        "best_response",
        "p_s",
        "p_e",
        "utility",
        "gap",
        "cap_binding",
    ]);
    for (c, class) in pop.classes.iter().enumerate() {
        t.push(vec![
            c.to_string(),
            class.label.clone(),
            profile.thresholds[c].to_string(),
            br.solutions[c].threshold.to_string(),
            fmt_num(br.rates.p_s[c]),
            fmt_num(br.rates.p_e[c]),
            fmt_num(br.utility[c]),
            fmt_num(br.gaps[c]),
            bool_cell(br.solutions[c].cap_binding),
        ]);
        let mut bytes = Vec::new();
        write_policy_csv(&br.solutions[c], &mut bytes)?;
        out.raw(&format!("policy_{c}.csv"), bytes);
    }
    out.csv("best_response.csv", &t)
}

fn equilibrium_run(cfg: &ExperimentConfig, ctx: &RunContext, out: &mut RunOutput) -> Result<()> {
    let pop = scenario_population(cfg)?;
    let r = find_population_equilibrium(&pop, &options(cfg, ctx))?;
    if let Some(mstar) = &r.mstar {
        let mut bytes = Vec::new();
        mstar.write_csv(&mut bytes)?;
        out.raw("mstar.csv", bytes);
    }
    out.json("equilibrium.json", &r)
}

fn simulate_run(cfg: &ExperimentConfig, ctx: &RunContext, out: &mut RunOutput) -> Result<()> {
    let pop = scenario_population(cfg)?;
    let opts = options(cfg, ctx);
    let profile = profile_or_equilibrium(cfg, &pop, &opts)?;
    let reference = solve_population(&pop, &profile).ok().map(|(m, _)| m);
    let rounds = cfg
        .scenario
        .rounds
        .ok_or_else(|| Error::Config("simulate needs scenario.rounds".into()))?;
    let seeds = seeds(cfg, ctx);
    let reports = ctx.exec.map(&seeds, |&seed| {
        let mut sc = sim_config(cfg, seed, rounds, reference.clone());
        if ctx.trace && sc.trace_every.is_none() {
            sc.trace_every = Some((rounds / 1000).max(1));
        }
        if !ctx.trace {
            sc.trace_every = None;
        }
        run_population(&pop, &profile, &sc)
    });
    let mut sim = Table::new(&[
        "seed",
        "class",
        "label",
        "threshold",
        "p_s",
        "p_e",
        "satisfaction",
        "utility_rate",
        "utility_rate_se",
        "discounted_utility",
        "mean_distance",
    ]);
    let mut dist = Table::new(&["seed", "type_index", "money_level", "mass", "mstar"]);
    let mut trace = Table::new(&["seed", "round", "distance"]);
    for (&seed, report) in seeds.iter().zip(reports) {
        let report = report?;
        for (c, r) in report.classes.iter().enumerate() {
            sim.push(vec![
                seed.to_string(),
                c.to_string(),
                r.label.clone(),
                r.threshold.to_string(),
                fmt_num(r.p_s),
                opt_num(r.p_e),
                opt_num(crate::sim::measure_satisfaction(&report, c)),
                fmt_num(r.utility_rate),
                fmt_num(r.utility_rate_se),
                fmt_num(r.discounted_utility),
                opt_num(report.mean_distance),
            ]);
        }
        for (c, levels) in report.distribution.mass.iter().enumerate() {
            for (i, &d) in levels.iter().enumerate() {
                let q = reference
                    .as_ref()
                    .and_then(|m| m.mass[c].get(i).copied())
                    .unwrap_or(0.0);
                dist.push(vec![
                    seed.to_string(),
                    c.to_string(),
                    i.to_string(),
                    fmt_num(d),
                    fmt_num(q),
                ]);
            }
        }
        for (t, d) in &report.trace {
            trace.push(vec![seed.to_string(), t.to_string(), fmt_num(*d)]);
        }
    }
    out.csv("simulate.csv", &sim)?;
    out.csv("distribution.csv", &dist)?;
    if ctx.trace {
        out.csv("trace.csv", &trace)?;
    }
    Ok(())
}

fn plot_stub(csv: &str, x: &str, ys: &[&str], table: &Table) -> Vec<u8> {
    let col = |name: &str| table.column(name).map(|i| i + 1).unwrap_or(1);
    let series: Vec<String> = ys
        .iter()
        .map(|y| {
            format!(
                "'{csv}' using {}:{} with linespoints title '{y}'",
                col(x),
                col(y)
            )
        })
        .collect();
    format!(
        "# gnuplot script; any tool that reads CSV works as well\nset datafile separator ','\nset key autotitle columnhead\nset xlabel '{x}'\nplot {}\n",
        series.join(", \\\n     ")
    )
    .into_bytes()
}

/// Runs one subcommand and renders its artifacts.
pub fn run(cmd: Command, cfg: &ExperimentConfig, ctx: &RunContext) -> Result<RunOutput> {
    let mut out = RunOutput {
        artifacts: Vec::new(),
        seeds: seeds(cfg, ctx),
    };
    match cmd {
        Command::SteadyState => steady_state_run(cfg, &mut out)?,
        Command::BestResponse => best_response_run(cfg, ctx, &mut out)?,
        Command::Equilibrium => equilibrium_run(cfg, ctx, &mut out)?,
        Command::Simulate => simulate_run(cfg, ctx, &mut out)?,
        Command::Fig1 => {
            let t = fig1_table(&fig1(cfg, ctx)?);
            out.csv("fig1.csv", &t)?;
            if ctx.plot_stub {
                out.raw("fig1.gp", plot_stub("fig1.csv", "p_e", &["utility"], &t));
            }
        }
        Command::SybilSweep => {
            let s = sybil_sweep(cfg, ctx)?;
            let t = sybil_table(&s);
            out.csv("sybil_sweep.csv", &t)?;
            out.json("sybil_sweep.json", &s)?;
            if ctx.plot_stub {
                let ys = ["non_sybil_utility", "sybil_utility", "baseline_utility"];
                out.raw(
                    "sybil_sweep.gp",
                    plot_stub("sybil_sweep.csv", "value", &ys, &t),
                );
            }
        }
        Command::CrashScan => {
            let s = crash_scan(cfg, ctx)?;
            let t = crash_table(&s);
            out.csv("crash_scan.csv", &t)?;
            out.json("crash_scan.json", &s)?;
            if ctx.plot_stub {
                out.raw(
                    "crash_scan.gp",
                    plot_stub("crash_scan.csv", "m", &["welfare_per_agent"], &t),
                );
            }
        }
        Command::CollusionSweep => {
            let s = collusion_sweep(cfg, ctx)?;
            let (t, sim) = collusion_tables(&s);
            out.csv("collusion_sweep.csv", &t)?;
            if !s.sim.is_empty() {
                out.csv("collusion_sim.csv", &sim)?;
            }
            if ctx.plot_stub {
                let ys = ["independent_utility", "colluder_utility"];
                out.raw(
                    "collusion_sweep.gp",
                    plot_stub("collusion_sweep.csv", "group_size", &ys, &t),
                );
            }
        }
        Command::SybilEquivalence => {
            let e = sybil_equivalence(cfg, ctx)?;
            out.csv("sybil_equivalence.csv", &equivalence_table(&e))?;
            out.json("sybil_equivalence.json", &e)?;
        }
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    seeds: &'a [u64],
    parallel: bool,
    artifacts: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    name: String,
    sha256: String,
}

/// Writes every artifact plus `manifest.json` under `dir`.
pub fn write_run(dir: &Path, cmd: Command, config_text: &str, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    for a in &output.artifacts {
        fs::write(dir.join(&a.name), &a.bytes)?;
    }
    let manifest = Manifest {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: sha256_hex(config_text.as_bytes()),
        seeds: &output.seeds,
        parallel: cfg!(feature = "parallel"),
        artifacts: output
            .artifacts
            .iter()
            .map(|a| ManifestEntry {
                name: a.name.clone(),
                sha256: sha256_hex(&a.bytes),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), bytes)?;
    Ok(())
}
