use scrip::config::{ExperimentConfig, SweepVariable};
use scrip::experiments::{
    collusion_sweep, crash_scan, fig1, run, sybil_equivalence, sybil_sweep, write_run, Command,
    RunContext,
};
use scrip::*;
use serde::Deserialize;

const SYSTEM: &str = "[system]
n = 10000
m = 4.0

[[system.types]]
alpha = 0.08
beta = 0.01
gamma = 1.0
delta = 0.97
rho = 1.0
chi = 1.0
fraction = 1.0
";

fn config(scenario: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("{SYSTEM}\n[scenario]\n{scenario}\n")).unwrap()
}

fn ctx() -> RunContext {
    RunContext::default()
}

#[derive(Deserialize)]
struct Regression {
    rel_tol: f64,
    reference: Reference,
    fig1: Fig1,
    crash_scan: Crash,
    sybil_sweep: Sybil,
    collusion: Collusion,
    sybil_equivalence: Equivalence,
}

#[derive(Deserialize)]
struct Reference {
    threshold: u32,
    welfare_per_agent: f64,
    utility: f64,
    p_s: f64,
    p_e: f64,
}

#[derive(Deserialize)]
struct Fig1 {
    threshold_at_r1: u32,
    utility_at_r1: f64,
}

#[derive(Deserialize)]
struct Crash {
    baseline_largest_stable: f64,
    sybil_largest_stable: f64,
}

#[derive(Deserialize)]
struct Sybil {
    first_welfare_gain: f64,
    first_non_sybil_gain: f64,
    welfare_per_agent_s8: f64,
}

#[derive(Deserialize)]
struct Collusion {
    group_sizes: Vec<usize>,
    thresholds: Vec<Vec<u32>>,
    independent_utility: Vec<f64>,
    colluder_utility: Vec<f64>,
}

#[derive(Deserialize)]
struct Equivalence {
    target_welfare_per_agent: f64,
    found: f64,
}

fn regression() -> Regression {
    toml::from_str(include_str!("data/regression.toml")).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-300)
}

#[test]
fn config_rejects_bad_input() {
    assert!(ExperimentConfig::parse("nonsense = 1").is_err());
    let unknown = format!("{SYSTEM}\n[scenario]\ncolour = \"red\"\n");
    assert!(matches!(
        ExperimentConfig::parse(&unknown),
        Err(Error::Toml(_))
    ));
    let unsorted = format!("{SYSTEM}\n[scenario]\nvalues = [2.0, 1.0]\n");
    assert!(ExperimentConfig::parse(&unsorted).is_err());
    let empty = format!("{SYSTEM}\n[scenario]\nvalues = []\n");
    assert!(ExperimentConfig::parse(&empty).is_err());
    assert!(config("").scenario.require_grid("test").is_err());
    let no_seeds = format!("{SYSTEM}\n[scenario]\nseeds = []\n");
    assert!(ExperimentConfig::parse(&no_seeds).is_err());
    let bad_m = config("");
    assert!(bad_m.spec_with_m(4.00005).is_err());
    assert_eq!(
        config("variable = \"p_e\"").scenario.variable,
        Some(SweepVariable::PE)
    );
    assert_eq!(config("").scenario.seeds(), vec![1]);
}

#[test]
fn range_includes_its_end() {
    let c = config("range = { start = 0.0, stop = 1.0, step = 0.25 }");
    assert_eq!(c.scenario.grid().unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
}

#[test]
fn reference_equilibrium_matches_baseline() {
    let reg = regression();
    let spec = config("").spec().unwrap();
    let r = find_equilibrium(&spec, &EquilibriumOptions::default()).unwrap();
    assert_eq!(r.profile.thresholds, vec![reg.reference.threshold]);
    let tol = reg.rel_tol;
    assert!(close(
        r.welfare_rate / spec.n as f64,
        reg.reference.welfare_per_agent,
        tol
    ));
    assert!(close(r.per_type_utility[0], reg.reference.utility, tol));
    assert!(close(r.rates.p_s[0], reg.reference.p_s, 1e-3));
    assert!(close(r.rates.p_e[0], reg.reference.p_e, tol));
}

#[test]
fn fig1_curve_shape() {
    let reg = regression();
    let c = config("range = { start = 0.0, stop = 0.0005, step = 0.00001 }\np_s = 0.0001");
    let rows = fig1(&c, &ctx()).unwrap();
    assert_eq!(rows[0].utility, 0.0);
    assert_eq!(rows[0].threshold, 0);
    for w in rows.windows(2) {
        assert!(w[1].utility >= w[0].utility - 1e-9);
    }
    // Gains shrink as p_e grows past p_s.
    let gain = |i: usize| rows[i + 1].utility - rows[i].utility;
    assert!(gain(40) < 0.25 * gain(10));
    let at_r1 = rows.iter().find(|r| (r.p_e - 1e-4).abs() < 1e-12).unwrap();
    assert_eq!(at_r1.threshold, reg.fig1.threshold_at_r1);
    assert!(close(at_r1.utility, reg.fig1.utility_at_r1, reg.rel_tol));
    let k = at_r1.threshold as f64;
    assert!((at_r1.satisfaction - k / (k + 1.0)).abs() < 1e-9);
}

#[test]
fn sybil_sweep_baseline_and_landmarks() {
    let reg = regression();
    let c = config("range = { start = 0.0, stop = 12.0, step = 1.0 }\nsybil_fraction = 0.2");
    let s = sybil_sweep(&c, &ctx()).unwrap();
    let zero = &s.rows[0];
    assert!(close(
        zero.non_sybil_utility.unwrap(),
        zero.sybil_utility,
        1e-9
    ));
    assert!(close(
        zero.welfare_per_agent,
        s.baseline_welfare_per_agent,
        1e-9
    ));
    assert_eq!(
        s.first_welfare_gain,
        Some(reg.sybil_sweep.first_welfare_gain)
    );
    assert_eq!(
        s.first_non_sybil_gain,
        Some(reg.sybil_sweep.first_non_sybil_gain)
    );
    assert!(close(
        s.rows[8].welfare_per_agent,
        reg.sybil_sweep.welfare_per_agent_s8,
        reg.rel_tol
    ));
    assert!(s.rows.iter().all(|r| r.status == Status::Converged));
}

#[test]
fn crash_scan_landmarks() {
    let reg = regression();
    let c = config(
        "range = { start = 0.0, stop = 11.0, step = 0.25 }\nsybil_fraction = 0.2\nsybil_count = 1",
    );
    let s = crash_scan(&c, &ctx()).unwrap();
    let find = |pop: &str, m: f64| {
        s.rows
            .iter()
            .find(|r| r.population == pop && r.m == m)
            .unwrap()
    };
    assert_eq!(find("baseline", 0.0).welfare_per_agent, 0.0);
    assert_eq!(find("baseline", 0.0).status, Status::Crash);
    assert!(find("sybil", 2.0).welfare_per_agent < 0.9 * find("baseline", 2.0).welfare_per_agent);
    assert!(find("sybil", 4.25).welfare_per_agent > find("baseline", 4.25).welfare_per_agent);
    assert_eq!(
        s.largest_stable,
        vec![
            (
                "baseline".to_string(),
                Some(reg.crash_scan.baseline_largest_stable)
            ),
            (
                "sybil".to_string(),
                Some(reg.crash_scan.sybil_largest_stable)
            ),
        ]
    );
    assert!(s.reentry.iter().all(|(_, back)| !back));
    for r in &s.rows {
        assert_eq!(
            r.welfare_per_agent == 0.0,
            r.thresholds.iter().all(|&k| k == 0) || r.m == 0.0
        );
    }
}

#[test]
fn collusion_sweep_matches_baselines_and_phases() {
    let reg = regression();
    let c = config("values = [1, 2, 3, 4, 5, 8, 10, 20, 40]\ncolluding_fraction = 0.5");
    let s = collusion_sweep(&c, &ctx()).unwrap();
    assert_eq!(s.rows[0].phase, "baseline");
    let base = s.rows[0].independent_utility.unwrap();
    assert!(close(base, s.rows[0].colluder_utility.unwrap(), 1e-9));
    for (i, &size) in reg.collusion.group_sizes.iter().enumerate() {
        let row = s.rows.iter().find(|r| r.group_size == size).unwrap();
        assert_eq!(row.thresholds, reg.collusion.thresholds[i]);
        assert!(close(
            row.independent_utility.unwrap(),
            reg.collusion.independent_utility[i],
            reg.rel_tol
        ));
        assert!(close(
            row.colluder_utility.unwrap(),
            reg.collusion.colluder_utility[i],
            reg.rel_tol
        ));
        assert_eq!(row.phase, "pareto");
    }
    let phases: Vec<&str> = s.rows.iter().map(|r| r.phase.as_str()).collect();
    assert!(
        phases.contains(&"dip") && phases.last() == Some(&"recovery"),
        "{phases:?}"
    );
    // Non-colluders stay above the baseline throughout.
    assert!(s.rows[1..]
        .iter()
        .all(|r| r.independent_utility.unwrap() > base));
    // The colluders' threshold falls again at large group sizes.
    let last = s.rows.last().unwrap();
    assert!(last.thresholds[1] < s.rows[s.rows.len() - 2].thresholds[1]);
    // Internal share grows with the group.
    for w in s.rows.windows(2) {
        assert!(w[1].internal_fraction.unwrap() > w[0].internal_fraction.unwrap());
    }
}

#[test]
fn equivalence_landmarks() {
    let reg = regression();
    let c = config(
        "range = { start = 0.25, stop = 12.0, step = 0.25 }\nsybil_fraction = 0.2\nsybil_count = 4",
    );
    let e = sybil_equivalence(&c, &ctx()).unwrap();
    assert!(!e.out_of_scope);
    assert!(close(
        e.target_welfare_per_agent,
        reg.sybil_equivalence.target_welfare_per_agent,
        reg.rel_tol
    ));
    assert_eq!(e.found, Some(reg.sybil_equivalence.found));

    // A sybil with no extra weight is the base system again.
    let degenerate = config("values = [3.5, 4.0, 4.5]\nsybil_fraction = 0.2\nsybil_count = 0");
    assert_eq!(
        sybil_equivalence(&degenerate, &ctx()).unwrap().found,
        Some(4.0)
    );
}

#[test]
fn multi_type_equivalence_is_flagged() {
    let text = SYSTEM.replace("fraction = 1.0", "fraction = 0.5")
        + "\n[[system.types]]\nalpha = 0.08\nbeta = 0.01\ngamma = 1.0\ndelta = 0.97\nrho = 1.0\nchi = 2.0\nfraction = 0.5\n"
        + "\n[scenario]\nvalues = [4.0]\nsybil_fraction = 0.2\nsybil_count = 1\n";
    let c = ExperimentConfig::parse(&text).unwrap();
    assert!(sybil_equivalence(&c, &ctx()).unwrap().out_of_scope);
}

#[test]
fn csv_format_and_manifest() {
    let c = config("values = [0.0, 0.0001]\np_s = 0.0001");
    let out = run(
        Command::Fig1,
        &c,
        &RunContext {
            plot_stub: true,
            ..ctx()
        },
    )
    .unwrap();
    let csv = String::from_utf8(out.get("fig1.csv").unwrap().to_vec()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("p_e,p_s,r,threshold,utility,satisfaction,cap_binding")
    );
    assert_eq!(lines.next().unwrap().split(',').count(), 7);
    assert!(out.get("fig1.gp").is_some());

    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), Command::Fig1, "text", &out).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "fig1");
    assert_eq!(
        manifest["config_sha256"],
        "982d9e3eb996f559e633f4d194def3761d909f5a3b647d1a851fead67c32c9d1"
    );
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 2);
}

#[test]
fn every_command_name_is_distinct() {
    let mut names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 9);
}
