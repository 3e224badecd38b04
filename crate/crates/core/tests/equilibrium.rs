use scrip::equilibrium::{best_response, population_welfare};
use scrip::*;

fn reference() -> AgentType {
    AgentType {
        alpha: 0.08,
        beta: 0.01,
        gamma: 1.0,
        delta: 0.97,
        rho: 1.0,
        chi: 1.0,
    }
}

fn opts() -> EquilibriumOptions {
    EquilibriumOptions::default()
}

#[test]
fn reference_system_has_one_positive_threshold() {
    let r = find_equilibrium(&SystemSpec::single(reference(), 10_000, 4.0), &opts()).unwrap();
    assert_eq!(r.status, Status::Converged);
    assert_eq!(r.profile.thresholds.len(), 1);
    assert!(r.profile.thresholds[0] > 0);
    assert!(!r.cap_binding);
    assert!(r.epsilon <= 1e-4);
    // Operating point behind the p_e sweep.
    assert!((r.rates.p_s[0] - 1e-4).abs() < 1e-6, "{}", r.rates.p_s[0]);
}

#[test]
fn converged_profile_is_a_fixed_point() {
    for m in [1.0, 4.0, 8.0, 9.5] {
        let spec = SystemSpec::single(reference(), 10_000, m);
        let r = find_equilibrium(&spec, &opts()).unwrap();
        assert_eq!(r.status, Status::Converged, "m = {m}");
        let br = best_response(&spec, &r.profile, &opts()).unwrap().unwrap();
        assert!(
            br.next_profile() == r.profile || br.max_gap() <= 1e-4,
            "m = {m}"
        );
    }
}

#[test]
fn splitting_a_type_changes_nothing() {
    let whole = SystemSpec::single(reference(), 10_000, 4.0);
    let mut split = whole.clone();
    split.types = vec![reference(), reference()];
    split.fractions = vec![0.5, 0.5];
    let a = find_equilibrium(&whole, &opts()).unwrap();
    let b = find_equilibrium(&split, &opts()).unwrap();
    assert_eq!(b.profile.thresholds, vec![a.profile.thresholds[0]; 2]);
    assert!((a.welfare_rate - b.welfare_rate).abs() <= 1e-9 * a.welfare_rate);
    for t in 0..2 {
        assert!(
            (a.per_type_utility[0] - b.per_type_utility[t]).abs() <= 1e-9 * a.per_type_utility[0]
        );
        assert!((a.rates.p_e[0] - b.rates.p_e[t]).abs() <= 1e-9 * a.rates.p_e[0]);
    }
    let (ma, mb) = (a.mstar.unwrap(), b.mstar.unwrap());
    for i in 0..ma.mass[0].len() {
        assert!((ma.mass[0][i] - mb.mass[0][i] - mb.mass[1][i]).abs() <= 1e-9);
    }
}

// More money means fewer volunteers and easier earning, so converged
// thresholds fall as m grows; welfare rises until the crash.
#[test]
fn money_supply_comparative_statics() {
    let grid: Vec<f64> = (1..=20).map(|i| 0.5 * i as f64 - 0.25).collect();
    let mut last: Option<(u32, f64)> = None;
    for &m in &grid {
        let r = find_equilibrium(&SystemSpec::single(reference(), 10_000, m), &opts()).unwrap();
        if r.status != Status::Converged {
            continue;
        }
        let k = r.profile.thresholds[0];
        if let Some((prev_k, prev_w)) = last {
            assert!(k <= prev_k, "threshold rose to {k} at m = {m}");
            assert!(r.welfare_rate > prev_w, "welfare fell at m = {m}");
        }
        last = Some((k, r.welfare_rate));
    }
}

#[test]
fn crashes_never_recover() {
    let mut crashed_at = None;
    for i in 36..=48 {
        let m = 0.25 * i as f64;
        let r = find_equilibrium(&SystemSpec::single(reference(), 10_000, m), &opts()).unwrap();
        match (r.status, crashed_at) {
            (Status::Crash, None) => crashed_at = Some(m),
            (Status::Converged, Some(c)) => panic!("converged at m = {m} after crashing at {c}"),
            _ => {}
        }
    }
    assert!(crashed_at.is_some());
}

#[test]
fn no_money_is_a_crash() {
    let r = find_equilibrium(&SystemSpec::single(reference(), 10_000, 0.0), &opts()).unwrap();
    assert_eq!(r.status, Status::Crash);
    assert!(r.profile.is_trivial());
    assert_eq!(r.welfare_rate, 0.0);
}

#[test]
fn crash_result_reports_zero_welfare_and_trivial_profile() {
    let r = find_equilibrium(&SystemSpec::single(reference(), 10_000, 10.5), &opts()).unwrap();
    assert_eq!(r.status, Status::Crash);
    assert!(r.profile.is_trivial());
    assert_eq!(r.welfare_rate, 0.0);
    assert_eq!(r.lower_profile, Some(StrategyProfile::uniform(1, 0)));
}

#[test]
fn nobody_volunteering_kills_the_market() {
    let spec = SystemSpec::single(reference(), 1000, 2.0);
    let profile = StrategyProfile::uniform(1, 0);
    let mstar = solve_mstar(&spec, &profile).unwrap_err();
    assert!(matches!(mstar, Error::Infeasible { .. }));
    // With money but nobody working there is no steady state to trade in.
    let poor = SystemSpec::single(reference(), 1000, 0.0);
    let (d, _) = solve_mstar(&poor, &profile).unwrap();
    let rates = mean_field_rates(&poor, &profile, &d).unwrap();
    assert_eq!(rates.p_e[0], 0.0);
    assert_eq!(rates.p_s[0], 0.0);
}

#[test]
fn everyone_willing_earns_and_spends_alike() {
    // beta = 1 and nobody at threshold: every round is a paid trade.
    let agent = AgentType {
        beta: 1.0,
        ..reference()
    };
    let n = 1000;
    let spec = SystemSpec::single(agent, n, 1.0);
    let profile = StrategyProfile::uniform(1, 64);
    let (d, _) = solve_mstar(&spec, &profile).unwrap();
    let rates = mean_field_rates(&spec, &profile, &d).unwrap();
    let paying = 1.0 - d.mass[0][0];
    let willing = 1.0 - d.mass[0][64];
    assert!((rates.p_s[0] - 1.0 / n as f64).abs() < 1e-12);
    // Own weight chi plus the others' expected able weight V - beta chi.
    let expected = paying / (n as f64 * willing);
    assert!(
        (rates.p_e[0] - expected).abs() < 1e-12 * expected,
        "{} vs {expected}",
        rates.p_e[0]
    );
}

#[test]
fn welfare_is_gain_times_trade_rate() {
    let spec = SystemSpec::single(reference(), 10_000, 4.0);
    let r = find_equilibrium(&spec, &opts()).unwrap();
    let mstar = r.mstar.clone().unwrap();
    let trades = spec.n as f64 * r.rates.p_s[0] * (1.0 - mstar.mass[0][0]) * spec.n as f64;
    let expected = (1.0 - 0.08) * trades;
    assert!((r.welfare_rate - expected).abs() <= 1e-9 * expected);
    assert_eq!(social_welfare(&spec, &r).unwrap(), r.welfare_rate);
    let pop = Population::from_spec(&spec).unwrap();
    assert_eq!(
        population_welfare(&pop, &r.profile, &mstar, &r.rates),
        r.welfare_rate
    );
    let zero = population_welfare(&pop, &StrategyProfile::uniform(1, 0), &mstar, &r.rates);
    assert_eq!(zero, 0.0);
}

#[test]
fn parallel_and_sequential_agree() {
    let spec = apply_sybils(&SystemSpec::single(reference(), 10_000, 4.0), 0, 0.2, 3).unwrap();
    let par = find_equilibrium(&spec, &opts()).unwrap();
    let seq = find_equilibrium(
        &spec,
        &EquilibriumOptions {
            exec: Exec::Sequential,
            ..opts()
        },
    )
    .unwrap();
    assert_eq!(par, seq);
}

#[test]
fn sybils_earn_more_than_honest_agents() {
    let spec = apply_sybils(&SystemSpec::single(reference(), 10_000, 4.0), 0, 0.2, 2).unwrap();
    let r = find_equilibrium(&spec, &opts()).unwrap();
    assert_eq!(r.status, Status::Converged);
    assert!(r.rates.p_e[1] > r.rates.p_e[0]);
    assert!(r.profile.thresholds[1] < r.profile.thresholds[0]);
    assert!(r.per_type_utility[1] > r.per_type_utility[0]);
}

#[test]
fn singleton_groups_match_the_plain_system() {
    let base = SystemSpec::single(reference(), 10_000, 4.0);
    let plain = find_equilibrium(&base, &opts()).unwrap();
    let groups =
        find_group_equilibrium(&make_collusion_spec(&base, 1, 0.5).unwrap(), &opts()).unwrap();
    assert_eq!(
        groups.profile.thresholds,
        vec![plain.profile.thresholds[0]; 2]
    );
    assert!((groups.welfare_rate - plain.welfare_rate).abs() <= 1e-9 * plain.welfare_rate);
}

#[test]
fn small_groups_help_everyone() {
    let base = SystemSpec::single(reference(), 10_000, 4.0);
    let plain = find_equilibrium(&base, &opts()).unwrap();
    let u0 = plain.per_type_utility[0];
    for c in [2, 4] {
        let r =
            find_group_equilibrium(&make_collusion_spec(&base, c, 0.5).unwrap(), &opts()).unwrap();
        assert_eq!(r.status, Status::Converged);
        assert!(
            r.per_type_utility.iter().all(|&u| u > u0),
            "c = {c}: {:?}",
            r.per_type_utility
        );
    }
}
