//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! non-zero status if any criterion fails. A positional argument restricts
//! the run to criteria whose name contains it.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use prosh_core::augment::{augment, AugEnv, AugPolicy, AugState, RiskRule};
use prosh_core::cmdp::Cmdp;
use prosh_core::config::{Overrides, RunConfig};
use prosh_core::critic::{bellman_residual, cost_value_iteration, perturb, q_learning_cost, CostLearnConfig, QTable, Provenance};
use prosh_core::envs::{self, EnvSpec};
use prosh_core::oracle::brute_force_oracle;
use prosh_core::runner::{run, Command};
use prosh_core::shield::{is_shielded, shield, Atom, ProposedDistribution, ShieldCase, SHIELD_TOL};
use prosh_core::train::{shielded_q_train, TrainConfig, TrainOutcome};
use prosh_core::verify::{check_noise, check_preservation, check_safety, mc_estimate_aug};
use prosh_core::{derive_seed, rng_from_seed, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn exact_env(cmdp: &Cmdp) -> Result<AugEnv> {
    let q = cost_value_iteration(cmdp, 1e-12)?;
    augment(cmdp, &q, RiskRule::QRelative)
}

fn train(env: &AugEnv, x0: f64, episodes: usize, seed: u64) -> Result<TrainOutcome> {
    let cfg = TrainConfig { episodes, ..TrainConfig::default() };
    shielded_q_train(env, x0, &cfg, &mut rng_from_seed(seed))
}

fn deterministic_random() -> Result<Cmdp> {
    envs::build(&EnvSpec::Random { seed: 3, n_states: 4, n_actions: 3, branching: 1, terminal_prob: 0.0, gamma: 0.9 })
}

fn m1_golden() -> Result<Outcome> {
    let m = envs::m1();
    let o = brute_force_oracle(&m, 0.5)?;
    let oracle_ok = o.r_star == 0.5 && o.c_star == 0.5;
    let start = Instant::now();
    let env = exact_env(&m)?;
    let trained = train(&env, 0.5, 20_000, 1)?;
    let mc = mc_estimate_aug(&env, &trained.policy, 0.5, 100_000, None, 2)?;
    let secs = start.elapsed().as_secs_f64();
    let pass = oracle_ok
        && trained.shield_violations == 0
        && mc.reward.mean >= 0.48
        && mc.cost.mean <= 0.52
        && secs < 60.0;
    Ok(Outcome::new(
        pass,
        format!(
            "oracle R*={} C*={}; trained reward={:.4} cost={:.4} in {secs:.1}s (20000 episodes)",
            o.r_star, o.c_star, mc.reward.mean, mc.cost.mean
        ),
    ))
}

fn shield_fuzz() -> Result<Outcome> {
    let mut rng = rng_from_seed(2024);
    let (mut unsound, mut not_identity, mut bad_lambda, mut pass_through) = (0, 0, 0, 0);
    let n = 100_000;
    for i in 0..n {
        let k = rng.gen_range(1..=6);
        let gamma_c = if rng.gen_bool(0.2) { 1.0 } else { rng.gen_range(0.5..1.0) };
        let row: Vec<f64> = (0..k)
            .map(|_| {
                let v: f64 = rng.gen_range(0.0..5.0);
                // Ties exercise the lowest-index backup rule.
                if rng.gen_bool(0.3) { v.round() } else { v }
            })
            .collect();
        let q = QTable { values: vec![row.clone()], gamma_c, provenance: Provenance::Learned };
        let m = rng.gen_range(1..=5);
        let weights: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let preshielded = i % 2 == 1;
        let atoms: Vec<Atom> = weights
            .iter()
            .map(|w| {
                let a = rng.gen_range(0..k);
                let y = if preshielded { row[a] + rng.gen_range(0.0..2.0) } else { rng.gen_range(-6.0..6.0) };
                Atom::new(a, y, w / total)
            })
            .collect();
        let spend = gamma_c * atoms.iter().map(|a| a.prob * a.risk.max(row[a.action])).sum::<f64>();
        let floor = q.floor(0);
        let x = match (preshielded, i % 10) {
            (true, _) => spend + rng.gen_range(0.0..1.0),
            (false, 0) => floor,
            (false, 2) => spend,
            _ => rng.gen_range(-6.0..6.0),
        };
        let st = AugState::new(0, x);
        let p = ProposedDistribution { atoms: atoms.clone() };
        let out = shield(&p, &st, &q)?;
        if !is_shielded(&out.atoms, &st, &q, SHIELD_TOL) {
            unsound += 1;
        }
        if !(0.0..=1.0).contains(&out.lambda) {
            bad_lambda += 1;
        }
        if out.case == ShieldCase::PassThrough {
            pass_through += 1;
            let clamped: Vec<Atom> =
                atoms.iter().map(|a| Atom::new(a.action, a.risk.max(row[a.action]), a.prob)).collect();
            if out.atoms != clamped || out.lambda != 0.0 {
                not_identity += 1;
            }
        }
        if preshielded && (out.atoms != atoms || out.case != ShieldCase::PassThrough) {
            not_identity += 1;
        }
    }
    Ok(Outcome::new(
        unsound == 0 && not_identity == 0 && bad_lambda == 0,
        format!("{n} triples: {unsound} unsound, {not_identity} non-identity pass-throughs (of {pass_through}), {bad_lambda} lambda out of range"),
    ))
}

fn safety_bound() -> Result<Outcome> {
    let (mut cells, mut failures, mut worst) = (0, Vec::new(), f64::NEG_INFINITY);
    let mut unshielded = 0;
    for env_seed in 0..20u64 {
        let m = envs::by_name("random", env_seed)?;
        let exact = cost_value_iteration(&m, 1e-12)?;
        for (di, &delta) in [0.0, 0.05, 0.2].iter().enumerate() {
            for seed in 0..3u64 {
                let cell = derive_seed(env_seed, (di as u64) * 16 + seed);
                let q = perturb(&exact, delta, &m.terminal, &mut rng_from_seed(cell))?;
                let dist = q.distance(&exact);
                let env = augment(&m, &q, RiskRule::QRelative)?;
                let x0 = q.floor(m.initial_state) + 0.5 * m.gamma_c;
                let trained = train(&env, x0, 1000, derive_seed(cell, 1))?;
                let rep = check_safety(&env, &trained.policy, x0, dist, 100_000, derive_seed(cell, 2))?;
                unshielded += trained.shield_violations + rep.params["unshielded"] as usize;
                worst = worst.max(rep.estimate.mean - rep.bound);
                cells += 1;
                if !rep.pass || trained.shield_violations > 0 {
                    failures.push(format!("env {env_seed} delta {delta} seed {seed}: {}", rep.summary()));
                }
            }
        }
    }
    Ok(Outcome::new(
        failures.is_empty(),
        format!(
            "{cells} cells, {} failed, {unshielded} unshielded decisions, max(mean - bound) = {worst:.4}{}",
            failures.len(),
            failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default()
        ),
    ))
}

fn fixtures() -> Result<Vec<(String, Cmdp)>> {
    Ok(vec![
        ("m1".into(), envs::m1()),
        ("chain".into(), envs::by_name("chain", 0)?),
        ("loop".into(), envs::by_name("loop", 0)?),
        ("random(7)".into(), envs::by_name("random", 7)?),
        ("det-random".into(), deterministic_random()?),
    ])
}

fn preservation() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, (name, m)) in fixtures()?.into_iter().enumerate() {
        let env = exact_env(&m)?;
        let x0 = m.gamma_c * m.budget_d;
        let trained = train(&env, x0, 5000, 100 + i as u64)?;
        let rep = check_preservation(&env, &trained.policy, x0, 100_000, 200 + i as u64)?;
        pass &= rep.pass;
        parts.push(format!(
            "{name}: dC={:.4}/{:.4} dR={:.4}/{:.4}",
            (rep.params["aug_cost"] - rep.params["projected_cost"]).abs(),
            rep.margin,
            (rep.params["aug_reward"] - rep.params["projected_reward"]).abs(),
            rep.params["reward_margin"]
        ));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

/// Always the costliest action, allocated its minimal admissible risk.
struct MaxCostNoise<'a> {
    env: &'a AugEnv,
}

impl AugPolicy for MaxCostNoise<'_> {
    fn distribution(&self, st: &AugState) -> Result<Vec<Atom>> {
        let s = st.base_state;
        let costs = &self.env.cmdp.cost[s];
        let a = (0..costs.len()).fold(0, |best, a| if costs[a] > costs[best] { a } else { best });
        Ok(vec![Atom::new(a, self.env.q.get(s, a), 1.0)])
    }
}

fn noise_bound() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, m) in [envs::by_name("loop", 0)?, envs::m1()].into_iter().enumerate() {
        let env = exact_env(&m)?;
        let x0 = m.gamma_c * m.budget_d;
        let trained = train(&env, x0, 5000, 300 + i as u64)?;
        let noise = MaxCostNoise { env: &env };
        for xi in [0.01, 0.1, 0.5] {
            let rep = check_noise(&env, &trained.policy, &noise, xi, x0, 50_000, 400 + i as u64)?;
            pass &= rep.pass;
            parts.push(format!("{} xi={xi}: {:.3} <= {:.3}", m.name, rep.estimate.mean, rep.bound + rep.margin));
        }
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

fn optimality_trend() -> Result<Outcome> {
    let deltas = [0.2, 0.1, 0.05, 0.0];
    let mut parts = Vec::new();
    let mut pass = true;
    let fixtures = [("m1", envs::m1()), ("chain", envs::by_name("chain", 0)?), ("loop", envs::by_name("loop", 0)?)];
    for (i, (name, m)) in fixtures.into_iter().enumerate() {
        let oracle = brute_force_oracle(&m, m.budget_d)?;
        let exact = cost_value_iteration(&m, 1e-12)?;
        let mass = prosh_core::cmdp::discount_mass(m.gamma_c, m.horizon_cap);
        let mut gaps = Vec::new();
        for &delta in &deltas {
            // Same noise pattern at every size: only its scale changes.
            let q = perturb(&exact, delta, &m.terminal, &mut rng_from_seed(500 + i as u64))?;
            let env = augment(&m, &q, RiskRule::QRelative)?;
            let x0 = m.gamma_c * (m.budget_d - delta * (1.0 + mass));
            let trained = train(&env, x0, 20_000, 600 + i as u64)?;
            let mc = mc_estimate_aug(&env, &trained.policy, x0, 100_000, None, 700 + i as u64)?;
            gaps.push((oracle.r_star - mc.reward.mean, mc.reward.ci95));
        }
        let monotone = gaps.windows(2).all(|w| w[1].0 <= w[0].0 + w[0].1 + w[1].1);
        let last = gaps.last().unwrap().0;
        let close = last <= 0.02 * oracle.reward_range;
        pass &= monotone && close;
        parts.push(format!(
            "{name}: gaps [{}] range {:.3}",
            gaps.iter().map(|g| format!("{:.4}", g.0)).collect::<Vec<_>>().join(", "),
            oracle.reward_range
        ));
    }
    Ok(Outcome::new(pass, parts.join("; ")))
}

fn critic_convergence() -> Result<Outcome> {
    let mut all = fixtures()?;
    for seed in 0..20 {
        all.push((format!("random({seed})"), envs::by_name("random", seed)?));
    }
    let mut worst = 0.0f64;
    for (_, m) in &all {
        let q = cost_value_iteration(m, 1e-12)?;
        worst = worst.max(bellman_residual(m, &q));
    }
    let m = envs::m1();
    let exact = cost_value_iteration(&m, 1e-12)?;
    let dists: Vec<f64> = (0..3)
        .map(|seed| {
            let learned = q_learning_cost(&m, &CostLearnConfig::default(), &mut rng_from_seed(seed))?;
            Ok(learned.table.distance(&exact))
        })
        .collect::<Result<_>>()?;
    let pass = worst < 1e-10 && dists.iter().all(|&d| d <= 0.05);
    Ok(Outcome::new(
        pass,
        format!(
            "max residual {worst:.2e} over {} fixtures; learned M1 distances {:?} (20000 episodes)",
            all.len(),
            dists.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>()
        ),
    ))
}

fn read_all(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)?
        .map(|e| {
            let e = e?;
            Ok((e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?))
        })
        .collect::<std::io::Result<_>>()?;
    files.sort();
    Ok(files)
}

fn determinism() -> Result<Outcome> {
    let configs = [
        "[env]\nname = \"m1\"\n[train]\nepisodes = 2000\n[verify]\nn = 5000\n",
        "[env]\nname = \"random\"\nseed = 4\nn_states = 5\nn_actions = 3\n[critic]\nmode = \"perturbed\"\ndelta = 0.05\n[train]\nepisodes = 500\n[verify]\nn = 2000\n[sweep]\ndelta_b = [0.0, 0.05]\nseeds = [0, 1]\n[run]\nseed = 9\njobs = 2\n",
        "[env]\nname = \"chain\"\nn = 5\nshortcut = [2.0, 1.0]\n[critic]\nmode = \"learned\"\n[critic.learn]\nepisodes = 2000\n[train]\nepisodes = 500\n[verify]\nn = 2000\n",
    ];
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for (i, text) in configs.iter().enumerate() {
        for cmd in [Command::Solve, Command::Train, Command::Verify, Command::Sweep] {
            if cmd == Command::Solve && i == 1 {
                continue;
            }
            let mut outputs = Vec::new();
            for _ in 0..2 {
                let dir = tempfile::tempdir()?;
                let mut cfg = RunConfig::parse(text)?;
                cfg.apply(&Overrides { out: Some(dir.path().to_path_buf()), ..Overrides::default() });
                run(cmd, &cfg)?;
                outputs.push(read_all(dir.path())?);
            }
            compared += outputs[0].len();
            if outputs[0] != outputs[1] {
                mismatches.push(format!("config {i} {}", cmd.name()));
            }
        }
    }
    Ok(Outcome::new(
        mismatches.is_empty(),
        format!("{compared} files compared across reruns; mismatches: {:?}", mismatches),
    ))
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 8] = [
        ("m1_golden", m1_golden),
        ("shield_soundness", shield_fuzz),
        ("safety_bound", safety_bound),
        ("preservation", preservation),
        ("noise_bound", noise_bound),
        ("optimality_trend", optimality_trend),
        ("critic_convergence", critic_convergence),
        ("determinism", determinism),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|p| !name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = f().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        failed += usize::from(!outcome.pass);
        println!(
            "{} criterion {} {name} ({secs:.1}s): {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
