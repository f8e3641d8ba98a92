//! The `solve`, `train`, `verify` and `sweep` pipelines behind the command
//! line. Every artifact is a function of the configuration and its seed.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{aug_step, augment, sample_atom, AugAction, AugEnv, AugTransition};
use crate::cmdp::{rollout, Cmdp, Step};
use crate::config::{CriticMode, RunConfig};
use crate::critic::{cost_value_iteration, perturb, q_learning_cost, QTable};
use crate::error::{Error, Result};
use crate::io::{write_csv, write_json, write_jsonl};
use crate::oracle::brute_force_oracle;
use crate::policy::{project, TabularAugPolicy, UniformAugPolicy};
use crate::shield::{ShieldRecord, ShieldedPolicy};
use crate::train::{shielded_q_train, TrainConfig, TrainOutcome};
use crate::verify::{check_noise, check_optimality, check_preservation, check_safety, CheckReport};
use crate::{derive_seed, rng_from_seed};

/// Version of the artifact layout, recorded in every `manifest.json`.
pub const SCHEMA_VERSION: u32 = 1;

const STREAM_CRITIC: u64 = 11;
const STREAM_TRAIN: u64 = 12;
const STREAM_VERIFY: u64 = 13;
const STREAM_EXPORT: u64 = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Solve,
    Train,
    Verify,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Train => "train",
            Command::Verify => "verify",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    /// False when a check failed or training saw an unshielded decision.
    pub pass: bool,
    pub summary: String,
}

/// Critic for a run: the exact table, a perturbation of it, or a learned
/// one; returned with its sup-norm distance to the exact table.
pub fn build_critic(cfg: &RunConfig, cmdp: &Cmdp, delta: f64, seed: u64) -> Result<(QTable, f64)> {
    let exact = cost_value_iteration(cmdp, cfg.critic.tol)?;
    let mut rng = rng_from_seed(derive_seed(seed, STREAM_CRITIC));
    let q = if delta > 0.0 {
        perturb(&exact, delta, &cmdp.terminal, &mut rng)?
    } else if cfg.critic.mode == CriticMode::Learned {
        q_learning_cost(cmdp, &cfg.critic.learn, &mut rng)?.table
    } else {
        exact.clone()
    };
    let dist = q.distance(&exact);
    Ok((q, dist))
}

fn train_with(env: &AugEnv, x0: f64, train: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    shielded_q_train(env, x0, train, &mut rng_from_seed(derive_seed(seed, STREAM_TRAIN)))
}

#[derive(Serialize)]
struct Manifest {
    schema_version: u32,
    command: &'static str,
    seed: u64,
    files: Vec<String>,
    config: serde_json::Value,
}

fn finish(out: &Path, cmd: Command, cfg: &RunConfig, mut files: Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    let mut config = serde_json::to_value(cfg)?;
    // The output directory does not influence any result.
    if let Some(run) = config.get_mut("run").and_then(|r| r.as_object_mut()) {
        run.remove("out");
    }
    let names = files.iter().filter_map(|f| f.file_name()).map(|f| f.to_string_lossy().into_owned()).collect();
    let manifest = Manifest { schema_version: SCHEMA_VERSION, command: cmd.name(), seed: cfg.run.seed, files: names, config };
    let path = out.join("manifest.json");
    write_json(&path, &manifest)?;
    files.push(path);
    Ok(files)
}

/// Validates `cfg` and runs `cmd`, writing artifacts under `cfg.run.out`.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<RunOutcome> {
    let cmdp = cfg.validate()?;
    let out = cfg.run.out.clone();
    fs::create_dir_all(&out)?;
    let (files, pass, summary) = match cmd {
        Command::Solve => solve(cfg, &cmdp, &out)?,
        Command::Train => train(cfg, &cmdp, &out)?,
        Command::Verify => verify(cfg, &cmdp, &out)?,
        Command::Sweep => sweep(cfg, &cmdp, &out)?,
    };
    let files = finish(&out, cmd, cfg, files)?;
    Ok(RunOutcome { files, pass, summary })
}

#[derive(Serialize)]
struct OracleRow {
    budget: f64,
    r_star: f64,
    c_star: f64,
    alpha: f64,
    first: String,
    second: String,
    n_policies: usize,
    reward_range: f64,
}

#[derive(Serialize)]
struct FrontierRow {
    actions: String,
    reward: f64,
    cost: f64,
}

fn join(actions: &[usize]) -> String {
    actions.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" ")
}

fn solve(cfg: &RunConfig, cmdp: &Cmdp, out: &Path) -> Result<(Vec<PathBuf>, bool, String)> {
    let o = brute_force_oracle(cmdp, cmdp.budget_d)?;
    let q = cost_value_iteration(cmdp, cfg.critic.tol)?;
    let oracle_path = out.join("oracle.csv");
    write_csv(
        &oracle_path,
        &["budget", "r_star", "c_star", "alpha", "first", "second", "n_policies", "reward_range"],
        &[OracleRow {
            budget: cmdp.budget_d,
            r_star: o.r_star,
            c_star: o.c_star,
            alpha: o.alpha,
            first: join(&o.first),
            second: join(&o.second),
            n_policies: o.n_policies,
            reward_range: o.reward_range,
        }],
    )?;
    let frontier_path = out.join("frontier.csv");
    let rows: Vec<FrontierRow> =
        o.frontier.iter().map(|p| FrontierRow { actions: join(&p.actions), reward: p.reward, cost: p.cost }).collect();
    write_csv(&frontier_path, &["actions", "reward", "cost"], &rows)?;
    let q_path = out.join("qstar.csv");
    q.write_csv(&q_path)?;
    let summary = format!("R* = {} at C = {} (alpha = {}, {} policies)", o.r_star, o.c_star, o.alpha, o.n_policies);
    Ok((vec![oracle_path, frontier_path, q_path], true, summary))
}

const LOG_HEADERS: [&str; 7] =
    ["episode", "steps", "disc_reward", "disc_cost", "clamp_events", "mean_lambda", "switch_step"];

fn train(cfg: &RunConfig, cmdp: &Cmdp, out: &Path) -> Result<(Vec<PathBuf>, bool, String)> {
    let seed = cfg.run.seed;
    let (q, dist) = build_critic(cfg, cmdp, cfg.critic.delta, seed)?;
    let env = augment(cmdp, &q, cfg.augment.rule)?;
    let x0 = cfg.x0(cmdp, cfg.critic.delta);
    let trained = train_with(&env, x0, &cfg.train, seed)?;

    let q_path = out.join("qtable.csv");
    q.write_csv(&q_path)?;
    let policy_path = out.join("policy.csv");
    trained.policy.proposer.write_csv(&policy_path)?;
    let log_path = out.join("train_log.csv");
    write_csv(&log_path, &LOG_HEADERS, &trained.log)?;
    let mut files = vec![q_path, policy_path, log_path];
    files.extend(export_episodes(&env, &trained.policy, x0, cfg.run.export_episodes, seed, out)?);

    let tail = &trained.log[trained.log.len().saturating_sub(100)..];
    let mean = |f: fn(&crate::train::EpisodeLog) -> f64| {
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(f).sum::<f64>() / tail.len() as f64
        }
    };
    let summary = format!(
        "trained {} episodes from x0 = {x0} (critic distance {dist}); last-100 reward {:.4}, cost {:.4}; {} unshielded decisions",
        trained.log.len(),
        mean(|l| l.disc_reward),
        mean(|l| l.disc_cost),
        trained.shield_violations
    );
    Ok((files, trained.shield_violations == 0, summary))
}

/// Writes sample augmented episodes, the shield decisions taken along them,
/// and episodes of the projected base policy.
fn export_episodes(
    env: &AugEnv,
    policy: &ShieldedPolicy<TabularAugPolicy>,
    x0: f64,
    episodes: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let horizon = env.cmdp.mc_horizon();
    let mut rng = rng_from_seed(derive_seed(seed, STREAM_EXPORT));
    let (mut transitions, mut decisions) = (Vec::new(), Vec::new());
    for _ in 0..episodes {
        let mut st = env.initial(x0);
        for _ in 0..horizon {
            if env.is_terminal(&st) {
                break;
            }
            let d = policy.decide(&st)?;
            decisions.push(ShieldRecord::new(&st, &d));
            let atom = sample_atom(&d.atoms, &mut rng);
            let o = aug_step(env, &st, &AugAction { base_action: atom.action, allocated_risk: atom.risk }, &mut rng)?;
            transitions.push(AugTransition {
                s: st.base_state,
                x: st.risk,
                a: atom.action,
                y: atom.risk,
                r: o.reward,
                c: o.cost,
                s_next: o.next.base_state,
                x_next: o.next.risk,
            });
            st = o.next;
        }
    }
    let mut proj = project(policy, env, x0)?;
    let mut base: Vec<Step> = Vec::new();
    for _ in 0..episodes {
        base.extend(rollout(&env.cmdp, &mut proj, horizon, &mut rng)?.steps);
    }
    let paths = [out.join("aug_trajectories.jsonl"), out.join("shield_decisions.jsonl"), out.join("trajectories.jsonl")];
    write_jsonl(&paths[0], &transitions)?;
    write_jsonl(&paths[1], &decisions)?;
    write_jsonl(&paths[2], &base)?;
    Ok(paths.to_vec())
}

fn verify(cfg: &RunConfig, cmdp: &Cmdp, out: &Path) -> Result<(Vec<PathBuf>, bool, String)> {
    let seed = cfg.run.seed;
    let n = cfg.verify.n;
    let (q, dist) = build_critic(cfg, cmdp, cfg.critic.delta, seed)?;
    let env = augment(cmdp, &q, cfg.augment.rule)?;
    let x0 = cfg.x0(cmdp, cfg.critic.delta);
    let trained = train_with(&env, x0, &cfg.train, seed)?;
    let policy = &trained.policy;
    let vs = |k: u64| derive_seed(derive_seed(seed, STREAM_VERIFY), k);

    let mut reports: Vec<CheckReport> = vec![
        check_safety(&env, policy, x0, dist, n, vs(1))?,
        check_preservation(&env, policy, x0, n, vs(2))?,
    ];
    let noise = UniformAugPolicy { q: q.clone(), risk: None };
    reports.push(check_noise(&env, policy, &noise, cfg.verify.xi, x0, n, vs(3))?);
    let mut notes = Vec::new();
    if cmdp.is_deterministic() {
        match check_optimality(&env, policy, x0, dist, cfg.verify.tol, n, vs(4)) {
            Ok(r) => reports.push(r),
            Err(Error::EnumerationBudget { count, .. }) => {
                notes.push(format!("optimality skipped: {count} deterministic policies exceed the enumeration limit"))
            }
            Err(e) => return Err(e),
        }
    } else {
        notes.push("optimality skipped: environment is stochastic".to_string());
    }
    if trained.shield_violations > 0 {
        notes.push(format!("training saw {} unshielded decisions", trained.shield_violations));
    }

    let checks_path = out.join("checks.jsonl");
    let lines: Vec<serde_json::Value> = reports.iter().map(CheckReport::json_line).collect();
    write_jsonl(&checks_path, &lines)?;
    let pass = trained.shield_violations == 0 && reports.iter().all(|r| r.pass);
    let mut summary: Vec<String> = reports.iter().map(CheckReport::summary).collect();
    for r in &reports {
        summary.extend(r.notes.iter().map(|n| format!("{}: {n}", r.check)));
    }
    summary.extend(notes);
    summary.push(format!("overall {}", if pass { "PASS" } else { "FAIL" }));
    let summary = summary.join("\n");
    let summary_path = out.join("summary.txt");
    fs::write(&summary_path, format!("{summary}\n"))?;
    Ok((vec![checks_path, summary_path], pass, summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub delta_b: f64,
    pub x0: f64,
    pub xi: f64,
    pub seed: u64,
    pub realized_delta: f64,
    pub cost_mean: f64,
    pub cost_ci95: f64,
    pub reward_mean: f64,
    pub reward_ci95: f64,
    pub bound: f64,
    pub pass: bool,
    pub shield_violations: usize,
}

const SWEEP_HEADERS: [&str; 12] = [
    "delta_b",
    "x0",
    "xi",
    "seed",
    "realized_delta",
    "cost_mean",
    "cost_ci95",
    "reward_mean",
    "reward_ci95",
    "bound",
    "pass",
    "shield_violations",
];

fn sweep_cell(cfg: &RunConfig, cmdp: &Cmdp, delta: f64, x0: Option<f64>, xi: f64, seed: u64) -> Result<SweepRow> {
    let (q, dist) = build_critic(cfg, cmdp, delta, seed)?;
    let env = augment(cmdp, &q, cfg.augment.rule)?;
    let x0 = x0.unwrap_or_else(|| cfg.x0(cmdp, delta));
    let train = TrainConfig { xi, ..cfg.train };
    let trained = train_with(&env, x0, &train, seed)?;
    let rep = check_safety(&env, &trained.policy, x0, dist, cfg.verify.n, derive_seed(seed, STREAM_VERIFY))?;
    Ok(SweepRow {
        delta_b: delta,
        x0,
        xi,
        seed,
        realized_delta: dist,
        cost_mean: rep.estimate.mean,
        cost_ci95: rep.estimate.ci95,
        reward_mean: rep.params["reward_mean"],
        reward_ci95: rep.params["reward_ci95"],
        bound: rep.bound,
        pass: rep.pass && trained.shield_violations == 0,
        shield_violations: trained.shield_violations,
    })
}

fn sweep(cfg: &RunConfig, cmdp: &Cmdp, out: &Path) -> Result<(Vec<PathBuf>, bool, String)> {
    let x0s: Vec<Option<f64>> =
        if cfg.sweep.x0.is_empty() { vec![None] } else { cfg.sweep.x0.iter().copied().map(Some).collect() };
    let xis = if cfg.sweep.xi.is_empty() { vec![cfg.train.xi] } else { cfg.sweep.xi.clone() };
    let mut cells = Vec::new();
    for &delta in &cfg.sweep.delta_b {
        for &x0 in &x0s {
            for &xi in &xis {
                for &seed in &cfg.sweep.seeds {
                    cells.push((delta, x0, xi, seed));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        cells.par_iter().map(|&(d, x0, xi, seed)| sweep_cell(cfg, cmdp, d, x0, xi, seed)).collect::<Result<_>>()
    })?;
    let path = out.join("sweep.csv");
    write_csv(&path, &SWEEP_HEADERS, &rows)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    let summary = format!("{} cells, {} failed safety", rows.len(), failed);
    Ok((vec![path], failed == 0, summary))
}
