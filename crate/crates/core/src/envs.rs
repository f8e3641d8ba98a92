//! Built-in environments.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{default_horizon, Cmdp};
use crate::error::{Error, Result};
use crate::rng_from_seed;

/// Environment description, as found in the `[env]` section of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    /// The four-state motivating example: a costly rewarded branch and a free
    /// unrewarded one, undiscounted, budget 0.5.
    M1,
    /// Deterministic line of `n` states ending in a terminal state, with an
    /// optional `(reward, cost)` shortcut from the first state to the end.
    Chain {
        n: usize,
        #[serde(default = "default_step_reward")]
        step_reward: f64,
        #[serde(default)]
        step_cost: f64,
        #[serde(default)]
        shortcut: Option<(f64, f64)>,
        #[serde(default = "one")]
        gamma: f64,
    },
    /// A single non-terminal state whose actions all self-loop.
    Loop {
        #[serde(default = "default_loop_rewards")]
        rewards: Vec<f64>,
        #[serde(default = "default_loop_costs")]
        costs: Vec<f64>,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// Seeded random CMDP with `n_states` non-terminal states plus one
    /// terminal state. Each pair moves to `branching` random successors, and
    /// to the terminal state with probability `terminal_prob`.
    Random {
        seed: u64,
        n_states: usize,
        n_actions: usize,
        #[serde(default = "default_branching")]
        branching: usize,
        #[serde(default = "default_terminal_prob")]
        terminal_prob: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.9
}
fn default_step_reward() -> f64 {
    0.25
}
fn default_loop_rewards() -> Vec<f64> {
    vec![0.0, 1.0]
}
fn default_loop_costs() -> Vec<f64> {
    vec![0.0, 1.0]
}
fn default_branching() -> usize {
    2
}
fn default_terminal_prob() -> f64 {
    0.1
}

/// Builds a CMDP by name with default parameters (`m1`, `chain`, `loop`,
/// `random`).
pub fn by_name(name: &str, seed: u64) -> Result<Cmdp> {
    let spec = match name {
        "m1" => EnvSpec::M1,
        "chain" => EnvSpec::Chain {
            n: 5,
            step_reward: default_step_reward(),
            step_cost: 0.0,
            shortcut: Some((2.0, 1.0)),
            gamma: 1.0,
        },
        "loop" => EnvSpec::Loop {
            rewards: default_loop_rewards(),
            costs: default_loop_costs(),
            gamma: default_gamma(),
        },
        "random" => EnvSpec::Random {
            seed,
            n_states: 5,
            n_actions: 3,
            branching: default_branching(),
            terminal_prob: default_terminal_prob(),
            gamma: default_gamma(),
        },
        other => return Err(Error::UnknownEnvironment(other.to_string())),
    };
    build(&spec)
}

/// Builds the CMDP described by `spec`. Pure: equal specs give equal CMDPs.
pub fn build(spec: &EnvSpec) -> Result<Cmdp> {
    match spec {
        EnvSpec::M1 => Ok(m1()),
        EnvSpec::Chain { n, step_reward, step_cost, shortcut, gamma } => {
            chain(*n, *step_reward, *step_cost, *shortcut, *gamma)
        }
        EnvSpec::Loop { rewards, costs, gamma } => self_loop(rewards, costs, *gamma),
        EnvSpec::Random { seed, n_states, n_actions, branching, terminal_prob, gamma } => {
            random(*seed, *n_states, *n_actions, *branching, *terminal_prob, *gamma)
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("gamma {gamma} outside (0, 1]")))
    }
}

fn dirac(n: usize, at: usize) -> Vec<f64> {
    let mut row = vec![0.0; n];
    row[at] = 1.0;
    row
}

pub fn m1() -> Cmdp {
    let n = 4;
    let (s1, s2, s4) = (1, 2, 3);
    Cmdp {
        name: "m1".into(),
        state_names: ["s0", "s1", "s2", "s4"].map(String::from).to_vec(),
        action_names: vec![
            vec!["a0".into(), "a1".into()],
            vec!["a2".into()],
            vec!["a3".into()],
            vec!["stay".into()],
        ],
        transition: vec![
            vec![dirac(n, s1), dirac(n, s2)],
            vec![dirac(n, s4)],
            vec![dirac(n, s4)],
            vec![dirac(n, s4)],
        ],
        reward: vec![vec![1.0, 0.0], vec![0.0], vec![0.0], vec![0.0]],
        cost: vec![vec![1.0, 0.0], vec![0.0], vec![0.0], vec![0.0]],
        gamma_r: 1.0,
        gamma_c: 1.0,
        budget_d: 0.5,
        initial_state: 0,
        terminal: vec![false, false, false, true],
        horizon_cap: 2,
    }
}

fn chain(
    n: usize,
    step_reward: f64,
    step_cost: f64,
    shortcut: Option<(f64, f64)>,
    gamma: f64,
) -> Result<Cmdp> {
    if n < 1 {
        return Err(Error::InvalidParameter("chain needs n >= 1".into()));
    }
    if step_cost < 0.0 || shortcut.is_some_and(|(_, c)| c < 0.0) {
        return Err(Error::InvalidParameter("chain costs must be non-negative".into()));
    }
    check_gamma(gamma)?;
    let last = n - 1;
    let mut m = Cmdp {
        name: "chain".into(),
        state_names: (0..n).map(|i| format!("c{i}")).collect(),
        action_names: Vec::with_capacity(n),
        transition: Vec::with_capacity(n),
        reward: Vec::with_capacity(n),
        cost: Vec::with_capacity(n),
        gamma_r: gamma,
        gamma_c: gamma,
        budget_d: 0.5,
        initial_state: 0,
        terminal: (0..n).map(|i| i == last).collect(),
        horizon_cap: last.max(1),
    };
    for i in 0..n {
        if i == last {
            m.action_names.push(vec!["stay".into()]);
            m.transition.push(vec![dirac(n, i)]);
            m.reward.push(vec![0.0]);
            m.cost.push(vec![0.0]);
            continue;
        }
        let mut names = vec!["next".to_string()];
        let mut rows = vec![dirac(n, i + 1)];
        let mut r = vec![step_reward];
        let mut c = vec![step_cost];
        if let (0, Some((sr, sc))) = (i, shortcut) {
            names.push("shortcut".into());
            rows.push(dirac(n, last));
            r.push(sr);
            c.push(sc);
        }
        m.action_names.push(names);
        m.transition.push(rows);
        m.reward.push(r);
        m.cost.push(c);
    }
    Ok(m)
}

fn self_loop(rewards: &[f64], costs: &[f64], gamma: f64) -> Result<Cmdp> {
    if rewards.is_empty() || rewards.len() != costs.len() {
        return Err(Error::InvalidParameter(
            "loop needs matching, non-empty rewards and costs".into(),
        ));
    }
    if costs.iter().any(|&c| c < 0.0) {
        return Err(Error::InvalidParameter("loop costs must be non-negative".into()));
    }
    check_gamma(gamma)?;
    let k = rewards.len();
    Ok(Cmdp {
        name: "loop".into(),
        state_names: vec!["l0".into()],
        action_names: vec![(0..k).map(|a| format!("a{a}")).collect()],
        transition: vec![vec![vec![1.0]; k]],
        reward: vec![rewards.to_vec()],
        cost: vec![costs.to_vec()],
        gamma_r: gamma,
        gamma_c: gamma,
        budget_d: 5.0,
        initial_state: 0,
        terminal: vec![false],
        horizon_cap: default_horizon(gamma).max(1),
    })
}

fn random(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    branching: usize,
    terminal_prob: f64,
    gamma: f64,
) -> Result<Cmdp> {
    if n_states < 1 || n_actions < 1 || branching < 1 {
        return Err(Error::InvalidParameter(
            "random needs n_states, n_actions, branching >= 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&terminal_prob) {
        return Err(Error::InvalidParameter("terminal_prob outside [0, 1]".into()));
    }
    check_gamma(gamma)?;
    if gamma == 1.0 && terminal_prob < 1.0 {
        return Err(Error::InvalidParameter("random cmdps with cycles need gamma < 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let n = n_states + 1;
    let term = n_states;
    let mut m = Cmdp {
        name: "random".into(),
        state_names: (0..n).map(|i| if i == term { "end".into() } else { format!("r{i}") }).collect(),
        action_names: Vec::with_capacity(n),
        transition: Vec::with_capacity(n),
        reward: Vec::with_capacity(n),
        cost: Vec::with_capacity(n),
        gamma_r: gamma,
        gamma_c: gamma,
        budget_d: 1.0,
        initial_state: 0,
        terminal: (0..n).map(|i| i == term).collect(),
        horizon_cap: if gamma < 1.0 { default_horizon(gamma) } else { 1 },
    };
    let k = branching.min(n_states);
    for _ in 0..n_states {
        let mut rows = Vec::with_capacity(n_actions);
        let mut rewards = Vec::with_capacity(n_actions);
        let mut costs = Vec::with_capacity(n_actions);
        for _ in 0..n_actions {
            let succ = sample(&mut rng, n_states, k).into_vec();
            let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let mut row = vec![0.0; n];
            for (&next, w) in succ.iter().zip(&weights) {
                row[next] += (1.0 - terminal_prob) * w / total;
            }
            row[term] += terminal_prob;
            // Exact unit row sums regardless of round-off.
            let sum: f64 = row.iter().sum();
            let fix = succ.first().copied().unwrap_or(term);
            row[fix] += 1.0 - sum;
            rows.push(row);
            let cost: f64 = if rng.gen_bool(0.5) { rng.gen_range(0.0..1.0) } else { 0.0 };
            let reward = 0.5 * rng.gen_range(0.0..1.0) + 0.5 * cost;
            costs.push(cost);
            rewards.push(reward);
        }
        m.action_names.push((0..n_actions).map(|a| format!("a{a}")).collect());
        m.transition.push(rows);
        m.reward.push(rewards);
        m.cost.push(costs);
    }
    m.action_names.push(vec!["stay".into()]);
    m.transition.push(vec![dirac(n, term)]);
    m.reward.push(vec![0.0]);
    m.cost.push(vec![0.0]);
    Ok(m)
}
