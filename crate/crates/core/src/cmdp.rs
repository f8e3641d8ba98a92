//! Finite constrained MDPs: representation, validation, sampling and exact
//! discounted evaluation.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::SimRng;

/// Tolerance on transition-row and policy-row sums.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// A finite CMDP with dense, integer-indexed states and per-state actions.
///
/// `transition[s][a]` is a probability vector over all states. Terminal
/// states carry a single zero-reward, zero-cost self-loop action.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cmdp {
    pub name: String,
    pub state_names: Vec<String>,
    pub action_names: Vec<Vec<String>>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub cost: Vec<Vec<f64>>,
    pub gamma_r: f64,
    pub gamma_c: f64,
    pub budget_d: f64,
    pub initial_state: usize,
    pub terminal: Vec<bool>,
    pub horizon_cap: usize,
}

/// One violated well-formedness condition.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    NoActions { state: usize },
    RowSum { state: usize, action: usize, sum: f64 },
    NegativeProbability { state: usize, action: usize },
    NegativeCost { state: usize, action: usize, cost: f64 },
    Terminal { state: usize, reason: &'static str },
    Discount { which: &'static str, value: f64 },
    NegativeBudget(f64),
    HorizonCap,
    InitialState(usize),
    NotEpisodic,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Violation::NoActions { state } => write!(f, "state {state} has no actions"),
            Violation::RowSum { state, action, sum } => {
                write!(f, "transition row (s={state}, a={action}) sums to {sum}")
            }
            Violation::NegativeProbability { state, action } => {
                write!(f, "negative probability in (s={state}, a={action})")
            }
            Violation::NegativeCost { state, action, cost } => {
                write!(f, "negative cost {cost} at (s={state}, a={action})")
            }
            Violation::Terminal { state, reason } => write!(f, "terminal state {state}: {reason}"),
            Violation::Discount { which, value } => write!(f, "{which} = {value} outside (0, 1]"),
            Violation::NegativeBudget(d) => write!(f, "budget {d} is negative"),
            Violation::HorizonCap => write!(f, "horizon_cap must be positive"),
            Violation::InitialState(s) => write!(f, "initial state {s} out of range"),
            Violation::NotEpisodic => {
                write!(f, "gamma = 1 requires termination within horizon_cap on every path")
            }
        }
    }
}

impl Cmdp {
    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn n_actions(&self, s: usize) -> usize {
        self.action_names[s].len()
    }

    /// Largest one-step cost.
    pub fn c_max(&self) -> f64 {
        self.cost.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn is_deterministic(&self) -> bool {
        self.transition
            .iter()
            .flatten()
            .all(|row| row.iter().filter(|&&p| p > 0.0).count() == 1)
    }

    /// Longest number of steps any path needs to hit a terminal state, or
    /// `None` when some non-terminal state lies on a cycle.
    pub fn episodic_depth(&self) -> Option<usize> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done(usize),
        }
        fn visit(m: &Cmdp, s: usize, marks: &mut [Mark]) -> Option<usize> {
            match marks[s] {
                Mark::Done(d) => return Some(d),
                Mark::Open => return None,
                Mark::New => {}
            }
            if m.terminal[s] {
                marks[s] = Mark::Done(0);
                return Some(0);
            }
            marks[s] = Mark::Open;
            let mut depth = 0;
            for row in &m.transition[s] {
                for (next, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        depth = depth.max(1 + visit(m, next, marks)?);
                    }
                }
            }
            marks[s] = Mark::Done(depth);
            Some(depth)
        }
        let mut marks = vec![Mark::New; self.n_states()];
        let mut worst = 0;
        for s in 0..self.n_states() {
            worst = worst.max(visit(self, s, &mut marks)?);
        }
        Some(worst)
    }

    /// Every path terminates within `horizon_cap` steps.
    pub fn is_episodic(&self) -> bool {
        matches!(self.episodic_depth(), Some(d) if d <= self.horizon_cap)
    }

    /// Returns every violated invariant; empty iff the CMDP is well-formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.n_states();
        let shapes_ok = self.action_names.len() == n
            && self.transition.len() == n
            && self.reward.len() == n
            && self.cost.len() == n
            && self.terminal.len() == n;
        if !shapes_ok {
            out.push(Violation::Shape("per-state tables disagree on |S|".into()));
            return out;
        }
        for s in 0..n {
            let k = self.action_names[s].len();
            if k == 0 {
                out.push(Violation::NoActions { state: s });
                continue;
            }
            if self.transition[s].len() != k || self.reward[s].len() != k || self.cost[s].len() != k
            {
                out.push(Violation::Shape(format!("state {s}: per-action tables disagree")));
                continue;
            }
            for a in 0..k {
                let row = &self.transition[s][a];
                if row.len() != n {
                    out.push(Violation::Shape(format!("row (s={s}, a={a}) has length {}", row.len())));
                    continue;
                }
                if row.iter().any(|&p| p < 0.0) {
                    out.push(Violation::NegativeProbability { state: s, action: a });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    out.push(Violation::RowSum { state: s, action: a, sum });
                }
                let c = self.cost[s][a];
                if c < 0.0 || c.is_nan() {
                    out.push(Violation::NegativeCost { state: s, action: a, cost: c });
                }
            }
            if self.terminal[s] {
                if k != 1 {
                    out.push(Violation::Terminal { state: s, reason: "must have exactly one action" });
                } else {
                    if self.transition[s][0].get(s).copied() != Some(1.0) {
                        out.push(Violation::Terminal { state: s, reason: "action must self-loop" });
                    }
                    if self.reward[s][0] != 0.0 || self.cost[s][0] != 0.0 {
                        out.push(Violation::Terminal { state: s, reason: "self-loop must be free" });
                    }
                }
            }
        }
        for (which, g) in [("gamma_r", self.gamma_r), ("gamma_c", self.gamma_c)] {
            if !(g > 0.0 && g <= 1.0) {
                out.push(Violation::Discount { which, value: g });
            }
        }
        if self.budget_d < 0.0 {
            out.push(Violation::NegativeBudget(self.budget_d));
        }
        if self.horizon_cap == 0 {
            out.push(Violation::HorizonCap);
        }
        if self.initial_state >= n {
            out.push(Violation::InitialState(self.initial_state));
        }
        if out.is_empty() && (self.gamma_r == 1.0 || self.gamma_c == 1.0) && !self.is_episodic() {
            out.push(Violation::NotEpisodic);
        }
        out
    }

    /// Like [`Cmdp::validate`] but as a `Result`.
    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            Err(Error::InvalidCmdp(msgs.join("; ")))
        }
    }

    /// Rollout horizon for Monte Carlo estimates: `horizon_cap` for episodic
    /// CMDPs, otherwise the truncation length from [`default_horizon`].
    pub fn mc_horizon(&self) -> usize {
        if self.is_episodic() {
            self.horizon_cap
        } else {
            let g = self.gamma_r.max(self.gamma_c);
            default_horizon(g).min(self.horizon_cap)
        }
    }

    /// Samples a successor of `(s, a)`.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut SimRng) -> usize {
        let row = &self.transition[s][a];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = s;
        for (next, &p) in row.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = next;
                if u < acc {
                    return next;
                }
            }
        }
        last
    }
}

/// Truncation length making the tail of a `gamma`-discounted sum smaller
/// than `1e-6 * c_max / (1 - gamma)`.
pub fn default_horizon(gamma: f64) -> usize {
    if gamma >= 1.0 {
        return usize::MAX;
    }
    ((1e-6 * (1.0 - gamma)).ln() / gamma.ln()).ceil() as usize
}

/// Geometric mass `sum_t gamma^t` used by every slack term: `1 / (1 - gamma)`
/// when discounted, the horizon itself when undiscounted and episodic.
pub fn discount_mass(gamma: f64, horizon_cap: usize) -> f64 {
    if gamma < 1.0 {
        1.0 / (1.0 - gamma)
    } else {
        horizon_cap as f64
    }
}

/// A stationary randomized policy: one probability row per state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorylessPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl MemorylessPolicy {
    pub fn new(cmdp: &Cmdp, probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.len() != cmdp.n_states() {
            return Err(Error::InvalidParameter("policy has wrong number of rows".into()));
        }
        for (s, row) in probs.iter().enumerate() {
            if row.len() != cmdp.n_actions(s) || row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidParameter(format!("policy row {s} is malformed")));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidParameter(format!("policy row {s} does not sum to 1")));
            }
        }
        Ok(Self { probs })
    }

    pub fn deterministic(cmdp: &Cmdp, actions: &[usize]) -> Result<Self> {
        let probs = actions
            .iter()
            .enumerate()
            .map(|(s, &a)| {
                let mut row = vec![0.0; cmdp.n_actions(s)];
                *row.get_mut(a).ok_or(Error::InvalidAction { state: s, action: a })? = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cmdp, probs)
    }

    pub fn uniform(cmdp: &Cmdp) -> Self {
        let probs = (0..cmdp.n_states())
            .map(|s| {
                let k = cmdp.n_actions(s);
                vec![1.0 / k as f64; k]
            })
            .collect();
        Self { probs }
    }

    /// Policy that plays `first` everywhere except at `state`, where it plays
    /// `alpha * first + (1 - alpha) * second`.
    pub fn mix_at(first: &Self, second: &Self, state: usize, alpha: f64) -> Self {
        let mut probs = first.probs.clone();
        probs[state] = first.probs[state]
            .iter()
            .zip(&second.probs[state])
            .map(|(p, q)| alpha * p + (1.0 - alpha) * q)
            .collect();
        Self { probs }
    }
}

/// A base-CMDP policy, possibly with internal memory.
pub trait Policy {
    fn reset(&mut self) {}

    fn act(&mut self, cmdp: &Cmdp, state: usize, rng: &mut SimRng) -> Result<usize>;

    /// Called after the environment moved from `state` to `next` under `action`.
    fn observe(&mut self, _cmdp: &Cmdp, _state: usize, _action: usize, _next: usize) {}
}

impl Policy for MemorylessPolicy {
    fn act(&mut self, _cmdp: &Cmdp, state: usize, rng: &mut SimRng) -> Result<usize> {
        Ok(sample_index(&self.probs[state], rng))
    }
}

/// Samples an index from a probability row (lowest index on round-off).
pub(crate) fn sample_index(row: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Step {
    #[serde(rename = "s")]
    pub state: usize,
    #[serde(rename = "a")]
    pub action: usize,
    #[serde(rename = "r")]
    pub reward: f64,
    #[serde(rename = "c")]
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub terminated: bool,
    pub final_state: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Whether the path visits `state` (including the final state).
    pub fn visits(&self, state: usize) -> bool {
        self.final_state == state || self.steps.iter().any(|st| st.state == state)
    }
}

/// Samples one trajectory of at most `horizon` steps.
pub fn rollout(
    cmdp: &Cmdp,
    policy: &mut dyn Policy,
    horizon: usize,
    rng: &mut SimRng,
) -> Result<Trajectory> {
    if horizon > cmdp.horizon_cap {
        return Err(Error::InvalidParameter(format!(
            "horizon {horizon} exceeds horizon_cap {}",
            cmdp.horizon_cap
        )));
    }
    policy.reset();
    let mut s = cmdp.initial_state;
    let mut traj = Trajectory { steps: Vec::new(), terminated: cmdp.terminal[s], final_state: s };
    for _ in 0..horizon {
        if cmdp.terminal[s] {
            break;
        }
        let a = policy.act(cmdp, s, rng)?;
        if a >= cmdp.n_actions(s) {
            return Err(Error::InvalidAction { state: s, action: a });
        }
        let next = cmdp.sample_next(s, a, rng);
        traj.steps.push(Step { state: s, action: a, reward: cmdp.reward[s][a], cost: cmdp.cost[s][a] });
        policy.observe(cmdp, s, a, next);
        s = next;
    }
    traj.final_state = s;
    traj.terminated = cmdp.terminal[s];
    Ok(traj)
}

/// `(sum_t gamma_r^t r_t, sum_t gamma_c^t c_t)` along a trajectory.
pub fn discounted_sums(traj: &Trajectory, gamma_r: f64, gamma_c: f64) -> (f64, f64) {
    let (mut r, mut c) = (0.0, 0.0);
    let (mut dr, mut dc) = (1.0, 1.0);
    for st in &traj.steps {
        r += dr * st.reward;
        c += dc * st.cost;
        dr *= gamma_r;
        dc *= gamma_c;
    }
    (r, c)
}

/// Exact `(R, C)` of a memoryless policy from the initial state.
pub fn exact_eval(cmdp: &Cmdp, policy: &MemorylessPolicy) -> Result<(f64, f64)> {
    let (r, c) = exact_eval_all(cmdp, policy)?;
    Ok((r[cmdp.initial_state], c[cmdp.initial_state]))
}

/// Exact reward and cost values of a memoryless policy at every state.
pub fn exact_eval_all(cmdp: &Cmdp, policy: &MemorylessPolicy) -> Result<(Vec<f64>, Vec<f64>)> {
    if (cmdp.gamma_r >= 1.0 || cmdp.gamma_c >= 1.0) && !cmdp.is_episodic() {
        return Err(Error::NonEpisodicUndiscounted);
    }
    let n = cmdp.n_states();
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut r = DVector::<f64>::zeros(n);
    let mut c = DVector::<f64>::zeros(n);
    for s in 0..n {
        for (a, &pa) in policy.probs[s].iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            r[s] += pa * cmdp.reward[s][a];
            c[s] += pa * cmdp.cost[s][a];
            for (next, &q) in cmdp.transition[s][a].iter().enumerate() {
                p[(s, next)] += pa * q;
            }
        }
    }
    let values = |one_step: &DVector<f64>, gamma: f64| -> Result<Vec<f64>> {
        if gamma < 1.0 {
            let a = DMatrix::<f64>::identity(n, n) - &p * gamma;
            a.lu()
                .solve(one_step)
                .map(|v| v.iter().copied().collect())
                .ok_or_else(|| Error::InvalidCmdp("singular evaluation system".into()))
        } else {
            let mut v = DVector::<f64>::zeros(n);
            for _ in 0..cmdp.horizon_cap {
                v = one_step + &p * v * gamma;
            }
            Ok(v.iter().copied().collect())
        }
    };
    Ok((values(&r, cmdp.gamma_r)?, values(&c, cmdp.gamma_c)?))
}
