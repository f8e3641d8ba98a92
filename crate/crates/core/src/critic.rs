//! Minimal-cost Q-values: the exact fixed point, the backup policy and floor
//! derived from any table, controlled perturbations, and a twin-table learner.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::Cmdp;
use crate::error::{Error, Result};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Provenance {
    Exact,
    Learned,
    Perturbed(f64),
}

/// State-action cost estimates `Q_b(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QTable {
    pub values: Vec<Vec<f64>>,
    pub gamma_c: f64,
    pub provenance: Provenance,
}

impl QTable {
    pub fn zeros(cmdp: &Cmdp, provenance: Provenance) -> Self {
        let values = (0..cmdp.n_states()).map(|s| vec![0.0; cmdp.n_actions(s)]).collect();
        Self { values, gamma_c: cmdp.gamma_c, provenance }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s][a]
    }

    /// Safest estimated action at `s` (lowest index on ties).
    pub fn backup_action(&self, s: usize) -> usize {
        argmin(&self.values[s])
    }

    /// `gamma_c * min_a Q(s, a)`.
    pub fn floor(&self, s: usize) -> f64 {
        self.gamma_c * self.values[s][self.backup_action(s)]
    }

    /// `Q(s, pi_b(s))`.
    pub fn backup_value(&self, s: usize) -> f64 {
        self.values[s][self.backup_action(s)]
    }

    /// Sup-norm distance to another table of the same shape.
    pub fn distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (s, row) in self.values.iter().enumerate() {
            for (a, &value) in row.iter().enumerate() {
                w.serialize(QRow { s, a, value })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `(s, a, value)` table shaped like `cmdp`.
    pub fn read_csv(path: impl AsRef<Path>, cmdp: &Cmdp, provenance: Provenance) -> Result<Self> {
        let mut q = Self::zeros(cmdp, provenance);
        let mut seen = 0;
        for row in csv::Reader::from_path(path)?.deserialize() {
            let QRow { s, a, value } = row?;
            let slot = q
                .values
                .get_mut(s)
                .and_then(|r| r.get_mut(a))
                .ok_or(Error::InvalidAction { state: s, action: a })?;
            *slot = value;
            seen += 1;
        }
        let expected: usize = q.values.iter().map(Vec::len).sum();
        if seen != expected {
            return Err(Error::InvalidParameter(format!(
                "q table has {seen} rows, expected {expected}"
            )));
        }
        Ok(q)
    }
}

#[derive(Serialize, Deserialize)]
struct QRow {
    s: usize,
    a: usize,
    value: f64,
}

pub(crate) fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// `(pi_b(s), gamma_c * min_a Q(s, a))`.
pub fn backup_policy(q: &QTable, s: usize) -> (usize, f64) {
    (q.backup_action(s), q.floor(s))
}

fn bellman(cmdp: &Cmdp, q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mins: Vec<f64> = q.iter().map(|row| row[argmin(row)]).collect();
    (0..cmdp.n_states())
        .map(|s| {
            (0..cmdp.n_actions(s))
                .map(|a| {
                    if cmdp.terminal[s] {
                        return 0.0;
                    }
                    let next: f64 = cmdp.transition[s][a]
                        .iter()
                        .zip(&mins)
                        .map(|(p, m)| p * m)
                        .sum();
                    cmdp.cost[s][a] + cmdp.gamma_c * next
                })
                .collect()
        })
        .collect()
}

/// Sup-norm residual of one Bellman-min application.
pub fn bellman_residual(cmdp: &Cmdp, q: &QTable) -> f64 {
    let next = bellman(cmdp, &q.values);
    q.values
        .iter()
        .flatten()
        .zip(next.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Minimal discounted cost `Q_b*` by value iteration, stopped once the
/// Bellman residual falls below `tol`.
pub fn cost_value_iteration(cmdp: &Cmdp, tol: f64) -> Result<QTable> {
    if cmdp.gamma_c >= 1.0 && !cmdp.is_episodic() {
        return Err(Error::NonEpisodicUndiscounted);
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let mut q = QTable::zeros(cmdp, Provenance::Exact);
    // Episodic tables settle after `depth + 1` sweeps; discounted ones
    // contract at rate gamma_c.
    let limit = if cmdp.gamma_c < 1.0 {
        let scale = cmdp.c_max().max(1.0) / (1.0 - cmdp.gamma_c);
        2 * ((tol / scale).ln() / cmdp.gamma_c.ln()).ceil() as usize + 10
    } else {
        cmdp.horizon_cap + 2
    };
    for _ in 0..limit {
        let next = bellman(cmdp, &q.values);
        let residual = q
            .values
            .iter()
            .flatten()
            .zip(next.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if residual < tol {
            break;
        }
        q.values = next;
    }
    Ok(q)
}

/// Adds i.i.d. uniform noise in `[-delta, delta]` to every non-terminal entry,
/// clipped at zero.
///
/// The same seed yields the same noise pattern scaled by `delta`.
pub fn perturb(q: &QTable, delta: f64, terminal: &[bool], rng: &mut SimRng) -> Result<QTable> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidParameter(format!("delta {delta} must be >= 0")));
    }
    let values = q
        .values
        .iter()
        .enumerate()
        .map(|(s, row)| {
            row.iter()
                .map(|&v| {
                    let u: f64 = rng.gen_range(-1.0..=1.0);
                    if terminal[s] {
                        v
                    } else {
                        (v + delta * u).max(0.0)
                    }
                })
                .collect()
        })
        .collect();
    Ok(QTable { values, gamma_c: q.gamma_c, provenance: Provenance::Perturbed(delta) })
}

/// Step sizes for tabular learners, indexed by the visit count of the entry
/// being updated (starting at 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSize {
    Constant { alpha: f64 },
    /// `max(floor, visits^-exponent)`.
    Polynomial { exponent: f64, floor: f64 },
}

impl StepSize {
    pub fn at(&self, visits: u64) -> f64 {
        match *self {
            StepSize::Constant { alpha } => alpha,
            StepSize::Polynomial { exponent, floor } => (visits.max(1) as f64).powf(-exponent).max(floor),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSize::Constant { alpha } => alpha > 0.0 && alpha <= 1.0,
            StepSize::Polynomial { exponent, floor } => {
                exponent > 0.0 && exponent <= 1.0 && (0.0..=1.0).contains(&floor)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("step sizes of {self:?} leave (0, 1]")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostLearnConfig {
    pub episodes: usize,
    pub step_size: StepSize,
    pub epsilon: f64,
    pub beta: f64,
}

impl Default for CostLearnConfig {
    fn default() -> Self {
        Self {
            episodes: 20_000,
            step_size: StepSize::Polynomial { exponent: 0.6, floor: 0.0 },
            epsilon: 0.2,
            beta: 0.75,
        }
    }
}

/// Output of [`q_learning_cost`].
#[derive(Debug, Clone)]
pub struct LearnedCritic {
    pub table: QTable,
    pub twin: QTable,
    /// `||Q - Q*||_inf` when the exact fixed point is computable.
    pub oracle_distance: Option<f64>,
}

/// Blended twin target `c + gamma_c [beta min_j Q_j + (1 - beta)/2 sum_j Q_j]`
/// at the backup action of the first table.
pub fn blended_target(cost: f64, gamma_c: f64, beta: f64, q1: &[f64], q2: &[f64]) -> f64 {
    let ab = argmin(q1);
    let (x, y) = (q1[ab], q2[ab]);
    cost + gamma_c * (beta * x.min(y) + (1.0 - beta) / 2.0 * (x + y))
}

/// Model-free estimate of `Q_b*` with twin tables and epsilon-greedy
/// exploration around the backup action.
///
/// Each transition updates one of the two tables, chosen by a fair coin,
/// toward the blended target. Returns the first table.
pub fn q_learning_cost(cmdp: &Cmdp, cfg: &CostLearnConfig, rng: &mut SimRng) -> Result<LearnedCritic> {
    cfg.step_size.validate()?;
    if cmdp.gamma_c >= 1.0 && !cmdp.is_episodic() {
        return Err(Error::NonEpisodicUndiscounted);
    }
    if !(0.0..=1.0).contains(&cfg.epsilon) || !(0.0..=1.0).contains(&cfg.beta) {
        return Err(Error::InvalidParameter("epsilon and beta must lie in [0, 1]".into()));
    }
    let mut tables = [QTable::zeros(cmdp, Provenance::Learned), QTable::zeros(cmdp, Provenance::Learned)];
    let mut visits: [Vec<Vec<u64>>; 2] = [
        tables[0].values.iter().map(|r| vec![0; r.len()]).collect(),
        tables[1].values.iter().map(|r| vec![0; r.len()]).collect(),
    ];
    let horizon = cmdp.mc_horizon();
    for _ in 0..cfg.episodes {
        let mut s = cmdp.initial_state;
        for _ in 0..horizon {
            if cmdp.terminal[s] {
                break;
            }
            let k = cmdp.n_actions(s);
            let a = if rng.gen::<f64>() < cfg.epsilon {
                rng.gen_range(0..k)
            } else {
                argmin(&tables[0].values[s])
            };
            let next = cmdp.sample_next(s, a, rng);
            let c = cmdp.cost[s][a];
            let target = if cmdp.terminal[next] {
                c
            } else {
                blended_target(c, cmdp.gamma_c, cfg.beta, &tables[0].values[next], &tables[1].values[next])
            };
            let head = usize::from(rng.gen_bool(0.5));
            visits[head][s][a] += 1;
            let alpha = cfg.step_size.at(visits[head][s][a]);
            let entry = &mut tables[head].values[s][a];
            *entry += alpha * (target - *entry);
            s = next;
        }
    }
    let oracle_distance = cost_value_iteration(cmdp, 1e-10).ok().map(|exact| exact.distance(&tables[0]));
    let [table, twin] = tables;
    Ok(LearnedCritic { table, twin, oracle_distance })
}
