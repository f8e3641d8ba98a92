//! The risk-augmented CMDP: states carry a risk budget, actions carry an
//! allocated risk, and transitions move the budget along with the base state.

use serde::{Deserialize, Serialize};

use crate::cmdp::{sample_index, Cmdp};
use crate::critic::QTable;
use crate::error::{Error, Result};
use crate::shield::Atom;
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AugState {
    pub base_state: usize,
    pub risk: f64,
}

impl AugState {
    pub fn new(base_state: usize, risk: f64) -> Self {
        Self { base_state, risk }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AugAction {
    pub base_action: usize,
    pub allocated_risk: f64,
}

/// How the risk coordinate moves after `(a, y)` takes `s` to `s'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RiskRule {
    /// `x' = y - Q_b(s, a) + Q_b(s')`.
    #[default]
    QRelative,
    /// `x' = y - c(s, a)`; deterministic CMDPs only.
    CostRelative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugEnv {
    pub cmdp: Cmdp,
    pub q: QTable,
    pub rule: RiskRule,
    pub c_max_bound: f64,
}

/// Result of one augmented transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugOutcome {
    pub next: AugState,
    pub reward: f64,
    pub cost: f64,
    /// Risk before clamping to `[-c_max_bound, c_max_bound]`.
    pub raw_risk: f64,
    pub clamped: bool,
}

/// Wraps a CMDP and a cost table into the risk-augmented environment.
pub fn augment(cmdp: &Cmdp, q: &QTable, rule: RiskRule) -> Result<AugEnv> {
    let shape_ok = q.values.len() == cmdp.n_states()
        && q.values.iter().enumerate().all(|(s, row)| row.len() == cmdp.n_actions(s));
    if !shape_ok {
        return Err(Error::InvalidParameter("q table does not cover the cmdp".into()));
    }
    if rule == RiskRule::CostRelative && !cmdp.is_deterministic() {
        return Err(Error::StochasticCostRelative);
    }
    let c_max_bound = if cmdp.gamma_c < 1.0 {
        cmdp.c_max() / (1.0 - cmdp.gamma_c)
    } else {
        cmdp.c_max() * cmdp.horizon_cap as f64
    };
    Ok(AugEnv { cmdp: cmdp.clone(), q: q.clone(), rule, c_max_bound })
}

impl AugEnv {
    pub fn initial(&self, x0: f64) -> AugState {
        AugState::new(self.cmdp.initial_state, self.clamp(x0).0)
    }

    pub fn clamp(&self, x: f64) -> (f64, bool) {
        let c = x.clamp(-self.c_max_bound, self.c_max_bound);
        (c, c != x)
    }

    /// Unclamped successor risk for `(s, a, y) -> s'`.
    pub fn raw_next_risk(&self, s: usize, a: usize, y: f64, next: usize) -> f64 {
        match self.rule {
            RiskRule::QRelative => y - self.q.get(s, a) + self.q.floor(next),
            RiskRule::CostRelative => y - self.cmdp.cost[s][a],
        }
    }

    /// Successor risk after clamping, and whether clamping fired.
    pub fn next_risk(&self, s: usize, a: usize, y: f64, next: usize) -> (f64, bool) {
        self.clamp(self.raw_next_risk(s, a, y, next))
    }

    pub fn is_terminal(&self, st: &AugState) -> bool {
        self.cmdp.terminal[st.base_state]
    }
}

/// Samples one augmented transition.
pub fn aug_step(env: &AugEnv, st: &AugState, act: &AugAction, rng: &mut SimRng) -> Result<AugOutcome> {
    let (s, a) = (st.base_state, act.base_action);
    if a >= env.cmdp.n_actions(s) {
        return Err(Error::InvalidAction { state: s, action: a });
    }
    let next = env.cmdp.sample_next(s, a, rng);
    let raw_risk = env.raw_next_risk(s, a, act.allocated_risk, next);
    let (risk, clamped) = env.clamp(raw_risk);
    Ok(AugOutcome {
        next: AugState::new(next, risk),
        reward: env.cmdp.reward[s][a],
        cost: env.cmdp.cost[s][a],
        raw_risk,
        clamped,
    })
}

/// A policy on the augmented CMDP, given as a finite distribution over
/// `(action, allocated risk)` atoms at each augmented state.
pub trait AugPolicy {
    fn distribution(&self, st: &AugState) -> Result<Vec<Atom>>;
}

impl<P: AugPolicy + ?Sized> AugPolicy for &P {
    fn distribution(&self, st: &AugState) -> Result<Vec<Atom>> {
        (**self).distribution(st)
    }
}

/// Picks one atom; consumes exactly one uniform draw.
pub fn sample_atom(atoms: &[Atom], rng: &mut SimRng) -> Atom {
    // Small fixed-size scratch avoids allocating for the common case.
    let mut buf = [0.0; 8];
    if atoms.len() <= buf.len() {
        for (slot, at) in buf.iter_mut().zip(atoms) {
            *slot = at.prob;
        }
        atoms[sample_index(&buf[..atoms.len()], rng)]
    } else {
        let probs: Vec<f64> = atoms.iter().map(|a| a.prob).collect();
        atoms[sample_index(&probs, rng)]
    }
}

/// One augmented transition record, exportable as a JSON line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AugTransition {
    pub s: usize,
    pub x: f64,
    pub a: usize,
    pub y: f64,
    pub r: f64,
    pub c: f64,
    #[serde(rename = "s'")]
    pub s_next: usize,
    #[serde(rename = "x'")]
    pub x_next: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugTrajectory {
    pub steps: Vec<AugTransition>,
    pub terminated: bool,
    pub clamp_events: usize,
}

impl AugTrajectory {
    pub fn discounted(&self, gamma_r: f64, gamma_c: f64) -> (f64, f64) {
        let (mut r, mut c, mut dr, mut dc) = (0.0, 0.0, 1.0, 1.0);
        for st in &self.steps {
            r += dr * st.r;
            c += dc * st.c;
            dr *= gamma_r;
            dc *= gamma_c;
        }
        (r, c)
    }
}

/// Samples an augmented trajectory from `(s_i, x0)`.
pub fn aug_rollout(
    env: &AugEnv,
    policy: &dyn AugPolicy,
    x0: f64,
    horizon: usize,
    rng: &mut SimRng,
) -> Result<AugTrajectory> {
    let mut st = env.initial(x0);
    let mut out = AugTrajectory::default();
    for _ in 0..horizon {
        if env.is_terminal(&st) {
            break;
        }
        let atom = sample_atom(&policy.distribution(&st)?, rng);
        let step = aug_step(env, &st, &AugAction { base_action: atom.action, allocated_risk: atom.risk }, rng)?;
        out.clamp_events += usize::from(step.clamped);
        out.steps.push(AugTransition {
            s: st.base_state,
            x: st.risk,
            a: atom.action,
            y: atom.risk,
            r: step.reward,
            c: step.cost,
            s_next: step.next.base_state,
            x_next: step.next.risk,
        });
        st = step.next;
    }
    out.terminated = env.is_terminal(&st);
    Ok(out)
}
