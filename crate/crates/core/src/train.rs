//! Shielded Q-learning over the augmented CMDP.
//!
//! Values are kept per `(state, candidate)`: the augmented transition after
//! `(a, y)` does not depend on the current budget, so neither does the value
//! of the augmented action. Greedy behaviour at `(s, x)` is then a small
//! linear program solved by [`greedy`].

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{aug_step, sample_atom, AugAction, AugEnv};
use crate::critic::StepSize;
use crate::error::{Error, Result};
use crate::policy::{candidates, greedy_proposal, greedy_value, Candidate, TabularAugPolicy};
use crate::shield::{is_shielded, mix_with_noise, shield, Atom, ProposedDistribution, ShieldedPolicy, SHIELD_TOL};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub step_size: StepSize,
    /// Weight of the uniform-candidate exploration mixed into each proposal.
    pub xi: f64,
    /// Every `hybrid_delay`-th episode hands control to the backup policy at a
    /// random step.
    pub hybrid_delay: usize,
    /// Episodes between refreshes of the acting copy of the value table.
    pub policy_delay: usize,
    /// Allocation levels per action.
    pub risk_levels: usize,
    /// Uniform cells of the exported proposal table.
    pub risk_bins: usize,
    /// Episode lengths remembered for the hybrid switch point.
    pub recent_window: usize,
    /// Episode truncation; the CMDP's Monte Carlo horizon when unset.
    pub horizon: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 20_000,
            step_size: StepSize::Polynomial { exponent: 0.6, floor: 0.0 },
            xi: 0.2,
            hybrid_delay: 2,
            policy_delay: 1,
            risk_levels: 9,
            risk_bins: 200,
            recent_window: 100,
            horizon: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.step_size.validate()?;
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::MixtureWeight(self.xi));
        }
        if self.hybrid_delay == 0 || self.policy_delay == 0 || self.risk_levels == 0 || self.risk_bins == 0 {
            return Err(Error::InvalidParameter(
                "hybrid_delay, policy_delay, risk_levels and risk_bins must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Step after which the backup policy takes over in episode `episode`:
/// uniform on `0..=floor(mean(recent))` every `delay`-th episode, `None`
/// (never) otherwise.
pub fn hybrid_schedule(episode: usize, delay: usize, recent: &[usize], rng: &mut SimRng) -> Result<Option<usize>> {
    if delay == 0 {
        return Err(Error::InvalidParameter("hybrid delay must be positive".into()));
    }
    if !episode.is_multiple_of(delay) {
        return Ok(None);
    }
    let mean = if recent.is_empty() { 0.0 } else { recent.iter().sum::<usize>() as f64 / recent.len() as f64 };
    Ok(Some(rng.gen_range(0..=mean.floor() as usize)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub steps: usize,
    pub disc_reward: f64,
    pub disc_cost: f64,
    pub clamp_events: usize,
    pub mean_lambda: f64,
    pub switch_step: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ShieldedPolicy<TabularAugPolicy>,
    pub candidates: Vec<Vec<Candidate>>,
    pub values: Vec<Vec<f64>>,
    pub log: Vec<EpisodeLog>,
    /// Sampled decisions that failed [`is_shielded`]; zero for a sound shield.
    pub shield_violations: usize,
}

/// Trains a shielded policy from `(s_i, x0)` on `env`.
pub fn shielded_q_train(env: &AugEnv, x0: f64, cfg: &TrainConfig, rng: &mut SimRng) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !x0.is_finite() || x0.abs() > env.c_max_bound {
        return Err(Error::InvalidParameter(format!(
            "x0 = {x0} outside [-{0}, {0}]",
            env.c_max_bound
        )));
    }
    let cmdp = &env.cmdp;
    let q = &env.q;
    let horizon = cfg.horizon.unwrap_or_else(|| cmdp.mc_horizon());
    let cands = candidates(q, env.c_max_bound, cfg.risk_levels);
    let mut values: Vec<Vec<f64>> = cands.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut visits: Vec<Vec<u64>> = cands.iter().map(|c| vec![0; c.len()]).collect();
    let mut actor = values.clone();
    let mut recent: VecDeque<usize> = VecDeque::with_capacity(cfg.recent_window + 1);
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut violations = 0;

    for episode in 0..cfg.episodes {
        if episode % cfg.policy_delay == 0 {
            actor.clone_from(&values);
        }
        let lengths: Vec<usize> = recent.iter().copied().collect();
        let switch = hybrid_schedule(episode, cfg.hybrid_delay, &lengths, rng)?;
        let mut st = env.initial(x0);
        let (mut dr, mut dc, mut gr, mut gc) = (0.0, 0.0, 1.0, 1.0);
        let (mut clamps, mut lambda_sum, mut steps) = (0, 0.0, 0);
        while steps < horizon && !env.is_terminal(&st) {
            let s = st.base_state;
            let proposal = if switch.is_none_or(|k| steps <= k) {
                let greedy = greedy_proposal(q, &cands[s], &actor[s], s, st.risk);
                let pick = cands[s][rng.gen_range(0..cands[s].len())];
                mix_with_noise(&greedy, &[Atom::new(pick.action, pick.risk, 1.0)], cfg.xi)?
            } else {
                vec![Atom::new(q.backup_action(s), st.risk, 1.0)]
            };
            let decision = shield(&ProposedDistribution { atoms: proposal }, &st, q)?;
            if !is_shielded(&decision.atoms, &st, q, SHIELD_TOL) {
                violations += 1;
            }
            lambda_sum += decision.lambda;
            let atom = sample_atom(&decision.atoms, rng);
            let out = aug_step(env, &st, &AugAction { base_action: atom.action, allocated_risk: atom.risk }, rng)?;

            let slot = cands[s]
                .iter()
                .position(|c| c.action == atom.action && c.risk.to_bits() == atom.risk.to_bits());
            if let Some(k) = slot {
                let next = out.next.base_state;
                let tail = if cmdp.terminal[next] {
                    0.0
                } else {
                    greedy_value(q, &cands[next], &values[next], next, out.next.risk)
                };
                let target = out.reward + cmdp.gamma_r * tail;
                visits[s][k] += 1;
                let alpha = cfg.step_size.at(visits[s][k]);
                values[s][k] += alpha * (target - values[s][k]);
            }

            dr += gr * out.reward;
            dc += gc * out.cost;
            gr *= cmdp.gamma_r;
            gc *= cmdp.gamma_c;
            clamps += usize::from(out.clamped);
            steps += 1;
            st = out.next;
        }
        log.push(EpisodeLog {
            episode,
            steps,
            disc_reward: dr,
            disc_cost: dc,
            clamp_events: clamps,
            mean_lambda: if steps > 0 { lambda_sum / steps as f64 } else { 0.0 },
            switch_step: switch,
        });
        recent.push_back(steps);
        if recent.len() > cfg.recent_window.max(1) {
            recent.pop_front();
        }
    }

    let start = env.initial(x0);
    let table = TabularAugPolicy::from_values(
        q,
        &cands,
        &values,
        env.c_max_bound,
        cfg.risk_bins,
        &[(start.base_state, start.risk)],
    );
    Ok(TrainOutcome {
        policy: ShieldedPolicy::new(table, q.clone()),
        candidates: cands,
        values,
        log,
        shield_violations: violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{augment, AugState, RiskRule};
    use crate::critic::cost_value_iteration;
    use crate::envs;
    use crate::rng_from_seed;
    use crate::shield::Proposer;

    #[test]
    fn hybrid_schedule_examples() {
        let mut rng = rng_from_seed(3);
        assert_eq!(hybrid_schedule(1, 2, &[4, 6], &mut rng).unwrap(), None);
        for _ in 0..100 {
            let k = hybrid_schedule(4, 2, &[4, 6], &mut rng).unwrap().unwrap();
            assert!(k <= 5);
        }
        assert_eq!(hybrid_schedule(0, 1, &[], &mut rng).unwrap(), Some(0));
        assert!(hybrid_schedule(0, 0, &[], &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { xi: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { risk_bins: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn m1_learns_the_flipping_policy() {
        let m = envs::m1();
        let q = cost_value_iteration(&m, 1e-12).unwrap();
        let env = augment(&m, &q, RiskRule::QRelative).unwrap();
        let cfg = TrainConfig { episodes: 3000, ..TrainConfig::default() };
        let out = shielded_q_train(&env, 0.5, &cfg, &mut rng_from_seed(1)).unwrap();
        assert_eq!(out.shield_violations, 0);
        assert_eq!(out.log.len(), 3000);
        let p = out.policy.proposer.propose(&AugState::new(0, 0.5)).unwrap();
        let spend: f64 = p.atoms.iter().map(|a| a.prob * a.risk).sum();
        let reward: f64 = p.atoms.iter().filter(|a| a.action == 0).map(|a| a.prob).sum();
        assert!(spend <= 0.5 + 1e-12);
        assert!((reward - 0.5).abs() < 1e-9, "{p:?}");
    }

    #[test]
    fn training_is_reproducible() {
        let m = envs::by_name("random", 2).unwrap();
        let q = cost_value_iteration(&m, 1e-10).unwrap();
        let env = augment(&m, &q, RiskRule::QRelative).unwrap();
        let cfg = TrainConfig { episodes: 200, ..TrainConfig::default() };
        let a = shielded_q_train(&env, 1.0, &cfg, &mut rng_from_seed(5)).unwrap();
        let b = shielded_q_train(&env, 1.0, &cfg, &mut rng_from_seed(5)).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.log, b.log);
        assert!(shielded_q_train(&env, 1e6, &cfg, &mut rng_from_seed(5)).is_err());
    }
}
