//! Exact constrained optimum of small CMDPs by enumerating deterministic
//! memoryless policies and mixing the best pair on the cost/reward frontier.

use serde::Serialize;

use crate::cmdp::{exact_eval, Cmdp, MemorylessPolicy};
use crate::error::{Error, Result};
use crate::policy::MixturePolicy;

/// Enumeration limit on the number of deterministic policies.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

const BUDGET_TOL: f64 = 1e-12;

/// One evaluated deterministic policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyPoint {
    pub actions: Vec<usize>,
    pub reward: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub r_star: f64,
    pub c_star: f64,
    /// Played with probability `alpha`.
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub alpha: f64,
    pub n_policies: usize,
    /// Spread of rewards over all deterministic policies.
    pub reward_range: f64,
    pub frontier: Vec<PolicyPoint>,
}

impl OracleResult {
    pub fn mixture(&self, cmdp: &Cmdp) -> Result<MixturePolicy> {
        MixturePolicy::new(
            MemorylessPolicy::deterministic(cmdp, &self.first)?,
            MemorylessPolicy::deterministic(cmdp, &self.second)?,
            self.alpha,
        )
    }
}

/// Evaluates every deterministic memoryless policy of `cmdp`.
pub fn enumerate_policies(cmdp: &Cmdp) -> Result<Vec<PolicyPoint>> {
    let count = (0..cmdp.n_states()).fold(1u128, |acc, s| acc.saturating_mul(cmdp.n_actions(s) as u128));
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationBudget { count, limit: ENUMERATION_LIMIT });
    }
    let mut actions = vec![0usize; cmdp.n_states()];
    let mut out = Vec::with_capacity(count as usize);
    loop {
        let (reward, cost) = exact_eval(cmdp, &MemorylessPolicy::deterministic(cmdp, &actions)?)?;
        out.push(PolicyPoint { actions: actions.clone(), reward, cost });
        // Mixed-radix increment, state 0 fastest.
        let mut s = 0;
        loop {
            if s == actions.len() {
                return Ok(out);
            }
            actions[s] += 1;
            if actions[s] < cmdp.n_actions(s) {
                break;
            }
            actions[s] = 0;
            s += 1;
        }
    }
}

/// Points not dominated by a cheaper-or-equal policy with more reward,
/// sorted by cost.
pub fn frontier(points: &[PolicyPoint]) -> Vec<PolicyPoint> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&i, &j| points[i].cost.total_cmp(&points[j].cost).then(points[j].reward.total_cmp(&points[i].reward)).then(i.cmp(&j)));
    let mut out: Vec<PolicyPoint> = Vec::new();
    for i in idx {
        if out.last().is_none_or(|p| points[i].reward > p.reward) {
            out.push(points[i].clone());
        }
    }
    out
}

/// Best reward over mixtures of two deterministic policies whose expected
/// cost is at most `budget`.
///
/// When reward and cost share a discount factor this is the constrained
/// optimum; otherwise it is a lower bound on it.
pub fn brute_force_oracle(cmdp: &Cmdp, budget: f64) -> Result<OracleResult> {
    let points = enumerate_policies(cmdp)?;
    let n_policies = points.len();
    let rmax = points.iter().map(|p| p.reward).fold(f64::NEG_INFINITY, f64::max);
    let rmin = points.iter().map(|p| p.reward).fold(f64::INFINITY, f64::min);
    let front = frontier(&points);
    let feasible = |p: &PolicyPoint| p.cost <= budget + BUDGET_TOL;

    let mut best: Option<(f64, f64, usize, usize, f64)> = None;
    for (i, pi) in front.iter().enumerate() {
        if !feasible(pi) {
            continue;
        }
        if best.is_none_or(|b| pi.reward > b.0) {
            best = Some((pi.reward, pi.cost, i, i, 1.0));
        }
        for (j, pj) in front.iter().enumerate() {
            if feasible(pj) || pj.reward <= pi.reward {
                continue;
            }
            let alpha = (pj.cost - budget) / (pj.cost - pi.cost);
            let r = alpha * pi.reward + (1.0 - alpha) * pj.reward;
            if best.is_none_or(|b| r > b.0) {
                best = Some((r, alpha * pi.cost + (1.0 - alpha) * pj.cost, i, j, alpha));
            }
        }
    }
    let (r_star, c_star, i, j, alpha) = best.ok_or(Error::Infeasible(budget))?;
    Ok(OracleResult {
        r_star,
        c_star,
        first: front[i].actions.clone(),
        second: front[j].actions.clone(),
        alpha,
        n_policies,
        reward_range: rmax - rmin,
        frontier: front,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{discounted_sums, rollout};
    use crate::envs;
    use crate::rng_from_seed;

    #[test]
    fn m1_optimum_is_the_even_flip() {
        let m = envs::m1();
        let o = brute_force_oracle(&m, 0.5).unwrap();
        assert_eq!(o.r_star, 0.5);
        assert_eq!(o.c_star, 0.5);
        assert_eq!(o.alpha, 0.5);
        assert_eq!(o.n_policies, 2);
        let firsts = [o.first[0], o.second[0]];
        assert!(firsts.contains(&0) && firsts.contains(&1));
    }

    #[test]
    fn generous_budget_picks_the_best_policy() {
        let m = envs::m1();
        let o = brute_force_oracle(&m, 2.0).unwrap();
        assert_eq!((o.r_star, o.c_star, o.alpha), (1.0, 1.0, 1.0));
        assert_eq!(o.first, o.second);
    }

    #[test]
    fn infeasible_budget() {
        let m = envs::by_name("chain", 0).unwrap();
        let mut costly = m.clone();
        for row in costly.cost.iter_mut() {
            for c in row.iter_mut() {
                *c += 1.0;
            }
        }
        for row in costly.cost.iter_mut().zip(&m.terminal).filter(|r| *r.1).map(|r| r.0) {
            row.iter_mut().for_each(|c| *c = 0.0);
        }
        assert!(matches!(brute_force_oracle(&costly, 0.5), Err(Error::Infeasible(_))));
    }

    #[test]
    fn enumeration_budget() {
        let spec = envs::EnvSpec::Random {
            seed: 0,
            n_states: 13,
            n_actions: 3,
            branching: 2,
            terminal_prob: 0.1,
            gamma: 0.9,
        };
        let m = envs::build(&spec).unwrap();
        assert!(matches!(enumerate_policies(&m), Err(Error::EnumerationBudget { .. })));
    }

    #[test]
    fn oracle_mixture_matches_by_simulation() {
        let m = envs::by_name("chain", 0).unwrap();
        let o = brute_force_oracle(&m, m.budget_d).unwrap();
        let mut pol = o.mixture(&m).unwrap();
        let mut rng = rng_from_seed(4);
        let n = 20_000;
        let (mut r, mut c) = (0.0, 0.0);
        for _ in 0..n {
            let t = rollout(&m, &mut pol, m.horizon_cap, &mut rng).unwrap();
            let (dr, dc) = discounted_sums(&t, m.gamma_r, m.gamma_c);
            r += dr;
            c += dc;
        }
        assert!((r / n as f64 - o.r_star).abs() < 0.05);
        assert!((c / n as f64 - o.c_star).abs() < 0.05);
    }
}
