//! Augmented policies: tabulated greedy proposals, noise mixtures, and the
//! projection of an augmented policy back onto the base CMDP.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{sample_atom, AugEnv, AugPolicy, AugState};
use crate::cmdp::{sample_index, Cmdp, MemorylessPolicy, Policy};
use crate::critic::QTable;
use crate::error::{Error, Result};
use crate::shield::{mix_with_noise, Atom, ProposedDistribution, Proposer};
use crate::SimRng;

/// A discrete augmented action the learner keeps a value for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub action: usize,
    pub risk: f64,
}

/// `levels` evenly spaced allocations per action, from `Q(s, a)` up to
/// `c_max`. Level 0 of each action is its minimal admissible allocation.
pub fn candidates(q: &QTable, c_max: f64, levels: usize) -> Vec<Vec<Candidate>> {
    let levels = levels.max(1);
    q.values
        .iter()
        .map(|row| {
            let mut out = Vec::with_capacity(row.len() * levels);
            for (action, &lo) in row.iter().enumerate() {
                let span = (c_max - lo).max(0.0);
                for k in 0..levels {
                    let risk = if k == 0 || levels == 1 { lo } else { lo + span * k as f64 / (levels - 1) as f64 };
                    if k > 0 && span == 0.0 {
                        break;
                    }
                    out.push(Candidate { action, risk });
                }
            }
            out
        })
        .collect()
}

/// Best mixture of at most two candidates whose expected discounted
/// allocation fits in `x`: maximises `sum p_k v_k` subject to
/// `sum p_k gamma_c y_k <= x`. Returns `(index, prob)` pairs and the value,
/// or `None` when even the cheapest candidate exceeds `x`.
///
/// The optimum sits on the upper concave hull of the points
/// `(gamma_c y_k, v_k)`, evaluated at `x`.
pub fn greedy(cands: &[Candidate], values: &[f64], gamma_c: f64, x: f64) -> Option<(Vec<(usize, f64)>, f64)> {
    let budget = |k: usize| gamma_c * cands[k].risk;
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&i, &j| budget(i).total_cmp(&budget(j)).then(i.cmp(&j)));
    if order.is_empty() || budget(order[0]) > x {
        return None;
    }
    // Points that beat every cheaper point, then their upper hull.
    let mut hull: Vec<usize> = Vec::with_capacity(order.len());
    for k in order {
        if let Some(&last) = hull.last() {
            if values[k] <= values[last] {
                continue;
            }
            if budget(k) == budget(last) {
                hull.pop();
            }
        }
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let lhs = (values[b] - values[a]) * (budget(k) - budget(a));
            let rhs = (values[k] - values[a]) * (budget(b) - budget(a));
            if lhs <= rhs {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(k);
    }
    let i = hull.partition_point(|&k| budget(k) <= x) - 1;
    let lo = hull[i];
    match hull.get(i + 1) {
        Some(&hi) if budget(lo) < x => {
            let p = (x - budget(lo)) / (budget(hi) - budget(lo));
            Some((vec![(lo, 1.0 - p), (hi, p)], values[lo] + p * (values[hi] - values[lo])))
        }
        _ => Some((vec![(lo, 1.0)], values[lo])),
    }
}

/// Greedy value at `(s, x)`, falling back to the value of the cheapest backup
/// candidate below the floor.
pub fn greedy_value(q: &QTable, cands: &[Candidate], values: &[f64], s: usize, x: f64) -> f64 {
    match greedy(cands, values, q.gamma_c, x) {
        Some((_, v)) => v,
        None => {
            let b = q.backup_action(s);
            cands.iter().position(|c| c.action == b).map_or(0.0, |k| values[k])
        }
    }
}

/// Greedy proposal at `(s, x)`; the backup action at its minimal allocation
/// when nothing fits.
pub fn greedy_proposal(q: &QTable, cands: &[Candidate], values: &[f64], s: usize, x: f64) -> Vec<Atom> {
    match greedy(cands, values, q.gamma_c, x) {
        Some((mix, _)) => mix.into_iter().map(|(k, p)| Atom::new(cands[k].action, cands[k].risk, p)).collect(),
        None => {
            let b = q.backup_action(s);
            vec![Atom::new(b, q.get(s, b), 1.0)]
        }
    }
}

/// Proposal table over `[-c_max, c_max]`: each state has sorted breakpoints,
/// and the proposal stored at a breakpoint applies until the next one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabularAugPolicy {
    pub c_max: f64,
    pub breakpoints: Vec<Vec<f64>>,
    pub proposals: Vec<Vec<Vec<Atom>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyRow {
    state: usize,
    lower: f64,
    a1: usize,
    y1: f64,
    p1: f64,
    a2: Option<usize>,
    y2: Option<f64>,
    p2: Option<f64>,
}

const DOMAIN_TOL: f64 = 1e-9;

impl TabularAugPolicy {
    /// Tabulates greedy proposals on a uniform grid of `bins` cells, refined
    /// with every candidate's discounted allocation and the `extra`
    /// `(state, risk)` points.
    pub fn from_values(
        q: &QTable,
        cands: &[Vec<Candidate>],
        values: &[Vec<f64>],
        c_max: f64,
        bins: usize,
        extra: &[(usize, f64)],
    ) -> Self {
        let bins = bins.max(1);
        let mut breakpoints = Vec::with_capacity(cands.len());
        let mut proposals = Vec::with_capacity(cands.len());
        for s in 0..cands.len() {
            let mut pts: Vec<f64> = (0..bins).map(|i| -c_max + 2.0 * c_max * i as f64 / bins as f64).collect();
            pts.extend(cands[s].iter().map(|c| q.gamma_c * c.risk).filter(|b| b.abs() <= c_max));
            pts.extend(extra.iter().filter(|e| e.0 == s && e.1.abs() <= c_max).map(|e| e.1));
            pts.sort_by(f64::total_cmp);
            pts.dedup();
            let props = pts.iter().map(|&x| greedy_proposal(q, &cands[s], &values[s], s, x)).collect();
            breakpoints.push(pts);
            proposals.push(props);
        }
        Self { c_max, breakpoints, proposals }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (state, (pts, props)) in self.breakpoints.iter().zip(&self.proposals).enumerate() {
            for (&lower, atoms) in pts.iter().zip(props) {
                let second = atoms.get(1);
                w.serialize(PolicyRow {
                    state,
                    lower,
                    a1: atoms[0].action,
                    y1: atoms[0].risk,
                    p1: atoms[0].prob,
                    a2: second.map(|a| a.action),
                    y2: second.map(|a| a.risk),
                    p2: second.map(|a| a.prob),
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, n_states: usize, c_max: f64) -> Result<Self> {
        let mut breakpoints = vec![Vec::new(); n_states];
        let mut proposals = vec![Vec::new(); n_states];
        for row in csv::Reader::from_path(path)?.deserialize() {
            let row: PolicyRow = row?;
            if row.state >= n_states {
                return Err(Error::InvalidParameter(format!("policy row for unknown state {}", row.state)));
            }
            let mut atoms = vec![Atom::new(row.a1, row.y1, row.p1)];
            if let (Some(a), Some(y), Some(p)) = (row.a2, row.y2, row.p2) {
                atoms.push(Atom::new(a, y, p));
            }
            if breakpoints[row.state].last().is_some_and(|&l| l >= row.lower) {
                return Err(Error::InvalidParameter("policy breakpoints must increase".into()));
            }
            breakpoints[row.state].push(row.lower);
            proposals[row.state].push(atoms);
        }
        Ok(Self { c_max, breakpoints, proposals })
    }
}

impl Proposer for TabularAugPolicy {
    fn propose(&self, st: &AugState) -> Result<ProposedDistribution> {
        let (s, x) = (st.base_state, st.risk);
        let pts = self.breakpoints.get(s).ok_or(Error::DomainGap { state: s, x })?;
        if !x.is_finite() || x.abs() > self.c_max + DOMAIN_TOL || pts.is_empty() {
            return Err(Error::DomainGap { state: s, x });
        }
        let bin = pts.partition_point(|&b| b <= x).saturating_sub(1);
        Ok(ProposedDistribution { atoms: self.proposals[s][bin].clone() })
    }
}

/// `(1 - xi) base + xi noise`, mixed after both policies have acted.
pub struct NoisyPolicy<'a> {
    pub base: &'a dyn AugPolicy,
    pub noise: &'a dyn AugPolicy,
    pub xi: f64,
}

impl AugPolicy for NoisyPolicy<'_> {
    fn distribution(&self, st: &AugState) -> Result<Vec<Atom>> {
        mix_with_noise(&self.base.distribution(st)?, &self.noise.distribution(st)?, self.xi)
    }
}

/// Uniform over actions, each allocated `risk` (its minimal admissible
/// allocation when `None`).
#[derive(Debug, Clone)]
pub struct UniformAugPolicy {
    pub q: QTable,
    pub risk: Option<f64>,
}

impl AugPolicy for UniformAugPolicy {
    fn distribution(&self, st: &AugState) -> Result<Vec<Atom>> {
        let row = &self.q.values[st.base_state];
        let p = 1.0 / row.len() as f64;
        Ok(row.iter().enumerate().map(|(a, &qa)| Atom::new(a, self.risk.unwrap_or(qa), p)).collect())
    }
}

/// The base-CMDP policy induced by an augmented policy: the risk coordinate
/// becomes internal memory, updated with the environment's own rule.
pub struct ProjectedPolicy<'a> {
    policy: &'a dyn AugPolicy,
    env: &'a AugEnv,
    x0: f64,
    memory: f64,
    pending: f64,
}

impl ProjectedPolicy<'_> {
    pub fn memory(&self) -> f64 {
        self.memory
    }
}

pub fn project<'a>(policy: &'a dyn AugPolicy, env: &'a AugEnv, x0: f64) -> Result<ProjectedPolicy<'a>> {
    if !x0.is_finite() {
        return Err(Error::InvalidParameter(format!("initial risk {x0} is not finite")));
    }
    let start = env.clamp(x0).0;
    Ok(ProjectedPolicy { policy, env, x0: start, memory: start, pending: 0.0 })
}

impl Policy for ProjectedPolicy<'_> {
    fn reset(&mut self) {
        self.memory = self.x0;
    }

    fn act(&mut self, _cmdp: &Cmdp, state: usize, rng: &mut SimRng) -> Result<usize> {
        let atom = sample_atom(&self.policy.distribution(&AugState::new(state, self.memory))?, rng);
        self.pending = atom.risk;
        Ok(atom.action)
    }

    fn observe(&mut self, _cmdp: &Cmdp, state: usize, action: usize, next: usize) {
        self.memory = self.env.next_risk(state, action, self.pending, next).0;
    }
}

/// Flips a coin once per episode between two memoryless policies.
#[derive(Debug, Clone)]
pub struct MixturePolicy {
    pub first: MemorylessPolicy,
    pub second: MemorylessPolicy,
    /// Probability of following `first`.
    pub alpha: f64,
    chosen: Option<bool>,
}

impl MixturePolicy {
    pub fn new(first: MemorylessPolicy, second: MemorylessPolicy, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::MixtureWeight(alpha));
        }
        Ok(Self { first, second, alpha, chosen: None })
    }
}

impl Policy for MixturePolicy {
    fn reset(&mut self) {
        self.chosen = None;
    }

    fn act(&mut self, cmdp: &Cmdp, state: usize, rng: &mut SimRng) -> Result<usize> {
        let first = *self.chosen.get_or_insert_with(|| sample_index(&[self.alpha, 1.0 - self.alpha], rng) == 0);
        if first {
            self.first.act(cmdp, state, rng)
        } else {
            self.second.act(cmdp, state, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{aug_rollout, augment, RiskRule};
    use crate::cmdp::rollout;
    use crate::critic::cost_value_iteration;
    use crate::envs;
    use crate::rng_from_seed;
    use crate::shield::ShieldedPolicy;

    fn m1_env() -> AugEnv {
        let m = envs::m1();
        let q = cost_value_iteration(&m, 1e-12).unwrap();
        augment(&m, &q, RiskRule::QRelative).unwrap()
    }

    #[test]
    fn greedy_flips_between_hull_vertices() {
        let cands = [Candidate { action: 1, risk: 0.0 }, Candidate { action: 0, risk: 1.0 }];
        let (mix, v) = greedy(&cands, &[0.0, 1.0], 1.0, 0.5).unwrap();
        assert_eq!(mix, vec![(0, 0.5), (1, 0.5)]);
        assert_eq!(v, 0.5);
        assert!(greedy(&cands, &[0.0, 1.0], 1.0, -0.1).is_none());
        let (mix, _) = greedy(&cands, &[0.0, 1.0], 1.0, 2.0).unwrap();
        assert_eq!(mix, vec![(1, 1.0)]);
    }

    #[test]
    fn greedy_skips_dominated_points() {
        let cands: Vec<Candidate> = (0..3).map(|k| Candidate { action: k, risk: k as f64 }).collect();
        // The middle point lies under the chord, so the hull mixes 0 and 2.
        let (mix, v) = greedy(&cands, &[0.0, 0.2, 1.0], 1.0, 1.0).unwrap();
        assert_eq!(mix, vec![(0, 0.5), (2, 0.5)]);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn candidate_levels() {
        let env = m1_env();
        let c = candidates(&env.q, env.c_max_bound, 3);
        assert_eq!(c[0][0], Candidate { action: 0, risk: 1.0 });
        assert_eq!(c[0][2], Candidate { action: 0, risk: 2.0 });
        assert_eq!(c[0][3], Candidate { action: 1, risk: 0.0 });
        assert_eq!(c[0].len(), 6);
    }

    fn flip_policy(env: &AugEnv) -> TabularAugPolicy {
        let cands = candidates(&env.q, env.c_max_bound, 1);
        let values = vec![vec![1.0, 0.0], vec![0.0], vec![0.0], vec![0.0]];
        TabularAugPolicy::from_values(&env.q, &cands, &values, env.c_max_bound, 40, &[(0, 0.5)])
    }

    #[test]
    fn table_lookup_and_domain() {
        let env = m1_env();
        let pol = flip_policy(&env);
        let p = pol.propose(&AugState::new(0, 0.5)).unwrap();
        assert_eq!(p.atoms, vec![Atom::new(1, 0.0, 0.5), Atom::new(0, 1.0, 0.5)]);
        let p = pol.propose(&AugState::new(0, 1.5)).unwrap();
        assert_eq!(p.atoms, vec![Atom::new(0, 1.0, 1.0)]);
        assert!(matches!(pol.propose(&AugState::new(0, 7.0)), Err(Error::DomainGap { .. })));
    }

    #[test]
    fn table_csv_round_trip() {
        let env = m1_env();
        let pol = flip_policy(&env);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.csv");
        pol.write_csv(&path).unwrap();
        assert_eq!(TabularAugPolicy::read_csv(&path, 4, env.c_max_bound).unwrap(), pol);
    }

    #[test]
    fn projection_replays_the_augmented_path() {
        let env = m1_env();
        let pol = ShieldedPolicy::new(flip_policy(&env), env.q.clone());
        for seed in 0..50 {
            let aug = aug_rollout(&env, &pol, 0.5, 2, &mut rng_from_seed(seed)).unwrap();
            let mut proj = project(&pol, &env, 0.5).unwrap();
            let base = rollout(&env.cmdp, &mut proj, 2, &mut rng_from_seed(seed)).unwrap();
            let a: Vec<(usize, usize)> = aug.steps.iter().map(|t| (t.s, t.a)).collect();
            let b: Vec<(usize, usize)> = base.steps.iter().map(|t| (t.state, t.action)).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mixture_flips_once_per_episode() {
        let m = envs::m1();
        let a0 = MemorylessPolicy::deterministic(&m, &[0, 0, 0, 0]).unwrap();
        let a1 = MemorylessPolicy::deterministic(&m, &[1, 0, 0, 0]).unwrap();
        let mut mix = MixturePolicy::new(a0, a1, 0.5).unwrap();
        let mut rng = rng_from_seed(9);
        let n = 4000;
        let hits = (0..n).filter(|_| rollout(&m, &mut mix, 2, &mut rng).unwrap().steps[0].action == 0).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.03);
        assert!(MixturePolicy::new(mix.first.clone(), mix.second.clone(), 1.2).is_err());
    }
}
