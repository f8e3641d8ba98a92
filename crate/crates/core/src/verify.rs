//! Monte Carlo estimators and the statistical checks of the safety,
//! preservation, noise and optimality guarantees.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::augment::{aug_step, sample_atom, AugAction, AugEnv, AugPolicy};
use crate::cmdp::{discount_mass, discounted_sums, rollout, Cmdp, Policy};
use crate::error::{Error, Result};
use crate::oracle::brute_force_oracle;
use crate::policy::{project, NoisyPolicy};
use crate::shield::{is_shielded, SHIELD_TOL};
use crate::{derive_seed, rng_from_seed, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
    /// Half-width of the normal 95% interval, `1.96 * std_error`.
    pub ci95: f64,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        let mut acc = Welford::default();
        xs.iter().for_each(|&x| acc.push(x));
        acc.finish()
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn finish(&self) -> Result<McEstimate> {
        if self.n < 2 {
            return Err(Error::TooFewSamples(self.n));
        }
        let var = self.m2 / (self.n - 1) as f64;
        let std_error = (var / self.n as f64).sqrt();
        Ok(McEstimate { mean: self.mean, std_error, n: self.n, ci95: 1.96 * std_error })
    }
}

/// Discounted cost and reward estimates from the same episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McPair {
    pub cost: McEstimate,
    pub reward: McEstimate,
}

/// Augmented-policy estimates plus shield and clamping audits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AugMc {
    pub cost: McEstimate,
    pub reward: McEstimate,
    /// Decisions that failed [`is_shielded`].
    pub unshielded: usize,
    pub clamp_events: usize,
    pub decisions: usize,
}

/// Estimates `(C, R)` of a base policy from `n` rollouts.
pub fn mc_estimate(cmdp: &Cmdp, policy: &mut dyn Policy, n: usize, horizon: Option<usize>, seed: u64) -> Result<McPair> {
    let horizon = horizon.unwrap_or_else(|| cmdp.mc_horizon());
    let mut rng = rng_from_seed(seed);
    let (mut c, mut r) = (Welford::default(), Welford::default());
    for _ in 0..n {
        let t = rollout(cmdp, policy, horizon, &mut rng)?;
        let (dr, dc) = discounted_sums(&t, cmdp.gamma_r, cmdp.gamma_c);
        r.push(dr);
        c.push(dc);
    }
    Ok(McPair { cost: c.finish()?, reward: r.finish()? })
}

/// Estimates `(C, R)` of an augmented policy from `(s_i, x0)`, auditing each
/// decision against the shield conditions of the environment's table.
pub fn mc_estimate_aug(
    env: &AugEnv,
    policy: &dyn AugPolicy,
    x0: f64,
    n: usize,
    horizon: Option<usize>,
    seed: u64,
) -> Result<AugMc> {
    let horizon = horizon.unwrap_or_else(|| env.cmdp.mc_horizon());
    let mut rng = rng_from_seed(seed);
    let (mut c, mut r) = (Welford::default(), Welford::default());
    let (mut unshielded, mut clamp_events, mut decisions) = (0, 0, 0);
    for _ in 0..n {
        let (dr, dc, bad, clamps, steps) = aug_episode(env, policy, x0, horizon, &mut rng)?;
        r.push(dr);
        c.push(dc);
        unshielded += bad;
        clamp_events += clamps;
        decisions += steps;
    }
    Ok(AugMc { cost: c.finish()?, reward: r.finish()?, unshielded, clamp_events, decisions })
}

fn aug_episode(
    env: &AugEnv,
    policy: &dyn AugPolicy,
    x0: f64,
    horizon: usize,
    rng: &mut SimRng,
) -> Result<(f64, f64, usize, usize, usize)> {
    let cmdp = &env.cmdp;
    let mut st = env.initial(x0);
    let (mut dr, mut dc, mut gr, mut gc) = (0.0, 0.0, 1.0, 1.0);
    let (mut bad, mut clamps, mut steps) = (0, 0, 0);
    while steps < horizon && !env.is_terminal(&st) {
        let dist = policy.distribution(&st)?;
        if !is_shielded(&dist, &st, &env.q, SHIELD_TOL) {
            bad += 1;
        }
        let atom = sample_atom(&dist, rng);
        let out = aug_step(env, &st, &AugAction { base_action: atom.action, allocated_risk: atom.risk }, rng)?;
        dr += gr * out.reward;
        dc += gc * out.cost;
        gr *= cmdp.gamma_r;
        gc *= cmdp.gamma_c;
        clamps += usize::from(out.clamped);
        steps += 1;
        st = out.next;
    }
    Ok((dr, dc, bad, clamps, steps))
}

/// Outcome of one statistical check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub bound: f64,
    pub estimate: McEstimate,
    /// Statistical allowance added to `bound` (or the allowed absolute
    /// difference for equality checks).
    pub margin: f64,
    pub pass: bool,
    pub params: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl CheckReport {
    fn new(check: &str, bound: f64, estimate: McEstimate, margin: f64, pass: bool) -> Self {
        Self { check: check.into(), bound, estimate, margin, pass, params: BTreeMap::new(), notes: Vec::new() }
    }

    fn param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    /// The flat record written to `checks.jsonl`.
    pub fn json_line(&self) -> serde_json::Value {
        serde_json::json!({
            "check": self.check,
            "bound": self.bound,
            "mean": self.estimate.mean,
            "ci95": self.estimate.ci95,
            "pass": self.pass,
            "params": self.params,
        })
    }

    /// One human-readable line.
    pub fn summary(&self) -> String {
        format!(
            "{:<12} {} mean={:.6} ci95={:.6} bound={:.6} margin={:.6}",
            self.check,
            if self.pass { "PASS" } else { "FAIL" },
            self.estimate.mean,
            self.estimate.ci95,
            self.bound,
            self.margin
        )
    }
}

/// Cost bound of a shielded policy started at `x0` under a table `delta`
/// away from the exact one, and whether the budget started above the floor.
pub fn safety_bound(x0: f64, floor0: f64, gamma_c: f64, delta: f64, mass: f64) -> (f64, bool) {
    if x0 >= floor0 {
        (x0 / gamma_c + 2.0 * delta * mass, true)
    } else {
        (floor0 / gamma_c + 3.0 * delta * mass, false)
    }
}

/// Extra discounted cost a `xi`-mixture with arbitrary noise can incur:
/// `c_max sum_t gamma^t (1 - (1 - xi)^(t + 1))`, summed to infinity when
/// `gamma < 1` and over `horizon` steps otherwise.
pub fn noise_slack(xi: f64, gamma_c: f64, c_max: f64, horizon: usize) -> f64 {
    if gamma_c < 1.0 {
        xi * c_max / ((1.0 - gamma_c) * (1.0 - (1.0 - xi) * gamma_c))
    } else {
        let keep = 1.0 - xi;
        (0..horizon as i32).map(|t| 1.0 - keep.powi(t + 1)).sum::<f64>() * c_max
    }
}

/// Checks the cost of a shielded policy against [`safety_bound`]. Fails if
/// any sampled decision was not shielded.
pub fn check_safety(
    env: &AugEnv,
    policy: &dyn AugPolicy,
    x0: f64,
    delta_b: f64,
    n: usize,
    seed: u64,
) -> Result<CheckReport> {
    let cmdp = &env.cmdp;
    let x_start = env.initial(x0).risk;
    let floor0 = env.q.floor(cmdp.initial_state);
    let mass = discount_mass(cmdp.gamma_c, cmdp.horizon_cap);
    let (bound, above) = safety_bound(x_start, floor0, cmdp.gamma_c, delta_b, mass);
    let mc = mc_estimate_aug(env, policy, x0, n, None, seed)?;
    let pass = mc.unshielded == 0 && mc.cost.mean <= bound + mc.cost.ci95;
    // The same guarantee is also commonly quoted in budget units; record it.
    let alt_bound = x_start + 2.0 * delta_b * mass;
    let mut rep = CheckReport::new("safety", bound, mc.cost, mc.cost.ci95, pass)
        .param("x0", x_start)
        .param("delta_b", delta_b)
        .param("gamma_c", cmdp.gamma_c)
        .param("floor0", floor0)
        .param("above_floor", f64::from(u8::from(above)))
        .param("alt_bound", alt_bound)
        .param("alt_above_floor", f64::from(u8::from(x_start >= floor0 / cmdp.gamma_c)))
        .param("reward_mean", mc.reward.mean)
        .param("reward_ci95", mc.reward.ci95)
        .param("unshielded", mc.unshielded as f64)
        .param("clamp_events", mc.clamp_events as f64)
        .param("n", n as f64)
        .param("seed", seed as f64);
    if mc.unshielded > 0 {
        rep.notes.push(format!("precondition failed: {} unshielded decisions", mc.unshielded));
    }
    Ok(rep)
}

/// Compares an augmented policy with its projection on independent seeds.
pub fn check_preservation(env: &AugEnv, policy: &dyn AugPolicy, x0: f64, n: usize, seed: u64) -> Result<CheckReport> {
    let aug = mc_estimate_aug(env, policy, x0, n, None, derive_seed(seed, 1))?;
    let mut proj = project(policy, env, x0)?;
    let base = mc_estimate(&env.cmdp, &mut proj, n, None, derive_seed(seed, 2))?;
    let cost_margin = aug.cost.ci95 + base.cost.ci95;
    let reward_margin = aug.reward.ci95 + base.reward.ci95;
    let cost_diff = (aug.cost.mean - base.cost.mean).abs();
    let reward_diff = (aug.reward.mean - base.reward.mean).abs();
    let pass = cost_diff <= cost_margin && reward_diff <= reward_margin;
    Ok(CheckReport::new("preservation", aug.cost.mean, base.cost, cost_margin, pass)
        .param("x0", x0)
        .param("aug_cost", aug.cost.mean)
        .param("aug_reward", aug.reward.mean)
        .param("projected_cost", base.cost.mean)
        .param("projected_reward", base.reward.mean)
        .param("reward_margin", reward_margin)
        .param("n", n as f64)
        .param("seed", seed as f64))
}

/// Checks the cost of `(1 - xi) base + xi noise` against the base cost plus
/// [`noise_slack`]. Both estimates use the same random stream.
pub fn check_noise(
    env: &AugEnv,
    base: &dyn AugPolicy,
    noise: &dyn AugPolicy,
    xi: f64,
    x0: f64,
    n: usize,
    seed: u64,
) -> Result<CheckReport> {
    let cmdp = &env.cmdp;
    let mixed = NoisyPolicy { base, noise, xi };
    let b = mc_estimate_aug(env, base, x0, n, None, seed)?;
    let m = mc_estimate_aug(env, &mixed, x0, n, None, seed)?;
    let slack = noise_slack(xi, cmdp.gamma_c, cmdp.c_max(), cmdp.mc_horizon());
    let bound = b.cost.mean + slack;
    let margin = b.cost.ci95 + m.cost.ci95;
    let pass = m.cost.mean <= bound + margin;
    Ok(CheckReport::new("noise", bound, m.cost, margin, pass)
        .param("xi", xi)
        .param("x0", x0)
        .param("base_cost", b.cost.mean)
        .param("slack", slack)
        .param("n", n as f64)
        .param("seed", seed as f64))
}

/// Compares a trained policy with the exact constrained optimum at the
/// CMDP's budget: reward within `tol` of the optimum, and cost within the
/// safety bound at `x0 = gamma_c d`.
pub fn check_optimality(
    env: &AugEnv,
    policy: &dyn AugPolicy,
    x0: f64,
    delta_b: f64,
    tol: f64,
    n: usize,
    seed: u64,
) -> Result<CheckReport> {
    let cmdp = &env.cmdp;
    if !cmdp.is_deterministic() {
        return Err(Error::InvalidParameter("optimality check needs a deterministic cmdp".into()));
    }
    let oracle = brute_force_oracle(cmdp, cmdp.budget_d)?;
    let mc = mc_estimate_aug(env, policy, x0, n, None, seed)?;
    let mass = discount_mass(cmdp.gamma_c, cmdp.horizon_cap);
    let cost_bound = cmdp.budget_d + 2.0 * delta_b * mass;
    let reward_ok = mc.reward.mean >= oracle.r_star - tol - mc.reward.ci95;
    let cost_ok = mc.cost.mean <= cost_bound + mc.cost.ci95;
    let mut rep = CheckReport::new("optimality", oracle.r_star - tol, mc.reward, mc.reward.ci95, reward_ok && cost_ok)
        .param("x0", x0)
        .param("delta_b", delta_b)
        .param("tol", tol)
        .param("r_star", oracle.r_star)
        .param("c_star", oracle.c_star)
        .param("reward_gap", oracle.r_star - mc.reward.mean)
        .param("reward_range", oracle.reward_range)
        .param("cost", mc.cost.mean)
        .param("cost_ci95", mc.cost.ci95)
        .param("cost_bound", cost_bound)
        .param("n", n as f64)
        .param("seed", seed as f64);
    if cmdp.gamma_r != cmdp.gamma_c {
        rep.notes.push("reward and cost discounts differ; the oracle is a lower bound".into());
    }
    Ok(rep)
}
