//! Run configuration: a TOML file with `[env]`, `[critic]`, `[augment]`,
//! `[budget]`, `[train]`, `[verify]`, `[sweep]` and `[run]` sections. Every
//! key is optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::RiskRule;
use crate::cmdp::{discount_mass, Cmdp};
use crate::critic::CostLearnConfig;
use crate::envs::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    #[default]
    Exact,
    Learned,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSection {
    pub mode: CriticMode,
    /// Perturbation size for `mode = "perturbed"`.
    pub delta: f64,
    /// Residual tolerance of cost value iteration.
    pub tol: f64,
    pub learn: CostLearnConfig,
}

impl Default for CriticSection {
    fn default() -> Self {
        Self { mode: CriticMode::Exact, delta: 0.0, tol: 1e-12, learn: CostLearnConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub rule: RiskRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    /// Cost budget; the environment's own when unset.
    pub d: Option<f64>,
    /// Cost discount; the environment's own when unset.
    pub gamma_c: Option<f64>,
    /// Initial risk; `gamma_c (d - margin)` when unset.
    pub x0: Option<f64>,
    /// Safety margin; `delta (1 + mass)` when the critic is perturbed by
    /// `delta > 0`, else 0.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Monte Carlo rollouts per estimate.
    pub n: usize,
    /// Reward tolerance of the optimality check.
    pub tol: f64,
    /// Mixture weight of the noise check.
    pub xi: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { n: 20_000, tol: 0.02, xi: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub delta_b: Vec<f64>,
    /// Initial risks; the resolved `x0` alone when empty.
    pub x0: Vec<f64>,
    /// Exploration weights; `train.xi` alone when empty.
    pub xi: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { delta_b: vec![0.0], x0: Vec::new(), xi: Vec::new(), seeds: vec![0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    /// Sample episodes exported as JSON lines after training.
    pub export_episodes: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, out: PathBuf::from("out"), jobs: 1, export_episodes: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub critic: CriticSection,
    pub augment: AugmentSection,
    pub budget: BudgetSection,
    pub train: TrainConfig,
    pub verify: VerifySection,
    pub sweep: SweepSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::M1,
            critic: CriticSection::default(),
            augment: AugmentSection::default(),
            budget: BudgetSection::default(),
            train: TrainConfig::default(),
            verify: VerifySection::default(),
            sweep: SweepSection::default(),
            run: RunSection::default(),
        }
    }
}

/// Command-line values that replace config keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub gamma_c: Option<f64>,
    pub budget: Option<f64>,
    pub x0: Option<f64>,
    pub delta_b: Option<f64>,
    pub episodes: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.gamma_c.is_some() {
            self.budget.gamma_c = o.gamma_c;
        }
        if o.budget.is_some() {
            self.budget.d = o.budget;
        }
        if o.x0.is_some() {
            self.budget.x0 = o.x0;
        }
        if let Some(delta) = o.delta_b {
            self.critic.delta = delta;
            if delta > 0.0 {
                self.critic.mode = CriticMode::Perturbed;
            }
        }
        if let Some(e) = o.episodes {
            self.train.episodes = e;
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(out) = &o.out {
            self.run.out = out.clone();
        }
        if let Some(j) = o.jobs {
            self.run.jobs = j;
        }
    }

    /// The environment with budget and cost-discount overrides applied.
    pub fn build_cmdp(&self) -> Result<Cmdp> {
        let mut cmdp = envs::build(&self.env)?;
        if let Some(d) = self.budget.d {
            cmdp.budget_d = d;
        }
        if let Some(g) = self.budget.gamma_c {
            cmdp.gamma_c = g;
        }
        cmdp.check()?;
        Ok(cmdp)
    }

    /// Margin in force for a critic at distance `delta` from the exact one.
    pub fn margin(&self, cmdp: &Cmdp, delta: f64) -> f64 {
        self.budget.margin.unwrap_or_else(|| {
            if delta > 0.0 {
                delta * (1.0 + discount_mass(cmdp.gamma_c, cmdp.horizon_cap))
            } else {
                0.0
            }
        })
    }

    /// Initial risk for a critic at distance `delta`.
    pub fn x0(&self, cmdp: &Cmdp, delta: f64) -> f64 {
        self.budget.x0.unwrap_or_else(|| cmdp.gamma_c * (cmdp.budget_d - self.margin(cmdp, delta)))
    }

    /// Checks every field against the preconditions of the operations it
    /// feeds; returns the built CMDP.
    pub fn validate(&self) -> Result<Cmdp> {
        let cmdp = self.build_cmdp()?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.critic.learn.step_size.validate().map_err(|e| Error::Config(e.to_string()))?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.critic.delta >= 0.0) {
            return bad(format!("critic.delta = {} must be non-negative", self.critic.delta));
        }
        if !(self.critic.tol > 0.0) {
            return bad("critic.tol must be positive".into());
        }
        if self.augment.rule == RiskRule::CostRelative && !cmdp.is_deterministic() {
            return bad("augment.rule = cost_relative requires a deterministic environment".into());
        }
        if self.verify.n < 2 {
            return bad(format!("verify.n = {} must be at least 2", self.verify.n));
        }
        if !(0.0..=1.0).contains(&self.verify.xi) {
            return bad(format!("verify.xi = {} outside [0, 1]", self.verify.xi));
        }
        if self.run.jobs == 0 {
            return bad("run.jobs must be positive".into());
        }
        let c_max = if cmdp.gamma_c < 1.0 {
            cmdp.c_max() / (1.0 - cmdp.gamma_c)
        } else {
            cmdp.c_max() * cmdp.horizon_cap as f64
        };
        let mut x0s = self.sweep.x0.clone();
        x0s.push(self.x0(&cmdp, self.critic.delta));
        for x0 in x0s {
            if !x0.is_finite() || x0.abs() > c_max {
                return bad(format!("x0 = {x0} outside the admissible range [-{c_max}, {c_max}]"));
            }
        }
        if self.sweep.delta_b.iter().any(|d| !(*d >= 0.0)) {
            return bad("sweep.delta_b entries must be non-negative".into());
        }
        if self.sweep.xi.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return bad("sweep.xi entries must lie in [0, 1]".into());
        }
        if self.sweep.seeds.is_empty() || self.sweep.delta_b.is_empty() {
            return bad("sweep.seeds and sweep.delta_b must be non-empty".into());
        }
        Ok(cmdp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        let m = cfg.validate().unwrap();
        assert_eq!(cfg.x0(&m, 0.0), 0.5);
    }

    #[test]
    fn parse_sections() {
        let cfg = RunConfig::parse(
            r#"
            [env]
            name = "chain"
            n = 4
            shortcut = [2.0, 1.0]

            [critic]
            mode = "perturbed"
            delta = 0.1

            [train]
            episodes = 10
            step_size = { kind = "constant", alpha = 0.5 }

            [run]
            seed = 7
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.episodes, 10);
        assert_eq!(cfg.run.seed, 7);
        let m = cfg.validate().unwrap();
        // margin = 0.1 * (1 + horizon_cap 3)
        assert!((cfg.x0(&m, 0.1) - (0.5 - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::parse("[train]\nepisodez = 3\n"), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides { x0: Some(10.0), ..Overrides::default() });
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides { gamma_c: Some(1.5), ..Overrides::default() });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides { delta_b: Some(0.05), episodes: Some(3), budget: Some(0.25), ..Overrides::default() });
        assert_eq!(cfg.critic.mode, CriticMode::Perturbed);
        assert_eq!(cfg.train.episodes, 3);
        assert_eq!(cfg.build_cmdp().unwrap().budget_d, 0.25);
    }
}
