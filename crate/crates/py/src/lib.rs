//! Python module `prosh`: environments, the cost critic, the shield map,
//! shielded training, the bound checks and the batch runner.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use prosh_core::augment::{augment, AugState, RiskRule};
use prosh_core::cmdp::Cmdp;
use prosh_core::config::RunConfig;
use prosh_core::critic::{cost_value_iteration, perturb, QTable};
use prosh_core::envs::{self, EnvSpec};
use prosh_core::oracle::brute_force_oracle;
use prosh_core::policy::TabularAugPolicy;
use prosh_core::runner::{self, Command};
use prosh_core::shield::{self as core_shield, Atom, ProposedDistribution, ShieldCase, ShieldedPolicy, SHIELD_TOL};
use prosh_core::train::{shielded_q_train, TrainConfig};
use prosh_core::verify::{check_optimality, check_preservation, check_safety, CheckReport};
use prosh_core::{derive_seed, rng_from_seed};

/// `(action, allocated risk, probability)`.
type AtomTuple = (usize, f64, f64);

fn py_err(e: prosh_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_rule(rule: &str) -> PyResult<RiskRule> {
    match rule {
        "q_relative" => Ok(RiskRule::QRelative),
        "cost_relative" => Ok(RiskRule::CostRelative),
        other => Err(PyValueError::new_err(format!("unknown risk rule {other:?}"))),
    }
}

fn atoms_from(items: Vec<AtomTuple>) -> Vec<Atom> {
    items.into_iter().map(|(a, y, p)| Atom::new(a, y, p)).collect()
}

fn atoms_to(atoms: &[Atom]) -> Vec<AtomTuple> {
    atoms.iter().map(|a| (a.action, a.risk, a.prob)).collect()
}

fn report_dict<'py>(py: Python<'py>, rep: &CheckReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("check", &rep.check)?;
    d.set_item("bound", rep.bound)?;
    d.set_item("mean", rep.estimate.mean)?;
    d.set_item("ci95", rep.estimate.ci95)?;
    d.set_item("pass", rep.pass)?;
    d.set_item("params", rep.params.clone())?;
    Ok(d)
}

/// A finite constrained MDP.
#[pyclass(name = "Cmdp", module = "prosh", from_py_object)]
#[derive(Clone)]
struct PyCmdp {
    inner: Cmdp,
}

#[pymethods]
impl PyCmdp {
    /// Builds a CMDP from dense arrays; `transition[s][a][s']`.
    #[new]
    #[pyo3(signature = (transition, reward, cost, gamma_r, gamma_c, budget, terminal, initial_state=0, horizon_cap=1))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        cost: Vec<Vec<f64>>,
        gamma_r: f64,
        gamma_c: f64,
        budget: f64,
        terminal: Vec<bool>,
        initial_state: usize,
        horizon_cap: usize,
    ) -> PyResult<Self> {
        let n = transition.len();
        let inner = Cmdp {
            name: "custom".into(),
            state_names: (0..n).map(|s| format!("s{s}")).collect(),
            action_names: transition.iter().map(|row| (0..row.len()).map(|a| format!("a{a}")).collect()).collect(),
            transition,
            reward,
            cost,
            gamma_r,
            gamma_c,
            budget_d: budget,
            initial_state,
            terminal,
            horizon_cap,
        };
        inner.check().map_err(py_err)?;
        Ok(Self { inner })
    }

    /// One of the built-in environments: `m1`, `chain`, `loop`, `random`.
    #[staticmethod]
    #[pyo3(signature = (name, seed=0))]
    fn by_name(name: &str, seed: u64) -> PyResult<Self> {
        envs::by_name(name, seed).map(|inner| Self { inner }).map_err(py_err)
    }

    /// An environment from a TOML table such as `name = "chain"\nn = 5`.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let spec: EnvSpec = toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        envs::build(&spec).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn budget(&self) -> f64 {
        self.inner.budget_d
    }

    #[getter]
    fn gamma_c(&self) -> f64 {
        self.inner.gamma_c
    }

    #[getter]
    fn initial_state(&self) -> usize {
        self.inner.initial_state
    }

    fn n_actions(&self, state: usize) -> PyResult<usize> {
        if state >= self.inner.n_states() {
            return Err(PyValueError::new_err(format!("state {state} out of range")));
        }
        Ok(self.inner.n_actions(state))
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }

    fn __repr__(&self) -> String {
        format!("Cmdp({:?}, states={}, d={})", self.inner.name, self.inner.n_states(), self.inner.budget_d)
    }
}

/// Cost action-values of the backup critic.
#[pyclass(name = "QTable", module = "prosh", from_py_object)]
#[derive(Clone)]
struct PyQTable {
    inner: QTable,
}

#[pymethods]
impl PyQTable {
    #[getter]
    fn values(&self) -> Vec<Vec<f64>> {
        self.inner.values.clone()
    }

    #[getter]
    fn gamma_c(&self) -> f64 {
        self.inner.gamma_c
    }

    fn backup_action(&self, state: usize) -> usize {
        self.inner.backup_action(state)
    }

    /// `gamma_c min_a Q(s, a)`.
    fn floor(&self, state: usize) -> f64 {
        self.inner.floor(state)
    }

    /// Sup-norm distance to `other`.
    fn distance(&self, other: &PyQTable) -> f64 {
        self.inner.distance(&other.inner)
    }
}

#[pyfunction]
#[pyo3(signature = (cmdp, tol=1e-12))]
fn value_iteration(cmdp: &PyCmdp, tol: f64) -> PyResult<PyQTable> {
    cost_value_iteration(&cmdp.inner, tol).map(|inner| PyQTable { inner }).map_err(py_err)
}

/// `q` with every non-terminal entry moved by at most `delta`.
#[pyfunction]
#[pyo3(signature = (cmdp, q, delta, seed=0))]
fn perturbed(cmdp: &PyCmdp, q: &PyQTable, delta: f64, seed: u64) -> PyResult<PyQTable> {
    perturb(&q.inner, delta, &cmdp.inner.terminal, &mut rng_from_seed(seed))
        .map(|inner| PyQTable { inner })
        .map_err(py_err)
}

/// Shields a proposal of `(action, risk, prob)` atoms at `(state, x)`.
/// Returns `(atoms, lambda, case)`.
#[pyfunction]
fn shield(q: &PyQTable, state: usize, x: f64, atoms: Vec<AtomTuple>) -> PyResult<(Vec<AtomTuple>, f64, String)> {
    if state >= q.inner.values.len() {
        return Err(PyValueError::new_err(format!("state {state} out of range")));
    }
    let proposal = ProposedDistribution::new(atoms_from(atoms)).map_err(py_err)?;
    let out = core_shield::shield(&proposal, &AugState::new(state, x), &q.inner).map_err(py_err)?;
    let case = match out.case {
        ShieldCase::PassThrough => "pass_through",
        ShieldCase::Fallback => "fallback",
        ShieldCase::Mixed => "mixed",
    };
    Ok((atoms_to(&out.atoms), out.lambda, case.to_string()))
}

#[pyfunction]
#[pyo3(signature = (q, state, x, atoms, tol=SHIELD_TOL))]
fn is_shielded(q: &PyQTable, state: usize, x: f64, atoms: Vec<AtomTuple>, tol: f64) -> PyResult<bool> {
    if state >= q.inner.values.len() {
        return Err(PyValueError::new_err(format!("state {state} out of range")));
    }
    Ok(core_shield::is_shielded(&atoms_from(atoms), &AugState::new(state, x), &q.inner, tol))
}

/// Best stationary mixture of two deterministic policies within `budget`.
#[pyfunction]
#[pyo3(signature = (cmdp, budget=None))]
fn oracle<'py>(py: Python<'py>, cmdp: &PyCmdp, budget: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let r = brute_force_oracle(&cmdp.inner, budget.unwrap_or(cmdp.inner.budget_d)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("r_star", r.r_star)?;
    d.set_item("c_star", r.c_star)?;
    d.set_item("first", r.first)?;
    d.set_item("second", r.second)?;
    d.set_item("alpha", r.alpha)?;
    d.set_item("n_policies", r.n_policies)?;
    Ok(d)
}

/// A trained shielded policy together with the environment it acts in.
#[pyclass(name = "ShieldedPolicy", module = "prosh")]
struct PyShieldedPolicy {
    cmdp: Cmdp,
    rule: RiskRule,
    x0: f64,
    policy: ShieldedPolicy<TabularAugPolicy>,
    #[pyo3(get)]
    shield_violations: usize,
}

impl PyShieldedPolicy {
    fn env(&self) -> PyResult<prosh_core::augment::AugEnv> {
        augment(&self.cmdp, &self.policy.q, self.rule).map_err(py_err)
    }
}

#[pymethods]
impl PyShieldedPolicy {
    /// Shielded atoms `(action, risk, prob)` at `(state, x)`.
    fn decide(&self, state: usize, x: f64) -> PyResult<Vec<AtomTuple>> {
        if state >= self.cmdp.n_states() {
            return Err(PyValueError::new_err(format!("state {state} out of range")));
        }
        let out = self.policy.decide(&AugState::new(state, x)).map_err(py_err)?;
        Ok(atoms_to(&out.atoms))
    }

    #[getter]
    fn x0(&self) -> f64 {
        self.x0
    }

    #[pyo3(signature = (delta_b=0.0, n=20_000, seed=0))]
    fn check_safety<'py>(&self, py: Python<'py>, delta_b: f64, n: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let rep = check_safety(&self.env()?, &self.policy, self.x0, delta_b, n, seed).map_err(py_err)?;
        report_dict(py, &rep)
    }

    #[pyo3(signature = (n=20_000, seed=0))]
    fn check_preservation<'py>(&self, py: Python<'py>, n: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let rep = check_preservation(&self.env()?, &self.policy, self.x0, n, seed).map_err(py_err)?;
        report_dict(py, &rep)
    }

    #[pyo3(signature = (delta_b=0.0, tol=0.02, n=20_000, seed=0))]
    fn check_optimality<'py>(
        &self,
        py: Python<'py>,
        delta_b: f64,
        tol: f64,
        n: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let rep = check_optimality(&self.env()?, &self.policy, self.x0, delta_b, tol, n, seed).map_err(py_err)?;
        report_dict(py, &rep)
    }
}

/// Shielded Q-learning from `(initial_state, x0)`; `x0` defaults to
/// `gamma_c d`.
#[pyfunction]
#[pyo3(signature = (cmdp, q, x0=None, episodes=20_000, seed=0, rule="q_relative"))]
fn train(
    py: Python<'_>,
    cmdp: &PyCmdp,
    q: &PyQTable,
    x0: Option<f64>,
    episodes: usize,
    seed: u64,
    rule: &str,
) -> PyResult<PyShieldedPolicy> {
    let rule = parse_rule(rule)?;
    let env = augment(&cmdp.inner, &q.inner, rule).map_err(py_err)?;
    let x0 = x0.unwrap_or(cmdp.inner.gamma_c * cmdp.inner.budget_d);
    let cfg = TrainConfig { episodes, ..TrainConfig::default() };
    let out = py
        .detach(|| shielded_q_train(&env, x0, &cfg, &mut rng_from_seed(derive_seed(seed, 0))))
        .map_err(py_err)?;
    Ok(PyShieldedPolicy {
        cmdp: cmdp.inner.clone(),
        rule,
        x0,
        policy: out.policy,
        shield_violations: out.shield_violations,
    })
}

/// Runs `solve`, `train`, `verify` or `sweep` from TOML config text and
/// writes artifacts under `out`. Returns `(pass, summary)`.
#[pyfunction]
#[pyo3(signature = (command, config="", out=None))]
fn run(py: Python<'_>, command: &str, config: &str, out: Option<PathBuf>) -> PyResult<(bool, String)> {
    let cmd = match command {
        "solve" => Command::Solve,
        "train" => Command::Train,
        "verify" => Command::Verify,
        "sweep" => Command::Sweep,
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    };
    let mut cfg = RunConfig::parse(config).map_err(py_err)?;
    if let Some(out) = out {
        cfg.run.out = out;
    }
    let outcome = py.detach(|| runner::run(cmd, &cfg)).map_err(py_err)?;
    Ok((outcome.pass, outcome.summary))
}

#[pymodule]
fn prosh(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCmdp>()?;
    m.add_class::<PyQTable>()?;
    m.add_class::<PyShieldedPolicy>()?;
    m.add_function(wrap_pyfunction!(value_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(perturbed, m)?)?;
    m.add_function(wrap_pyfunction!(shield, m)?)?;
    m.add_function(wrap_pyfunction!(is_shielded, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("SHIELD_TOL", SHIELD_TOL)?;
    Ok(())
}
