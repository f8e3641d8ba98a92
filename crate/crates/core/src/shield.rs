//! The distribution-level shield.
//!
//! A proposal is a finite mixture of `(action, allocated risk)` atoms. The
//! shield raises each allocated risk to at least `Q_b(s, a)` and then, if the
//! expected discounted allocation `t` exceeds the current budget `x`, blends
//! in the backup atom `(pi_b(s), Q_b(s, pi_b(s)))` with weight
//!
//! ```text
//! lambda = (t - x) / (t - gamma_c * Q_b(s, pi_b(s)) + eta)
//! ```
//!
//! so that `(1 - lambda) t + lambda gamma_c Q_b(s, pi_b(s)) = x` up to `eta`.
//! Below the floor `gamma_c min_a Q_b(s, a)` no mixture fits, and the whole
//! budget goes to the backup action.

use serde::Serialize;

use crate::augment::{AugPolicy, AugState};
use crate::critic::QTable;
use crate::error::{Error, Result};

/// Denominator regulariser of the blending weight.
pub const ETA: f64 = 1e-8;

/// Default tolerance of [`is_shielded`] for shield outputs.
pub const SHIELD_TOL: f64 = 2.0 * ETA;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Atom {
    #[serde(rename = "a")]
    pub action: usize,
    #[serde(rename = "y")]
    pub risk: f64,
    #[serde(rename = "p")]
    pub prob: f64,
}

impl Atom {
    pub fn new(action: usize, risk: f64, prob: f64) -> Self {
        Self { action, risk, prob }
    }

    fn same_point(&self, other: &Atom) -> bool {
        self.action == other.action && self.risk.to_bits() == other.risk.to_bits()
    }
}

/// A valued proposal: probabilities are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProposedDistribution {
    pub atoms: Vec<Atom>,
}

impl ProposedDistribution {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyProposal);
        }
        let sum: f64 = atoms.iter().map(|a| a.prob).sum();
        if atoms.iter().any(|a| !(a.prob >= 0.0) || !a.risk.is_finite()) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("proposal probabilities sum to {sum}")));
        }
        Ok(Self { atoms })
    }

    pub fn dirac(action: usize, risk: f64) -> Self {
        Self { atoms: vec![Atom::new(action, risk, 1.0)] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShieldCase {
    PassThrough,
    Fallback,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShieldedDistribution {
    pub atoms: Vec<Atom>,
    pub lambda: f64,
    pub case: ShieldCase,
    /// Probability mass contributed by the backup atom.
    pub backup_mass: f64,
}

/// Applies the shield map to `proposal` at `st`.
pub fn shield(proposal: &ProposedDistribution, st: &AugState, q: &QTable) -> Result<ShieldedDistribution> {
    let s = st.base_state;
    let x = st.risk;
    let g = q.gamma_c;
    if proposal.atoms.is_empty() {
        return Err(Error::EmptyProposal);
    }
    let row = &q.values[s];
    let mut clamped = Vec::with_capacity(proposal.atoms.len() + 1);
    let mut t = 0.0;
    for at in &proposal.atoms {
        let qa = *row.get(at.action).ok_or(Error::InvalidAction { state: s, action: at.action })?;
        let y = at.risk.max(qa);
        t += at.prob * y;
        clamped.push(Atom::new(at.action, y, at.prob));
    }
    t *= g;

    let b = q.backup_action(s);
    let qb = row[b];
    let floor = g * qb;
    // Tested before `t <= x`: below the floor no proposal fits, and rounding
    // in `t` must not let one through.
    if x < floor {
        return Ok(ShieldedDistribution {
            atoms: vec![Atom::new(b, x / g, 1.0)],
            lambda: 1.0,
            case: ShieldCase::Fallback,
            backup_mass: 1.0,
        });
    }
    if t <= x {
        return Ok(ShieldedDistribution { atoms: clamped, lambda: 0.0, case: ShieldCase::PassThrough, backup_mass: 0.0 });
    }
    // x == floor forces the full backup mass; the eta term would otherwise
    // leave a residue of order eta on the proposal.
    let lambda = if x <= floor { 1.0 } else { ((t - x) / (t - floor + ETA)).clamp(0.0, 1.0) };
    let mut atoms: Vec<Atom> = clamped
        .into_iter()
        .map(|at| Atom::new(at.action, at.risk, (1.0 - lambda) * at.prob))
        .filter(|at| at.prob > 0.0)
        .collect();
    let backup = Atom::new(b, qb, lambda);
    if lambda > 0.0 {
        match atoms.iter_mut().find(|at| at.same_point(&backup)) {
            Some(at) => at.prob += lambda,
            None => atoms.push(backup),
        }
    }
    Ok(ShieldedDistribution { atoms, lambda, case: ShieldCase::Mixed, backup_mass: lambda })
}

/// Whether `atoms` satisfies the `Q_b`-shielded conditions at `st`.
///
/// Above the floor every atom must allocate at least `Q_b(s, a) - tol` and the
/// discounted expected allocation may exceed `x` by at most `tol`. Below the
/// floor the distribution must be a single backup atom `(pi_b(s), z)` with
/// `gamma_c z <= x + tol`.
pub fn is_shielded(atoms: &[Atom], st: &AugState, q: &QTable, tol: f64) -> bool {
    if atoms.is_empty() || atoms.iter().any(|a| !(a.prob >= 0.0)) {
        return false;
    }
    let total: f64 = atoms.iter().map(|a| a.prob).sum();
    if (total - 1.0).abs() > 1e-9 {
        return false;
    }
    let s = st.base_state;
    let x = st.risk;
    let g = q.gamma_c;
    let row = &q.values[s];
    if atoms.iter().any(|a| a.action >= row.len()) {
        return false;
    }
    if x >= q.floor(s) {
        let under = atoms.iter().any(|a| a.prob > 0.0 && a.risk < row[a.action] - tol);
        let spend: f64 = g * atoms.iter().map(|a| a.prob * a.risk).sum::<f64>();
        !under && x + tol >= spend
    } else {
        let live: Vec<&Atom> = atoms.iter().filter(|a| a.prob > 0.0).collect();
        live.len() == 1 && live[0].action == q.backup_action(s) && g * live[0].risk <= x + tol
    }
}

/// `(1 - xi) dist + xi noise`, merging atoms of `noise` into identical atoms
/// of `dist`; zero-probability atoms are dropped.
pub fn mix_with_noise(dist: &[Atom], noise: &[Atom], xi: f64) -> Result<Vec<Atom>> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::MixtureWeight(xi));
    }
    let mut out: Vec<Atom> = dist.iter().map(|a| Atom::new(a.action, a.risk, (1.0 - xi) * a.prob)).collect();
    for n in noise {
        let w = xi * n.prob;
        match out.iter_mut().find(|a| a.same_point(n)) {
            Some(a) => a.prob += w,
            None => out.push(Atom::new(n.action, n.risk, w)),
        }
    }
    out.retain(|a| a.prob > 0.0);
    Ok(out)
}

/// Produces valued proposals; the actor side of a shielded policy.
pub trait Proposer {
    fn propose(&self, st: &AugState) -> Result<ProposedDistribution>;
}

/// A proposer followed by the shield layer.
#[derive(Debug, Clone)]
pub struct ShieldedPolicy<P> {
    pub proposer: P,
    pub q: QTable,
}

impl<P: Proposer> ShieldedPolicy<P> {
    pub fn new(proposer: P, q: QTable) -> Self {
        Self { proposer, q }
    }

    pub fn decide(&self, st: &AugState) -> Result<ShieldedDistribution> {
        shield(&self.proposer.propose(st)?, st, &self.q)
    }
}

impl<P: Proposer> AugPolicy for ShieldedPolicy<P> {
    fn distribution(&self, st: &AugState) -> Result<Vec<Atom>> {
        Ok(self.decide(st)?.atoms)
    }
}

/// Always proposes the same action with the same allocated risk (`None`
/// allocates the current budget).
#[derive(Debug, Clone, Copy)]
pub struct FixedProposer {
    pub action: usize,
    pub risk: Option<f64>,
}

impl Proposer for FixedProposer {
    fn propose(&self, st: &AugState) -> Result<ProposedDistribution> {
        Ok(ProposedDistribution::dirac(self.action, self.risk.unwrap_or(st.risk)))
    }
}

/// One audited shield decision, exportable as a JSON line.
#[derive(Debug, Clone, Serialize)]
pub struct ShieldRecord {
    pub state: usize,
    pub x: f64,
    pub case: ShieldCase,
    pub lambda: f64,
    pub atoms: Vec<Atom>,
}

impl ShieldRecord {
    pub fn new(st: &AugState, d: &ShieldedDistribution) -> Self {
        Self { state: st.base_state, x: st.risk, case: d.case, lambda: d.lambda, atoms: d.atoms.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{cost_value_iteration, Provenance};
    use crate::envs;
    use proptest::prelude::*;

    fn m1_q() -> QTable {
        cost_value_iteration(&envs::m1(), 1e-12).unwrap()
    }

    fn flip() -> ProposedDistribution {
        ProposedDistribution::new(vec![Atom::new(0, 1.0, 0.5), Atom::new(1, 0.0, 0.5)]).unwrap()
    }

    #[test]
    fn pass_through_at_full_budget() {
        let q = m1_q();
        let out = shield(&flip(), &AugState::new(0, 0.5), &q).unwrap();
        assert_eq!(out.case, ShieldCase::PassThrough);
        assert_eq!(out.lambda, 0.0);
        assert_eq!(out.atoms, flip().atoms);
    }

    #[test]
    fn mixed_halves_the_proposal() {
        let q = m1_q();
        let st = AugState::new(0, 0.25);
        let out = shield(&flip(), &st, &q).unwrap();
        assert_eq!(out.case, ShieldCase::Mixed);
        assert!((out.lambda - 0.5).abs() < 1e-7);
        assert_eq!(out.atoms.len(), 2);
        let a0 = out.atoms.iter().find(|a| a.action == 0).unwrap();
        let a1 = out.atoms.iter().find(|a| a.action == 1).unwrap();
        assert!((a0.prob - 0.25).abs() < 1e-7 && a0.risk == 1.0);
        assert!((a1.prob - 0.75).abs() < 1e-7 && a1.risk == 0.0);
        let spend: f64 = out.atoms.iter().map(|a| a.prob * a.risk).sum();
        assert!((spend - 0.25).abs() < 1e-7);
        assert!(is_shielded(&out.atoms, &st, &q, SHIELD_TOL));
    }

    #[test]
    fn zero_budget_is_pure_backup() {
        let q = m1_q();
        let out = shield(&flip(), &AugState::new(0, 0.0), &q).unwrap();
        assert_eq!(out.lambda, 1.0);
        assert_eq!(out.atoms, vec![Atom::new(1, 0.0, 1.0)]);
    }

    #[test]
    fn below_floor_falls_back() {
        let q = QTable { values: vec![vec![2.0, 3.0]], gamma_c: 0.5, provenance: Provenance::Learned };
        let out = shield(&ProposedDistribution::dirac(1, 3.0), &AugState::new(0, 0.4), &q).unwrap();
        assert_eq!(out.case, ShieldCase::Fallback);
        assert_eq!(out.atoms, vec![Atom::new(0, 0.8, 1.0)]);
    }

    #[test]
    fn empty_proposal_is_an_error() {
        let q = m1_q();
        let empty = ProposedDistribution { atoms: vec![] };
        assert!(matches!(shield(&empty, &AugState::new(0, 1.0), &q), Err(Error::EmptyProposal)));
        assert!(ProposedDistribution::new(vec![]).is_err());
    }

    #[test]
    fn under_allocation_is_not_shielded() {
        let q = m1_q();
        assert!(!is_shielded(&[Atom::new(0, 0.5, 1.0)], &AugState::new(0, 1.0), &q, SHIELD_TOL));
        assert!(is_shielded(&[Atom::new(1, 0.0, 1.0)], &AugState::new(0, 0.0), &q, SHIELD_TOL));
    }

    #[test]
    fn noise_mixing() {
        let d = [Atom::new(0, 1.0, 1.0)];
        let n = [Atom::new(1, 0.0, 1.0)];
        assert_eq!(mix_with_noise(&d, &n, 0.0).unwrap(), d.to_vec());
        assert_eq!(mix_with_noise(&d, &n, 1.0).unwrap(), n.to_vec());
        assert_eq!(
            mix_with_noise(&d, &n, 0.5).unwrap(),
            vec![Atom::new(0, 1.0, 0.5), Atom::new(1, 0.0, 0.5)]
        );
        assert_eq!(mix_with_noise(&d, &d, 0.3).unwrap(), d.to_vec());
        assert!(matches!(mix_with_noise(&d, &n, 1.5), Err(Error::MixtureWeight(_))));
    }

    fn arb_case() -> impl Strategy<Value = (QTable, ProposedDistribution, AugState)> {
        (1usize..5, 0.5f64..=1.0).prop_flat_map(|(k, g)| {
            (
                proptest::collection::vec(0.0f64..5.0, k),
                proptest::collection::vec((0..k, -6.0f64..6.0, 0.01f64..1.0), 1..4),
                -6.0f64..6.0,
            )
                .prop_map(move |(row, raw, x)| {
                    let total: f64 = raw.iter().map(|r| r.2).sum();
                    let atoms = raw.iter().map(|&(a, y, w)| Atom::new(a, y, w / total)).collect();
                    let q = QTable { values: vec![row], gamma_c: g, provenance: Provenance::Learned };
                    (q, ProposedDistribution { atoms }, AugState::new(0, x))
                })
        })
    }

    proptest! {
        #[test]
        fn shield_output_is_shielded((q, p, st) in arb_case()) {
            let out = shield(&p, &st, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&out.lambda));
            prop_assert!(is_shielded(&out.atoms, &st, &q, SHIELD_TOL));
        }

        #[test]
        fn pass_through_is_idempotent((q, p, st) in arb_case()) {
            let out = shield(&p, &st, &q).unwrap();
            if out.case == ShieldCase::PassThrough {
                let again = shield(&ProposedDistribution { atoms: out.atoms.clone() }, &st, &q).unwrap();
                prop_assert_eq!(again.case, ShieldCase::PassThrough);
                prop_assert_eq!(again.atoms, out.atoms);
            }
        }

        #[test]
        fn lambda_non_increasing_in_budget((q, p, st) in arb_case(), bump in 0.0f64..3.0) {
            let lo = shield(&p, &st, &q).unwrap();
            let hi = shield(&p, &AugState::new(0, st.risk + bump), &q).unwrap();
            prop_assert!(hi.lambda <= lo.lambda + 1e-12);
        }
    }

    #[test]
    fn backup_mass_is_continuous_in_budget() {
        // Sweep x across [floor, t]: the backup mass must vary by at most the
        // slope 1/(t - floor) times the mesh step.
        let q = QTable { values: vec![vec![1.0, 2.0, 4.0]], gamma_c: 0.9, provenance: Provenance::Learned };
        let p = ProposedDistribution::new(vec![Atom::new(1, 2.5, 0.5), Atom::new(2, 4.0, 0.5)]).unwrap();
        let t = 0.9 * (0.5 * 2.5 + 0.5 * 4.0);
        let floor = 0.9;
        let mesh = 1e-3;
        let mut prev: Option<f64> = None;
        let mut x = floor;
        while x <= t + 0.5 {
            let m = shield(&p, &AugState::new(0, x), &q).unwrap().backup_mass;
            if let Some(pm) = prev {
                assert!((m - pm).abs() <= mesh / (t - floor) + 1e-7, "jump at x = {x}");
            }
            prev = Some(m);
            x += mesh;
        }
        assert_eq!(prev, Some(0.0));
    }
}
