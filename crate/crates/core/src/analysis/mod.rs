//! Exhaustive enumeration of attacked-policy sets in discrete mode, the
//! inclusion chain between them, and bound reports for single attack runs.
//!
//! `π_h(·|s)` depends only on `h(s)`, so every set handled here is a union of
//! product families: a family lists, per state, the distinct rows the
//! attacker may induce there, and its members are all per-state combinations.
//! That keeps the strategically-timed set (`2^|S|` indicator functions per
//! algorithm) at `2·|S|` rows per algorithm.

mod bounds;

use serde::{Deserialize, Serialize};

pub use bounds::{
    compute_bound_report, compute_bound_report_for, corrected_thm4_threshold, performance_difference,
    printed_thm4_threshold, BoundReport, PerformanceDifference, BETA1_CLAMP,
};

use crate::attacks::{AttackSpace, Attacker, StrategicTimer};
use crate::envs::{ObservationEmbedding, PerturbationBudget};
use crate::error::{Error, Result};
use crate::mdp::{evaluate_policy, ActionProbs, MdpSpec};
use crate::policy::{kl_divergence, Policy};

/// Rows closer than this in every entry are the same row.
pub const CANON_TOL: f64 = 1e-9;
/// Largest number of per-state options (summed over families) enumerated.
pub const ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertifiedSpace {
    H1,
    H2,
    H3,
    /// The optimal attackers: worst return over every neighbor choice.
    HStar,
}

impl CertifiedSpace {
    pub fn name(self) -> &'static str {
        match self {
            CertifiedSpace::H1 => "h1",
            CertifiedSpace::H2 => "h2",
            CertifiedSpace::H3 => "h3",
            CertifiedSpace::HStar => "h_star",
        }
    }
}

/// Targets available to a targeted (H3) adversary.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSet {
    /// Every policy; per state the only rows reachable are neighbor rows, so
    /// each neighbor row is used as a target.
    All,
    /// An explicit list of tabular target policies.
    Policies(Vec<ActionProbs>),
}

/// One product family: any choice of `options[s][k]` per state is a member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFamily {
    pub label: String,
    pub options: Vec<Vec<Vec<f64>>>,
    /// `neighbors[s][k]`: a state in `B(s)` whose observation induces `options[s][k]`.
    pub neighbors: Vec<Vec<usize>>,
}

impl PolicyFamily {
    fn new(label: String, num_states: usize) -> Self {
        PolicyFamily {
            label,
            options: vec![Vec::new(); num_states],
            neighbors: vec![Vec::new(); num_states],
        }
    }

    fn push(&mut self, s: usize, row: &[f64], neighbor: usize) {
        if !self.options[s].iter().any(|r| rows_equal(r, row)) {
            self.options[s].push(row.to_vec());
            self.neighbors[s].push(neighbor);
        }
    }

    /// Number of members (saturating).
    pub fn member_count(&self) -> u128 {
        self.options
            .iter()
            .fold(1u128, |acc, o| acc.saturating_mul(o.len() as u128))
    }

    pub fn contains(&self, policy: &[Vec<f64>]) -> bool {
        policy.len() == self.options.len()
            && policy
                .iter()
                .zip(&self.options)
                .all(|(row, opts)| opts.iter().any(|o| rows_equal(o, row)))
    }

    fn member(&self, choice: &[usize]) -> ActionProbs {
        choice.iter().enumerate().map(|(s, &k)| self.options[s][k].clone()).collect()
    }
}

/// Which attacker realizes the worst member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub family: String,
    /// State whose observation is shown in each true state.
    pub shown_state: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySetCertificate {
    pub space: CertifiedSpace,
    pub families: Vec<PolicyFamily>,
    pub worst_return: f64,
    pub witness_attacker: Witness,
    pub witness_policy: ActionProbs,
    /// Identifies the (victim, budget) pair the certificate was built from.
    pub provenance: String,
}

impl PolicySetCertificate {
    pub fn member_count(&self) -> u128 {
        self.families.iter().fold(0u128, |acc, f| acc.saturating_add(f.member_count()))
    }

    pub fn contains(&self, policy: &[Vec<f64>]) -> bool {
        self.families.iter().any(|f| f.contains(policy))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("certificate serializes")
    }
}

pub(crate) fn rows_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= CANON_TOL)
}

fn fingerprint(rows: &[Vec<f64>], budget: &PerturbationBudget) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for row in rows {
        row.iter().for_each(|v| eat(v.to_bits()));
    }
    for n in &budget.discrete_neighbors {
        eat(u64::MAX);
        n.iter().for_each(|&t| eat(t as u64));
    }
    h
}

/// Enumerate the attacked-policy set of `space`.
///
/// `pool` holds the untargeted attack algorithms behind H1 and H2; their
/// budgets and embeddings are replaced by the given ones and any timer is
/// ignored, since H2 ranges over every indicator function anyway. `targets`
/// only matters for H3.
pub fn enumerate_policy_set(
    mdp: &MdpSpec,
    embedding: &ObservationEmbedding,
    victim: &Policy,
    budget: &PerturbationBudget,
    space: CertifiedSpace,
    pool: &[Attacker],
    targets: &TargetSet,
) -> Result<PolicySetCertificate> {
    if !budget.is_discrete() {
        return Err(Error::Unsupported(
            "policy-set enumeration needs a discrete budget; continuous mode only has PGD lower bounds".into(),
        ));
    }
    let ns = mdp.num_states();
    if embedding.num_states() != ns || budget.discrete_neighbors.len() != ns {
        return Err(Error::Validation("MDP, embedding and budget disagree on the number of states".into()));
    }
    let rows = victim.induced_table(embedding)?;
    let neighbor_total: u128 = budget.discrete_neighbors.iter().map(|n| n.len() as u128).sum();
    let families_needed = match space {
        CertifiedSpace::H1 | CertifiedSpace::H2 => pool.len() as u128,
        CertifiedSpace::H3 => match targets {
            TargetSet::All => 1,
            TargetSet::Policies(p) => p.len() as u128,
        },
        CertifiedSpace::HStar => 1,
    };
    let count = families_needed.saturating_mul(neighbor_total);
    if count > ENUMERATION_CAP {
        return Err(Error::Size {
            count,
            cap: ENUMERATION_CAP,
        });
    }

    let mut families = Vec::new();
    match space {
        CertifiedSpace::H1 | CertifiedSpace::H2 => {
            if pool.is_empty() {
                return Err(Error::Validation("H1/H2 enumeration needs at least one attack algorithm".into()));
            }
            for (i, phi) in pool.iter().enumerate() {
                let attacker = pool_member(phi, budget, embedding)?;
                let mut fam = PolicyFamily::new(format!("{}#{i}", phi.space), ns);
                for s in 0..ns {
                    if space == CertifiedSpace::H2 {
                        fam.push(s, &rows[s], s);
                    }
                    let n = attacker.perturb_state(victim, s)?;
                    fam.push(s, &rows[n], n);
                }
                families.push(fam);
            }
        }
        CertifiedSpace::H3 => match targets {
            TargetSet::All => {
                let mut fam = PolicyFamily::new("targeted#all".into(), ns);
                for s in 0..ns {
                    for &m in budget.neighbors(s) {
                        let n = targeted_best_response(&rows, budget.neighbors(s), &rows[m]);
                        fam.push(s, &rows[n], n);
                    }
                }
                families.push(fam);
            }
            TargetSet::Policies(list) => {
                for (i, target) in list.iter().enumerate() {
                    if target.len() != ns {
                        return Err(Error::Validation(format!("target policy {i} has {} rows", target.len())));
                    }
                    let mut fam = PolicyFamily::new(format!("targeted#{i}"), ns);
                    for s in 0..ns {
                        let n = targeted_best_response(&rows, budget.neighbors(s), &target[s]);
                        fam.push(s, &rows[n], n);
                    }
                    families.push(fam);
                }
            }
        },
        CertifiedSpace::HStar => {
            let mut fam = PolicyFamily::new("optimal".into(), ns);
            for s in 0..ns {
                for &n in budget.neighbors(s) {
                    fam.push(s, &rows[n], n);
                }
            }
            families.push(fam);
        }
    }
    if families.is_empty() {
        return Err(Error::Validation("no target policies given".into()));
    }

    let mut worst: Option<(f64, usize, Vec<usize>)> = None;
    for (i, fam) in families.iter().enumerate() {
        let (ret, choice) = worst_member(mdp, fam)?;
        if worst.as_ref().is_none_or(|(w, _, _)| ret < *w) {
            worst = Some((ret, i, choice));
        }
    }
    let (worst_return, i, choice) = worst.expect("nonempty");
    let fam = &families[i];
    Ok(PolicySetCertificate {
        space,
        witness_attacker: Witness {
            family: fam.label.clone(),
            shown_state: choice.iter().enumerate().map(|(s, &k)| fam.neighbors[s][k]).collect(),
        },
        witness_policy: fam.member(&choice),
        worst_return,
        provenance: format!("{:016x}", fingerprint(&rows, budget)),
        families,
    })
}

fn pool_member(phi: &Attacker, budget: &PerturbationBudget, embedding: &ObservationEmbedding) -> Result<Attacker> {
    if matches!(phi.space, AttackSpace::H3CriticTargeted | AttackSpace::H3TwoStage) {
        return Err(Error::Config(format!(
            "`{}` is targeted and cannot generate untargeted policy sets",
            phi.space
        )));
    }
    let mut a = phi.clone();
    a.budget = budget.clone();
    a.embedding = Some(embedding.clone());
    if a.space == AttackSpace::H2StrategicUntargeted {
        a.timer = Some(StrategicTimer::always());
    }
    Ok(a)
}

/// Neighbor minimizing `KL(π(·|n) ‖ target)`; exact ties to the lowest index.
fn targeted_best_response(rows: &[Vec<f64>], neighbors: &[usize], target: &[f64]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for &n in neighbors {
        let d = kl_divergence(&rows[n], target);
        if d < best.0 || (d == best.0 && n < best.1) {
            best = (d, n);
        }
    }
    best.1
}

/// Minimum exact return over the members of one family, by policy iteration
/// for the minimizing player over per-state option choices.
fn worst_member(mdp: &MdpSpec, fam: &PolicyFamily) -> Result<(f64, Vec<usize>)> {
    let ns = mdp.num_states();
    let option_value = |s: usize, row: &[f64], v: &[f64]| -> f64 {
        row.iter()
            .enumerate()
            .map(|(a, p)| if *p == 0.0 { 0.0 } else { p * mdp.backup(v, s, a) })
            .sum()
    };
    let mut choice = vec![0usize; ns];
    for _ in 0..10 * ns.max(10) {
        let values = evaluate_policy(mdp, &fam.member(&choice))?.state_values;
        let mut changed = false;
        for s in 0..ns {
            let current = option_value(s, &fam.options[s][choice[s]], &values);
            let mut best = (current, choice[s]);
            for (k, row) in fam.options[s].iter().enumerate() {
                let q = option_value(s, row, &values);
                if q < best.0 - 1e-12 * (1.0 + q.abs()) {
                    best = (q, k);
                }
            }
            if best.1 != choice[s] {
                choice[s] = best.1;
                changed = true;
            }
        }
        if !changed {
            let ret = evaluate_policy(mdp, &fam.member(&choice))?.return_value;
            return Ok((ret, choice));
        }
    }
    Err(Error::Numeric("min-player policy iteration did not converge".into()))
}

/// Pointwise-minimal state values over the members of one family.
pub fn family_min_values(mdp: &MdpSpec, fam: &PolicyFamily) -> Result<Vec<f64>> {
    let (_, choice) = worst_member(mdp, fam)?;
    Ok(evaluate_policy(mdp, &fam.member(&choice))?.state_values)
}

/// A member of the smaller set missing from the larger one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionViolation {
    pub from: CertifiedSpace,
    pub to: CertifiedSpace,
    pub family: String,
    pub policy: ActionProbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub holds: bool,
    pub violations: Vec<InclusionViolation>,
}

/// Check `π_H1 ⊆ π_H2 ⊆ π_H3`, returning offending members on failure.
pub fn check_inclusion_chain(
    h1: &PolicySetCertificate,
    h2: &PolicySetCertificate,
    h3: &PolicySetCertificate,
) -> Result<InclusionReport> {
    if h1.provenance != h2.provenance || h2.provenance != h3.provenance {
        return Err(Error::Validation(
            "certificates were built from different victims or budgets".into(),
        ));
    }
    let mut violations = Vec::new();
    for (small, big) in [(h1, h2), (h2, h3)] {
        for fam in &small.families {
            if let Some(policy) = family_violation(fam, big)? {
                violations.push(InclusionViolation {
                    from: small.space,
                    to: big.space,
                    family: fam.label.clone(),
                    policy,
                });
            }
        }
    }
    Ok(InclusionReport {
        holds: violations.is_empty(),
        violations,
    })
}

/// A member of `fam` outside `set`, if any.
fn family_violation(fam: &PolicyFamily, set: &PolicySetCertificate) -> Result<Option<ActionProbs>> {
    let ns = fam.options.len();
    // A product family lies inside another product iff it does state by state.
    if set.families.len() == 1 {
        let big = &set.families[0];
        for s in 0..ns {
            if let Some(k) = fam.options[s]
                .iter()
                .position(|row| !big.options[s].iter().any(|o| rows_equal(o, row)))
            {
                let mut choice = vec![0; ns];
                choice[s] = k;
                return Ok(Some(fam.member(&choice)));
            }
        }
        return Ok(None);
    }
    let count = fam.member_count();
    if count > ENUMERATION_CAP {
        return Err(Error::Size {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    // odometer over all members
    let mut choice = vec![0usize; ns];
    loop {
        let member = fam.member(&choice);
        if !set.contains(&member) {
            return Ok(Some(member));
        }
        let mut s = 0;
        loop {
            if s == ns {
                return Ok(None);
            }
            choice[s] += 1;
            if choice[s] < fam.options[s].len() {
                break;
            }
            choice[s] = 0;
            s += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::MadVariant;
    use crate::envs::{discrete_budget_from_radius, Norm};

    fn toy() -> (MdpSpec, ObservationEmbedding, Policy) {
        // 0 -a0-> 1 (+1, terminal), 0 -a1-> 2 (-1, terminal)
        let t = vec![
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]],
        ];
        let r = vec![vec![1.0, -1.0], vec![0.0, 0.0], vec![0.0, 0.0]];
        let mdp = MdpSpec::new(t, r, 0.9, vec![1.0, 0.0, 0.0], vec![false, true, true]).unwrap();
        let emb = ObservationEmbedding::one_hot(3);
        let victim = Policy::tabular(vec![vec![9.0, 0.0], vec![0.0, 0.0], vec![0.0, 9.0]], emb.clone(), 1.0).unwrap();
        (mdp, emb, victim)
    }

    fn mad(emb: &ObservationEmbedding, budget: &PerturbationBudget) -> Attacker {
        Attacker::new(AttackSpace::H1FullUntargeted, budget.clone())
            .with_embedding(emb.clone())
            .with_mad_variant(MadVariant::Deterministic)
    }

    #[test]
    fn zero_budget_sets_are_the_victim() {
        let (mdp, emb, victim) = toy();
        let b = discrete_budget_from_radius(&emb, 0.0, Norm::L2).unwrap();
        let table = victim.induced_table(&emb).unwrap();
        for space in [CertifiedSpace::H1, CertifiedSpace::H2, CertifiedSpace::H3, CertifiedSpace::HStar] {
            let c = enumerate_policy_set(&mdp, &emb, &victim, &b, space, &[mad(&emb, &b)], &TargetSet::All).unwrap();
            assert_eq!(c.member_count(), 1);
            assert!(c.contains(&table));
        }
    }

    #[test]
    fn optimal_attacker_finds_the_bad_terminal() {
        let (mdp, emb, victim) = toy();
        let b = discrete_budget_from_radius(&emb, 2.0, Norm::L2).unwrap();
        let c = enumerate_policy_set(&mdp, &emb, &victim, &b, CertifiedSpace::HStar, &[], &TargetSet::All).unwrap();
        assert_eq!(c.witness_attacker.shown_state[0], 2);
        let p = c.witness_policy[0][1];
        assert!((c.worst_return - (p * -1.0 + (1.0 - p) * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn continuous_budget_is_unsupported() {
        let (mdp, emb, victim) = toy();
        let b = PerturbationBudget::continuous(0.5, Norm::L2).unwrap();
        let err = enumerate_policy_set(&mdp, &emb, &victim, &b, CertifiedSpace::HStar, &[], &TargetSet::All);
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }

    #[test]
    fn restricted_targets_can_break_inclusion() {
        let (mdp, emb, victim) = toy();
        let b = discrete_budget_from_radius(&emb, 2.0, Norm::L2).unwrap();
        let pool = [mad(&emb, &b)];
        let h1 = enumerate_policy_set(&mdp, &emb, &victim, &b, CertifiedSpace::H1, &pool, &TargetSet::All).unwrap();
        let h2 = enumerate_policy_set(&mdp, &emb, &victim, &b, CertifiedSpace::H2, &pool, &TargetSet::All).unwrap();
        let full = enumerate_policy_set(&mdp, &emb, &victim, &b, CertifiedSpace::H3, &pool, &TargetSet::All).unwrap();
        assert!(check_inclusion_chain(&h1, &h2, &full).unwrap().holds);
        let only_victim = TargetSet::Policies(vec![victim.induced_table(&emb).unwrap()]);
        let narrow = enumerate_policy_set(&mdp, &emb, &victim, &b, CertifiedSpace::H3, &pool, &only_victim).unwrap();
        let report = check_inclusion_chain(&h1, &h2, &narrow).unwrap();
        assert!(!report.holds);
        assert!(report.violations.iter().all(|v| v.to == CertifiedSpace::H3));
    }
}
