//! Exhaustive checks of the policy-set claims and bound checks over sweeps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{exact_victim_with, SweepResult};
use crate::analysis::{
    check_inclusion_chain, corrected_thm4_threshold, enumerate_policy_set, family_min_values,
    printed_thm4_threshold, CertifiedSpace, PolicySetCertificate, TargetSet,
};
use crate::attacks::{AttackSpace, Attacker, MadVariant};
use crate::envs::{
    build_fig3_gridworld, build_fig4_variant, build_random_gridworld, discrete_budget_from_radius, Action,
    Fig4Case, GridWorld, Norm, PerturbationBudget,
};
use crate::error::{Error, Result};
use crate::mdp::{argmax_lowest, solve_optimal};
use crate::policy::Policy;

const EXACT_TOL: f64 = 1e-9;
/// Sharpness of the tabular victim used for enumeration.
pub const VICTIM_SHARPNESS: f64 = 30.0;
pub const RANDOM_SEEDS: u64 = 20;
pub const RANDOM_SIZE: usize = 5;
pub const RANDOM_DENSITY: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledCertificate {
    pub label: String,
    pub certificate: PolicySetCertificate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropsReport {
    pub env: String,
    pub checks: Vec<Check>,
    pub certificates: Vec<LabeledCertificate>,
    /// Wall-clock time; kept out of the serialized report so it stays reproducible.
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

impl PropsReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    fn certify(&mut self, label: String, cert: PolicySetCertificate) -> &PolicySetCertificate {
        self.certificates.push(LabeledCertificate { label, certificate: cert });
        &self.certificates.last().expect("just pushed").certificate
    }
}

/// The optimal greedy policy as a sharpened tabular softmax.
pub fn exact_victim(world: &GridWorld) -> Result<Policy> {
    exact_victim_with(world, VICTIM_SHARPNESS)
}

/// l∞ budget reaching the eight surrounding cells of a coordinate embedding.
pub fn enumeration_budget(world: &GridWorld) -> Result<PerturbationBudget> {
    let spacing = 1.0 / world.layout.width.max(world.layout.height) as f64;
    // cell centers are not exactly representable; the slack keeps neighbors one cell apart
    discrete_budget_from_radius(&world.embedding, spacing * (1.0 + 1e-9), Norm::LInf)
}

fn mad_pool(budget: &PerturbationBudget, world: &GridWorld, variants: &[MadVariant]) -> Vec<Attacker> {
    variants
        .iter()
        .map(|v| {
            Attacker::new(AttackSpace::H1FullUntargeted, budget.clone())
                .with_mad_variant(*v)
                .with_embedding(world.embedding.clone())
        })
        .collect()
}

const ALL_MAD: [MadVariant; 3] = [
    MadVariant::StochasticForward,
    MadVariant::StochasticReverse,
    MadVariant::Deterministic,
];

fn green(world: &GridWorld) -> Result<usize> {
    world
        .green_state()
        .ok_or_else(|| Error::Validation("world has no green decision cell".into()))
}

/// Full-timed untargeted attacks cannot reach the optimal attack's return on
/// the counterexample world.
pub fn verify_fig3() -> Result<PropsReport> {
    let started = Instant::now();
    let world = build_fig3_gridworld()?;
    let victim = exact_victim(&world)?;
    let budget = enumeration_budget(&world)?;
    let sg = green(&world)?;
    let a_star = solve_optimal(&world.mdp)?.greedy[sg];
    let pool = mad_pool(&budget, &world, &ALL_MAD);
    let mut report = PropsReport {
        env: "fig3".into(),
        checks: Vec::new(),
        certificates: Vec::new(),
        elapsed_seconds: 0.0,
    };
    let enumerate = |space| enumerate_policy_set(&world.mdp, &world.embedding, &victim, &budget, space, &pool, &TargetSet::All);
    let h1 = report.certify("fig3/h1".into(), enumerate(CertifiedSpace::H1)?).clone();
    let hs = report.certify("fig3/h_star".into(), enumerate(CertifiedSpace::HStar)?).clone();

    report.checks.push(Check::new(
        "fig3/h1_worst_above_h_star",
        h1.worst_return > hs.worst_return + EXACT_TOL,
        format!("min R over H1 = {:.12}, H* worst = {:.12}", h1.worst_return, hs.worst_return),
    ));
    let max_h1 = h1
        .families
        .iter()
        .flat_map(|f| f.options[sg].iter().map(|row| row[a_star]))
        .fold(0.0, f64::max);
    report.checks.push(Check::new(
        "fig3/h1_never_plays_optimal_action_at_green",
        max_h1 < 1.0 - EXACT_TOL,
        format!("max over H1 of pi(a*|s_g) = {max_h1:.3e}"),
    ));
    let witness = hs.witness_policy[sg][a_star];
    report.checks.push(Check::new(
        "fig3/h_star_witness_plays_optimal_action_at_green",
        (witness - 1.0).abs() <= EXACT_TOL,
        format!("pi_h*(a*|s_g) = {witness:.15}"),
    ));
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Strategically-timed untargeted attacks keep a nonnegative value at the
/// green cell while the optimal attack reaches the -1 cell, in each case.
pub fn verify_fig4() -> Result<PropsReport> {
    let started = Instant::now();
    let mut report = PropsReport {
        env: "fig4".into(),
        checks: Vec::new(),
        certificates: Vec::new(),
        elapsed_seconds: 0.0,
    };
    for case in Fig4Case::ALL {
        let tag = format!("fig4_{}", case_name(case));
        let world = build_fig4_variant(case)?;
        let victim = exact_victim(&world)?;
        let budget = enumeration_budget(&world)?;
        let sg = green(&world)?;
        let pool = mad_pool(&budget, &world, &[MadVariant::StochasticForward]);
        let enumerate = |space| enumerate_policy_set(&world.mdp, &world.embedding, &victim, &budget, space, &pool, &TargetSet::All);
        let h2 = report.certify(format!("{tag}/h2"), enumerate(CertifiedSpace::H2)?).clone();
        let hs = report.certify(format!("{tag}/h_star"), enumerate(CertifiedSpace::HStar)?).clone();

        let mut options: Vec<usize> = h2
            .families
            .iter()
            .flat_map(|f| f.options[sg].iter().map(|row| argmax_lowest(row, 0.0)))
            .collect();
        options.sort_unstable();
        options.dedup();
        let mut expected: Vec<usize> = case.option_set().iter().map(|a| a.index()).collect();
        expected.sort_unstable();
        report.checks.push(Check::new(
            format!("{tag}/h2_option_set_at_green"),
            options == expected,
            format!("{:?} (expected {:?})", names(&options), names(&expected)),
        ));

        let mut v_min = f64::INFINITY;
        for fam in &h2.families {
            v_min = v_min.min(family_min_values(&world.mdp, fam)?[sg]);
        }
        report.checks.push(Check::new(
            format!("{tag}/h2_value_at_green_nonnegative"),
            v_min >= -EXACT_TOL,
            format!("min over H2 of V(s_g) = {v_min:.12}"),
        ));

        let v_star = crate::mdp::evaluate_policy(&world.mdp, &hs.witness_policy)?.state_values[sg];
        let gamma = world.mdp.gamma();
        let hit = (0..=world.mdp.num_states()).find(|&k| (v_star + gamma.powi(k as i32)).abs() <= 1e-6);
        report.checks.push(Check::new(
            format!("{tag}/h_star_reaches_negative_terminal"),
            hit.is_some(),
            match hit {
                Some(k) => format!("V_h*(s_g) = {v_star:.12} = -gamma^{k}"),
                None => format!("V_h*(s_g) = {v_star:.12} is not a discounted -1"),
            },
        ));
    }
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn case_name(case: Fig4Case) -> &'static str {
    match case {
        Fig4Case::RightDown => "right_down",
        Fig4Case::UpDown => "up_down",
        Fig4Case::LeftDown => "left_down",
    }
}

fn names(actions: &[usize]) -> Vec<&'static str> {
    actions
        .iter()
        .map(|a| Action::from_index(*a).map_or("?", Action::name))
        .collect()
}

/// `H1 ⊆ H2 ⊆ H3` and the matching order of worst returns on random grids,
/// with H3 ranging over every target policy.
pub fn verify_random_inclusion(seeds: std::ops::Range<u64>) -> Result<PropsReport> {
    let started = Instant::now();
    let mut report = PropsReport {
        env: "random".into(),
        checks: Vec::new(),
        certificates: Vec::new(),
        elapsed_seconds: 0.0,
    };
    let mut violations = 0;
    let mut order_failures = Vec::new();
    for seed in seeds.clone() {
        let world = build_random_gridworld(RANDOM_SIZE, RANDOM_SIZE, RANDOM_DENSITY, seed)?;
        let victim = exact_victim(&world)?;
        let budget = enumeration_budget(&world)?;
        let mut pool = mad_pool(&budget, &world, &ALL_MAD);
        pool.push(
            Attacker::new(AttackSpace::Random, budget.clone())
                .with_embedding(world.embedding.clone())
                .with_seed(seed),
        );
        let enumerate = |space| enumerate_policy_set(&world.mdp, &world.embedding, &victim, &budget, space, &pool, &TargetSet::All);
        let certs: Vec<PolicySetCertificate> = [
            CertifiedSpace::H1,
            CertifiedSpace::H2,
            CertifiedSpace::H3,
            CertifiedSpace::HStar,
        ]
        .into_iter()
        .map(enumerate)
        .collect::<Result<_>>()?;
        let chain = check_inclusion_chain(&certs[0], &certs[1], &certs[2])?;
        violations += chain.violations.len();
        let w: Vec<f64> = certs.iter().map(|c| c.worst_return).collect();
        if !w.windows(2).all(|p| p[0] >= p[1] - EXACT_TOL) {
            order_failures.push(seed);
        }
        for c in certs {
            report.certify(format!("random_{seed}/{}", c.space.name()), c);
        }
    }
    let n = seeds.end - seeds.start;
    report.checks.push(Check::new(
        "random/inclusion_chain",
        violations == 0,
        format!("{violations} violations over {n} worlds"),
    ));
    report.checks.push(Check::new(
        "random/worst_return_order",
        order_failures.is_empty(),
        format!("worlds out of order: {order_failures:?}"),
    ));
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// `fig3`, `fig4` or `random`.
pub fn verify_props(env: &str) -> Result<PropsReport> {
    match env {
        "fig3" => verify_fig3(),
        "fig4" => verify_fig4(),
        "random" => verify_random_inclusion(0..RANDOM_SEEDS),
        other => Err(Error::Config(format!("unknown property set `{other}` (expected fig3, fig4, random)"))),
    }
}

/// Bound checks over every row of a sweep that carries a bound report.
///
/// The threshold test is pairwise: each row `h` against each row `e` as the
/// baseline. Whenever `β₁(h)` is below the threshold, `R(π_h) < R(π_e)` must
/// hold. Both the printed and the corrected threshold are tested.
pub fn check_sweep_bounds(result: &SweepResult) -> Vec<Check> {
    let gamma = result.mdp.gamma();
    let reported: Vec<_> = result
        .rows
        .iter()
        .filter_map(|r| r.report.as_ref().map(|b| (r, b)))
        .collect();
    let finite: Vec<_> = reported.iter().filter(|(_, b)| b.beta1.is_finite()).collect();
    let lemma1_bad: Vec<String> = finite
        .iter()
        .filter(|(_, b)| !b.lemma1_holds)
        .map(|(r, _)| format!("{}@{}#{}", r.attack, r.epsilon, r.seed))
        .collect();
    let lemma2_bad: Vec<String> = reported
        .iter()
        .filter(|(_, b)| !b.lemma2_holds)
        .map(|(r, _)| format!("{}@{}#{}", r.attack, r.epsilon, r.seed))
        .collect();
    let mut checks = vec![
        Check::new(
            "lemma1",
            lemma1_bad.is_empty(),
            format!("{} of {} runs with finite beta1 violate: {lemma1_bad:?}", lemma1_bad.len(), finite.len()),
        ),
        Check::new(
            "lemma2",
            lemma2_bad.is_empty(),
            format!("{} of {} runs violate: {lemma2_bad:?}", lemma2_bad.len(), reported.len()),
        ),
    ];
    for (name, threshold) in [
        ("thm4_printed", printed_thm4_threshold as fn(f64, f64, f64) -> f64),
        ("thm4_corrected", corrected_thm4_threshold),
    ] {
        let (mut fired, mut bad) = (0usize, Vec::new());
        for (h, bh) in &reported {
            if !bh.beta1.is_finite() {
                continue;
            }
            for (e, _) in &reported {
                let alpha_e = e.ret - bh.deceptive_return;
                if bh.beta1 < threshold(gamma, bh.c, alpha_e - bh.alpha_hat) {
                    fired += 1;
                    if h.ret >= e.ret {
                        bad.push(format!(
                            "{}@{}#{} vs {}@{}#{}",
                            h.attack, h.epsilon, h.seed, e.attack, e.epsilon, e.seed
                        ));
                    }
                }
            }
        }
        checks.push(Check::new(
            name,
            bad.is_empty(),
            format!("premise fired on {fired} pairs, {} counterexamples: {bad:?}", bad.len()),
        ));
    }
    checks
}
