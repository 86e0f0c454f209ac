//! Observation attackers `h` with `‖h(s) − s‖ ≤ ε`, grouped by the function
//! space they live in, and the gradient optimizers that realize them.
//!
//! In continuous mode the gradient attacks run FGSM/PGD on a feedforward
//! victim. In discrete mode `h(s)` must be the observation of a state in
//! `B(s)`, and every attacker becomes an exact per-state best response over
//! those neighbors.

mod project;

use serde::{Deserialize, Serialize};

pub use project::{clip_unit_box, project_to_ball, random_attack_step};

use crate::envs::{Norm, ObservationEmbedding, PerturbationBudget};
use crate::error::{Error, Result};
use crate::mdp::ActionProbs;
use crate::policy::{entropy, kl_divergence, Loss, Policy};

/// Objective values closer than this count as ties (lowest index wins).
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackSpace {
    H1FullUntargeted,
    H2StrategicUntargeted,
    H3CriticTargeted,
    H3TwoStage,
    Random,
    Identity,
}

impl AttackSpace {
    pub const ALL: [AttackSpace; 6] = [
        AttackSpace::Identity,
        AttackSpace::Random,
        AttackSpace::H1FullUntargeted,
        AttackSpace::H2StrategicUntargeted,
        AttackSpace::H3CriticTargeted,
        AttackSpace::H3TwoStage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackSpace::H1FullUntargeted => "h1_full_untargeted",
            AttackSpace::H2StrategicUntargeted => "h2_strategic_untargeted",
            AttackSpace::H3CriticTargeted => "h3_critic_targeted",
            AttackSpace::H3TwoStage => "h3_two_stage",
            AttackSpace::Random => "random",
            AttackSpace::Identity => "identity",
        }
    }
}

impl std::fmt::Display for AttackSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "h1_full_untargeted" | "h1" | "mad" => AttackSpace::H1FullUntargeted,
            "h2_strategic_untargeted" | "h2" | "strategic" => AttackSpace::H2StrategicUntargeted,
            "h3_critic_targeted" | "critic" => AttackSpace::H3CriticTargeted,
            "h3_two_stage" | "two_stage" => AttackSpace::H3TwoStage,
            "random" => AttackSpace::Random,
            "identity" | "none" => AttackSpace::Identity,
            other => return Err(Error::Config(format!("unknown attack `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerMethod {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub method: OptimizerMethod,
    pub iterations: usize,
    /// PGD step size `ε′`; FGSM always spends the whole budget in one step.
    pub step_size: f64,
    pub entropy_weight: f64,
    pub best_iterate_tracking: bool,
    /// Take the FGSM step as the first PGD iterate, so that PGD(1) = FGSM.
    pub fgsm_warm_start: bool,
    /// Start from a seeded random point of the ball instead of the clean
    /// observation. Untargeted KL objectives are stationary at the clean
    /// observation, so MAD attacks need this to move at all.
    pub random_start: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: OptimizerMethod::Pgd,
            iterations: 10,
            step_size: 0.01,
            entropy_weight: 0.0,
            best_iterate_tracking: true,
            fgsm_warm_start: true,
            random_start: false,
        }
    }
}

impl OptimizerConfig {
    pub fn fgsm() -> Self {
        OptimizerConfig {
            method: OptimizerMethod::Fgsm,
            iterations: 1,
            ..OptimizerConfig::default()
        }
    }

    pub fn pgd(iterations: usize, step_size: f64) -> Self {
        OptimizerConfig {
            iterations,
            step_size,
            ..OptimizerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("optimizer iterations must be >= 1".into()));
        }
        if self.method == OptimizerMethod::Fgsm && self.iterations != 1 {
            return Err(Error::Config("fgsm takes exactly one iteration".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("optimizer step_size must be > 0".into()));
        }
        if !(self.entropy_weight >= 0.0) {
            return Err(Error::Config("entropy_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingRule {
    PreferenceGap,
    Always,
    Never,
}

/// The indicator `I(s)` deciding when a strategically-timed attacker acts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategicTimer {
    pub rule: TimingRule,
    pub threshold: f64,
}

impl StrategicTimer {
    pub fn new(rule: TimingRule, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("timer threshold {threshold} outside [0, 1]")));
        }
        Ok(StrategicTimer { rule, threshold })
    }

    pub fn always() -> Self {
        StrategicTimer {
            rule: TimingRule::Always,
            threshold: 0.0,
        }
    }
}

/// Divergence the untargeted (MAD) attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MadVariant {
    /// `KL(π(·|s) ‖ π(·|x))`.
    #[default]
    StochasticForward,
    /// `KL(π(·|x) ‖ π(·|s))`.
    StochasticReverse,
    /// Cross-entropy of `π(·|x)` to the clean argmax action.
    Deterministic,
}

/// Per-state action values of the victim, looked up at the decoded state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub values: Vec<Vec<f64>>,
    pub embedding: ObservationEmbedding,
}

impl QTable {
    pub fn new(values: Vec<Vec<f64>>, embedding: ObservationEmbedding) -> Result<Self> {
        if values.len() != embedding.num_states() {
            return Err(Error::Validation("Q table and embedding disagree on the number of states".into()));
        }
        Ok(QTable { values, embedding })
    }

    /// Action with the smallest Q at the state nearest `observation`.
    pub fn worst_action(&self, observation: &[f64]) -> usize {
        argmin_lowest(&self.values[self.embedding.decode_nearest(observation)])
    }
}

fn argmin_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] - TIE_TOL {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attacker {
    pub space: AttackSpace,
    pub budget: PerturbationBudget,
    pub optimizer: OptimizerConfig,
    pub target_policy: Option<Policy>,
    pub timer: Option<StrategicTimer>,
    pub aux_q: Option<QTable>,
    pub mad_variant: MadVariant,
    /// Needed in discrete mode to map observations back to states.
    pub embedding: Option<ObservationEmbedding>,
    pub seed: u64,
}

/// A scalar objective the attacker minimizes: `Σ coef · loss`.
struct Objective(Vec<(f64, Loss)>);

impl Objective {
    fn value(&self, victim: &Policy, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (c, l) in &self.0 {
            total += c * victim.loss(x, l)?;
        }
        Ok(total)
    }

    fn value_and_grad(&self, victim: &Policy, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut total = 0.0;
        let mut grad = vec![0.0; x.len()];
        for (c, l) in &self.0 {
            let g = victim.input_gradient(x, l)?;
            total += c * g.loss;
            for (acc, gi) in grad.iter_mut().zip(&g.grad_wrt_observation) {
                *acc += c * gi;
            }
        }
        Ok((total, grad))
    }
}

impl Attacker {
    pub fn new(space: AttackSpace, budget: PerturbationBudget) -> Self {
        Attacker {
            space,
            budget,
            optimizer: OptimizerConfig::default(),
            target_policy: None,
            timer: None,
            aux_q: None,
            mad_variant: MadVariant::default(),
            embedding: None,
            seed: 0,
        }
    }

    pub fn identity() -> Self {
        Attacker::new(
            AttackSpace::Identity,
            PerturbationBudget::continuous(0.0, Norm::LInf).expect("zero budget is valid"),
        )
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerConfig) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn with_target(mut self, target: Policy) -> Self {
        self.target_policy = Some(target);
        self
    }

    pub fn with_timer(mut self, timer: StrategicTimer) -> Self {
        self.timer = Some(timer);
        self
    }

    pub fn with_q(mut self, q: QTable) -> Self {
        self.aux_q = Some(q);
        self
    }

    pub fn with_mad_variant(mut self, variant: MadVariant) -> Self {
        self.mad_variant = variant;
        self
    }

    pub fn with_embedding(mut self, embedding: ObservationEmbedding) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Reject configurations missing what their space needs.
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        match self.space {
            AttackSpace::H3TwoStage if self.target_policy.is_none() => {
                return Err(Error::Config("h3_two_stage attack needs a target (deceptive) policy".into()))
            }
            AttackSpace::H3CriticTargeted if self.aux_q.is_none() => {
                return Err(Error::Config("h3_critic_targeted attack needs a Q table".into()))
            }
            AttackSpace::H2StrategicUntargeted if self.timer.is_none() => {
                return Err(Error::Config("h2_strategic_untargeted attack needs a timer".into()))
            }
            _ => {}
        }
        if self.budget.is_discrete() {
            let emb = self
                .embedding
                .as_ref()
                .ok_or_else(|| Error::Config("discrete budgets need the observation embedding".into()))?;
            if self.budget.discrete_neighbors.len() != emb.num_states() {
                return Err(Error::Config("discrete budget and embedding disagree on the number of states".into()));
            }
        }
        Ok(())
    }

    /// Objective to minimize at observation `x` when the clean observation is
    /// `obs`; `None` means the attacker does nothing there.
    fn objective(&self, victim: &Policy, obs: &[f64]) -> Result<Option<Objective>> {
        Ok(match self.space {
            AttackSpace::Identity | AttackSpace::Random => None,
            AttackSpace::H1FullUntargeted => Some(self.mad_objective(victim, obs)?),
            AttackSpace::H2StrategicUntargeted => {
                let timer = self.timer.as_ref().expect("validated");
                if strategic_should_attack(timer, victim, obs)? {
                    Some(self.mad_objective(victim, obs)?)
                } else {
                    None
                }
            }
            AttackSpace::H3CriticTargeted => {
                let q = self.aux_q.as_ref().expect("validated");
                Some(Objective(vec![(1.0, Loss::NegLogProbOfAction(q.worst_action(obs)))]))
            }
            AttackSpace::H3TwoStage => {
                let target = self.target_policy.as_ref().expect("validated").act_probs(obs)?;
                let mut terms = vec![(1.0, Loss::KlToTarget(target))];
                if self.optimizer.entropy_weight > 0.0 {
                    terms.push((self.optimizer.entropy_weight, Loss::Entropy));
                }
                Some(Objective(terms))
            }
        })
    }

    fn mad_objective(&self, victim: &Policy, obs: &[f64]) -> Result<Objective> {
        let clean = victim.act_probs(obs)?;
        Ok(Objective(vec![match self.mad_variant {
            MadVariant::StochasticForward => (-1.0, Loss::KlFromTarget(clean)),
            MadVariant::StochasticReverse => (-1.0, Loss::KlToTarget(clean)),
            MadVariant::Deterministic => {
                (-1.0, Loss::NegLogProbOfAction(crate::mdp::argmax_lowest(&clean, 0.0)))
            }
        }]))
    }

    /// The perturbed observation `h(obs)`.
    pub fn perturb(&self, victim: &Policy, observation: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if observation.len() != victim.input_dim() {
            return Err(Error::Validation(format!(
                "observation has dimension {}, victim expects {}",
                observation.len(),
                victim.input_dim()
            )));
        }
        if self.budget.is_discrete() {
            let emb = self.embedding.as_ref().expect("validated");
            let s = emb.decode_nearest(observation);
            let n = self.perturb_state(victim, s)?;
            return Ok(if n == s { observation.to_vec() } else { emb.encode(n).to_vec() });
        }
        if self.budget.epsilon == 0.0 {
            return Ok(observation.to_vec());
        }
        match self.space {
            AttackSpace::Identity => Ok(observation.to_vec()),
            AttackSpace::Random => {
                let seed = project::observation_seed(self.seed, observation);
                let mut x = random_attack_step(observation, self.budget.epsilon, self.budget.norm, seed);
                clip_unit_box(&mut x);
                Ok(x)
            }
            _ => match self.objective(victim, observation)? {
                None => Ok(observation.to_vec()),
                Some(obj) => self.optimize(victim, observation, &obj),
            },
        }
    }

    /// Discrete mode: the state in `B(s)` whose observation is shown.
    /// Ties in the objective go to the lowest state index.
    pub fn perturb_state(&self, victim: &Policy, s: usize) -> Result<usize> {
        self.validate()?;
        if !self.budget.is_discrete() {
            return Err(Error::Unsupported("perturb_state needs a discrete budget".into()));
        }
        let emb = self.embedding.as_ref().expect("validated");
        let neighbors = self.budget.neighbors(s);
        let obs = emb.encode(s);
        if self.space == AttackSpace::Random {
            let pick = project::observation_seed(self.seed, obs) % neighbors.len() as u64;
            return Ok(neighbors[pick as usize]);
        }
        let obj = match self.objective(victim, obs)? {
            None => return Ok(s),
            Some(obj) => obj,
        };
        let mut best = (f64::INFINITY, s);
        for &n in neighbors {
            let v = obj.value(victim, emb.encode(n))?;
            if v < best.0 - TIE_TOL || (v <= best.0 + TIE_TOL && n < best.1) {
                best = (v, n);
            }
        }
        Ok(best.1)
    }

    /// FGSM/PGD descent of `obj` inside the ball, then the unit box.
    fn optimize(&self, victim: &Policy, obs: &[f64], obj: &Objective) -> Result<Vec<f64>> {
        let opt = &self.optimizer;
        let (eps, norm) = (self.budget.epsilon, self.budget.norm);
        let feasible = |x: Vec<f64>| {
            let mut y = project_to_ball(&x, obs, eps, norm);
            clip_unit_box(&mut y);
            y
        };
        let mut x = if opt.random_start {
            feasible(random_attack_step(obs, eps, norm, project::observation_seed(self.seed, obs)))
        } else {
            obs.to_vec()
        };
        let dim = obs.len() as f64;
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..=opt.iterations {
            let (value, grad) = obj.value_and_grad(victim, &x)?;
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, x.clone()));
            }
            if k == opt.iterations {
                break;
            }
            let gnorm = norm_of(&grad, norm);
            if gnorm == 0.0 {
                // stationary point: every later iterate would be identical
                break;
            }
            let full_step = opt.method == OptimizerMethod::Fgsm || (k == 0 && opt.fgsm_warm_start);
            let step: Vec<f64> = match norm {
                Norm::LInf => {
                    let a = if full_step { eps } else { opt.step_size };
                    grad.iter().map(|g| a * sign(*g)).collect()
                }
                Norm::L2 => {
                    let g2 = Norm::L2.length(&grad);
                    let a = if full_step { eps } else { opt.step_size * dim.sqrt() };
                    grad.iter().map(|g| a * g / g2).collect()
                }
            };
            x = feasible(x.iter().zip(&step).map(|(xi, si)| xi - si).collect());
        }
        if opt.best_iterate_tracking {
            Ok(best.expect("at least one iterate").1)
        } else {
            Ok(x)
        }
    }

    /// Value of this attacker's objective at `x` for clean observation `obs`;
    /// `None` when the attacker has no objective there.
    pub fn objective_value(&self, victim: &Policy, obs: &[f64], x: &[f64]) -> Result<Option<f64>> {
        self.validate()?;
        match self.objective(victim, obs)? {
            None => Ok(None),
            Some(obj) => obj.value(victim, x).map(Some),
        }
    }
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm_of(v: &[f64], norm: Norm) -> f64 {
    norm.length(v)
}

/// `I(s)` for the strategically-timed attacker.
pub fn strategic_should_attack(timer: &StrategicTimer, victim: &Policy, observation: &[f64]) -> Result<bool> {
    Ok(match timer.rule {
        TimingRule::Always => true,
        TimingRule::Never => false,
        TimingRule::PreferenceGap => {
            let p = victim.act_probs(observation)?;
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
            max - min > timer.threshold
        }
    })
}

/// One untargeted (MAD) attack.
pub fn mad_attack_step(
    victim: &Policy,
    observation: &[f64],
    budget: &PerturbationBudget,
    opt: &OptimizerConfig,
    variant: MadVariant,
) -> Result<Vec<f64>> {
    Attacker::new(AttackSpace::H1FullUntargeted, budget.clone())
        .with_optimizer(opt.clone())
        .with_mad_variant(variant)
        .perturb(victim, observation)
}

/// One targeted step toward the action with the smallest `Q`.
pub fn critic_attack_step(
    victim: &Policy,
    aux_q: &QTable,
    observation: &[f64],
    budget: &PerturbationBudget,
    opt: &OptimizerConfig,
) -> Result<Vec<f64>> {
    Attacker::new(AttackSpace::H3CriticTargeted, budget.clone())
        .with_optimizer(opt.clone())
        .with_q(aux_q.clone())
        .perturb(victim, observation)
}

/// Stage 2 of the two-stage attack: pull `π(·|x)` toward `π⁻(·|s)`.
pub fn two_stage_attack_step(
    victim: &Policy,
    deceptive: &Policy,
    observation: &[f64],
    budget: &PerturbationBudget,
    opt: &OptimizerConfig,
) -> Result<Vec<f64>> {
    Attacker::new(AttackSpace::H3TwoStage, budget.clone())
        .with_optimizer(opt.clone())
        .with_target(deceptive.clone())
        .perturb(victim, observation)
}

/// `π_h(a|s) = π(a|h(s))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackedPolicy {
    pub victim: Policy,
    pub attacker: Attacker,
}

impl AttackedPolicy {
    pub fn new(victim: Policy, attacker: Attacker) -> Result<Self> {
        attacker.validate()?;
        Ok(AttackedPolicy { victim, attacker })
    }

    pub fn act_probs(&self, observation: &[f64]) -> Result<Vec<f64>> {
        let x = self.attacker.perturb(&self.victim, observation)?;
        self.victim.act_probs(&x)
    }
}

/// Materialize `π_h` as a table over all embedded states.
pub fn induced_tabular_policy(
    victim: &Policy,
    attacker: &Attacker,
    embedding: &ObservationEmbedding,
) -> Result<ActionProbs> {
    attacker.validate()?;
    (0..embedding.num_states())
        .map(|s| {
            let x = attacker.perturb(victim, embedding.encode(s))?;
            victim.act_probs(&x)
        })
        .collect()
}

/// `KL(π(·|x) ‖ target)` plus the weighted entropy, the two-stage objective.
pub fn two_stage_objective(victim: &Policy, x: &[f64], target: &[f64], entropy_weight: f64) -> Result<f64> {
    let p = victim.act_probs(x)?;
    Ok(kl_divergence(&p, target) + entropy_weight * entropy(&p))
}
