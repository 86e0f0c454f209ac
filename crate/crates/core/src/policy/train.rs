//! Toy-scale trainers: tabular Q-learning, one-step actor-critic, REINFORCE,
//! and cross-entropy distillation of a tabular policy into an MLP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{softmax, Loss, Policy};
use crate::envs::ObservationEmbedding;
use crate::error::{Error, Result};
use crate::mdp::{evaluate_policy, flip_rewards, sample_index, MdpSpec, DEFAULT_HORIZON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainAlgorithm {
    QLearning,
    ActorCritic,
    PolicyGradient,
}

impl std::str::FromStr for TrainAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q_learning" => Ok(TrainAlgorithm::QLearning),
            "actor_critic" => Ok(TrainAlgorithm::ActorCritic),
            "policy_gradient" => Ok(TrainAlgorithm::PolicyGradient),
            other => Err(Error::Config(format!("unknown training algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: TrainAlgorithm,
    pub steps: usize,
    pub learning_rate: f64,
    pub entropy_bonus: f64,
    pub seed: u64,
    /// Evaluate the current policy exactly every this many steps; 0 disables.
    pub evaluation_interval: usize,
    /// ε-greedy exploration rate (Q-learning).
    pub exploration: f64,
    /// Temperature of the emitted softmax policy.
    pub temperature: f64,
    /// Episode length cap during training.
    pub horizon: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_algorithm(TrainAlgorithm::QLearning)
    }
}

impl TrainConfig {
    pub fn for_algorithm(algorithm: TrainAlgorithm) -> Self {
        let (steps, learning_rate, temperature) = match algorithm {
            TrainAlgorithm::QLearning => (50_000, 0.5, 1e-3),
            TrainAlgorithm::ActorCritic => (100_000, 0.2, 0.02),
            TrainAlgorithm::PolicyGradient => (100_000, 0.1, 0.02),
        };
        TrainConfig {
            algorithm,
            steps,
            learning_rate,
            entropy_bonus: 0.0,
            seed: 0,
            evaluation_interval: 0,
            exploration: 0.2,
            temperature,
            horizon: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be > 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Validation("temperature must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.exploration) {
            return Err(Error::Validation("exploration must lie in [0, 1]".into()));
        }
        if self.horizon == 0 || self.horizon > DEFAULT_HORIZON {
            return Err(Error::Validation(format!("horizon must lie in 1..={DEFAULT_HORIZON}")));
        }
        Ok(())
    }
}

/// A trained policy with its exact return on the MDP it is judged on.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub exact_return: f64,
    /// `(step, exact return)` checkpoints taken every `evaluation_interval`.
    pub evaluations: Vec<(usize, f64)>,
}

fn tabular_policy(table: &[Vec<f64>], embedding: &ObservationEmbedding, temperature: f64) -> Result<Policy> {
    Policy::tabular(table.to_vec(), embedding.clone(), temperature)
}

fn exact_return(mdp: &MdpSpec, logits: &[Vec<f64>], temperature: f64) -> Result<f64> {
    let probs: Vec<Vec<f64>> = logits.iter().map(|row| softmax(row, temperature)).collect();
    Ok(evaluate_policy(mdp, &probs)?.return_value)
}

fn check_finite(table: &[Vec<f64>], step: usize) -> Result<()> {
    if table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Training {
            step,
            reason: "non-finite parameter".into(),
        });
    }
    Ok(())
}

struct Walker<'a> {
    mdp: &'a MdpSpec,
    state: usize,
    t: usize,
    horizon: usize,
}

impl<'a> Walker<'a> {
    fn new<R: Rng>(mdp: &'a MdpSpec, horizon: usize, rng: &mut R) -> Self {
        Walker {
            mdp,
            state: sample_index(rng, mdp.initial_dist()),
            t: 0,
            horizon,
        }
    }

    /// Take one step; returns `(reward, next, episode_over, bootstrap_next)`.
    fn step<R: Rng>(&mut self, a: usize, rng: &mut R) -> (f64, usize, bool, bool) {
        let s = self.state;
        let next = sample_index(rng, self.mdp.transition(s, a));
        let r = self.mdp.reward(s, a);
        self.t += 1;
        let terminal = self.mdp.is_terminal(next);
        let over = terminal || self.t >= self.horizon;
        if over {
            self.state = sample_index(rng, self.mdp.initial_dist());
            self.t = 0;
        } else {
            self.state = next;
        }
        (r, next, over, !terminal)
    }
}

fn q_learning(
    mdp: &MdpSpec,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(usize, &[Vec<f64>]) -> Result<()>,
) -> Result<Vec<Vec<f64>>> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut q = vec![vec![0.0; na]; ns];
    let mut walker = Walker::new(mdp, cfg.horizon, &mut rng);
    for step in 1..=cfg.steps {
        let s = walker.state;
        let a = if rng.gen::<f64>() < cfg.exploration {
            rng.gen_range(0..na)
        } else {
            crate::mdp::argmax_lowest(&q[s], 0.0)
        };
        let (r, next, _, bootstrap) = walker.step(a, &mut rng);
        let future = if bootstrap {
            q[next].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            0.0
        };
        q[s][a] += cfg.learning_rate * (r + mdp.gamma() * future - q[s][a]);
        if !q[s][a].is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("Q[{s}][{a}] is not finite"),
            });
        }
        if cfg.evaluation_interval > 0 && step % cfg.evaluation_interval == 0 {
            let logits: Vec<Vec<f64>> = q.clone();
            on_eval(step, &logits)?;
        }
    }
    Ok(q)
}

fn actor_critic(
    mdp: &MdpSpec,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(usize, &[Vec<f64>]) -> Result<()>,
) -> Result<Vec<Vec<f64>>> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prefs = vec![vec![0.0; na]; ns];
    let mut critic = vec![0.0; ns];
    let mut walker = Walker::new(mdp, cfg.horizon, &mut rng);
    let critic_lr = cfg.learning_rate;
    for step in 1..=cfg.steps {
        let s = walker.state;
        let pi = softmax(&prefs[s], 1.0);
        let a = sample_index(&mut rng, &pi);
        let (r, next, _, bootstrap) = walker.step(a, &mut rng);
        let target = r + if bootstrap { mdp.gamma() * critic[next] } else { 0.0 };
        let td = target - critic[s];
        critic[s] += critic_lr * td;
        let h: f64 = -pi.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        for b in 0..na {
            let indicator = if b == a { 1.0 } else { 0.0 };
            let entropy_grad = -pi[b] * (pi[b].max(1e-300).ln() + h);
            prefs[s][b] += cfg.learning_rate * (td * (indicator - pi[b]) + cfg.entropy_bonus * entropy_grad);
        }
        check_finite(&prefs[s..=s], step)?;
        if cfg.evaluation_interval > 0 && step % cfg.evaluation_interval == 0 {
            on_eval(step, &prefs)?;
        }
    }
    Ok(prefs)
}

fn reinforce(
    mdp: &MdpSpec,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(usize, &[Vec<f64>]) -> Result<()>,
) -> Result<Vec<Vec<f64>>> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prefs = vec![vec![0.0; na]; ns];
    let mut baseline = vec![0.0; ns];
    let mut step = 0;
    let mut next_eval = cfg.evaluation_interval;
    while step < cfg.steps {
        let mut s = sample_index(&mut rng, mdp.initial_dist());
        let mut episode = Vec::new();
        while !mdp.is_terminal(s) && episode.len() < cfg.horizon && step < cfg.steps {
            let a = sample_index(&mut rng, &softmax(&prefs[s], 1.0));
            let next = sample_index(&mut rng, mdp.transition(s, a));
            episode.push((s, a, mdp.reward(s, a)));
            s = next;
            step += 1;
        }
        let mut ret = 0.0;
        let mut returns = vec![0.0; episode.len()];
        for (t, &(_, _, r)) in episode.iter().enumerate().rev() {
            ret = r + mdp.gamma() * ret;
            returns[t] = ret;
        }
        for (&(s, a, _), &g) in episode.iter().zip(&returns) {
            let adv = g - baseline[s];
            baseline[s] += cfg.learning_rate * adv;
            let pi = softmax(&prefs[s], 1.0);
            let h: f64 = -pi.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            for b in 0..na {
                let indicator = if b == a { 1.0 } else { 0.0 };
                let entropy_grad = -pi[b] * (pi[b].max(1e-300).ln() + h);
                prefs[s][b] += cfg.learning_rate * (adv * (indicator - pi[b]) + cfg.entropy_bonus * entropy_grad);
            }
        }
        check_finite(&prefs, step)?;
        if cfg.evaluation_interval > 0 && step >= next_eval {
            on_eval(step, &prefs)?;
            next_eval += cfg.evaluation_interval;
        }
    }
    Ok(prefs)
}

/// Train a reward-maximizing tabular policy and report its exact return.
pub fn train_policy(mdp: &MdpSpec, embedding: &ObservationEmbedding, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if embedding.num_states() != mdp.num_states() {
        return Err(Error::Validation("embedding and MDP disagree on the number of states".into()));
    }
    let mut evaluations = Vec::new();
    let temperature = config.temperature;
    let on_eval = |step: usize, logits: &[Vec<f64>]| -> Result<()> {
        evaluations.push((step, exact_return(mdp, logits, temperature)?));
        Ok(())
    };
    let logits = match config.algorithm {
        TrainAlgorithm::QLearning => q_learning(mdp, config, on_eval)?,
        TrainAlgorithm::ActorCritic => actor_critic(mdp, config, on_eval)?,
        TrainAlgorithm::PolicyGradient => reinforce(mdp, config, on_eval)?,
    };
    let exact = exact_return(mdp, &logits, temperature)?;
    Ok(TrainOutcome {
        policy: tabular_policy(&logits, embedding, temperature)?,
        exact_return: exact,
        evaluations,
    })
}

/// Train `ensemble` reward-minimizing policies (seeds `seed, seed+1, ...`)
/// on the flipped MDP and keep the one with the median true return.
///
/// The returned `exact_return` is measured on the original MDP.
pub fn train_deceptive(
    mdp: &MdpSpec,
    embedding: &ObservationEmbedding,
    config: &TrainConfig,
    ensemble: usize,
) -> Result<TrainOutcome> {
    if ensemble == 0 {
        return Err(Error::Validation("ensemble must contain at least one member".into()));
    }
    let flipped = flip_rewards(mdp);
    let mut members = Vec::with_capacity(ensemble);
    for i in 0..ensemble {
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        let out = train_policy(&flipped, embedding, &cfg)?;
        let probs = out.policy.induced_table(embedding)?;
        let true_return = evaluate_policy(mdp, &probs)?.return_value;
        members.push((true_return, i, out));
    }
    // stable sort: equal returns keep seed order
    members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (true_return, _, out) = members.swap_remove((ensemble - 1) / 2);
    let evaluations = out.evaluations.iter().map(|(s, r)| (*s, -r)).collect();
    Ok(TrainOutcome {
        policy: out.policy.mark_deceptive(),
        exact_return: true_return,
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            hidden: vec![32, 32],
            steps: 5000,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// Fit an MLP to per-state target actions by full-batch Adam on cross-entropy.
pub fn distill_feedforward(
    targets: &[usize],
    num_actions: usize,
    embedding: &ObservationEmbedding,
    config: &DistillConfig,
) -> Result<Policy> {
    if targets.len() != embedding.num_states() {
        return Err(Error::Validation("one target action per embedded state required".into()));
    }
    let mut sizes = vec![embedding.dim()];
    sizes.extend(&config.hidden);
    sizes.push(num_actions);
    let mut net = Policy::feedforward(&sizes, config.seed)?;
    let mut params = net.parameters();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let n = targets.len() as f64;
    for step in 1..=config.steps {
        let mut grad = vec![0.0; params.len()];
        for (s, &a) in targets.iter().enumerate() {
            let g = net.input_gradient(embedding.encode(s), &Loss::NegLogProbOfAction(a))?;
            for (acc, gi) in grad.iter_mut().zip(&g.grad_wrt_parameters) {
                *acc += gi / n;
            }
        }
        let t = step as i32;
        for i in 0..params.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            params[i] -= config.learning_rate * mh / (vh.sqrt() + eps);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Training {
                step,
                reason: "non-finite network parameter".into(),
            });
        }
        net.set_parameters(&params);
    }
    Ok(net)
}
