//! Finite MDPs and exact dynamic-programming evaluation.
//!
//! Every policy in this crate, attacked or not, is eventually materialized as a
//! table `π(a|s)` and handed to [`evaluate_policy`]. Evaluation is exact: a
//! direct LU solve of the Bellman evaluation system for small problems and
//! fixed-point iteration to a `1e-10` residual otherwise.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;
/// Bellman residual every evaluation must reach.
pub const EVAL_TOL: f64 = 1e-10;
/// Above this many state-action pairs evaluation switches to iteration.
const DIRECT_SOLVE_LIMIT: usize = 10_000;
/// Default cap on sampled episode length.
pub const DEFAULT_HORIZON: usize = 1000;

/// Tabular action distribution, one row per state.
pub type ActionProbs = Vec<Vec<f64>>;

/// A finite discounted MDP.
///
/// Terminal states are absorbing self-loops with zero reward, so the
/// infinite-horizon formulas apply to episodic tasks unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMdp")]
pub struct MdpSpec {
    num_states: usize,
    num_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    gamma: f64,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
}

#[derive(Deserialize)]
struct RawMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    gamma: f64,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
}

impl TryFrom<RawMdp> for MdpSpec {
    type Error = Error;

    fn try_from(raw: RawMdp) -> Result<Self> {
        let mdp = MdpSpec {
            num_states: raw.num_states,
            num_actions: raw.num_actions,
            transition: raw.transition,
            reward: raw.reward,
            gamma: raw.gamma,
            initial_dist: raw.initial_dist,
            terminal: raw.terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

impl MdpSpec {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let num_states = transition.len();
        let num_actions = transition.first().map_or(0, Vec::len);
        let mdp = MdpSpec {
            num_states,
            num_actions,
            transition,
            reward,
            gamma,
            initial_dist,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 || na == 0 {
            return Err(Error::Validation("MDP needs at least one state and one action".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Validation(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.transition.len() != ns || self.reward.len() != ns {
            return Err(Error::Validation("transition/reward outer length != num_states".into()));
        }
        if self.initial_dist.len() != ns || self.terminal.len() != ns {
            return Err(Error::Validation("initial_dist/terminal length != num_states".into()));
        }
        for s in 0..ns {
            if self.transition[s].len() != na || self.reward[s].len() != na {
                return Err(Error::Validation(format!("state {s}: expected {na} actions")));
            }
            for a in 0..na {
                let row = &self.transition[s][a];
                if row.len() != ns {
                    return Err(Error::Validation(format!("P[{s}][{a}] has wrong length")));
                }
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::Validation(format!("P[{s}][{a}] has a negative entry")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::Validation(format!("P[{s}][{a}] sums to {total}")));
                }
                if !self.reward[s][a].is_finite() {
                    return Err(Error::Validation(format!("r[{s}][{a}] is not finite")));
                }
                if self.terminal[s] && (row[s] != 1.0 || self.reward[s][a] != 0.0) {
                    return Err(Error::Validation(format!(
                        "terminal state {s} must self-loop with zero reward"
                    )));
                }
            }
        }
        if self.initial_dist.iter().any(|p| *p < 0.0) {
            return Err(Error::Validation("initial_dist has a negative entry".into()));
        }
        let total: f64 = self.initial_dist.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Validation(format!("initial_dist sums to {total}")));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// Copy of this MDP with a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut out = self.clone();
        out.gamma = gamma;
        out.validate()?;
        Ok(out)
    }

    /// Copy with a different initial distribution.
    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.initial_dist = initial_dist;
        out.validate()?;
        Ok(out)
    }

    /// One-step lookahead `r(s,a) + γ Σ P(s'|s,a) v(s')`.
    pub fn backup(&self, values: &[f64], s: usize, a: usize) -> f64 {
        let next: f64 = self.transition[s][a]
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum();
        self.reward[s][a] + self.gamma * next
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("MdpSpec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: "<mdp>".into(),
            message: e.to_string(),
        })
    }
}

/// Negate every reward. Zero rewards stay `+0.0` so flipping is an exact involution.
pub fn flip_rewards(mdp: &MdpSpec) -> MdpSpec {
    let mut out = mdp.clone();
    for row in &mut out.reward {
        for r in row.iter_mut() {
            if *r != 0.0 {
                *r = -*r;
            } else {
                *r = 0.0;
            }
        }
    }
    out
}

/// Exact quantities for one policy on one MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// `R(π) = Σ_s μ(s) V(s)`.
    pub return_value: f64,
    pub state_values: Vec<f64>,
    pub q_values: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    /// Normalized discounted occupancy `(1-γ) Σ_t γ^t P(s_t = s)`.
    pub discounted_occupancy: Vec<f64>,
}

pub(crate) fn check_action_probs(action_probs: &[Vec<f64>], ns: usize, na: usize) -> Result<()> {
    if action_probs.len() != ns {
        return Err(Error::Validation(format!(
            "policy has {} rows, MDP has {ns} states",
            action_probs.len()
        )));
    }
    for (s, row) in action_probs.iter().enumerate() {
        if row.len() != na {
            return Err(Error::Validation(format!("state {s}: policy row has {} actions", row.len())));
        }
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Validation(format!("state {s}: policy row has a negative entry")));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Validation(format!("state {s}: policy row sums to {total}")));
        }
    }
    Ok(())
}

/// Policy-averaged transition matrix and reward vector.
fn induced_chain(mdp: &MdpSpec, action_probs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let ns = mdp.num_states;
    let mut p = vec![vec![0.0; ns]; ns];
    let mut r = vec![0.0; ns];
    for s in 0..ns {
        for (a, &pa) in action_probs[s].iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            r[s] += pa * mdp.reward[s][a];
            for (dst, &pt) in p[s].iter_mut().zip(&mdp.transition[s][a]) {
                *dst += pa * pt;
            }
        }
    }
    (p, r)
}

fn residual_inf(p: &[Vec<f64>], r: &[f64], gamma: f64, v: &[f64]) -> f64 {
    p.iter()
        .zip(r)
        .zip(v)
        .map(|((row, ri), vi)| {
            let next: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            (ri + gamma * next - vi).abs()
        })
        .fold(0.0, f64::max)
}

/// Solve `x = b + γ M x` (or with `M` transposed) to residual `EVAL_TOL`.
fn solve_discounted(
    m: &[Vec<f64>],
    b: &[f64],
    gamma: f64,
    transpose: bool,
    direct: bool,
) -> Result<Vec<f64>> {
    let n = b.len();
    let entry = |i: usize, j: usize| if transpose { m[j][i] } else { m[i][j] };
    let residual = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let mx: f64 = (0..n).map(|j| entry(i, j) * x[j]).sum();
                b[i] + gamma * mx - x[i]
            })
            .collect()
    };

    let mut x;
    if direct {
        let a = DMatrix::from_fn(n, n, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            id - gamma * entry(i, j)
        });
        let lu = a.lu();
        let rhs = DVector::from_column_slice(b);
        x = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numeric("singular Bellman system".into()))?
            .as_slice()
            .to_vec();
        // iterative refinement
        for _ in 0..4 {
            let res = residual(&x);
            if res.iter().fold(0.0f64, |m, r| m.max(r.abs())) <= EVAL_TOL * 1e-2 {
                break;
            }
            let corr = lu
                .solve(&DVector::from_vec(res))
                .ok_or_else(|| Error::Numeric("singular Bellman system".into()))?;
            for (xi, ci) in x.iter_mut().zip(corr.iter()) {
                *xi += ci;
            }
        }
    } else {
        x = b.to_vec();
        let max_iter = 1_000_000;
        let mut converged = false;
        for _ in 0..max_iter {
            let next: Vec<f64> = (0..n)
                .map(|i| b[i] + gamma * (0..n).map(|j| entry(i, j) * x[j]).sum::<f64>())
                .collect();
            let delta = next
                .iter()
                .zip(&x)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            x = next;
            if !delta.is_finite() {
                return Err(Error::Numeric("policy evaluation diverged".into()));
            }
            if delta <= EVAL_TOL * (1.0 - gamma) * 0.1 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numeric("policy evaluation did not converge".into()));
        }
    }
    let worst = residual(&x).iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if !worst.is_finite() || worst > EVAL_TOL {
        return Err(Error::Numeric(format!("Bellman residual {worst:e} above tolerance")));
    }
    Ok(x)
}

/// Exact evaluation of a tabular policy.
pub fn evaluate_policy(mdp: &MdpSpec, action_probs: &[Vec<f64>]) -> Result<EvaluationReport> {
    check_action_probs(action_probs, mdp.num_states, mdp.num_actions)?;
    let (p, r) = induced_chain(mdp, action_probs);
    let gamma = mdp.gamma;
    let direct = mdp.num_states * mdp.num_actions <= DIRECT_SOLVE_LIMIT;
    let values = solve_discounted(&p, &r, gamma, false, direct)?;
    debug_assert!(residual_inf(&p, &r, gamma, &values) <= EVAL_TOL);

    let occupancy_raw = solve_discounted(&p, &mdp.initial_dist, gamma, true, direct)?;
    let occupancy: Vec<f64> = occupancy_raw.iter().map(|x| (1.0 - gamma) * x).collect();

    let q_values: Vec<Vec<f64>> = (0..mdp.num_states)
        .map(|s| (0..mdp.num_actions).map(|a| mdp.backup(&values, s, a)).collect())
        .collect();
    let advantages = q_values
        .iter()
        .zip(&values)
        .map(|(q, v)| q.iter().map(|x| x - v).collect())
        .collect();
    let return_value = mdp.initial_dist.iter().zip(&values).map(|(m, v)| m * v).sum();
    Ok(EvaluationReport {
        return_value,
        state_values: values,
        q_values,
        advantages,
        discounted_occupancy: occupancy,
    })
}

/// Largest absolute Bellman evaluation residual of `values` under `action_probs`.
pub fn bellman_residual(mdp: &MdpSpec, action_probs: &[Vec<f64>], values: &[f64]) -> f64 {
    let (p, r) = induced_chain(mdp, action_probs);
    residual_inf(&p, &r, mdp.gamma, values)
}

/// Index of the largest entry, ties to the lowest index within `tol`.
pub fn argmax_lowest(values: &[f64], tol: f64) -> usize {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .position(|v| *v >= best - tol)
        .unwrap_or(0)
}

/// Deterministic policy as a one-hot table.
pub fn one_hot_policy(actions: &[usize], num_actions: usize) -> ActionProbs {
    actions
        .iter()
        .map(|&a| {
            let mut row = vec![0.0; num_actions];
            row[a] = 1.0;
            row
        })
        .collect()
}

/// Optimal values and a greedy optimal policy.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub values: Vec<f64>,
    pub q_values: Vec<Vec<f64>>,
    /// Greedy action per state, ties to the lowest action index.
    pub greedy: Vec<usize>,
    pub return_value: f64,
}

impl OptimalSolution {
    pub fn policy(&self, num_actions: usize) -> ActionProbs {
        one_hot_policy(&self.greedy, num_actions)
    }
}

const GREEDY_TIE_TOL: f64 = 1e-9;

/// Reward-maximizing policy by policy iteration with exact evaluation.
pub fn solve_optimal(mdp: &MdpSpec) -> Result<OptimalSolution> {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut greedy = vec![0usize; ns];
    for _ in 0..(10 * ns * na + 10) {
        let report = evaluate_policy(mdp, &one_hot_policy(&greedy, na))?;
        let mut changed = false;
        for s in 0..ns {
            let q = &report.q_values[s];
            let cand = argmax_lowest(q, GREEDY_TIE_TOL);
            // only switch on strict improvement so the iteration terminates
            if q[cand] > q[greedy[s]] + GREEDY_TIE_TOL {
                greedy[s] = cand;
                changed = true;
            }
        }
        if !changed {
            // canonical tie-breaking on the final value function
            let greedy: Vec<usize> = report
                .q_values
                .iter()
                .map(|q| argmax_lowest(q, GREEDY_TIE_TOL))
                .collect();
            return Ok(OptimalSolution {
                values: report.state_values,
                q_values: report.q_values,
                greedy,
                return_value: report.return_value,
            });
        }
    }
    Err(Error::Numeric("policy iteration did not terminate".into()))
}

/// `min_π R(π)`, the optimum of the reward-flipped MDP negated.
pub fn min_return(mdp: &MdpSpec) -> Result<f64> {
    Ok(-solve_optimal(&flip_rewards(mdp))?.return_value)
}

/// One environment step as recorded during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub episodes: Vec<Vec<StepRecord>>,
    pub seed: u64,
}

impl TrajectoryBatch {
    pub fn discounted_returns(&self, gamma: f64) -> Vec<f64> {
        self.episodes
            .iter()
            .map(|ep| {
                let mut discount = 1.0;
                let mut total = 0.0;
                for step in ep {
                    total += discount * step.reward;
                    discount *= gamma;
                }
                total
            })
            .collect()
    }

    /// CSV with header `episode,step,state,action,reward,next_state,done`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(["episode", "step", "state", "action", "reward", "next_state", "done"])
            .map_err(csv_err)?;
        for (e, ep) in self.episodes.iter().enumerate() {
            for (t, step) in ep.iter().enumerate() {
                w.write_record([
                    e.to_string(),
                    t.to_string(),
                    step.state.to_string(),
                    step.action.to_string(),
                    step.reward.to_string(),
                    step.next_state.to_string(),
                    step.done.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub(crate) fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last index with positive mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Monte-Carlo rollouts of a tabular policy. Episodes stop on entering a
/// terminal state or after `horizon` steps (truncated, no bootstrap).
pub fn sample_trajectories(
    mdp: &MdpSpec,
    action_probs: &[Vec<f64>],
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if episodes == 0 || horizon == 0 {
        return Err(Error::Validation("episodes and horizon must be >= 1".into()));
    }
    check_action_probs(action_probs, mdp.num_states, mdp.num_actions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = sample_index(&mut rng, &mdp.initial_dist);
        let mut ep = Vec::new();
        while !mdp.terminal[s] && ep.len() < horizon {
            let a = sample_index(&mut rng, &action_probs[s]);
            let next = sample_index(&mut rng, &mdp.transition[s][a]);
            ep.push(StepRecord {
                state: s,
                action: a,
                reward: mdp.reward[s][a],
                next_state: next,
                done: mdp.terminal[next],
            });
            s = next;
        }
        out.push(ep);
    }
    Ok(TrajectoryBatch { episodes: out, seed })
}
