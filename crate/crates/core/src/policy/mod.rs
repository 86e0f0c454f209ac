//! Policies over observations: tabular softmax and small tanh MLPs with
//! hand-written reverse-mode gradients with respect to the input.

mod checkpoint;
mod train;

pub use checkpoint::{CHECKPOINT_FORMAT, load_checkpoint, save_checkpoint};
pub use train::{
    distill_feedforward, train_deceptive, train_policy, DistillConfig, TrainAlgorithm, TrainConfig,
    TrainOutcome,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::ObservationEmbedding;
use crate::error::{Error, Result};
use crate::mdp::ActionProbs;

pub const MAX_HIDDEN_LAYERS: usize = 3;
pub const MAX_HIDDEN_UNITS: usize = 64;
/// Floor applied to target probabilities inside logarithms.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    TabularSoftmax,
    Feedforward,
}

/// Dense layer, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub(crate) inputs: usize,
    pub(crate) outputs: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Body {
    Tabular {
        logits: Vec<Vec<f64>>,
        embedding: ObservationEmbedding,
    },
    /// Hidden layers use tanh, the last layer emits logits.
    Feedforward { layers: Vec<Dense> },
}

/// Map from observation to a distribution over discrete actions,
/// `softmax(logits / temperature)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub(crate) body: Body,
    pub(crate) temperature: f64,
    pub(crate) deceptive: bool,
}

/// Scalar losses of `p = π(·|x)` whose input gradient the attacks consume.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// `KL(p ‖ target)`.
    KlToTarget(Vec<f64>),
    /// `KL(target ‖ p)`, i.e. cross-entropy to `target` up to a constant.
    KlFromTarget(Vec<f64>),
    /// `-ln p[a]`.
    NegLogProbOfAction(usize),
    /// `H(p) = -Σ p ln p`.
    Entropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub grad_wrt_observation: Vec<f64>,
    /// Flat, layer by layer: weights row-major then bias.
    pub grad_wrt_parameters: Vec<f64>,
}

pub(crate) fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|u| (u - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|u| u - lse).collect()
}

pub(crate) fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let logp = log_softmax(logits, temperature);
    let mut p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let total: f64 = p.iter().sum();
    for x in &mut p {
        *x /= total;
    }
    p
}

/// `KL(p ‖ q)` with `q` floored inside the logarithm.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(LOG_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Loss value and its derivative with respect to the scaled logits `u = z / T`.
fn loss_and_logit_grad(logp: &[f64], loss: &Loss) -> Result<(f64, Vec<f64>)> {
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let n = p.len();
    let check = |t: &[f64]| -> Result<()> {
        if t.len() != n {
            return Err(Error::Validation(format!(
                "target has {} entries, policy has {n} actions",
                t.len()
            )));
        }
        Ok(())
    };
    Ok(match loss {
        Loss::KlToTarget(q) => {
            check(q)?;
            let logq: Vec<f64> = q.iter().map(|x| x.max(LOG_FLOOR).ln()).collect();
            let value: f64 = (0..n).map(|j| p[j] * (logp[j] - logq[j])).sum();
            let grad = (0..n).map(|j| p[j] * (logp[j] - logq[j] - value)).collect();
            (value, grad)
        }
        Loss::KlFromTarget(q) => {
            check(q)?;
            let value: f64 = (0..n)
                .filter(|&j| q[j] > 0.0)
                .map(|j| q[j] * (q[j].ln() - logp[j]))
                .sum();
            let grad = (0..n).map(|j| p[j] - q[j]).collect();
            (value, grad)
        }
        Loss::NegLogProbOfAction(a) => {
            if *a >= n {
                return Err(Error::Validation(format!("action {a} out of range for {n} actions")));
            }
            let grad = (0..n).map(|j| p[j] - if j == *a { 1.0 } else { 0.0 }).collect();
            (-logp[*a], grad)
        }
        Loss::Entropy => {
            let h: f64 = -(0..n).map(|j| p[j] * logp[j]).sum::<f64>();
            let grad = (0..n).map(|j| -p[j] * (logp[j] + h)).collect();
            (h, grad)
        }
    })
}

impl Dense {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

impl Policy {
    pub fn tabular(logits: Vec<Vec<f64>>, embedding: ObservationEmbedding, temperature: f64) -> Result<Self> {
        if logits.len() != embedding.num_states() {
            return Err(Error::Validation(format!(
                "{} logit rows for {} embedded states",
                logits.len(),
                embedding.num_states()
            )));
        }
        let na = logits.first().map_or(0, Vec::len);
        if na == 0 || logits.iter().any(|r| r.len() != na) {
            return Err(Error::Validation("ragged or empty logit table".into()));
        }
        check_temperature(temperature)?;
        Ok(Policy {
            body: Body::Tabular { logits, embedding },
            temperature,
            deceptive: false,
        })
    }

    /// Near-deterministic tabular policy: logit `sharpness` on the chosen action, 0 elsewhere.
    pub fn tabular_greedy(
        actions: &[usize],
        num_actions: usize,
        embedding: ObservationEmbedding,
        sharpness: f64,
    ) -> Result<Self> {
        let logits = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; num_actions];
                row[a] = sharpness;
                row
            })
            .collect();
        Self::tabular(logits, embedding, 1.0)
    }

    /// Tanh MLP with Glorot-uniform weights and zero biases.
    pub fn feedforward(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        check_architecture(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let limit = (6.0 / (i + o) as f64).sqrt();
                Dense {
                    inputs: i,
                    outputs: o,
                    weights: (0..i * o).map(|_| rng.gen_range(-limit..limit)).collect(),
                    bias: vec![0.0; o],
                }
            })
            .collect();
        Ok(Policy {
            body: Body::Feedforward { layers },
            temperature: 1.0,
            deceptive: false,
        })
    }

    pub fn feedforward_from_parameters(layer_sizes: &[usize], parameters: &[f64], temperature: f64) -> Result<Self> {
        check_architecture(layer_sizes)?;
        check_temperature(temperature)?;
        let expected: usize = layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if parameters.len() != expected {
            return Err(Error::Validation(format!(
                "architecture {layer_sizes:?} needs {expected} parameters, got {}",
                parameters.len()
            )));
        }
        let mut offset = 0;
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let weights = parameters[offset..offset + i * o].to_vec();
                offset += i * o;
                let bias = parameters[offset..offset + o].to_vec();
                offset += o;
                Dense { inputs: i, outputs: o, weights, bias }
            })
            .collect();
        Ok(Policy {
            body: Body::Feedforward { layers },
            temperature,
            deceptive: false,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self.body {
            Body::Tabular { .. } => PolicyKind::TabularSoftmax,
            Body::Feedforward { .. } => PolicyKind::Feedforward,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        self.temperature = temperature;
        Ok(self)
    }

    pub fn is_deceptive(&self) -> bool {
        self.deceptive
    }

    pub fn mark_deceptive(mut self) -> Self {
        self.deceptive = true;
        self
    }

    pub fn num_actions(&self) -> usize {
        match &self.body {
            Body::Tabular { logits, .. } => logits[0].len(),
            Body::Feedforward { layers } => layers.last().map_or(0, |l| l.outputs),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.body {
            Body::Tabular { embedding, .. } => embedding.dim(),
            Body::Feedforward { layers } => layers[0].inputs,
        }
    }

    pub fn layer_sizes(&self) -> Option<Vec<usize>> {
        match &self.body {
            Body::Tabular { .. } => None,
            Body::Feedforward { layers } => {
                let mut sizes = vec![layers[0].inputs];
                sizes.extend(layers.iter().map(|l| l.outputs));
                Some(sizes)
            }
        }
    }

    /// Flat parameter vector (logit table row-major, or layer weights then bias).
    pub fn parameters(&self) -> Vec<f64> {
        match &self.body {
            Body::Tabular { logits, .. } => logits.iter().flatten().copied().collect(),
            Body::Feedforward { layers } => layers
                .iter()
                .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
                .collect(),
        }
    }

    pub(crate) fn set_parameters(&mut self, params: &[f64]) {
        match &mut self.body {
            Body::Tabular { logits, .. } => {
                let na = logits[0].len();
                for (s, row) in logits.iter_mut().enumerate() {
                    row.copy_from_slice(&params[s * na..(s + 1) * na]);
                }
            }
            Body::Feedforward { layers } => {
                let mut offset = 0;
                for l in layers {
                    let nw = l.weights.len();
                    l.weights.copy_from_slice(&params[offset..offset + nw]);
                    offset += nw;
                    let nb = l.bias.len();
                    l.bias.copy_from_slice(&params[offset..offset + nb]);
                    offset += nb;
                }
            }
        }
    }

    fn check_obs(&self, observation: &[f64]) -> Result<()> {
        if observation.len() != self.input_dim() {
            return Err(Error::Validation(format!(
                "observation has dimension {}, policy expects {}",
                observation.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Raw logits before temperature scaling.
    pub fn logits(&self, observation: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(observation)?;
        Ok(match &self.body {
            Body::Tabular { logits, embedding } => logits[embedding.decode_nearest(observation)].clone(),
            Body::Feedforward { layers } => {
                let mut x = observation.to_vec();
                for (i, l) in layers.iter().enumerate() {
                    x = l.forward(&x);
                    if i + 1 < layers.len() {
                        x.iter_mut().for_each(|v| *v = v.tanh());
                    }
                }
                x
            }
        })
    }

    pub fn act_probs(&self, observation: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(observation)?, self.temperature))
    }

    /// Tabular row for state `s`; only defined for tabular policies.
    pub fn state_probs(&self, s: usize) -> Option<Vec<f64>> {
        match &self.body {
            Body::Tabular { logits, .. } => logits.get(s).map(|row| softmax(row, self.temperature)),
            Body::Feedforward { .. } => None,
        }
    }

    pub fn loss(&self, observation: &[f64], loss: &Loss) -> Result<f64> {
        let logp = log_softmax(&self.logits(observation)?, self.temperature);
        Ok(loss_and_logit_grad(&logp, loss)?.0)
    }

    /// Loss value with gradients w.r.t. the observation and the parameters.
    pub fn input_gradient(&self, observation: &[f64], loss: &Loss) -> Result<GradientBundle> {
        self.check_obs(observation)?;
        let layers = match &self.body {
            Body::Tabular { .. } => {
                return Err(Error::Unsupported(
                    "tabular policies are not differentiable in the observation".into(),
                ))
            }
            Body::Feedforward { layers } => layers,
        };
        // forward, keeping post-activation outputs of every layer
        let mut activations = vec![observation.to_vec()];
        for (i, l) in layers.iter().enumerate() {
            let mut x = l.forward(activations.last().unwrap());
            if i + 1 < layers.len() {
                x.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(x);
        }
        let logits = activations.last().unwrap();
        let logp = log_softmax(logits, self.temperature);
        let (value, dl_du) = loss_and_logit_grad(&logp, loss)?;

        let mut delta: Vec<f64> = dl_du.iter().map(|g| g / self.temperature).collect();
        let mut param_grads: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
        for (i, l) in layers.iter().enumerate().rev() {
            let input = &activations[i];
            let mut g = Vec::with_capacity(l.weights.len() + l.bias.len());
            for o in 0..l.outputs {
                g.extend(input.iter().map(|x| delta[o] * x));
            }
            g.extend_from_slice(&delta);
            param_grads[i] = g;

            let mut back = vec![0.0; l.inputs];
            for o in 0..l.outputs {
                let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                for (b, w) in back.iter_mut().zip(row) {
                    *b += w * delta[o];
                }
            }
            if i > 0 {
                // input of layer i is tanh output of layer i-1
                for (b, a) in back.iter_mut().zip(input) {
                    *b *= 1.0 - a * a;
                }
            }
            delta = back;
        }
        let bundle = GradientBundle {
            loss: value,
            grad_wrt_observation: delta,
            grad_wrt_parameters: param_grads.concat(),
        };
        if !bundle.loss.is_finite()
            || bundle.grad_wrt_observation.iter().any(|g| !g.is_finite())
            || bundle.grad_wrt_parameters.iter().any(|g| !g.is_finite())
        {
            return Err(Error::Numeric("non-finite loss or gradient".into()));
        }
        Ok(bundle)
    }

    /// `π(·|encode(s))` for every state.
    pub fn induced_table(&self, embedding: &ObservationEmbedding) -> Result<ActionProbs> {
        (0..embedding.num_states())
            .map(|s| self.act_probs(embedding.encode(s)))
            .collect()
    }

    /// Most probable action, ties to the lowest index.
    pub fn greedy_action(&self, observation: &[f64]) -> Result<usize> {
        let p = self.act_probs(observation)?;
        Ok(crate::mdp::argmax_lowest(&p, 0.0))
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Validation(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_architecture(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|&n| n == 0) {
        return Err(Error::Validation(format!("bad layer sizes {sizes:?}")));
    }
    let hidden = &sizes[1..sizes.len() - 1];
    if hidden.len() > MAX_HIDDEN_LAYERS || hidden.iter().any(|&h| h > MAX_HIDDEN_UNITS) {
        return Err(Error::Validation(format!(
            "at most {MAX_HIDDEN_LAYERS} hidden layers of {MAX_HIDDEN_UNITS} units, got {sizes:?}"
        )));
    }
    Ok(())
}
