use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Body, Policy, PolicyKind};
use crate::envs::ObservationEmbedding;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "obsattack-policy/v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    kind: PolicyKind,
    temperature: f64,
    #[serde(default)]
    deceptive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_states: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_actions: Option<usize>,
    parameters: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<ObservationEmbedding>,
}

impl Policy {
    pub fn to_checkpoint_string(&self) -> String {
        let file = match &self.body {
            Body::Tabular { logits, embedding } => CheckpointFile {
                format: CHECKPOINT_FORMAT.into(),
                kind: PolicyKind::TabularSoftmax,
                temperature: self.temperature,
                deceptive: self.deceptive,
                layer_sizes: None,
                activation: None,
                num_states: Some(logits.len()),
                num_actions: Some(self.num_actions()),
                parameters: self.parameters(),
                embedding: Some(embedding.clone()),
            },
            Body::Feedforward { .. } => CheckpointFile {
                format: CHECKPOINT_FORMAT.into(),
                kind: PolicyKind::Feedforward,
                temperature: self.temperature,
                deceptive: self.deceptive,
                layer_sizes: self.layer_sizes(),
                activation: Some("tanh".into()),
                num_states: None,
                num_actions: None,
                parameters: self.parameters(),
                embedding: None,
            },
        };
        toml::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let parse = |message: String| Error::Parse {
            path: "<checkpoint>".into(),
            message,
        };
        let file: CheckpointFile = toml::from_str(text).map_err(|e| parse(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(parse(format!(
                "unsupported format tag `{}` (expected `{CHECKPOINT_FORMAT}`)",
                file.format
            )));
        }
        let policy = match file.kind {
            PolicyKind::Feedforward => {
                if file.activation.as_deref().unwrap_or("tanh") != "tanh" {
                    return Err(parse("only tanh activations are supported".into()));
                }
                let sizes = file
                    .layer_sizes
                    .ok_or_else(|| parse("feedforward checkpoint without layer_sizes".into()))?;
                Policy::feedforward_from_parameters(&sizes, &file.parameters, file.temperature)?
            }
            PolicyKind::TabularSoftmax => {
                let (ns, na) = match (file.num_states, file.num_actions) {
                    (Some(ns), Some(na)) => (ns, na),
                    _ => return Err(parse("tabular checkpoint needs num_states and num_actions".into())),
                };
                if file.parameters.len() != ns * na {
                    return Err(parse(format!(
                        "expected {} parameters, found {}",
                        ns * na,
                        file.parameters.len()
                    )));
                }
                let embedding = file
                    .embedding
                    .ok_or_else(|| parse("tabular checkpoint without embedding".into()))?;
                let logits = file.parameters.chunks(na).map(<[f64]>::to_vec).collect();
                Policy::tabular(logits, embedding, file.temperature)?
            }
        };
        Ok(if file.deceptive { policy.mark_deceptive() } else { policy })
    }
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    fs::write(path, policy.to_checkpoint_string()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Policy::from_checkpoint_str(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedforward_round_trip_is_exact() {
        let p = Policy::feedforward(&[2, 6, 4], 11).unwrap().mark_deceptive();
        let text = p.to_checkpoint_string();
        assert!(text.contains(CHECKPOINT_FORMAT));
        let back = Policy::from_checkpoint_str(&text).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn tabular_round_trip_is_exact() {
        let emb = ObservationEmbedding::one_hot(3);
        let p = Policy::tabular(vec![vec![0.1, -2.5], vec![1.0 / 3.0, 0.0], vec![7.0, 1e-9]], emb, 0.3)
            .unwrap();
        assert_eq!(Policy::from_checkpoint_str(&p.to_checkpoint_string()).unwrap(), p);
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let text = Policy::feedforward(&[2, 3, 2], 0)
            .unwrap()
            .to_checkpoint_string()
            .replace(CHECKPOINT_FORMAT, "obsattack-policy/v0");
        assert!(Policy::from_checkpoint_str(&text).is_err());
    }
}
