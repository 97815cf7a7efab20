//! JSON checkpoints: every parameter tensor by name, the prototype bank, and
//! the step counters. Values round-trip bit-for-bit at `f64` precision
//! (serialization uses shortest-round-trip decimal formatting).

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::model::{NetworkEnsemble, PrototypeBank};
use crate::tensor::Tensor;
use crate::trainer::TrainState;

pub const FORMAT: &str = "dtr-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown checkpoint format {found:?}, expected {expected:?}")]
    Format { found: String, expected: &'static str },
    #[error("checkpoint entry {name}: shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint is missing entry {name}")]
    MissingEntry { name: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    fn of(t: &Tensor) -> TensorRecord {
        TensorRecord { shape: t.shape().to_vec(), values: t.to_vec() }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    pub last_refresh_step: u64,
    /// Parameter name -> tensor, e.g. `extractor.layer1.weight`.
    pub params: BTreeMap<String, TensorRecord>,
    /// Prototype bank tensors by name.
    pub bank: BTreeMap<String, TensorRecord>,
}

const BANK_KEYS: [&str; 5] = [
    "class_prototypes",
    "source_domain_prototype",
    "target_domain_prototype",
    "source_prototypes",
    "target_prototypes",
];

fn bank_tensors(bank: &PrototypeBank) -> [(&'static str, &Tensor); 5] {
    [
        ("class_prototypes", &bank.class_prototypes),
        ("source_domain_prototype", &bank.source_domain_prototype),
        ("target_domain_prototype", &bank.target_domain_prototype),
        ("source_prototypes", &bank.source_prototypes),
        ("target_prototypes", &bank.target_prototypes),
    ]
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Checkpoint {
        Checkpoint::from_parts(&state.ensemble, &state.bank, state.step)
    }

    pub fn from_parts(ens: &NetworkEnsemble, bank: &PrototypeBank, step: u64) -> Checkpoint {
        let params = ens
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, TensorRecord::of(t)))
            .collect();
        let bank_map =
            bank_tensors(bank).into_iter().map(|(k, t)| (k.to_string(), TensorRecord::of(t))).collect();
        Checkpoint {
            format: FORMAT.to_string(),
            step,
            last_refresh_step: bank.last_refresh_step,
            params,
            bank: bank_map,
        }
    }

    /// Loads this checkpoint's values into an ensemble and bank built with
    /// matching dimensions.
    pub fn apply(&self, ens: &NetworkEnsemble, bank: &mut PrototypeBank) -> Result<()> {
        if self.format != FORMAT {
            return Err(CheckpointError::Format { found: self.format.clone(), expected: FORMAT });
        }
        for (name, tensor) in ens.named_tensors() {
            let record = self
                .params
                .get(&name)
                .ok_or_else(|| CheckpointError::MissingEntry { name: name.clone() })?;
            if record.shape != tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    found: record.shape.clone(),
                    expected: tensor.shape().to_vec(),
                });
            }
            tensor.set_values(&record.values);
        }
        for key in BANK_KEYS {
            let record = self
                .bank
                .get(key)
                .ok_or_else(|| CheckpointError::MissingEntry { name: format!("bank.{key}") })?;
            let replacement = Tensor::constant(record.shape.clone(), record.values.clone())
                .map_err(|_| CheckpointError::ShapeMismatch {
                    name: format!("bank.{key}"),
                    found: record.shape.clone(),
                    expected: vec![],
                })?;
            match key {
                "class_prototypes" => bank.class_prototypes = replacement,
                "source_domain_prototype" => bank.source_domain_prototype = replacement,
                "target_domain_prototype" => bank.target_domain_prototype = replacement,
                "source_prototypes" => bank.source_prototypes = replacement,
                "target_prototypes" => bank.target_prototypes = replacement,
                _ => unreachable!(),
            }
        }
        bank.last_refresh_step = self.last_refresh_step;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|source| CheckpointError::Json { path: path.display().to_string(), source })?;
        std::fs::write(path, text)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text)
            .map_err(|source| CheckpointError::Json { path: path.display().to_string(), source })
    }
}
