//! Config file schema, dotted-key overrides, and validation.
//!
//! A config file is a single JSON object holding the training fields at the
//! top level plus an optional `data` object describing the task. `{}` is a
//! complete config: every field has a default. Overrides are dotted paths
//! (`optimizer.momentum=0.8`, `data.rotation_deg=60`), applied to the JSON
//! before deserialization so unknown keys are rejected by the same schema
//! check as the file itself.

use std::path::{Path, PathBuf};

use dtr_core::datagen::{
    make_gaussian_shift, ring_means, BaseDistribution, DataError, LabeledDataset, ShiftSpec,
};
use dtr_core::datagen::idx::load_idx_subset;
use dtr_core::trainer::TrainConfig;

use crate::CliError;

mod data_defaults {
    pub fn k() -> usize {
        3
    }
    pub fn input_dim() -> usize {
        4
    }
    pub fn radius() -> f64 {
        2.0
    }
    pub fn cov_scale() -> f64 {
        0.55
    }
    pub fn rotation_deg() -> f64 {
        45.0
    }
    pub fn translation() -> Vec<f64> {
        vec![0.0, 0.0, 1.8, 1.2]
    }
    pub fn n_source() -> usize {
        600
    }
    pub fn n_target() -> usize {
        600
    }
    pub fn noise() -> f64 {
        0.1
    }
    pub fn per_class() -> usize {
        500
    }
    pub fn resize_to() -> usize {
        16
    }
}

/// Task description; `gaussian_shift` with no overrides is the standard
/// synthetic benchmark.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    GaussianShift {
        #[serde(default = "data_defaults::k")]
        k: usize,
        #[serde(default = "data_defaults::input_dim")]
        input_dim: usize,
        #[serde(default = "data_defaults::radius")]
        radius: f64,
        #[serde(default = "data_defaults::cov_scale")]
        cov_scale: f64,
        #[serde(default = "data_defaults::rotation_deg")]
        rotation_deg: f64,
        #[serde(default = "data_defaults::translation")]
        translation: Vec<f64>,
        #[serde(default)]
        axis_scale: Vec<f64>,
        #[serde(default)]
        label_noise: f64,
        /// Explicit mixture means; omits the ring construction when given.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        means: Option<Vec<Vec<f64>>>,
        #[serde(default = "data_defaults::n_source")]
        n_source: usize,
        #[serde(default = "data_defaults::n_target")]
        n_target: usize,
        /// Dataset seed; derived from the run seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    TwoMoons {
        #[serde(default = "data_defaults::noise")]
        noise: f64,
        #[serde(default)]
        rotation_deg: f64,
        #[serde(default)]
        translation: Vec<f64>,
        #[serde(default)]
        axis_scale: Vec<f64>,
        #[serde(default)]
        label_noise: f64,
        #[serde(default = "data_defaults::n_source")]
        n_source: usize,
        #[serde(default = "data_defaults::n_target")]
        n_target: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Digits {
        source_images: PathBuf,
        source_labels: PathBuf,
        target_images: PathBuf,
        target_labels: PathBuf,
        #[serde(default = "data_defaults::per_class")]
        per_class: usize,
        #[serde(default = "data_defaults::resize_to")]
        resize_to: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        serde_json::from_value(serde_json::json!({ "task": "gaussian_shift" }))
            .expect("default data spec is valid")
    }
}

impl DataSpec {
    pub fn shift_spec(&self) -> Option<ShiftSpec> {
        match self {
            DataSpec::GaussianShift {
                k,
                input_dim,
                radius,
                cov_scale,
                rotation_deg,
                translation,
                axis_scale,
                label_noise,
                means,
                ..
            } => Some(ShiftSpec {
                base: BaseDistribution::GaussianMixture {
                    means: means.clone().unwrap_or_else(|| ring_means(*k, *radius, *input_dim)),
                    cov_scale: *cov_scale,
                },
                rotation_deg: *rotation_deg,
                translation: translation.clone(),
                axis_scale: axis_scale.clone(),
                label_noise: *label_noise,
            }),
            DataSpec::TwoMoons {
                noise,
                rotation_deg,
                translation,
                axis_scale,
                label_noise,
                ..
            } => Some(ShiftSpec {
                base: BaseDistribution::TwoMoons { noise: *noise },
                rotation_deg: *rotation_deg,
                translation: translation.clone(),
                axis_scale: axis_scale.clone(),
                label_noise: *label_noise,
            }),
            DataSpec::Digits { .. } => None,
        }
    }

    /// Builds the source/target pair for the given run seed. Synthetic tasks
    /// regenerate deterministically; the digit task loads IDX subsets.
    pub fn build(&self, run_seed: u64) -> Result<(LabeledDataset, LabeledDataset), DataError> {
        match self {
            DataSpec::GaussianShift { n_source, n_target, seed, .. }
            | DataSpec::TwoMoons { n_source, n_target, seed, .. } => {
                let spec = self.shift_spec().expect("synthetic task has a shift spec");
                make_gaussian_shift(&spec, *n_source, *n_target, seed.unwrap_or(run_seed))
            }
            DataSpec::Digits {
                source_images,
                source_labels,
                target_images,
                target_labels,
                per_class,
                resize_to,
                seed,
            } => {
                let data_seed = seed.unwrap_or(run_seed);
                let mut source =
                    load_idx_subset(source_images, source_labels, *per_class, *resize_to, data_seed)?;
                let target =
                    load_idx_subset(target_images, target_labels, *per_class, *resize_to, data_seed)?
                        .into_target_sealed();
                // Standardize both domains with source statistics.
                let dim = source.input_dim;
                let mut src_feats = source.features().to_vec();
                let mut tgt_feats = target.features().to_vec();
                dtr_core::datagen::standardize_with_source_stats(&mut src_feats, &mut tgt_feats, dim);
                let src_labels_vec = source.labels().map(<[usize]>::to_vec);
                source = LabeledDataset::from_parts(
                    source.name.clone(),
                    dtr_core::datagen::DomainTag::Source,
                    dim,
                    source.num_classes,
                    data_seed,
                    src_feats,
                    src_labels_vec,
                );
                let tgt_labels_vec = target.eval_labels().map(<[usize]>::to_vec);
                let target = LabeledDataset::from_parts(
                    target.name.clone(),
                    dtr_core::datagen::DomainTag::Target,
                    dim,
                    target.num_classes,
                    data_seed,
                    tgt_feats,
                    tgt_labels_vec,
                );
                Ok((source, target))
            }
        }
    }

    pub fn is_digits(&self) -> bool {
        matches!(self, DataSpec::Digits { .. })
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataSpec,
}

fn config_error(msg: impl std::fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}

/// Parses a JSON scalar for an override value, falling back to a string.
fn parse_override_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn apply_override(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<(), CliError> {
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(config_error(format!("override key `{key}` has an empty segment")));
        }
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| config_error(format!("override key `{key}` descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cursor = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("override keys have at least one segment")
}

/// Loads and validates a config: file (or `{}` when absent), then `--seed`,
/// then `--set` overrides, each later layer winning. Unknown keys anywhere
/// are rejected.
pub fn parse_config(
    path: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| config_error(format!("cannot read {}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    let mut root: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("config is not valid JSON: {e}")))?;
    if !root.is_object() {
        return Err(config_error("config must be a JSON object"));
    }
    if let Some(s) = seed {
        apply_override(&mut root, "seed", serde_json::json!(s))?;
    }
    for entry in overrides {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| config_error(format!("override `{entry}` is not of the form key=value")))?;
        apply_override(&mut root, key.trim(), parse_override_value(raw.trim()))?;
    }

    let dims_given = root.get("dims").is_some();
    let mut data_value = root
        .as_object_mut()
        .expect("checked object above")
        .remove("data")
        .unwrap_or_else(|| serde_json::json!({}));
    if let Some(obj) = data_value.as_object_mut() {
        obj.entry("task").or_insert_with(|| serde_json::json!("gaussian_shift"));
    }
    let data: DataSpec = serde_json::from_value(data_value)
        .map_err(|e| config_error(format!("data spec: {e}")))?;
    let mut train: TrainConfig =
        serde_json::from_value(root).map_err(|e| config_error(format!("{e}")))?;
    // Digit subsets get the wider default stack unless dims were given.
    if data.is_digits() && !dims_given {
        train.dims = dtr_core::trainer::NetDims {
            feature_dim: 128,
            invariant_dim: 64,
            specific_dim: 16,
            hidden: 128,
        };
    }
    train.validate().map_err(|e| config_error(e))?;
    Ok(RunConfig { train, data })
}
