//! Synthetic domain-shift tasks, digit-subset loading, and batching.
//!
//! Datasets are immutable and generated as a pure function of their spec and
//! seed. Target datasets carry their true labels in a sealed store that only
//! evaluation code opens; batches handed to the trainer never include target
//! labels.

pub mod idx;

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset {name} is empty")]
    EmptyDataset { name: String },
    #[error("need at least {need} samples per domain, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("shift spec is degenerate: {reason}")]
    DegenerateSpec { reason: String },
    #[error("{path}: bad magic at offset {offset}: found {found:#010x}, expected {expected:#010x}")]
    IdxMagic { path: String, offset: u64, found: u32, expected: u32 },
    #[error("{path}: truncated at offset {offset}")]
    IdxTruncated { path: String, offset: u64 },
    #[error("image count {images} does not match label count {labels}")]
    IdxCountMismatch { images: usize, labels: usize },
    #[error("class {class} has {have} samples, need {need}")]
    InsufficientClassSamples { class: usize, have: usize, need: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

/// Labels reserved for evaluation. The inner vector is private; the only way
/// out is through [`SealedLabels::open_for_evaluation`], which keeps casual
/// training-path code from touching target labels.
#[derive(Debug, Clone)]
pub struct SealedLabels(Vec<usize>);

impl SealedLabels {
    pub fn open_for_evaluation(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone)]
enum LabelStore {
    Visible(Vec<usize>),
    Sealed(SealedLabels),
    Absent,
}

/// A fixed design matrix with optional labels and a domain tag.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub name: String,
    pub domain: DomainTag,
    pub input_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    features: Vec<f64>,
    n: usize,
    labels: LabelStore,
}

/// One sampled mini-batch. Labels are present only for source-role datasets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub labels: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn from_parts(
        name: impl Into<String>,
        domain: DomainTag,
        input_dim: usize,
        num_classes: usize,
        seed: u64,
        features: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Self {
        assert_eq!(features.len() % input_dim.max(1), 0, "ragged feature matrix");
        let n = if input_dim == 0 { 0 } else { features.len() / input_dim };
        if let Some(l) = &labels {
            assert_eq!(l.len(), n, "label count must match row count");
        }
        let labels = match (labels, domain) {
            (Some(l), DomainTag::Source) => LabelStore::Visible(l),
            (Some(l), DomainTag::Target) => LabelStore::Sealed(SealedLabels(l)),
            (None, _) => LabelStore::Absent,
        };
        LabeledDataset { name: name.into(), domain, input_dim, num_classes, seed, features, n, labels }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Training-visible labels: present only on source-role datasets.
    pub fn labels(&self) -> Option<&[usize]> {
        match &self.labels {
            LabelStore::Visible(l) => Some(l),
            _ => None,
        }
    }

    /// Labels for evaluation, opening the sealed store when present.
    pub fn eval_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            LabelStore::Visible(l) => Some(l),
            LabelStore::Sealed(s) => Some(s.open_for_evaluation()),
            LabelStore::Absent => None,
        }
    }

    /// Re-tags a dataset for the target role, sealing any labels it carries.
    pub fn into_target_sealed(self) -> LabeledDataset {
        let labels = match self.labels {
            LabelStore::Visible(l) => LabelStore::Sealed(SealedLabels(l)),
            other => other,
        };
        LabeledDataset { domain: DomainTag::Target, labels, ..self }
    }

    /// Uniform sample of `size` rows with replacement. Labels ride along only
    /// when this dataset plays the source role.
    pub fn sample_batch(&self, size: usize, rng: &mut Rng) -> Result<Batch> {
        if self.n == 0 {
            return Err(DataError::EmptyDataset { name: self.name.clone() });
        }
        assert!(size >= 1, "batch size must be at least 1");
        let mut features = Vec::with_capacity(size * self.input_dim);
        let mut labels = match &self.labels {
            LabelStore::Visible(_) => Some(Vec::with_capacity(size)),
            _ => None,
        };
        for _ in 0..size {
            let i = rng.index(self.n);
            features.extend_from_slice(self.feature_row(i));
            if let (Some(out), LabelStore::Visible(l)) = (&mut labels, &self.labels) {
                out.push(l[i]);
            }
        }
        Ok(Batch { features, rows: size, cols: self.input_dim, labels })
    }

    /// Writes `x0..x{d-1},label,domain` rows; labels use the evaluation view
    /// (this is an export for plotting, not a training input).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |source| DataError::Io { path: path.display().to_string(), source };
        let mut f = std::fs::File::create(path).map_err(io_err)?;
        let mut header: Vec<String> = (0..self.input_dim).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        header.push("domain".into());
        writeln!(f, "{}", header.join(",")).map_err(io_err)?;
        let labels = self.eval_labels();
        for i in 0..self.n {
            let mut fields: Vec<String> =
                self.feature_row(i).iter().map(|v| format!("{v}")).collect();
            fields.push(labels.map_or(String::new(), |l| l[i].to_string()));
            fields.push(self.domain.as_str().to_string());
            writeln!(f, "{}", fields.join(",")).map_err(io_err)?;
        }
        Ok(())
    }
}

/// Base distribution for the synthetic tasks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaseDistribution {
    /// Equal-weight Gaussian mixture with one component per class and a
    /// shared isotropic covariance scale.
    GaussianMixture { means: Vec<Vec<f64>>, cov_scale: f64 },
    /// Two interleaved half-circles (two classes, two dimensions).
    TwoMoons { noise: f64 },
}

/// Domain-shift description: a base distribution plus the transform applied
/// to target draws. The identity transform makes both domains equal in law.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShiftSpec {
    pub base: BaseDistribution,
    /// Rotation of the first two axes, degrees.
    pub rotation_deg: f64,
    /// Added after rotation and scaling; empty means zero.
    #[serde(default)]
    pub translation: Vec<f64>,
    /// Per-axis scale applied before translation; empty means all ones.
    #[serde(default)]
    pub axis_scale: Vec<f64>,
    /// Probability that a sample's label is resampled uniformly from the
    /// other classes (label-conditional noise).
    #[serde(default)]
    pub label_noise: f64,
}

/// Class means on a circle of `radius` in the first two of `input_dim`
/// dimensions, class 0 pointing along +x.
pub fn ring_means(num_classes: usize, radius: f64, input_dim: usize) -> Vec<Vec<f64>> {
    assert!(input_dim >= 2, "ring means need at least two dimensions");
    (0..num_classes)
        .map(|c| {
            let angle = std::f64::consts::TAU * c as f64 / num_classes as f64;
            let mut m = vec![0.0; input_dim];
            m[0] = radius * angle.cos();
            m[1] = radius * angle.sin();
            m
        })
        .collect()
}

impl ShiftSpec {
    /// The standard synthetic benchmark: three Gaussian classes on a ring in
    /// the first two of four dimensions, with the target rotated by 45
    /// degrees in the class plane and offset in the remaining two dimensions
    /// (a purely domain-specific shift).
    pub fn standard() -> ShiftSpec {
        ShiftSpec {
            base: BaseDistribution::GaussianMixture {
                means: ring_means(3, 2.0, 4),
                cov_scale: 0.55,
            },
            rotation_deg: 45.0,
            translation: vec![0.0, 0.0, 1.8, 1.2],
            axis_scale: vec![],
            label_noise: 0.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.base {
            BaseDistribution::GaussianMixture { means, .. } => means.len(),
            BaseDistribution::TwoMoons { .. } => 2,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.base {
            BaseDistribution::GaussianMixture { means, .. } => {
                means.first().map_or(0, Vec::len)
            }
            BaseDistribution::TwoMoons { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.base {
            BaseDistribution::GaussianMixture { means, cov_scale } => {
                if means.len() < 2 {
                    return Err(DataError::DegenerateSpec {
                        reason: "mixture needs at least two classes".into(),
                    });
                }
                if !(*cov_scale > 0.0) {
                    return Err(DataError::DegenerateSpec {
                        reason: format!("cov_scale must be positive, got {cov_scale}"),
                    });
                }
                let d = means[0].len();
                if d < 2 || means.iter().any(|m| m.len() != d) {
                    return Err(DataError::DegenerateSpec {
                        reason: "means must share a dimension of at least 2".into(),
                    });
                }
            }
            BaseDistribution::TwoMoons { noise } => {
                if !(*noise >= 0.0) {
                    return Err(DataError::DegenerateSpec {
                        reason: format!("noise must be nonnegative, got {noise}"),
                    });
                }
            }
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(DataError::DegenerateSpec {
                reason: format!("label_noise must be in [0, 1], got {}", self.label_noise),
            });
        }
        let d = self.input_dim();
        if !self.translation.is_empty() && self.translation.len() != d {
            return Err(DataError::DegenerateSpec {
                reason: format!("translation has {} entries for {d} dims", self.translation.len()),
            });
        }
        if !self.axis_scale.is_empty() && self.axis_scale.len() != d {
            return Err(DataError::DegenerateSpec {
                reason: format!("axis_scale has {} entries for {d} dims", self.axis_scale.len()),
            });
        }
        Ok(())
    }

    fn draw_base(&self, rng: &mut Rng) -> (Vec<f64>, usize) {
        match &self.base {
            BaseDistribution::GaussianMixture { means, cov_scale } => {
                let class = rng.index(means.len());
                let x = means[class]
                    .iter()
                    .map(|m| m + cov_scale * rng.normal())
                    .collect();
                (x, class)
            }
            BaseDistribution::TwoMoons { noise } => {
                let class = rng.index(2);
                let t = rng.uniform(0.0, std::f64::consts::PI);
                let (mut x, mut y) = (t.cos(), t.sin());
                if class == 1 {
                    x = 1.0 - x;
                    y = 0.5 - y;
                }
                (vec![x + noise * rng.normal(), y + noise * rng.normal()], class)
            }
        }
    }

    fn apply_label_noise(&self, label: usize, rng: &mut Rng) -> usize {
        let k = self.num_classes();
        if self.label_noise > 0.0 && rng.next_f64() < self.label_noise {
            let other = rng.index(k - 1);
            if other >= label {
                other + 1
            } else {
                other
            }
        } else {
            label
        }
    }

    fn transform(&self, x: &mut [f64]) {
        let theta = self.rotation_deg.to_radians();
        if theta != 0.0 && x.len() >= 2 {
            let (s, c) = theta.sin_cos();
            let (x0, x1) = (x[0], x[1]);
            x[0] = c * x0 - s * x1;
            x[1] = s * x0 + c * x1;
        }
        if !self.axis_scale.is_empty() {
            for (v, s) in x.iter_mut().zip(&self.axis_scale) {
                *v *= s;
            }
        }
        if !self.translation.is_empty() {
            for (v, t) in x.iter_mut().zip(&self.translation) {
                *v += t;
            }
        }
    }
}

/// Generates the paired source and target datasets for `spec`. Source labels
/// stay visible; target labels are sealed for evaluation only. Both feature
/// matrices are standardized with the source mean and deviation.
pub fn make_gaussian_shift(
    spec: &ShiftSpec,
    n_source: usize,
    n_target: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let k = spec.num_classes();
    if n_source < k || n_target < k {
        return Err(DataError::TooFewSamples { need: k, got: n_source.min(n_target) });
    }
    let d = spec.input_dim();

    let draw_domain = |label: &str, n: usize, shifted: bool| {
        let mut rng = Rng::seeded(seed, label);
        // Label noise draws from its own stream so toggling it never shifts
        // the feature draws.
        let mut noise_rng = Rng::seeded(seed, &format!("{label}/label_noise"));
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (mut x, class) = spec.draw_base(&mut rng);
            if shifted {
                spec.transform(&mut x);
            }
            features.extend_from_slice(&x);
            labels.push(spec.apply_label_noise(class, &mut noise_rng));
        }
        (features, labels)
    };

    let (mut src_feats, src_labels) = draw_domain("datagen/source", n_source, false);
    let (mut tgt_feats, tgt_labels) = draw_domain("datagen/target", n_target, true);

    standardize_with_source_stats(&mut src_feats, &mut tgt_feats, d);

    let source = LabeledDataset::from_parts(
        "synthetic-source",
        DomainTag::Source,
        d,
        k,
        seed,
        src_feats,
        Some(src_labels),
    );
    let target = LabeledDataset::from_parts(
        "synthetic-target",
        DomainTag::Target,
        d,
        k,
        seed,
        tgt_feats,
        Some(tgt_labels),
    );
    Ok((source, target))
}

/// Zero-mean, unit-variance scaling per axis, with statistics taken from the
/// source matrix and applied to both domains.
pub fn standardize_with_source_stats(source: &mut [f64], target: &mut [f64], dim: usize) {
    if dim == 0 || source.is_empty() {
        return;
    }
    let n = source.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in source.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; dim];
    for row in source.chunks_exact(dim) {
        for j in 0..dim {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt().max(1e-8)).collect();
    for row in source.chunks_exact_mut(dim) {
        for j in 0..dim {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    for row in target.chunks_exact_mut(dim) {
        for j in 0..dim {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
}
