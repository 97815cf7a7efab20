//! The six-network ensemble and its forward dataflow.
//!
//! An input batch runs through the feature extractor, then through the two
//! disentanglers. The class head (bias-free, its rows are the class
//! prototypes) scores the invariant features; the domain head (rows are the
//! two domain prototypes) scores the specific features. The adversarial
//! discriminator consumes either the invariant features directly or their
//! flattened outer product with the class probabilities. The reconstructor
//! maps `(invariant, specific)` back to extractor space, and is reused to
//! turn prototype pairs into the frozen weights of the two original-feature
//! heads.

use crate::nn::{AffineLayer, TwoLayerMlp};
use crate::rng::Rng;
use crate::tensor::{Result, Tensor};

/// What the adversarial discriminator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Flattened outer product of invariant features and class probabilities.
    /// `detach_probs` severs the probabilities from the class head's
    /// gradient path before conditioning.
    Multilinear { detach_probs: bool },
    /// Invariant features alone.
    PlainInvariant,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnsembleDims {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub invariant_dim: usize,
    pub specific_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl EnsembleDims {
    pub fn discriminator_input(&self, conditioning: Conditioning) -> usize {
        match conditioning {
            Conditioning::Multilinear { .. } => self.invariant_dim * self.num_classes,
            Conditioning::PlainInvariant => self.invariant_dim,
        }
    }
}

/// Names for the parameter groups; also the key prefixes in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Extractor,
    InvariantDisentangler,
    SpecificDisentangler,
    ClassHead,
    DomainHead,
    Discriminator,
    Reconstructor,
    SourceProtoHead,
    TargetProtoHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Extractor,
        ParamGroup::InvariantDisentangler,
        ParamGroup::SpecificDisentangler,
        ParamGroup::ClassHead,
        ParamGroup::DomainHead,
        ParamGroup::Discriminator,
        ParamGroup::Reconstructor,
        ParamGroup::SourceProtoHead,
        ParamGroup::TargetProtoHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Extractor => "extractor",
            ParamGroup::InvariantDisentangler => "invariant_disentangler",
            ParamGroup::SpecificDisentangler => "specific_disentangler",
            ParamGroup::ClassHead => "class_head",
            ParamGroup::DomainHead => "domain_head",
            ParamGroup::Discriminator => "discriminator",
            ParamGroup::Reconstructor => "reconstructor",
            ParamGroup::SourceProtoHead => "source_proto_head",
            ParamGroup::TargetProtoHead => "target_proto_head",
        }
    }
}

/// Row index of the source prototype in the domain head (source batches are
/// labeled 1, target batches 0).
pub const SOURCE_DOMAIN_LABEL: usize = 1;
pub const TARGET_DOMAIN_LABEL: usize = 0;

/// Which classifier to read predictions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Class head on invariant features.
    Class,
    /// Frozen source-prototype head on extractor features.
    SourceProto,
    /// Frozen target-prototype head on extractor features.
    TargetProto,
    /// Domain head on specific features (predicts the domain, not the class).
    Domain,
}

pub struct NetworkEnsemble {
    pub dims: EnsembleDims,
    pub conditioning: Conditioning,
    pub extractor: TwoLayerMlp,
    pub invariant_disentangler: TwoLayerMlp,
    pub specific_disentangler: TwoLayerMlp,
    pub class_head: AffineLayer,
    pub domain_head: AffineLayer,
    pub discriminator: TwoLayerMlp,
    pub reconstructor: TwoLayerMlp,
    pub source_proto_head: AffineLayer,
    pub target_proto_head: AffineLayer,
}

/// Everything the losses need from one forward pass over a batch.
pub struct ForwardBundle {
    /// Extractor output, `[n, feature_dim]`.
    pub features: Tensor,
    /// Invariant component, `[n, invariant_dim]`.
    pub invariant: Tensor,
    /// Specific component, `[n, specific_dim]`.
    pub specific: Tensor,
    /// Class-head logits, `[n, num_classes]`.
    pub class_logits: Tensor,
    /// Softmax of the class logits; rows sum to 1.
    pub probs: Tensor,
    /// Domain-head logits, `[n, 2]`.
    pub domain_logits: Tensor,
    /// Discriminator input per the ensemble's conditioning.
    pub conditioned: Tensor,
}

/// Snapshot of the prototype state: the classifier rows it was built from and
/// the reconstructed original-feature prototypes assigned to the frozen heads.
pub struct PrototypeBank {
    /// Class-head weight rows at refresh time, `[num_classes, invariant_dim]`.
    pub class_prototypes: Tensor,
    /// Domain-head row for the source label, `[specific_dim]`.
    pub source_domain_prototype: Tensor,
    /// Domain-head row for the target label, `[specific_dim]`.
    pub target_domain_prototype: Tensor,
    /// Reconstructed source prototypes, `[num_classes, feature_dim]`.
    pub source_prototypes: Tensor,
    /// Reconstructed target prototypes, `[num_classes, feature_dim]`.
    pub target_prototypes: Tensor,
    pub last_refresh_step: u64,
}

impl NetworkEnsemble {
    /// Builds all nine parameter groups from independent named streams of
    /// `seed`, so construction order never shifts initialization.
    pub fn new(dims: EnsembleDims, conditioning: Conditioning, seed: u64) -> Self {
        let stream = |label: &str| Rng::seeded(seed, label);
        NetworkEnsemble {
            extractor: TwoLayerMlp::new(
                dims.input_dim,
                dims.hidden,
                dims.feature_dim,
                &mut stream("init/extractor"),
            ),
            invariant_disentangler: TwoLayerMlp::new(
                dims.feature_dim,
                dims.hidden,
                dims.invariant_dim,
                &mut stream("init/invariant_disentangler"),
            ),
            specific_disentangler: TwoLayerMlp::new(
                dims.feature_dim,
                dims.hidden,
                dims.specific_dim,
                &mut stream("init/specific_disentangler"),
            ),
            class_head: AffineLayer::linear_no_bias(
                dims.invariant_dim,
                dims.num_classes,
                &mut stream("init/class_head"),
            ),
            domain_head: AffineLayer::linear_no_bias(
                dims.specific_dim,
                2,
                &mut stream("init/domain_head"),
            ),
            discriminator: TwoLayerMlp::new(
                dims.discriminator_input(conditioning),
                dims.hidden,
                1,
                &mut stream("init/discriminator"),
            ),
            reconstructor: TwoLayerMlp::new(
                dims.invariant_dim + dims.specific_dim,
                dims.hidden,
                dims.feature_dim,
                &mut stream("init/reconstructor"),
            ),
            source_proto_head: AffineLayer::frozen_no_bias(
                dims.feature_dim,
                dims.num_classes,
                &mut stream("init/source_proto_head"),
            ),
            target_proto_head: AffineLayer::frozen_no_bias(
                dims.feature_dim,
                dims.num_classes,
                &mut stream("init/target_proto_head"),
            ),
            dims,
            conditioning,
        }
    }

    pub fn forward_all(&self, x: &Tensor) -> Result<ForwardBundle> {
        let features = self.extractor.forward(x)?;
        let invariant = self.invariant_disentangler.forward(&features)?;
        let specific = self.specific_disentangler.forward(&features)?;
        let class_logits = self.class_head.forward(&invariant)?;
        let probs = class_logits.softmax_rows()?;
        let domain_logits = self.domain_head.forward(&specific)?;
        let conditioned = match self.conditioning {
            Conditioning::Multilinear { detach_probs } => {
                let p = if detach_probs { probs.detach() } else { probs.clone() };
                multilinear_map(&invariant, &p)?
            }
            Conditioning::PlainInvariant => invariant.clone(),
        };
        Ok(ForwardBundle {
            features,
            invariant,
            specific,
            class_logits,
            probs,
            domain_logits,
            conditioned,
        })
    }

    /// Argmax predictions for `head`, ties broken toward the lowest index.
    pub fn classify(&self, x: &Tensor, head: Head) -> Result<Vec<usize>> {
        let bundle = self.forward_all(x)?;
        let logits = match head {
            Head::Class => bundle.class_logits,
            Head::SourceProto => self.source_proto_head.forward(&bundle.features)?,
            Head::TargetProto => self.target_proto_head.forward(&bundle.features)?,
            Head::Domain => bundle.domain_logits,
        };
        Ok(argmax_rows(&logits))
    }

    pub fn params_of(&self, group: ParamGroup) -> Vec<&Tensor> {
        match group {
            ParamGroup::Extractor => self.extractor.params(),
            ParamGroup::InvariantDisentangler => self.invariant_disentangler.params(),
            ParamGroup::SpecificDisentangler => self.specific_disentangler.params(),
            ParamGroup::ClassHead => self.class_head.params(),
            ParamGroup::DomainHead => self.domain_head.params(),
            ParamGroup::Discriminator => self.discriminator.params(),
            ParamGroup::Reconstructor => self.reconstructor.params(),
            ParamGroup::SourceProtoHead => self.source_proto_head.params(),
            ParamGroup::TargetProtoHead => self.target_proto_head.params(),
        }
    }

    /// `(name, tensor)` pairs for every parameter, bank heads included.
    /// Names look like `extractor.layer1.weight`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for group in ParamGroup::ALL {
            let params = self.params_of(group);
            let labels: &[&str] = match params.len() {
                1 => &["weight"],
                2 => &["weight", "bias"],
                4 => &["layer1.weight", "layer1.bias", "layer2.weight", "layer2.bias"],
                _ => unreachable!("unexpected parameter layout"),
            };
            for (tensor, label) in params.into_iter().zip(labels) {
                out.push((format!("{}.{}", group.name(), label), tensor));
            }
        }
        out
    }

    pub fn zero_grads(&self) {
        for group in ParamGroup::ALL {
            for p in self.params_of(group) {
                p.zero_grad();
            }
        }
    }
}

/// Flattened per-row outer product of features and predictions: index
/// `a * num_classes + b` of row `i` holds `features[i, a] * probs[i, b]`.
pub fn multilinear_map(features: &Tensor, probs: &Tensor) -> Result<Tensor> {
    features.outer_rows(probs)
}

/// Row-wise argmax with ties going to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        _ => panic!("argmax_rows expects a 2-d tensor"),
    };
    let v = logits.values();
    (0..n)
        .map(|i| {
            let row = &v[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl PrototypeBank {
    /// Builds the bank by running a refresh against the current weights.
    pub fn new(ens: &NetworkEnsemble) -> Result<PrototypeBank> {
        let mut bank = PrototypeBank {
            class_prototypes: Tensor::zeros(vec![ens.dims.num_classes, ens.dims.invariant_dim]),
            source_domain_prototype: Tensor::zeros(vec![ens.dims.specific_dim]),
            target_domain_prototype: Tensor::zeros(vec![ens.dims.specific_dim]),
            source_prototypes: Tensor::zeros(vec![ens.dims.num_classes, ens.dims.feature_dim]),
            target_prototypes: Tensor::zeros(vec![ens.dims.num_classes, ens.dims.feature_dim]),
            last_refresh_step: 0,
        };
        refresh_prototypes(ens, &mut bank, 0)?;
        Ok(bank)
    }
}

/// Rebuilds the prototype bank from the current classifier weights and pushes
/// the reconstructed prototypes into the frozen heads. Every value stored is
/// detached: the bank and the frozen heads never join a gradient graph.
pub fn refresh_prototypes(
    ens: &NetworkEnsemble,
    bank: &mut PrototypeBank,
    step: u64,
) -> Result<()> {
    let k = ens.dims.num_classes;
    let d_inv = ens.dims.invariant_dim;
    let d_spec = ens.dims.specific_dim;

    let class_rows = ens.class_head.weight.to_vec();
    let domain_rows = ens.domain_head.weight.to_vec();
    let source_row = &domain_rows[SOURCE_DOMAIN_LABEL * d_spec..(SOURCE_DOMAIN_LABEL + 1) * d_spec];
    let target_row = &domain_rows[TARGET_DOMAIN_LABEL * d_spec..(TARGET_DOMAIN_LABEL + 1) * d_spec];

    let reconstruct = |domain_row: &[f64]| -> Result<Tensor> {
        let mut input = Vec::with_capacity(k * (d_inv + d_spec));
        for i in 0..k {
            input.extend_from_slice(&class_rows[i * d_inv..(i + 1) * d_inv]);
            input.extend_from_slice(domain_row);
        }
        let input = Tensor::constant(vec![k, d_inv + d_spec], input)?;
        ens.reconstructor.forward(&input)
    };

    let source_protos = reconstruct(source_row)?;
    let target_protos = reconstruct(target_row)?;

    ens.source_proto_head.weight.set_values(&source_protos.values());
    ens.target_proto_head.weight.set_values(&target_protos.values());

    bank.class_prototypes = Tensor::constant(vec![k, d_inv], class_rows)?;
    bank.source_domain_prototype = Tensor::constant(vec![d_spec], source_row.to_vec())?;
    bank.target_domain_prototype = Tensor::constant(vec![d_spec], target_row.to_vec())?;
    bank.source_prototypes = source_protos.detach();
    bank.target_prototypes = target_protos.detach();
    bank.last_refresh_step = step;
    Ok(())
}
