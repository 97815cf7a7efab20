//! The training loop and its ablation modes.
//!
//! One iteration, in order: forward both batches; minimize the source
//! classification loss plus (mode permitting) the reversed adversarial term
//! and the weighted domain classification term in a single backward pass;
//! train the reconstructor on detached features; refresh the prototype heads
//! on the refresh interval; and finally take the extractor-only compactness
//! step against the frozen prototype heads.
//!
//! The min-max objective runs as one backward pass: discriminator inputs pass
//! through `grad_reverse` with coefficient `alpha`, and the *negated*
//! adversarial value joins the minimized total. The discriminator then
//! descends the negated value (ascending it), while everything upstream of
//! the reversal descends `alpha` times the value itself.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::datagen::{Batch, DataError, LabeledDataset};
use crate::eval;
use crate::losses::{
    adversarial_loss_cdan_e, adversarial_loss_dann, compactness_loss, cross_entropy,
    domain_classification_loss, entropy_weights_rows, pseudo_label_select, reconstruction_loss,
    LossError, LossReport,
};
use crate::model::{
    refresh_prototypes, Conditioning, EnsembleDims, NetworkEnsemble, ParamGroup, PrototypeBank,
    SOURCE_DOMAIN_LABEL, TARGET_DOMAIN_LABEL,
};
use crate::optim::{OptimError, SgdConfig, SgdState};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

/// Ablation modes, ordered by how much of the method is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Source classification only.
    SourceOnly,
    /// Unconditioned adversarial alignment on the invariant features.
    Dann,
    /// Entropy-weighted conditional adversarial baseline.
    B,
    /// B plus the domain-specific disentangling branch.
    D,
    /// D plus reconstructor training (touches nothing but the reconstructor).
    DR,
    /// The full method: D+R plus prototype refresh and the compactness step.
    Dtr,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::Dann => "dann",
            Mode::B => "b",
            Mode::D => "d",
            Mode::DR => "d_r",
            Mode::Dtr => "dtr",
        }
    }

    pub fn adversarial(self) -> bool {
        self != Mode::SourceOnly
    }

    pub fn uses_domain_loss(self) -> bool {
        matches!(self, Mode::D | Mode::DR | Mode::Dtr)
    }

    pub fn uses_reconstruction(self) -> bool {
        matches!(self, Mode::DR | Mode::Dtr)
    }

    pub fn uses_prototypes(self) -> bool {
        self == Mode::Dtr
    }
}

#[derive(Debug, Error)]
#[error("config field `{field}`: {constraint}")]
pub struct ConfigError {
    pub field: String,
    pub constraint: String,
}

fn config_err(field: &str, constraint: impl Into<String>) -> ConfigError {
    ConfigError { field: field.into(), constraint: constraint.into() }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("loss {loss} became non-finite at step {step}")]
    NonFiniteLoss { loss: &'static str, step: u64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDims {
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "defaults::invariant_dim")]
    pub invariant_dim: usize,
    #[serde(default = "defaults::specific_dim")]
    pub specific_dim: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSettings {
    /// Base learning rate for the classification and adversarial networks.
    #[serde(default = "defaults::lr_heads")]
    pub lr_heads: f64,
    /// Base learning rate for the extractor.
    #[serde(default = "defaults::lr_extractor")]
    pub lr_extractor: f64,
    /// Base learning rate for the reconstructor. Its squared-error objective
    /// sums over the feature width, so it needs a smaller step than the
    /// mean-log heads to stay stable.
    #[serde(default = "defaults::lr_reconstructor")]
    pub lr_reconstructor: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    /// Small ridge on every parameter; keeps feature norms from racing the
    /// discriminator into saturation.
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    /// Per-group gradient-norm cap applied inside each optimizer step;
    /// 0 disables it.
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
}

mod defaults {
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn beta() -> f64 {
        0.15
    }
    pub fn gamma() -> f64 {
        1.0
    }
    pub fn theta() -> f64 {
        0.05
    }
    pub fn refresh_interval() -> u64 {
        5
    }
    pub fn tau() -> f64 {
        0.9
    }
    pub fn iterations() -> u64 {
        2500
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn seed() -> u64 {
        17
    }
    pub fn log_interval() -> u64 {
        10
    }
    pub fn eval_interval() -> u64 {
        200
    }
    pub fn feature_dim() -> usize {
        32
    }
    pub fn invariant_dim() -> usize {
        16
    }
    pub fn specific_dim() -> usize {
        8
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn lr_heads() -> f64 {
        0.003
    }
    pub fn lr_extractor() -> f64 {
        0.001
    }
    pub fn lr_reconstructor() -> f64 {
        0.002
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1.5e-2
    }
    pub fn grad_clip() -> f64 {
        5.0
    }
    pub fn mode() -> super::Mode {
        super::Mode::Dtr
    }
    pub fn yes() -> bool {
        true
    }
    pub fn net_dims() -> super::NetDims {
        super::NetDims {
            feature_dim: feature_dim(),
            invariant_dim: invariant_dim(),
            specific_dim: specific_dim(),
            hidden: hidden(),
        }
    }
    pub fn optim_settings() -> super::OptimSettings {
        super::OptimSettings {
            lr_heads: lr_heads(),
            lr_extractor: lr_extractor(),
            lr_reconstructor: lr_reconstructor(),
            momentum: momentum(),
            weight_decay: weight_decay(),
            grad_clip: grad_clip(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::mode")]
    pub mode: Mode,
    /// Adversarial trade-off.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Domain classification trade-off.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    /// Target-term trade-off inside the compactness objective.
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    /// Overall compactness trade-off.
    #[serde(default = "defaults::theta")]
    pub theta: f64,
    /// Steps between prototype refreshes.
    #[serde(rename = "r", default = "defaults::refresh_interval")]
    pub refresh_interval: u64,
    /// Pseudo-label confidence threshold.
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::iterations")]
    pub iterations: u64,
    /// Mini-batch size per domain.
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::net_dims")]
    pub dims: NetDims,
    #[serde(default = "defaults::optim_settings")]
    pub optimizer: OptimSettings,
    #[serde(default = "defaults::log_interval")]
    pub log_interval: u64,
    #[serde(default = "defaults::eval_interval")]
    pub eval_interval: u64,
    /// Ramp the reversal coefficient from 0 to `alpha` over the run
    /// (`2/(1+exp(-10*progress)) - 1`); keeps the discriminator from
    /// saturating before it has learned anything.
    #[serde(default = "defaults::yes")]
    pub adversarial_warmup: bool,
    /// Ramp the compactness coefficient from 0 to `theta` the same way, so
    /// the extractor is not pulled toward prototypes that the reconstructor
    /// has not fit yet.
    #[serde(default = "defaults::yes")]
    pub compactness_warmup: bool,
    /// Stop the domain classification gradient at the extractor output.
    #[serde(default)]
    pub stop_domain_grad_at_features: bool,
    /// Detach class probabilities before the multilinear conditioning.
    #[serde(default)]
    pub detach_conditioning_probs: bool,
    /// Give the compactness step its own extractor momentum buffer instead
    /// of sharing the main step's.
    #[serde(default)]
    pub separate_compactness_momentum: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config deserializes to defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        if self.refresh_interval < 1 {
            return Err(config_err("r", "r >= 1"));
        }
        if !(0.5..=1.0).contains(&self.tau) {
            return Err(config_err("tau", format!("0.5 <= tau <= 1, got {}", self.tau)));
        }
        for (name, v) in
            [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("theta", self.theta)]
        {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_err(name, format!("must be a finite nonnegative real, got {v}")));
            }
        }
        if self.batch_size < 1 {
            return Err(config_err("batch_size", "must be at least 1"));
        }
        for (name, v) in [
            ("dims.feature_dim", self.dims.feature_dim),
            ("dims.invariant_dim", self.dims.invariant_dim),
            ("dims.specific_dim", self.dims.specific_dim),
            ("dims.hidden", self.dims.hidden),
        ] {
            if v == 0 {
                return Err(config_err(name, "must be positive"));
            }
        }
        for (name, v) in
            [
                ("optimizer.lr_heads", self.optimizer.lr_heads),
                ("optimizer.lr_extractor", self.optimizer.lr_extractor),
                ("optimizer.lr_reconstructor", self.optimizer.lr_reconstructor),
            ]
        {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(name, format!("must be a positive real, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(config_err(
                "optimizer.momentum",
                format!("must lie in [0, 1), got {}", self.optimizer.momentum),
            ));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(config_err("optimizer.weight_decay", "must be nonnegative"));
        }
        if self.log_interval < 1 {
            return Err(config_err("log_interval", "must be at least 1"));
        }
        if self.eval_interval < 1 {
            return Err(config_err("eval_interval", "must be at least 1"));
        }
        Ok(())
    }

    pub fn conditioning(&self) -> Conditioning {
        match self.mode {
            Mode::Dann => Conditioning::PlainInvariant,
            _ => Conditioning::Multilinear { detach_probs: self.detach_conditioning_probs },
        }
    }
}

/// Parameter groups stepped by gradient descent in `mode`. The frozen
/// prototype heads never appear; in `dtr` they change only through refresh.
pub fn resolve_mode_networks(mode: Mode) -> BTreeSet<ParamGroup> {
    let mut set = BTreeSet::from([
        ParamGroup::Extractor,
        ParamGroup::InvariantDisentangler,
        ParamGroup::ClassHead,
    ]);
    if mode.adversarial() {
        set.insert(ParamGroup::Discriminator);
    }
    if mode.uses_domain_loss() {
        set.insert(ParamGroup::SpecificDisentangler);
        set.insert(ParamGroup::DomainHead);
    }
    if mode.uses_reconstruction() {
        set.insert(ParamGroup::Reconstructor);
    }
    set
}

/// Whether step `n` (1-based) refreshes the prototype heads. The cadence is
/// `n % r == 1`; an interval of 1 refreshes on every step.
pub fn is_refresh_step(step: u64, refresh_interval: u64) -> bool {
    refresh_interval == 1 || step % refresh_interval == 1
}

/// One accuracy/diagnostic snapshot taken during training. Target-side
/// entries need evaluation labels and stay absent without them.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSnapshot {
    pub step: u64,
    pub acc_c_di_src: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_c_di_tgt: Option<f64>,
    pub acc_c_s_src: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_c_s_tgt: Option<f64>,
    pub acc_c_t_src: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_c_t_tgt: Option<f64>,
    pub mean_proto_dist_src: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_proto_dist_tgt: Option<f64>,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSnapshot>,
}

/// Everything `train` produces: the final state, the metrics stream, and the
/// full evaluation history (a superset of the eval fields in `metrics`).
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub evals: Vec<EvalSnapshot>,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub ensemble: NetworkEnsemble,
    pub bank: PrototypeBank,
    pub step: u64,
    optimizers: BTreeMap<ParamGroup, SgdState>,
    compactness_optimizer: Option<SgdState>,
    src_rng: Rng,
    tgt_rng: Rng,
    /// Ring of recent loss reports for diagnostics.
    pub recent: VecDeque<(u64, LossReport)>,
}

const RECENT_CAP: usize = 64;

impl TrainState {
    pub fn new(config: TrainConfig, input_dim: usize, num_classes: usize) -> Result<TrainState> {
        config.validate()?;
        let dims = EnsembleDims {
            input_dim,
            feature_dim: config.dims.feature_dim,
            invariant_dim: config.dims.invariant_dim,
            specific_dim: config.dims.specific_dim,
            hidden: config.dims.hidden,
            num_classes,
        };
        let ensemble = NetworkEnsemble::new(dims, config.conditioning(), config.seed);
        let bank = PrototypeBank::new(&ensemble)?;
        let mut optimizers = BTreeMap::new();
        for group in [
            ParamGroup::Extractor,
            ParamGroup::InvariantDisentangler,
            ParamGroup::SpecificDisentangler,
            ParamGroup::ClassHead,
            ParamGroup::DomainHead,
            ParamGroup::Discriminator,
            ParamGroup::Reconstructor,
        ] {
            let base_lr = match group {
                ParamGroup::Extractor => config.optimizer.lr_extractor,
                ParamGroup::Reconstructor => config.optimizer.lr_reconstructor,
                _ => config.optimizer.lr_heads,
            };
            optimizers.insert(
                group,
                SgdState::new(SgdConfig {
                    base_lr,
                    momentum: config.optimizer.momentum,
                    weight_decay: config.optimizer.weight_decay,
                    grad_clip: config.optimizer.grad_clip,
                }),
            );
        }
        let compactness_optimizer = config.separate_compactness_momentum.then(|| {
            SgdState::new(SgdConfig {
                base_lr: config.optimizer.lr_extractor,
                momentum: config.optimizer.momentum,
                weight_decay: config.optimizer.weight_decay,
                grad_clip: config.optimizer.grad_clip,
            })
        });
        let src_rng = Rng::seeded(config.seed, "batch/source");
        let tgt_rng = Rng::seeded(config.seed, "batch/target");
        Ok(TrainState {
            config,
            ensemble,
            bank,
            step: 0,
            optimizers,
            compactness_optimizer,
            src_rng,
            tgt_rng,
            recent: VecDeque::with_capacity(RECENT_CAP),
        })
    }

    fn finite(&self, name: &'static str, value: &Tensor, step: u64) -> Result<f64> {
        let v = value.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TrainError::NonFiniteLoss { loss: name, step })
        }
    }

    fn step_group(&mut self, group: ParamGroup, progress: f64) -> Result<()> {
        let params = self.ensemble.params_of(group);
        let opt = self.optimizers.get_mut(&group).expect("optimizer exists for group");
        opt.step(&params, progress)?;
        Ok(())
    }

    /// Executes one iteration on the given batches and returns the losses.
    pub fn train_step(&mut self, src: &Batch, tgt: &Batch) -> Result<LossReport> {
        let step = self.step + 1;
        let cfg = self.config.clone();
        let mode = cfg.mode;
        let progress = step as f64 / cfg.iterations.max(1) as f64;

        let y_src = src
            .labels
            .as_deref()
            .ok_or_else(|| config_err("source batch", "must carry labels"))?;
        let x_src = Tensor::constant(vec![src.rows, src.cols], src.features.clone())?;
        let src_bundle = self.ensemble.forward_all(&x_src)?;
        let tgt_bundle = if mode.adversarial() {
            let x_tgt = Tensor::constant(vec![tgt.rows, tgt.cols], tgt.features.clone())?;
            Some(self.ensemble.forward_all(&x_tgt)?)
        } else {
            None
        };

        let mut report = LossReport::zeros();

        // Main objective: classification + reversed adversarial + domain.
        let e_cls_s = cross_entropy(&src_bundle.class_logits, y_src)?;
        report.e_cls_s = self.finite("e_cls_s", &e_cls_s, step)?;
        let mut total = e_cls_s;

        if mode.adversarial() {
            let tgt_b = tgt_bundle.as_ref().expect("adversarial modes forward the target");
            let coeff = if cfg.adversarial_warmup {
                cfg.alpha * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
            } else {
                cfg.alpha
            };
            let d_src = self
                .ensemble
                .discriminator
                .forward(&src_bundle.conditioned.grad_reverse(coeff)?)?;
            let d_tgt = self
                .ensemble
                .discriminator
                .forward(&tgt_b.conditioned.grad_reverse(coeff)?)?;
            let e_dist = if mode == Mode::Dann {
                adversarial_loss_dann(&d_src, &d_tgt)?
            } else {
                let w_src = entropy_weights_rows(&src_bundle.probs);
                let w_tgt = entropy_weights_rows(&tgt_b.probs);
                adversarial_loss_cdan_e(&d_src, &d_tgt, &w_src, &w_tgt)?
            };
            report.e_dist = self.finite("e_dist", &e_dist, step)?;
            total = total.add(&e_dist.neg()?)?;
        }

        if mode.uses_domain_loss() {
            let tgt_b = tgt_bundle.as_ref().expect("domain loss needs the target batch");
            let (dl_src, dl_tgt) = if cfg.stop_domain_grad_at_features {
                let s = self.ensemble.specific_disentangler.forward(&src_bundle.features.detach())?;
                let t = self.ensemble.specific_disentangler.forward(&tgt_b.features.detach())?;
                (self.ensemble.domain_head.forward(&s)?, self.ensemble.domain_head.forward(&t)?)
            } else {
                (src_bundle.domain_logits.clone(), tgt_b.domain_logits.clone())
            };
            let logits = Tensor::concat_rows(&[dl_src, dl_tgt])?;
            let mut labels = vec![SOURCE_DOMAIN_LABEL; src.rows];
            labels.extend(std::iter::repeat(TARGET_DOMAIN_LABEL).take(tgt.rows));
            let e_cls_d = domain_classification_loss(&logits, &labels)?;
            report.e_cls_d = self.finite("e_cls_d", &e_cls_d, step)?;
            total = total.add(&e_cls_d.scale(cfg.beta)?)?;
        }

        self.ensemble.zero_grads();
        total.backward()?;
        let trainable = resolve_mode_networks(mode);
        for group in [
            ParamGroup::Extractor,
            ParamGroup::InvariantDisentangler,
            ParamGroup::ClassHead,
            ParamGroup::Discriminator,
            ParamGroup::SpecificDisentangler,
            ParamGroup::DomainHead,
        ] {
            if trainable.contains(&group) {
                self.step_group(group, progress)?;
            }
        }

        // Reconstructor step on detached features from the pre-update forward.
        if mode.uses_reconstruction() {
            let tgt_b = tgt_bundle.as_ref().expect("reconstruction modes forward the target");
            let invariant = Tensor::concat_rows(&[
                src_bundle.invariant.detach(),
                tgt_b.invariant.detach(),
            ])?;
            let specific = Tensor::concat_rows(&[
                src_bundle.specific.detach(),
                tgt_b.specific.detach(),
            ])?;
            let target_feats =
                Tensor::concat_rows(&[src_bundle.features.detach(), tgt_b.features.detach()])?;
            let reconstructed =
                self.ensemble.reconstructor.forward(&invariant.concat_cols(&specific)?)?;
            let e_rec = reconstruction_loss(&reconstructed, &target_feats)?;
            report.e_rec = self.finite("e_rec", &e_rec, step)?;
            self.ensemble.zero_grads();
            e_rec.backward()?;
            self.step_group(ParamGroup::Reconstructor, progress)?;
        }

        // Prototype refresh, then the extractor-only compactness step.
        if mode.uses_prototypes() {
            if is_refresh_step(step, cfg.refresh_interval) {
                refresh_prototypes(&self.ensemble, &mut self.bank, step)?;
            }

            let tgt_b = tgt_bundle.as_ref().expect("the full mode forwards the target");
            let pseudo = pseudo_label_select(&tgt_b.probs, cfg.tau);
            let (sel_features, sel_labels) = select_rows(&tgt.features, tgt.rows, tgt.cols, &pseudo);
            let x_sel = Tensor::constant(vec![sel_labels.len(), tgt.cols], sel_features)?;
            let feats_src = self.ensemble.extractor.forward(&x_src)?;
            let feats_sel = self.ensemble.extractor.forward(&x_sel)?;
            let compact = compactness_loss(
                &self.ensemble,
                &feats_src,
                y_src,
                &feats_sel,
                &sel_labels,
                cfg.gamma,
            )?;
            let theta = if cfg.compactness_warmup {
                cfg.theta * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
            } else {
                cfg.theta
            };
            let scaled = compact.total.scale(theta)?;
            self.finite("e_g", &scaled, step)?;
            report.e_g_s = compact.source_term;
            report.e_g_t = compact.target_term;
            report.m_selected = compact.selected;
            self.ensemble.zero_grads();
            scaled.backward()?;
            let params = self.ensemble.params_of(ParamGroup::Extractor);
            match &mut self.compactness_optimizer {
                Some(opt) => opt.step(&params, progress)?,
                None => {
                    self.optimizers
                        .get_mut(&ParamGroup::Extractor)
                        .expect("extractor optimizer exists")
                        .step(&params, progress)?;
                }
            }
        }

        self.ensemble.zero_grads();
        self.step = step;
        if self.recent.len() == RECENT_CAP {
            self.recent.pop_front();
        }
        self.recent.push_back((step, report));
        Ok(report)
    }
}

fn select_rows(
    features: &[f64],
    rows: usize,
    cols: usize,
    pseudo: &[(usize, usize)],
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(pseudo.len() * cols);
    let mut labels = Vec::with_capacity(pseudo.len());
    for &(row, label) in pseudo {
        debug_assert!(row < rows);
        out.extend_from_slice(&features[row * cols..(row + 1) * cols]);
        labels.push(label);
    }
    (out, labels)
}

fn empty_batch(cols: usize) -> Batch {
    Batch { features: Vec::new(), rows: 0, cols, labels: None }
}

/// Runs the full loop; see [`train_with_observer`] for a hook into each step.
pub fn train(
    cfg: &TrainConfig,
    source: &LabeledDataset,
    target: &LabeledDataset,
) -> Result<TrainOutcome> {
    train_with_observer(cfg, source, target, |_, _| {})
}

/// Runs `cfg.iterations` steps of random mini-batch training, calling
/// `observer` after every step. Metrics are recorded every `log_interval`
/// steps and at the final step; accuracy snapshots are taken every
/// `eval_interval` steps, at the final step, and (in the full mode) right
/// after the first refresh.
pub fn train_with_observer(
    cfg: &TrainConfig,
    source: &LabeledDataset,
    target: &LabeledDataset,
    mut observer: impl FnMut(&TrainState, &LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.labels().is_none() {
        return Err(config_err("source dataset", "must carry labels").into());
    }
    if cfg.mode.adversarial() {
        if target.is_empty() {
            return Err(config_err("target dataset", "must be nonempty outside source_only").into());
        }
        if target.input_dim != source.input_dim {
            return Err(config_err(
                "target dataset",
                format!("input_dim {} != source input_dim {}", target.input_dim, source.input_dim),
            )
            .into());
        }
        if target.num_classes != source.num_classes {
            return Err(config_err(
                "target dataset",
                "must share the source label space",
            )
            .into());
        }
    }

    let mut state = TrainState::new(cfg.clone(), source.input_dim, source.num_classes)?;
    let mut metrics = Vec::new();
    let mut evals = Vec::new();

    for step in 1..=cfg.iterations {
        let src_batch = source.sample_batch(cfg.batch_size, &mut state.src_rng)?;
        let tgt_batch = if cfg.mode.adversarial() {
            target.sample_batch(cfg.batch_size, &mut state.tgt_rng)?
        } else {
            empty_batch(source.input_dim)
        };
        let report = state.train_step(&src_batch, &tgt_batch).map_err(|e| match e {
            // Overflow inside an op before a loss value exists: report the
            // stage so the abort still names where and when.
            TrainError::Tensor(TensorError::NonFinite { .. })
            | TrainError::Loss(LossError::Tensor(TensorError::NonFinite { .. })) => {
                TrainError::NonFiniteLoss { loss: "forward", step }
            }
            other => other,
        })?;
        observer(&state, &report);

        let log_due = step % cfg.log_interval == 0 || step == cfg.iterations;
        let eval_due = step == cfg.iterations
            || step % cfg.eval_interval == 0
            || (cfg.mode.uses_prototypes() && step == 2);
        let snapshot = if eval_due {
            let snap = eval::training_snapshot(&state, source, target)?;
            evals.push(snap);
            Some(snap)
        } else {
            None
        };
        if log_due {
            metrics.push(MetricsRecord { step, losses: report, eval: snapshot });
        }
    }

    Ok(TrainOutcome { state, metrics, evals })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_contract() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.mode, Mode::Dtr);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.beta, 0.15);
        assert_eq!(cfg.gamma, 1.0);
        assert_eq!(cfg.theta, 0.05);
        assert_eq!(cfg.refresh_interval, 5);
        assert_eq!(cfg.tau, 0.9);
    }

    #[test]
    fn validation_guards() {
        let mut cfg = TrainConfig::default();
        cfg.refresh_interval = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains('r') && err.contains(">= 1"), "{err}");

        let mut cfg = TrainConfig::default();
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg.tau = 0.4;
        assert!(cfg.validate().is_err());
        cfg.tau = 0.5;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_config_key_rejected() {
        let parsed: std::result::Result<TrainConfig, _> =
            serde_json::from_str(r#"{"widget": 3}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn mode_network_sets() {
        use ParamGroup::*;
        let b = resolve_mode_networks(Mode::B);
        assert!(!b.contains(&SpecificDisentangler));
        assert!(!b.contains(&DomainHead));
        assert!(!b.contains(&Reconstructor));
        assert!(b.contains(&Discriminator));

        let so = resolve_mode_networks(Mode::SourceOnly);
        assert!(!so.contains(&Discriminator));
        assert_eq!(so.len(), 3);

        let dtr = resolve_mode_networks(Mode::Dtr);
        assert!(!dtr.contains(&SourceProtoHead));
        assert!(!dtr.contains(&TargetProtoHead));
        assert!(dtr.contains(&Reconstructor));
    }

    #[test]
    fn refresh_cadence() {
        let steps: Vec<u64> = (1..=16).filter(|&s| is_refresh_step(s, 5)).collect();
        assert_eq!(steps, vec![1, 6, 11, 16]);
        let every: Vec<u64> = (1..=4).filter(|&s| is_refresh_step(s, 1)).collect();
        assert_eq!(every, vec![1, 2, 3, 4]);
    }
}
