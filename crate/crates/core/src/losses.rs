//! Scalar training objectives.
//!
//! All losses are means over their batch, so the trade-off scalars are
//! batch-size independent, and all use the natural log with the guarded
//! `log` op. Trade-off coefficients are applied by the trainer; each function
//! here returns the bare term.

use thiserror::Error;

use crate::model::NetworkEnsemble;
use crate::tensor::{Tensor, TensorError, LOG_EPS};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} at row {row} out of range for {num_classes} classes")]
    LabelOutOfRange { row: usize, label: usize, num_classes: usize },
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("{what} must be detached from the graph")]
    ExpectedDetached { what: &'static str },
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Scalar values of every objective computed during one training step.
/// `m_selected` counts the confidently pseudo-labeled target samples.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub e_cls_s: f64,
    pub e_dist: f64,
    pub e_cls_d: f64,
    pub e_rec: f64,
    pub e_g_s: f64,
    pub e_g_t: f64,
    pub m_selected: usize,
}

impl LossReport {
    pub fn zeros() -> Self {
        LossReport {
            e_cls_s: 0.0,
            e_dist: 0.0,
            e_cls_d: 0.0,
            e_rec: 0.0,
            e_g_s: 0.0,
            e_g_t: 0.0,
            m_selected: 0,
        }
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    for (row, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(LossError::LabelOutOfRange { row, label, num_classes });
        }
    }
    Ok(())
}

/// Mean over rows of `-log(softmax(logits)[label])`. An empty batch scores 0.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        shape => {
            return Err(TensorError::Rank {
                op: "cross_entropy",
                expected: "a 2-d logits tensor",
                shape: shape.to_vec(),
            }
            .into())
        }
    };
    if labels.len() != n {
        return Err(LossError::LengthMismatch { what: "labels", expected: n, got: labels.len() });
    }
    check_labels(labels, k)?;
    if n == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let picked = logits.softmax_rows()?.gather_rows(labels)?;
    Ok(picked.log()?.sum()?.scale(-1.0 / n as f64)?)
}

/// Shannon entropy of one probability row, natural log, guarded.
pub fn entropy(probs_row: &[f64]) -> f64 {
    -probs_row.iter().map(|p| p * (p + LOG_EPS).ln()).sum::<f64>()
}

/// Confidence weight `1 + exp(-H(p))`; treated as a constant wherever it
/// scales a loss term.
pub fn entropy_weight(probs_row: &[f64]) -> f64 {
    1.0 + (-entropy(probs_row)).exp()
}

/// Per-row entropy weights of a `[n, k]` probability tensor, as plain
/// constants (no graph attachment).
pub fn entropy_weights_rows(probs: &Tensor) -> Vec<f64> {
    let (n, k) = match probs.shape() {
        [n, k] => (*n, *k),
        _ => panic!("entropy_weights_rows expects a 2-d tensor"),
    };
    let v = probs.values();
    (0..n).map(|i| entropy_weight(&v[i * k..(i + 1) * k])).collect()
}

fn mean_rows(t: &Tensor) -> Result<Tensor> {
    let n = t.shape()[0];
    if n == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    Ok(t.sum()?.scale(1.0 / n as f64)?)
}

/// Unweighted adversarial objective on pre-sigmoid discriminator outputs:
/// `mean log(sig(d_src)) + mean log(1 - sig(d_tgt))`. The trainer ascends
/// this for the discriminator and descends it upstream.
pub fn adversarial_loss_dann(d_src: &Tensor, d_tgt: &Tensor) -> Result<Tensor> {
    let ones_t = Tensor::constant(d_tgt.shape().to_vec(), vec![1.0; d_tgt.len()])?;
    let src_term = mean_rows(&d_src.sigmoid()?.log()?)?;
    let tgt_term = mean_rows(&ones_t.sub(&d_tgt.sigmoid()?)?.log()?)?;
    Ok(src_term.add(&tgt_term)?)
}

/// Entropy-weighted conditional adversarial objective. Weights come from
/// [`entropy_weight`] of the class predictions and enter as constants.
pub fn adversarial_loss_cdan_e(
    d_src: &Tensor,
    d_tgt: &Tensor,
    w_src: &[f64],
    w_tgt: &[f64],
) -> Result<Tensor> {
    let n_s = d_src.shape()[0];
    let n_t = d_tgt.shape()[0];
    if w_src.len() != n_s {
        return Err(LossError::LengthMismatch { what: "source weights", expected: n_s, got: w_src.len() });
    }
    if w_tgt.len() != n_t {
        return Err(LossError::LengthMismatch { what: "target weights", expected: n_t, got: w_tgt.len() });
    }
    let weight_tensor = |w: &[f64], shape: &[usize]| {
        Tensor::constant(shape.to_vec(), w.to_vec())
    };
    let src_logs = d_src.sigmoid()?.log()?;
    let src_term = mean_rows(&src_logs.mul(&weight_tensor(w_src, d_src.shape())?)?)?;
    let ones_t = Tensor::constant(d_tgt.shape().to_vec(), vec![1.0; d_tgt.len()])?;
    let tgt_logs = ones_t.sub(&d_tgt.sigmoid()?)?.log()?;
    let tgt_term = mean_rows(&tgt_logs.mul(&weight_tensor(w_tgt, d_tgt.shape())?)?)?;
    Ok(src_term.add(&tgt_term)?)
}

/// Cross-entropy of the domain head over the combined batch; labels are 1
/// for source rows and 0 for target rows.
pub fn domain_classification_loss(domain_logits: &Tensor, domain_labels: &[usize]) -> Result<Tensor> {
    check_labels(domain_labels, 2)?;
    cross_entropy(domain_logits, domain_labels)
}

/// Mean squared reconstruction error per sample. `target` must be detached:
/// this loss trains the reconstructor alone.
pub fn reconstruction_loss(reconstructed: &Tensor, target: &Tensor) -> Result<Tensor> {
    if target.requires_grad() {
        return Err(LossError::ExpectedDetached { what: "reconstruction target" });
    }
    if reconstructed.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "reconstruction_loss",
            lhs: reconstructed.shape().to_vec(),
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    let n = reconstructed.shape()[0];
    if n == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let diff = reconstructed.sub(target)?;
    Ok(diff.mul(&diff)?.sum()?.scale(1.0 / n as f64)?)
}

/// Confidently predicted target rows: `(row, argmax)` for rows whose best
/// probability reaches `tau`, in ascending row order.
pub fn pseudo_label_select(target_probs: &Tensor, tau: f64) -> Vec<(usize, usize)> {
    let (n, k) = match target_probs.shape() {
        [n, k] => (*n, *k),
        _ => panic!("pseudo_label_select expects a 2-d tensor"),
    };
    let v = target_probs.values();
    let mut out = Vec::new();
    for i in 0..n {
        let row = &v[i * k..(i + 1) * k];
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if row[best] >= tau {
            out.push((i, best));
        }
    }
    out
}

/// Compactness objective pieces: `total = source_term + gamma * target_term`,
/// built on the frozen prototype heads so gradients reach only what produced
/// the feature tensors (the extractor, on the trainer's path).
pub struct CompactnessLoss {
    pub total: Tensor,
    pub source_term: f64,
    pub target_term: f64,
    pub selected: usize,
}

/// `features_src` / `features_tgt_selected` are extractor outputs; the target
/// tensor holds only the rows picked by [`pseudo_label_select`], paired with
/// `pseudo_labels` in the same order. With no selected rows the target term
/// is zero.
pub fn compactness_loss(
    ens: &NetworkEnsemble,
    features_src: &Tensor,
    labels_src: &[usize],
    features_tgt_selected: &Tensor,
    pseudo_labels: &[usize],
    gamma: f64,
) -> Result<CompactnessLoss> {
    let source_logits = ens.source_proto_head.forward(features_src)?;
    let source_loss = cross_entropy(&source_logits, labels_src)?;
    let selected = pseudo_labels.len();
    let target_loss = if selected == 0 {
        Tensor::scalar(0.0)
    } else {
        let target_logits = ens.target_proto_head.forward(features_tgt_selected)?;
        cross_entropy(&target_logits, pseudo_labels)?
    };
    let source_term = source_loss.item();
    let target_term = target_loss.item();
    let total = source_loss.add(&target_loss.scale(gamma)?)?;
    Ok(CompactnessLoss { total, source_term, target_term, selected })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = core::f64::consts::LN_2;

    fn logits(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let l = logits(&[vec![30.0, 0.0, 0.0]]);
        assert!(cross_entropy(&l, &[0]).unwrap().item() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let l = logits(&[vec![0.0; 10]]);
        let v = cross_entropy(&l, &[3]).unwrap().item();
        assert!((v - 10.0_f64.ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn cross_entropy_half_is_ln_2() {
        let l = logits(&[vec![0.0, 0.0]]);
        let v = cross_entropy(&l, &[1]).unwrap().item();
        assert!((v - LN_2).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_label_range_checked() {
        let l = logits(&[vec![0.0, 0.0]]);
        assert!(matches!(
            cross_entropy(&l, &[2]),
            Err(LossError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn entropy_values() {
        assert!(entropy(&[1.0, 0.0]).abs() < 1e-9);
        assert!((entropy(&[0.5, 0.5]) - LN_2).abs() < 1e-9);
        let u10 = vec![0.1; 10];
        assert!((entropy(&u10) - 10.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_weight_values() {
        assert!((entropy_weight(&[1.0, 0.0]) - 2.0).abs() < 1e-9);
        assert!((entropy_weight(&[0.5, 0.5]) - 1.5).abs() < 1e-9);
        assert!((entropy_weight(&[0.1; 10]) - 1.1).abs() < 1e-9);
    }

    #[test]
    fn dann_loss_at_half_confidence() {
        // Zero logits make the sigmoid 0.5 on both sides.
        let d_s = Tensor::constant(vec![4, 1], vec![0.0; 4]).unwrap();
        let d_t = Tensor::constant(vec![4, 1], vec![0.0; 4]).unwrap();
        let v = adversarial_loss_dann(&d_s, &d_t).unwrap().item();
        assert!((v - 2.0 * 0.5_f64.ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn dann_loss_perfect_discrimination_approaches_zero() {
        let d_s = Tensor::constant(vec![2, 1], vec![40.0; 2]).unwrap();
        let d_t = Tensor::constant(vec![2, 1], vec![-40.0; 2]).unwrap();
        let v = adversarial_loss_dann(&d_s, &d_t).unwrap().item();
        // The log guard can nudge the limit a hair past zero.
        assert!(v > -1e-3 && v < 1e-6, "{v}");
    }

    #[test]
    fn dann_loss_direction_in_source_logit() {
        let base = adversarial_loss_dann(
            &Tensor::constant(vec![1, 1], vec![0.3]).unwrap(),
            &Tensor::constant(vec![1, 1], vec![-0.1]).unwrap(),
        )
        .unwrap()
        .item();
        let bumped = adversarial_loss_dann(
            &Tensor::constant(vec![1, 1], vec![0.3 + 1e-3]).unwrap(),
            &Tensor::constant(vec![1, 1], vec![-0.1]).unwrap(),
        )
        .unwrap()
        .item();
        assert!(bumped > base);
    }

    #[test]
    fn cdan_e_with_unit_weights_reduces_to_dann() {
        let d_s = Tensor::constant(vec![3, 1], vec![0.7, -0.4, 1.2]).unwrap();
        let d_t = Tensor::constant(vec![2, 1], vec![-0.3, 0.9]).unwrap();
        let w_s = vec![1.0; 3];
        let w_t = vec![1.0; 2];
        let a = adversarial_loss_cdan_e(&d_s, &d_t, &w_s, &w_t).unwrap().item();
        let b = adversarial_loss_dann(&d_s, &d_t).unwrap().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cdan_e_one_hot_weights_double_the_value() {
        let d_s = Tensor::constant(vec![2, 1], vec![0.5, -0.2]).unwrap();
        let d_t = Tensor::constant(vec![2, 1], vec![0.1, 0.4]).unwrap();
        let unweighted = adversarial_loss_dann(&d_s, &d_t).unwrap().item();
        let doubled =
            adversarial_loss_cdan_e(&d_s, &d_t, &[2.0, 2.0], &[2.0, 2.0]).unwrap().item();
        assert!((doubled - 2.0 * unweighted).abs() < 1e-12);
    }

    #[test]
    fn cdan_e_zero_weights_zero_loss() {
        let d_s = Tensor::constant(vec![2, 1], vec![0.5, -0.2]).unwrap();
        let d_t = Tensor::constant(vec![2, 1], vec![0.1, 0.4]).unwrap();
        let v = adversarial_loss_cdan_e(&d_s, &d_t, &[0.0, 0.0], &[0.0, 0.0]).unwrap().item();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn cdan_e_weight_length_checked() {
        let d_s = Tensor::constant(vec![2, 1], vec![0.5, -0.2]).unwrap();
        let d_t = Tensor::constant(vec![2, 1], vec![0.1, 0.4]).unwrap();
        assert!(matches!(
            adversarial_loss_cdan_e(&d_s, &d_t, &[1.0], &[1.0, 1.0]),
            Err(LossError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn domain_loss_values() {
        let perfect = logits(&[vec![-30.0, 30.0], vec![30.0, -30.0]]);
        assert!(domain_classification_loss(&perfect, &[1, 0]).unwrap().item() < 1e-6);
        let uniform = logits(&[vec![0.0, 0.0]]);
        let v = domain_classification_loss(&uniform, &[1]).unwrap().item();
        assert!((v - LN_2).abs() < 1e-9);
        // Confidently wrong: all-source batch scored as target.
        let wrong = logits(&[vec![30.0, -30.0]]);
        assert!(domain_classification_loss(&wrong, &[1]).unwrap().item() > 5.0);
    }

    #[test]
    fn reconstruction_loss_values() {
        let a = Tensor::constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::constant(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(reconstruction_loss(&a, &b).unwrap().item(), 2.0);
        assert_eq!(reconstruction_loss(&a, &a).unwrap().item(), 0.0);
    }

    #[test]
    fn reconstruction_loss_rejects_attached_target() {
        let a = Tensor::constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let t = Tensor::parameter(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            reconstruction_loss(&a, &t),
            Err(LossError::ExpectedDetached { .. })
        ));
    }

    #[test]
    fn pseudo_selection_threshold() {
        let p = logits(&[vec![0.95, 0.05], vec![0.6, 0.4]]);
        assert_eq!(pseudo_label_select(&p, 0.9), vec![(0, 0)]);
        // tau = 1.0 with nothing exactly one-hot selects nothing.
        assert!(pseudo_label_select(&p, 1.0).is_empty());
    }
}
