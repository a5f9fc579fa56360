//! Classification losses and their logit gradients.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Loss driving an attack or a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy; attacks ascend it.
    CrossEntropy,
    /// Margin loss max(z_y - max_{i != y} z_i, -kappa); attacks descend it.
    CwMargin,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::CrossEntropy),
            "cw" => Ok(LossKind::CwMargin),
            other => Err(Error::Config(format!("unknown loss \"{other}\""))),
        }
    }
}

fn check_logits<F: Scalar>(logits: &Tensor<F>, label: usize) -> Result<usize> {
    let c = logits.numel();
    if logits.shape().len() > 2 || c < 2 {
        return Err(Error::Shape(format!(
            "logits must be a vector of >= 2 classes, got shape {:?}",
            logits.shape()
        )));
    }
    if label >= c {
        return Err(Error::Index(format!("label {label} out of range for {c} classes")));
    }
    Ok(c)
}

/// Numerically stable softmax cross-entropy of one logit vector:
/// log(sum exp(z - max)) + max - z_y.
pub fn loss_ce<F: Scalar>(logits: &Tensor<F>, label: usize) -> Result<F> {
    check_logits(logits, label)?;
    let z = logits.data();
    let m = z.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &v in z {
        sum += (v - m).exp();
    }
    Ok(sum.ln() + m - z[label])
}

/// Margin loss max(z_y - max_{i != y} z_i, -kappa), clamped below at -kappa.
/// With kappa = 0 it is the positive margin for correctly classified inputs
/// and exactly zero once the example is misclassified, so descent stops there.
pub fn loss_cw<F: Scalar>(logits: &Tensor<F>, label: usize, kappa: F) -> Result<F> {
    check_logits(logits, label)?;
    if kappa < F::zero() {
        return Err(Error::Argument(format!(
            "kappa must be non-negative, got {:?}",
            kappa
        )));
    }
    let z = logits.data();
    let rival = rival_index(z, label);
    Ok((z[label] - z[rival]).max(-kappa))
}

/// Index of the largest non-label logit (lowest index wins ties).
fn rival_index<F: Scalar>(z: &[F], label: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = F::neg_infinity();
    for (i, &v) in z.iter().enumerate() {
        if i != label && v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Writes softmax(z) - onehot(y) for each row of `logits` (n x c) into
/// `dlogits`, scaled by `scale`. This is the CE gradient wrt logits.
pub(crate) fn ce_grad_batch<F: Scalar>(
    logits: &[F],
    c: usize,
    labels: &[usize],
    scale: F,
    dlogits: &mut [F],
) {
    for ((row, dl), &y) in logits.chunks_exact(c).zip(dlogits.chunks_exact_mut(c)).zip(labels) {
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (&v, d) in row.iter().zip(dl.iter_mut()) {
            let e = (v - m).exp();
            *d = e;
            sum += e;
        }
        let inv = scale / sum;
        for d in dl.iter_mut() {
            *d *= inv;
        }
        dl[y] -= scale;
    }
}

/// Margin-loss gradient wrt logits, rows of `logits` (n x c), scaled by
/// `scale`. Zero wherever the clamp is active (margin <= -kappa).
pub(crate) fn cw_grad_batch<F: Scalar>(
    logits: &[F],
    c: usize,
    labels: &[usize],
    kappa: F,
    scale: F,
    dlogits: &mut [F],
) {
    dlogits.fill(F::zero());
    for ((row, dl), &y) in logits.chunks_exact(c).zip(dlogits.chunks_exact_mut(c)).zip(labels) {
        let rival = rival_index(row, y);
        let margin = row[y] - row[rival];
        if margin > -kappa {
            dl[y] = scale;
            dl[rival] = -scale;
        }
    }
}

/// Mean CE over rows, computed in the row scalar type.
pub(crate) fn mean_ce_batch<F: Scalar>(logits: &[F], c: usize, labels: &[usize]) -> F {
    let mut total = F::zero();
    for (row, &y) in logits.chunks_exact(c).zip(labels) {
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &v in row {
            sum += (v - m).exp();
        }
        total += sum.ln() + m - row[y];
    }
    total / F::from_f64c(labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn ce_frozen_value() {
        // -ln(softmax_0([1,2,3])) computed independently.
        let l = loss_ce(&t(&[1.0, 2.0, 3.0]), 0).unwrap();
        assert!((l - 2.407_605_964_444_380_6).abs() < 1e-15);
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        let l = loss_ce(&t(&[0.0; 10]), 3).unwrap();
        assert!((l - (10.0f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_is_shift_invariant_and_stable_at_large_logits() {
        let a = loss_ce(&t(&[1.0, 2.0, 3.0]), 0).unwrap();
        let b = loss_ce(&t(&[1001.0, 1002.0, 1003.0]), 0).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(b.is_finite());
    }

    #[test]
    fn ce_rejects_bad_label() {
        assert!(loss_ce(&t(&[0.0, 1.0]), 2).is_err());
    }

    #[test]
    fn cw_margin_values() {
        // Correctly classified: margin z_y - best rival.
        let l = loss_cw(&t(&[3.0, 1.0, 2.5]), 0, 0.0).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        // Misclassified with kappa = 0: margin -2 clamps to 0.
        let l = loss_cw(&t(&[1.0, 3.0, 2.0]), 0, 0.0).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn cw_clamps_at_minus_kappa() {
        let l = loss_cw(&t(&[0.0, 5.0, 1.0]), 0, 2.0).unwrap();
        assert_eq!(l, -2.0);
        assert!(loss_cw(&t(&[0.0, 1.0]), 0, -1.0).is_err());
    }

    #[test]
    fn ce_grad_rows_sum_to_zero() {
        let logits = [1.0f64, 2.0, 3.0, -1.0, 0.5, 0.25];
        let mut d = [0.0f64; 6];
        ce_grad_batch(&logits, 3, &[0, 2], 1.0, &mut d);
        for row in d.chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!(s.abs() < 1e-14);
        }
        // True-class entry is softmax - 1, negative.
        assert!(d[0] < 0.0);
    }

    #[test]
    fn ce_grad_matches_finite_difference() {
        let logits = vec![0.3f64, -1.2, 0.9, 2.0];
        let mut d = vec![0.0f64; 4];
        ce_grad_batch(&logits, 4, &[2], 1.0, &mut d);
        let h = 1e-6;
        for i in 0..4 {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let fd = (loss_ce(&t(&lp), 2).unwrap() - loss_ce(&t(&lm), 2).unwrap()) / (2.0 * h);
            assert!((fd - d[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn cw_grad_zero_when_clamped() {
        let logits = [0.0f64, 5.0, 1.0];
        let mut d = [9.0f64; 3];
        cw_grad_batch(&logits, 3, &[0], 2.0, 1.0, &mut d);
        assert_eq!(d, [0.0, 0.0, 0.0]);
        // Active branch: +1 on label, -1 on rival.
        cw_grad_batch(&[3.0, 1.0, 2.5], 3, &[0], 0.0, 1.0, &mut d);
        assert_eq!(d, [1.0, 0.0, -1.0]);
    }
}
