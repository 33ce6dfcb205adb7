use crate::error::{Error, Result};

/// `log(sum_j exp(logits_j)) - logits[label]`, evaluated with the maximum
/// subtracted first.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Softmax of a score vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let l = softmax_cross_entropy(&[0.3; 7], 4).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_example() {
        let l = softmax_cross_entropy(&[1.0, 2.0, 3.0], 1).unwrap();
        let expect = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 2.0;
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 1.4076).abs() < 1e-4);
    }

    #[test]
    fn dominant_label_drives_loss_to_zero() {
        let l = softmax_cross_entropy(&[0.0, 1e4, 1.0], 1).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        assert!(softmax_cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    proptest! {
        #[test]
        fn shift_invariance(logits in prop::collection::vec(-20.0f64..20.0, 1..12),
                            shift in -50.0f64..50.0, pick in 0usize..12) {
            let label = pick % logits.len();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let a = softmax_cross_entropy(&logits, label).unwrap();
            let b = softmax_cross_entropy(&shifted, label).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
