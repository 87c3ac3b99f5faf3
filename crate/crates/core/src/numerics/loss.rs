use crate::error::{ensure, Result};

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient
/// with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    grouped_cross_entropy(logits, label, logits.len())
}

/// Cross-entropy where several output units vote for the same class.
///
/// Unit `j` belongs to class `j % num_classes`; the class probability is the
/// total softmax mass of its units, so the class score is the log-sum-exp of
/// the unit logits in the group. With `logits.len() == num_classes` this is
/// exactly [`softmax_cross_entropy`].
pub fn grouped_cross_entropy(
    logits: &[f64],
    label: usize,
    num_classes: usize,
) -> Result<(f64, Vec<f64>)> {
    ensure!(num_classes >= 2, Argument, "need at least 2 classes, got {num_classes}");
    ensure!(
        logits.len() >= num_classes,
        Argument,
        "{} output units cannot cover {num_classes} classes",
        logits.len()
    );
    ensure!(
        label < num_classes,
        Argument,
        "label {label} out of range for {num_classes} classes"
    );
    ensure!(
        logits.iter().all(|z| z.is_finite()),
        Numeric,
        "non-finite logit"
    );

    let group = || logits.iter().copied().skip(label).step_by(num_classes);
    let lse_all = log_sum_exp(logits.iter().copied());
    let lse_group = log_sum_exp(group());
    let loss = (lse_all - lse_group).max(0.0);

    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse_all).exp()).collect();
    for j in (label..logits.len()).step_by(num_classes) {
        grad[j] -= (logits[j] - lse_group).exp();
    }
    Ok((loss, grad))
}

/// Class probabilities under the grouped readout.
pub fn class_probabilities(logits: &[f64], num_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_classes];
    for (j, p) in softmax(logits).into_iter().enumerate() {
        out[j % num_classes] += p;
    }
    out
}

/// Class scores (per-class log-sum-exp of unit logits) under the grouped
/// readout. Equal to the logits themselves when there is one unit per class.
pub fn class_scores(logits: &[f64], num_classes: usize) -> Vec<f64> {
    if logits.len() == num_classes {
        return logits.to_vec();
    }
    (0..num_classes)
        .map(|c| log_sum_exp(logits.iter().copied().skip(c).step_by(num_classes)))
        .collect()
}

/// Mean squared error and its gradient.
pub fn squared_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    ensure!(
        pred.len() == target.len(),
        Argument,
        "prediction length {} vs target length {}",
        pred.len(),
        target.len()
    );
    ensure!(!pred.is_empty(), Argument, "empty prediction");
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    ensure!(loss.is_finite(), Numeric, "non-finite squared loss");
    let grad = diff.iter().map(|d| 2.0 * d / n).collect();
    Ok((loss, grad))
}
