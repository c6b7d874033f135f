use alloc::vec::Vec;

use crate::error::{Error, Result};

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the Mann–Whitney U statistic with
/// mid-ranks for ties: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::non_finite("roc_auc scores"));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean.
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] == 1 {
                pos_rank_sum += rank;
            }
        }
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Mean per-class recall, predicting positive when `sigmoid(score) >= threshold`.
pub fn balanced_accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "balanced_accuracy",
            &[scores.len()],
            &[labels.len()],
        ));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut hits = [0usize; 2];
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted = u8::from(crate::tensor::sigmoid(s) >= threshold);
        if predicted == y {
            hits[usize::from(y)] += 1;
        }
    }
    Ok((hits[1] as f64 / pos as f64 + hits[0] as f64 / neg as f64) / 2.0)
}

/// Default decision threshold on the sigmoid output.
pub const BALANCED_ACCURACY_THRESHOLD: f64 = 0.5;

/// One-sided label-permutation p-value for `roc_auc(scores, labels)`:
/// `(1 + #{permuted AUC >= observed}) / (1 + permutations)`.
pub fn auc_permutation_p_value(
    scores: &[f64],
    labels: &[u8],
    permutations: usize,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    let observed = roc_auc(scores, labels)?;
    let mut shuffled = labels.to_vec();
    let mut extreme = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(rng);
        if roc_auc(scores, &shuffled)? >= observed {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + permutations) as f64)
}
