//! Ranking and classification metrics.

use std::collections::HashSet;

use crate::error::{RapError, Result};

/// Fraction of the top-k recommendations that are held-out items.
pub fn precision_at_k(heldout: &[usize], recommended: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(RapError::argument("k must be positive"));
    }
    if recommended.len() < k {
        return Err(RapError::argument(format!(
            "need at least {k} recommendations, got {}",
            recommended.len()
        )));
    }
    let held: HashSet<usize> = heldout.iter().copied().collect();
    let hits = recommended[..k].iter().filter(|j| held.contains(j)).count();
    Ok(hits as f64 / k as f64)
}

/// Fraction of the held-out items that appear in the top-k.
pub fn recall_at_k(heldout: &[usize], recommended: &[usize], k: usize) -> Result<f64> {
    if heldout.is_empty() {
        return Err(RapError::argument("recall undefined for empty held-out set"));
    }
    let k = k.min(recommended.len());
    let held: HashSet<usize> = heldout.iter().copied().collect();
    let hits = recommended[..k].iter().filter(|j| held.contains(j)).count();
    Ok(hits as f64 / heldout.len() as f64)
}

/// Rank-based binary AUC with midrank tie handling.
pub fn binary_auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(RapError::argument("labels and scores length mismatch"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(RapError::validation(
            "AUC undefined: test pool has a single class",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; ties share the average rank of their block.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Micro-averaged one-vs-rest AUC: every (sample, class) pair becomes one
/// pooled binary example scored by the predicted class probability.
pub fn micro_auc(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(RapError::argument("probs and labels length mismatch"));
    }
    if probs.is_empty() {
        return Err(RapError::argument("empty evaluation set"));
    }
    let classes = probs[0].len();
    let mut pooled_labels = Vec::with_capacity(probs.len() * classes);
    let mut pooled_scores = Vec::with_capacity(probs.len() * classes);
    for (p, &y) in probs.iter().zip(labels.iter()) {
        if p.len() != classes {
            return Err(RapError::argument("ragged probability rows"));
        }
        if y >= classes {
            return Err(RapError::argument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        for (c, &s) in p.iter().enumerate() {
            pooled_labels.push(c == y);
            pooled_scores.push(s);
        }
    }
    binary_auc(&pooled_labels, &pooled_scores)
}
