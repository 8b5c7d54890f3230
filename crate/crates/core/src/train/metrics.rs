//! Router diagnostics computed from masks, loads and scores.

use crate::error::{Error, Result};

/// `(max − mean) / mean` of per-expert loads.
pub fn maxvio(loads: &[f64]) -> Result<f64> {
    if loads.iter().any(|&l| l < 0.0) {
        return Err(Error::Domain("negative load".into()));
    }
    let mean = loads.iter().sum::<f64>() / loads.len().max(1) as f64;
    if loads.is_empty() || mean == 0.0 {
        return Err(Error::UndefinedMetric("MaxVio with zero mean load".into()));
    }
    let max = loads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((max - mean) / mean)
}

/// Entropy in nats of a probability vector.
pub fn selection_entropy(probs: &[f64]) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 || probs.iter().any(|&p| p < 0.0) {
        return Err(Error::Domain(format!("probabilities sum to {total}")));
    }
    Ok(-probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
}

/// Fraction of never-selected slots in `masks` (sequences × positions).
/// By default a slot is a position index, selected if any sequence picked
/// it; with `per_sequence` every (sequence, position) pair counts.
pub fn dead_token_ratio(masks: &[Vec<bool>], per_sequence: bool) -> Result<f64> {
    let t = masks.first().map_or(0, Vec::len);
    if t == 0 || masks.iter().any(|m| m.len() != t) {
        return Err(Error::UndefinedMetric("dead-token ratio needs equal, non-empty masks".into()));
    }
    if per_sequence {
        let dead = masks.iter().flatten().filter(|&&s| !s).count();
        return Ok(dead as f64 / (masks.len() * t) as f64);
    }
    let dead = (0..t).filter(|&p| masks.iter().all(|m| !m[p])).count();
    Ok(dead as f64 / t as f64)
}

/// Binary accuracy of `predicted` against `actual`.
pub fn sampling_accuracy(predicted: &[bool], actual: &[bool]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != actual.len() {
        return Err(Error::UndefinedMetric("sampling accuracy needs equal, non-empty inputs".into()));
    }
    let hits = predicted.iter().zip(actual).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Area under the ROC curve of `scores` for `labels`, ties counted half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if scores.len() != labels.len() || pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxvio_examples() {
        assert_eq!(maxvio(&[10.0, 10.0, 10.0]).unwrap(), 0.0);
        assert!((maxvio(&[30.0, 20.0, 10.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(maxvio(&[0.0, 0.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn uniform_entropy() {
        let h = selection_entropy(&[1.0 / 3.0; 3]).unwrap();
        assert!((h - 3f64.ln()).abs() < 1e-12);
        assert!((h - 1.099).abs() < 1e-3);
        assert!(selection_entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn positional_bias_dead_ratio() {
        let (t, k) = (10, 4);
        let masks: Vec<Vec<bool>> = (0..5).map(|_| (0..t).map(|p| p < k).collect()).collect();
        assert_eq!(dead_token_ratio(&masks, false).unwrap(), (t - k) as f64 / t as f64);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
    }
}
