//! Macro one-vs-rest AUC, Cohen's kappa and accuracy.

use std::str::FromStr;

use crate::error::{GlatError, Result};
use crate::NUM_CLASSES;

/// Rank-based binary AUC (Mann-Whitney U with mid-ranks for ties).
/// Returns `None` unless both classes are present.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mid_rank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest AUC over the classes present in `labels`.
pub fn auc_metric(probs: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(GlatError::dims("probabilities and labels differ in length"));
    }
    let mut present = [false; NUM_CLASSES];
    for &l in labels {
        if l >= NUM_CLASSES {
            return Err(GlatError::invalid(format!("label {l} out of range")));
        }
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(GlatError::invalid("AUC needs at least two distinct labels"));
    }
    let mut total = 0.0;
    let mut count = 0;
    for class in (0..NUM_CLASSES).filter(|&c| present[c]) {
        let scores: Vec<f64> = probs.iter().map(|p| p[class]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        total += binary_auc(&scores, &positive).expect("class present with negatives");
        count += 1;
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KappaWeighting {
    #[default]
    None,
    Quadratic,
}

impl FromStr for KappaWeighting {
    type Err = GlatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(GlatError::Config(format!("unknown kappa weighting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa {
    pub value: f64,
    /// Chance agreement was 1; `value` is then defined as 0.
    pub degenerate: bool,
}

pub fn confusion_matrix(pred: &[usize], truth: &[usize]) -> [[usize; NUM_CLASSES]; NUM_CLASSES] {
    let mut c = [[0; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        c[t][p] += 1;
    }
    c
}

/// Cohen's kappa from the confusion matrix, optionally quadratic-weighted.
pub fn kappa_metric(pred: &[usize], truth: &[usize], weighting: KappaWeighting) -> Result<Kappa> {
    if pred.len() != truth.len() {
        return Err(GlatError::dims("predictions and labels differ in length"));
    }
    if pred.is_empty() {
        return Err(GlatError::invalid("kappa needs at least one sample"));
    }
    if pred.iter().chain(truth).any(|&l| l >= NUM_CLASSES) {
        return Err(GlatError::invalid("label out of range"));
    }
    let n = pred.len() as f64;
    let conf = confusion_matrix(pred, truth);
    let row: Vec<f64> = (0..NUM_CLASSES).map(|i| conf[i].iter().sum::<usize>() as f64 / n).collect();
    let col: Vec<f64> = (0..NUM_CLASSES)
        .map(|j| (0..NUM_CLASSES).map(|i| conf[i][j]).sum::<usize>() as f64 / n)
        .collect();
    let weight = |i: usize, j: usize| -> f64 {
        match weighting {
            KappaWeighting::None => (i != j) as u8 as f64,
            KappaWeighting::Quadratic => {
                let d = i as f64 - j as f64;
                d * d / ((NUM_CLASSES - 1) * (NUM_CLASSES - 1)) as f64
            }
        }
    };
    // κ = 1 - observed disagreement / chance disagreement
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..NUM_CLASSES {
        for j in 0..NUM_CLASSES {
            observed += weight(i, j) * conf[i][j] as f64 / n;
            expected += weight(i, j) * row[i] * col[j];
        }
    }
    if expected <= 0.0 {
        return Ok(Kappa { value: 0.0, degenerate: true });
    }
    Ok(Kappa {
        value: 1.0 - observed / expected,
        degenerate: false,
    })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `NaN` when fewer than two classes are present.
    pub auc: f64,
    pub kappa: f64,
    pub accuracy: f64,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

pub fn evaluate(probs: &[[f64; NUM_CLASSES]], labels: &[usize], weighting: KappaWeighting) -> Result<MetricsReport> {
    let pred: Vec<usize> = probs.iter().map(argmax).collect();
    Ok(MetricsReport {
        auc: auc_metric(probs, labels).unwrap_or(f64::NAN),
        kappa: kappa_metric(&pred, labels, weighting)?.value,
        accuracy: accuracy(&pred, labels),
        confusion: confusion_matrix(&pred, labels),
    })
}

/// Index of the largest entry, first on ties.
pub fn argmax(p: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if p[c] > p[best] {
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(scores: &[f64]) -> Vec<[f64; 4]> {
        scores.iter().map(|&s| [1.0 - s, s, 0.0, 0.0]).collect()
    }

    #[test]
    fn auc_extremes() {
        let labels = [0, 0, 0, 1, 1, 1];
        let ordered = two_class(&[0.1, 0.2, 0.3, 0.7, 0.8, 0.9]);
        assert_eq!(auc_metric(&ordered, &labels).unwrap(), 1.0);
        let anti = two_class(&[0.9, 0.8, 0.7, 0.3, 0.2, 0.1]);
        assert_eq!(auc_metric(&anti, &labels).unwrap(), 0.0);
        assert!(auc_metric(&ordered, &[1; 6]).is_err());
    }

    #[test]
    fn auc_matches_pair_counting() {
        let labels = [0, 1, 0, 1, 1, 0];
        let s = [0.3, 0.6, 0.6, 0.2, 0.9, 0.1];
        // Pair count for class 1: positives {0.6, 0.2, 0.9}, negatives {0.3, 0.6, 0.1}.
        // 0.6: beats 0.3, 0.1, ties 0.6 -> 2.5; 0.2: beats 0.1 -> 1; 0.9: 3. Total 6.5 / 9.
        let mut concordant = 0.0;
        let mut pairs = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    concordant += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert_eq!(concordant / pairs, 6.5 / 9.0);
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        assert!((binary_auc(&s, &pos).unwrap() - 6.5 / 9.0).abs() < 1e-15);
        // Class 0 uses 1 - s, which reverses the ordering: same AUC.
        assert!((auc_metric(&two_class(&s), &labels).unwrap() - 6.5 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn kappa_cases() {
        let y = [0, 1, 2, 3, 1];
        assert_eq!(kappa_metric(&y, &y, KappaWeighting::None).unwrap().value, 1.0);
        assert_eq!(kappa_metric(&[1, 0], &[0, 1], KappaWeighting::None).unwrap().value, -1.0);
        let k = kappa_metric(&[2, 2, 2], &[2, 2, 2], KappaWeighting::None).unwrap();
        assert!(k.degenerate);
        assert_eq!(k.value, 0.0);
        assert!(kappa_metric(&[], &[], KappaWeighting::None).is_err());
    }

    #[test]
    fn kappa_eight_sample_hand_computation() {
        let truth = [0, 0, 1, 1, 2, 2, 3, 3];
        let pred = [0, 1, 1, 1, 2, 3, 3, 2];
        // Agreement 5/8. Truth marginals 2/8 each; prediction marginals 1,3,2,2 (/8).
        // p_e = (2*1 + 2*3 + 2*2 + 2*2) / 64 = 16/64 = 0.25.
        let expected = (5.0 / 8.0 - 0.25) / (1.0 - 0.25);
        let k = kappa_metric(&pred, &truth, KappaWeighting::None).unwrap();
        assert!((k.value - expected).abs() < 1e-12);
        assert!((k.value - 0.5).abs() < 1e-12);

        // Quadratic: off-diagonal observed cells (0,1),(2,3),(3,2) each weight 1/9.
        let obs = 3.0 / 9.0 / 8.0;
        let mut exp = 0.0;
        let pm = [1.0, 3.0, 2.0, 2.0];
        for i in 0..4 {
            for j in 0..4 {
                exp += ((i as f64 - j as f64).powi(2) / 9.0) * (2.0 / 8.0) * (pm[j] / 8.0);
            }
        }
        let kq = kappa_metric(&pred, &truth, KappaWeighting::Quadratic).unwrap();
        assert!((kq.value - (1.0 - obs / exp)).abs() < 1e-12);
    }

    #[test]
    fn evaluate_reports_consistent_values() {
        let probs = [[0.7, 0.1, 0.1, 0.1], [0.1, 0.7, 0.1, 0.1], [0.6, 0.2, 0.1, 0.1]];
        let r = evaluate(&probs, &[0, 1, 1], KappaWeighting::None).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.confusion[1][0], 1);
        assert!((0.0..=1.0).contains(&r.auc));
        let single = evaluate(&probs, &[0, 0, 0], KappaWeighting::None).unwrap();
        assert!(single.auc.is_nan());
    }
}
