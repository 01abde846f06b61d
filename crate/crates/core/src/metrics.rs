//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{MobreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub accuracy: f64,
    pub kappa: f64,
    /// Recall of class 1 for binary tasks, macro-averaged recall otherwise.
    pub sensitivity: f64,
    pub weighted_f1: f64,
    /// `confusion[true][pred]`
    pub confusion: Vec<Vec<u64>>,
    pub num_classes: usize,
    pub chance: f64,
}

pub fn confusion_matrix(labels: &[usize], preds: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if labels.len() != preds.len() {
        return Err(MobreError::Invalid(format!(
            "{} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= k || p >= k {
            return Err(MobreError::Invalid(format!("class index outside 0..{k}")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn compute(labels: &[usize], preds: &[usize], k: usize) -> Result<TaskMetrics> {
    if labels.is_empty() {
        return Err(MobreError::EmptySplit("evaluation set".into()));
    }
    let cm = confusion_matrix(labels, preds, k)?;
    let n = labels.len() as f64;
    let row: Vec<f64> = cm.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col: Vec<f64> = (0..k).map(|j| cm.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let diag: Vec<f64> = (0..k).map(|i| cm[i][i] as f64).collect();
    let po = diag.iter().sum::<f64>() / n;
    let pe = row.iter().zip(&col).map(|(a, b)| a * b).sum::<f64>() / (n * n);
    let kappa = if (1.0 - pe).abs() < 1e-15 {
        if po >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (po - pe) / (1.0 - pe)
    };
    let recall = |i: usize| if row[i] > 0.0 { diag[i] / row[i] } else { 0.0 };
    let sensitivity = if k == 2 {
        recall(1)
    } else {
        let present: Vec<usize> = (0..k).filter(|&i| row[i] > 0.0).collect();
        present.iter().map(|&i| recall(i)).sum::<f64>() / present.len() as f64
    };
    let weighted_f1 = (0..k)
        .map(|i| {
            let prec = if col[i] > 0.0 { diag[i] / col[i] } else { 0.0 };
            let rec = recall(i);
            let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            f1 * row[i] / n
        })
        .sum();
    Ok(TaskMetrics {
        accuracy: po,
        kappa,
        sensitivity,
        weighted_f1,
        confusion: cm,
        num_classes: k,
        chance: 1.0 / k as f64,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (m, (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1, 0];
        let m = compute(&y, &y, 3).unwrap();
        assert_eq!((m.accuracy, m.kappa, m.weighted_f1, m.sensitivity), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_predictor_on_balanced_four_classes() {
        let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let m = compute(&y, &[2; 40], 4).unwrap();
        assert_eq!(m.accuracy, 0.25);
        assert!(m.kappa.abs() < 1e-15);
        for (i, r) in m.confusion.iter().enumerate() {
            assert_eq!(r.iter().sum::<u64>(), 10, "row {i}");
        }
    }

    #[test]
    fn empty_split_rejected() {
        assert!(matches!(compute(&[], &[], 2), Err(MobreError::EmptySplit(_))));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
