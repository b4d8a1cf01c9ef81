//! Rank-based AUC and ROC curves. Higher scores mean "more anomalous".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], flags: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != flags.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} anomaly flags",
            scores.len(),
            flags.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite anomaly score {s}")));
    }
    let pos = flags.iter().filter(|&&f| f).count();
    let neg = flags.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "AUC needs both normal and anomalous samples ({neg} normal, {pos} anomalous)"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC with tied scores given their average rank.
pub fn auc(scores: &[f64], flags: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, flags)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are doubled so tied averages stay integral.
    let mut rank_sum_2x: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1, doubled average = i + j + 2.
        let avg2 = (i + j + 2) as u128;
        let hits = order[i..=j].iter().filter(|&&k| flags[k]).count() as u128;
        rank_sum_2x += avg2 * hits;
        i = j + 1;
    }
    let pos128 = pos as u128;
    let u2 = rank_sum_2x - pos128 * (pos128 + 1);
    Ok(u2 as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples with score `>= threshold` are flagged anomalous.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Trapezoidal area under the points.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

/// One point per distinct score, thresholds descending, starting at
/// `(0, 0)` with an infinite threshold and ending at `(1, 1)`.
pub fn roc_points(scores: &[f64], flags: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check(scores, flags)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if flags[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(RocCurve {
        points,
        auc: auc(scores, flags)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let f = [false, false, true, true];
        assert_eq!(auc(&s, &f).unwrap(), 1.0);
        let roc = roc_points(&s, &f).unwrap();
        assert!(roc.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(roc.points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
    }

    #[test]
    fn all_tied_is_one_half() {
        let s = [0.3; 5];
        let f = [true, false, false, true, false];
        assert_eq!(auc(&s, &f).unwrap(), 0.5);
        let roc = roc_points(&s, &f).unwrap();
        assert_eq!(roc.points.len(), 2);
        assert_eq!(roc.trapezoid_area(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auc(&[1.0, 2.0], &[true, true]).is_err());
        assert!(roc_points(&[1.0, 2.0], &[false, false]).is_err());
        assert!(auc(&[1.0], &[true, false]).is_err());
    }
}
