//! Top-1 accuracy, one-vs-rest macro ROC AUC, and grid sensitivity.

use crate::error::{Error, Result};

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "accuracy needs matching non-empty inputs, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| argmax(s) == **y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Rank-statistic AUC with ties credited 0.5; `None` without both classes.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_x2 = (i + 1 + j + 1) as u128;
        let pos_in_run = order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        rank_sum_x2 += avg_x2 * pos_in_run;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Some(u_x2 as f64 / (2 * p * n) as f64)
}

/// One-vs-rest AUC per class, averaged over classes with both positives and
/// negatives. `scores` is `n x classes`.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Metric(
            "macro AUC needs matching non-empty inputs".into(),
        ));
    }
    let classes = scores[0].len();
    if scores.iter().any(|r| r.len() != classes) {
        return Err(Error::Metric("score rows have different widths".into()));
    }
    if scores.iter().flatten().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    if let Some(y) = labels.iter().find(|y| **y >= classes) {
        return Err(Error::Metric(format!("label {y} outside [0, {classes})")));
    }
    let mut total = 0.0;
    let mut evaluated = 0;
    for c in 0..classes {
        let column: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|y| *y == c).collect();
        match binary_auc(&column, &positive) {
            Some(a) => {
                total += a;
                evaluated += 1;
            }
            None => log::warn!("class {c} lacks positives or negatives; skipped in macro AUC"),
        }
    }
    if evaluated == 0 {
        return Err(Error::Metric(
            "no class has both positives and negatives".into(),
        ));
    }
    Ok(total / evaluated as f64)
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Validation metrics over a learning-rate x weight-decay grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub base_lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    /// `values[lr_index][wd_index]`; `None` marks a cell that was not evaluated.
    pub values: Vec<Vec<Option<f64>>>,
}

impl Grid {
    fn complete(&self) -> Result<Vec<Vec<f64>>> {
        if self.base_lrs.is_empty() || self.weight_decays.is_empty() {
            return Err(Error::Input("grid has an empty axis".into()));
        }
        if self.values.len() != self.base_lrs.len()
            || self
                .values
                .iter()
                .any(|r| r.len() != self.weight_decays.len())
        {
            return Err(Error::Input("grid values do not match its axes".into()));
        }
        self.values
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| v.ok_or_else(|| Error::Input("grid has unevaluated cells".into())))
                    .collect()
            })
            .collect()
    }

    /// Cell with the highest value; ties go to the smallest learning rate,
    /// then the smallest weight decay.
    pub fn select(&self) -> Result<(usize, usize)> {
        let vals = self.complete()?;
        let mut best: Option<(usize, usize)> = None;
        for (i, row) in vals.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let better = match best {
                    None => true,
                    Some((bi, bj)) => {
                        let bv = vals[bi][bj];
                        let key = (self.base_lrs[i], self.weight_decays[j]);
                        let bkey = (self.base_lrs[bi], self.weight_decays[bj]);
                        v.total_cmp(&bv)
                            .then_with(|| bkey.0.total_cmp(&key.0))
                            .then_with(|| bkey.1.total_cmp(&key.1))
                            .is_gt()
                    }
                };
                if better {
                    best = Some((i, j));
                }
            }
        }
        Ok(best.expect("non-empty grid"))
    }

    /// `(S_lr, S_wd)`: population std along each axis through the selected cell.
    pub fn sensitivity(&self) -> Result<(f64, f64)> {
        let vals = self.complete()?;
        let (i, j) = self.select()?;
        let lr_axis: Vec<f64> = vals.iter().map(|row| row[j]).collect();
        Ok((population_std(&lr_axis), population_std(&vals[i])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let s = vec![
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.6, 0.4],
            vec![0.5, 0.5],
        ];
        assert_eq!(accuracy(&s, &[0, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&s, &[1, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&s, &[0, 1, 1, 0]).unwrap(), 0.75);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert!(accuracy(&s, &[0]).is_err());
    }

    #[test]
    fn auc_examples() {
        let a = binary_auc(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(
            binary_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]),
            Some(1.0)
        );
        assert_eq!(
            binary_auc(&[0.4; 6], &[true, false, true, false, false, true]),
            Some(0.5)
        );
        assert_eq!(binary_auc(&[0.4, 0.5], &[true, true]), None);
    }

    #[test]
    fn macro_auc_skips_degenerate_classes() {
        // Class 2 never appears, so it is skipped.
        let s = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.6, 0.3, 0.1],
        ];
        let m = macro_auc(&s, &[0, 1, 0]).unwrap();
        assert_eq!(m, 1.0);
        assert!(matches!(
            macro_auc(&[vec![0.3, 0.7]], &[1]),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn sensitivity_examples() {
        let g = Grid {
            base_lrs: vec![0.025, 0.0025, 0.00025],
            weight_decays: vec![0.01],
            values: vec![vec![Some(0.8)], vec![Some(0.7)], vec![Some(0.6)]],
        };
        let (s_lr, s_wd) = g.sensitivity().unwrap();
        assert!((s_lr - 0.08165).abs() < 1e-5);
        assert_eq!(s_wd, 0.0);
        let flat = Grid {
            base_lrs: vec![0.1, 0.2],
            weight_decays: vec![0.1, 0.2],
            values: vec![vec![Some(0.5); 2]; 2],
        };
        assert_eq!(flat.sensitivity().unwrap(), (0.0, 0.0));
        assert_eq!(flat.select().unwrap(), (0, 0));
        let holes = Grid {
            values: vec![vec![Some(0.5), None], vec![Some(0.5); 2]],
            ..flat
        };
        assert!(matches!(holes.sensitivity(), Err(Error::Input(_))));
    }

    #[test]
    fn tie_break_uses_values_not_positions() {
        let g = Grid {
            base_lrs: vec![0.025, 0.0025],
            weight_decays: vec![0.01, 0.001],
            values: vec![vec![Some(0.9), Some(0.9)], vec![Some(0.9), Some(0.1)]],
        };
        // Smallest lr is index 1; among its ties the smallest wd (index 1) scores 0.1,
        // so the winner is (1, 0).
        assert_eq!(g.select().unwrap(), (1, 0));
    }
}
