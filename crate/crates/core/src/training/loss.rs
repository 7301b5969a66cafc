//! Softmax cross-entropy losses with max-shifted log-sum-exp.

use crate::error::{Error, Result};
use crate::labeling::SoftTarget;

/// Tolerance on the total mass of a soft target.
pub const TARGET_SUM_TOL: f64 = 1e-9;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn check_target(target: &SoftTarget, k: usize) -> Result<()> {
    let mut sum = 0.0;
    for (&c, &w) in target {
        if c >= k {
            return Err(Error::Input(format!("target class {c} outside [0, {k})")));
        }
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Input(format!(
                "target weight {w} for class {c} is invalid"
            )));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > TARGET_SUM_TOL {
        return Err(Error::Input(format!("target mass {sum} is not 1")));
    }
    Ok(())
}

/// `-sum_c t_c log softmax(z)_c` against a sparse probability target.
pub fn soft_cross_entropy(logits: &[f64], target: &SoftTarget) -> Result<f64> {
    check_target(target, logits.len())?;
    let ls = log_softmax(logits);
    Ok(-target.iter().map(|(&c, &w)| w * ls[c]).sum::<f64>())
}

/// Standard cross-entropy for a single class label.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Input(format!(
            "label {label} outside [0, {})",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits)[label])
}

/// Loss and `dL/dlogits = softmax(z) - t`.
pub(crate) fn soft_cross_entropy_with_grad(
    logits: &[f64],
    target: &SoftTarget,
) -> Result<(f64, Vec<f64>)> {
    check_target(target, logits.len())?;
    let ls = log_softmax(logits);
    let loss = -target.iter().map(|(&c, &w)| w * ls[c]).sum::<f64>();
    let mut g: Vec<f64> = ls.into_iter().map(f64::exp).collect();
    for (&c, &w) in target {
        g[c] -= w;
    }
    Ok((loss, g))
}

pub(crate) fn cross_entropy_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let loss = cross_entropy(logits, label)?;
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok((loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn one_hot_soft_target_is_standard_ce() {
        let z = [0.3, -1.2, 2.5, 0.0];
        for c in 0..4 {
            let soft = soft_cross_entropy(&z, &BTreeMap::from([(c, 1.0)])).unwrap();
            assert!((soft - cross_entropy(&z, c).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let z = vec![0.7; 10];
        let t = BTreeMap::from([(1, 0.25), (3, 0.75)]);
        assert!((soft_cross_entropy(&z, &t).unwrap() - 10f64.ln()).abs() < 1e-12);
        let z = vec![-3.0; 128];
        let l = cross_entropy(&z, 5).unwrap();
        assert!((l - 128f64.ln()).abs() < 1e-12);
        assert!((l - 4.852).abs() < 1e-3);
    }

    #[test]
    fn favored_class_beats_uniform() {
        let mut z = vec![0.0; 10];
        z[7] = 3.0;
        let t = BTreeMap::from([(7, 2.0 / 3.0), (2, 1.0 / 3.0)]);
        let l = soft_cross_entropy(&z, &t).unwrap();
        // Direct evaluation: lse = ln(9 + e^3).
        let lse = (9.0 + 3f64.exp()).ln();
        let expected = 2.0 / 3.0 * (lse - 3.0) + 1.0 / 3.0 * lse;
        assert!((l - expected).abs() < 1e-12);
        assert!(l < 10f64.ln());
    }

    #[test]
    fn saturated_logits() {
        let l = cross_entropy(&[10.0, -10.0], 0).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((l - expected).abs() < 1e-14);
        assert!((l - 2.061_153_6e-9).abs() < 1e-14);
        assert!(cross_entropy(&[1e300, -1e300], 1).unwrap().is_finite());
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(Error::Input(_))
        ));
        let bad = BTreeMap::from([(0, 0.5)]);
        assert!(matches!(
            soft_cross_entropy(&[0.0, 1.0], &bad),
            Err(Error::Input(_))
        ));
        let out = BTreeMap::from([(5, 1.0)]);
        assert!(soft_cross_entropy(&[0.0, 1.0], &out).is_err());
    }
}
