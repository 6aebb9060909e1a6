//! Regression and classification evaluation metrics.

use super::TrainError;

/// Out-of-sample R²: `1 - SS_res / SS_tot` with the test-set mean as the
/// baseline.
pub fn r2_score(preds: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    check_lengths(preds, targets)?;
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(TrainError::DegenerateTargets);
    }
    let ss_res: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, y)| (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// R² against the zero predictor instead of the test mean.
pub fn r2_zero_baseline(preds: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    check_lengths(preds, targets)?;
    let ss_zero: f64 = targets.iter().map(|y| y * y).sum();
    if ss_zero == 0.0 {
        return Err(TrainError::DegenerateTargets);
    }
    let ss_res: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, y)| (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_zero)
}

fn check_lengths(preds: &[f64], targets: &[f64]) -> Result<(), TrainError> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(TrainError::EmptySplit("metric inputs"));
    }
    Ok(())
}

/// True positive rates of the buy (target > 0) and sell (target < 0)
/// classes. Targets exactly zero belong to neither class; predictions
/// exactly zero never count as correct for either.
pub fn classification_ratios(preds: &[f64], targets: &[f64]) -> Result<(f64, f64), TrainError> {
    check_lengths(preds, targets)?;
    let mut buy_total = 0usize;
    let mut buy_hit = 0usize;
    let mut sell_total = 0usize;
    let mut sell_hit = 0usize;
    for (&p, &y) in preds.iter().zip(targets) {
        if y > 0.0 {
            buy_total += 1;
            if p > 0.0 {
                buy_hit += 1;
            }
        } else if y < 0.0 {
            sell_total += 1;
            if p < 0.0 {
                sell_hit += 1;
            }
        }
    }
    if buy_total == 0 {
        return Err(TrainError::EmptyClass("buy"));
    }
    if sell_total == 0 {
        return Err(TrainError::EmptyClass("sell"));
    }
    Ok((
        buy_hit as f64 / buy_total as f64,
        sell_hit as f64 / sell_total as f64,
    ))
}

/// Ratios weighted by the true log-return magnitudes, so misclassifying
/// large moves costs more than misclassifying small ones.
pub fn weighted_classification_ratios(
    preds: &[f64],
    targets: &[f64],
) -> Result<(f64, f64), TrainError> {
    check_lengths(preds, targets)?;
    let mut buy_total = 0.0;
    let mut buy_hit = 0.0;
    let mut sell_total = 0.0;
    let mut sell_hit = 0.0;
    for (&p, &y) in preds.iter().zip(targets) {
        if y > 0.0 {
            buy_total += y.abs();
            if p > 0.0 {
                buy_hit += y.abs();
            }
        } else if y < 0.0 {
            sell_total += y.abs();
            if p < 0.0 {
                sell_hit += y.abs();
            }
        }
    }
    if buy_total == 0.0 {
        return Err(TrainError::EmptyClass("buy"));
    }
    if sell_total == 0.0 {
        return Err(TrainError::EmptyClass("sell"));
    }
    Ok((buy_hit / buy_total, sell_hit / sell_total))
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_hand_values() {
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        // predicting the mean scores zero
        let t = [1.0, 2.0, 3.0];
        assert!((r2_score(&[2.0, 2.0, 2.0], &t).unwrap()).abs() < 1e-15);
        // 1 - 1/2
        assert!((r2_score(&[1.0, 2.0, 2.0], &t).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            r2_score(&[0.0, 0.0], &[5.0, 5.0]),
            Err(TrainError::DegenerateTargets)
        ));
    }

    #[test]
    fn zero_predictor_on_zero_mean_targets_scores_zero() {
        let t = [-0.4, 0.1, 0.3, -0.1, 0.1];
        assert!(t.iter().sum::<f64>().abs() < 1e-15);
        let zeros = [0.0; 5];
        assert!(r2_score(&zeros, &t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn classification_enumeration() {
        let t = [1.0, 1.0, -1.0, -1.0];
        let p = [1.0, -1.0, 1.0, -1.0];
        let (buy, sell) = classification_ratios(&p, &t).unwrap();
        assert_eq!(buy, 0.5);
        assert_eq!(sell, 0.5);

        let (buy, sell) = classification_ratios(&t, &t).unwrap();
        assert_eq!((buy, sell), (1.0, 1.0));
    }

    #[test]
    fn zero_targets_are_excluded() {
        let t = [1.0, 0.0, -1.0, 0.0];
        let p = [1.0, 1.0, -1.0, -1.0];
        let (buy, sell) = classification_ratios(&p, &t).unwrap();
        assert_eq!((buy, sell), (1.0, 1.0));
    }

    #[test]
    fn all_positive_targets_is_empty_sell_class() {
        assert!(matches!(
            classification_ratios(&[1.0, 1.0], &[0.5, 0.2]),
            Err(TrainError::EmptyClass("sell"))
        ));
    }

    #[test]
    fn weighted_ratios_hand_value() {
        // targets +0.4 and +0.1; only the first predicted correctly
        let t = [0.4, 0.1, -0.2];
        let p = [1.0, -1.0, -1.0];
        let (buy_w, sell_w) = weighted_classification_ratios(&p, &t).unwrap();
        assert!((buy_w - 0.8).abs() < 1e-12);
        assert_eq!(sell_w, 1.0);
    }

    #[test]
    fn misclassifying_the_largest_move_hurts_weighted_more() {
        let t = [0.4, 0.1, -0.2];
        // miss the big +0.4
        let p_big = [-1.0, 1.0, -1.0];
        // miss the small +0.1
        let p_small = [1.0, -1.0, -1.0];
        let (plain_big, _) = classification_ratios(&p_big, &t).unwrap();
        let (plain_small, _) = classification_ratios(&p_small, &t).unwrap();
        assert_eq!(plain_big, plain_small); // same unweighted score
        let (w_big, _) = weighted_classification_ratios(&p_big, &t).unwrap();
        let (w_small, _) = weighted_classification_ratios(&p_small, &t).unwrap();
        assert!(w_big < w_small);
    }

    #[test]
    fn pearson_basics() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [-1.0, -2.0, -3.0, -4.0];
        assert!((pearson(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&a, &[1.0, 1.0, 1.0, 1.0]).is_none());
    }
}
