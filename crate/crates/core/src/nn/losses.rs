//! Loss functions, both as graph nodes for training and as plain
//! evaluation routines.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    Mse,
    Mae,
    Quantile,
}

/// Mean squared error node over a prediction and a constant target.
pub fn mse_node(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId, NnError> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Mean absolute error node.
pub fn mae_node(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId, NnError> {
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<(), NnError> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(NnError::ShapeMismatch(format!(
            "loss over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Plain MSE with mean reduction.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, NnError> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Plain MAE with mean reduction.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64, NnError> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// Pinball term for one prediction/target pair at quantile `q`, using the
/// residual `u = y - y_hat` so the minimizer is the q-quantile.
pub fn pinball(pred: f64, target: f64, q: f64) -> f64 {
    let u = target - pred;
    (q * u).max((q - 1.0) * u)
}

/// Mean pinball loss over an `[n, n_quantiles]` prediction matrix.
pub fn quantile_loss(
    preds: &Tensor,
    targets: &[f64],
    quantiles: &[f64],
) -> Result<f64, NnError> {
    for &q in quantiles {
        if !(q > 0.0 && q < 1.0) {
            return Err(NnError::QuantileOutOfRange(q));
        }
    }
    if preds.rows() != targets.len() || preds.cols() != quantiles.len() || targets.is_empty() {
        return Err(NnError::ShapeMismatch(format!(
            "quantile loss: preds {:?}, {} targets, {} quantiles",
            preds.shape(),
            targets.len(),
            quantiles.len()
        )));
    }
    let mut acc = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        for (j, &q) in quantiles.iter().enumerate() {
            acc += pinball(preds.at(r, j), y, q);
        }
    }
    Ok(acc / (targets.len() * quantiles.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_hand_values() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert!(mse(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_hand_values() {
        assert_eq!(mae(&[0.0], &[-2.0]).unwrap(), 2.0);
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn pinball_hand_values() {
        // q=0.5, pred 2, y 1
        assert!((pinball(2.0, 1.0, 0.5) - 0.5).abs() < 1e-15);
        // zero residual
        assert_eq!(pinball(1.0, 1.0, 0.9), 0.0);
    }

    #[test]
    fn quantile_loss_at_half_is_half_mae() {
        let preds = Tensor::matrix(4, 1, vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        let targets = [0.0, 1.0, 2.5, -4.0];
        let ql = quantile_loss(&preds, &targets, &[0.5]).unwrap();
        let m = mae(preds.data(), &targets).unwrap();
        assert!((ql - 0.5 * m).abs() < 1e-15);
    }

    #[test]
    fn quantile_loss_rejects_out_of_range() {
        let preds = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert!(matches!(
            quantile_loss(&preds, &[0.0], &[1.5]),
            Err(NnError::QuantileOutOfRange(_))
        ));
    }
}
