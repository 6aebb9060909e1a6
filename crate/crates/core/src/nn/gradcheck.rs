//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NnError;

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences `(f(x+h) - f(x-h)) / 2h` per coordinate and returns
/// the worst relative error.
///
/// The builder is called with fresh leaves for each evaluation, so it must
/// construct the same computation every time.
pub fn grad_check<F>(params: &[Tensor], build: F, h: f64) -> Result<f64, NnError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, NnError>,
{
    let analytic = analytic_grads(params, &build)?;
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let orig = p.data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let f_plus = eval(&work, &build)?;
            work[pi].data_mut()[ci] = orig - h;
            let f_minus = eval(&work, &build)?;
            work[pi].data_mut()[ci] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let ad = analytic[pi][ci];
            worst = worst.max(rel_error(ad, fd));
        }
    }
    Ok(worst)
}

fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn eval<F>(params: &[Tensor], build: &F) -> Result<f64, NnError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, NnError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = build(&mut g, &ids)?;
    if g.value(out).len() != 1 {
        return Err(NnError::ShapeMismatch(
            "grad_check function must be scalar-valued".into(),
        ));
    }
    Ok(g.value(out).item())
}

fn analytic_grads<F>(params: &[Tensor], build: &F) -> Result<Vec<Vec<f64>>, NnError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, NnError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.set_requires_grad(true);
            g.leaf(t)
        })
        .collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    Ok(ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradients_are_exact() {
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.7, -0.3]).unwrap();
        let w = Tensor::matrix(3, 2, vec![0.2, -0.4, 0.9, 0.3, -0.6, 0.8]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.05, -0.02]).unwrap();
        let err = grad_check(
            &[x, w, b],
            |g, ids| {
                let y = crate::nn::layers::linear(g, ids[0], ids[1], ids[2])?;
                Ok(g.sum_all(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "error {err}");
    }

    #[test]
    fn sigmoid_tanh_chain() {
        let x = Tensor::from_vec(&[4], vec![0.3, -0.8, 1.4, -2.2]).unwrap();
        let err = grad_check(
            &[x],
            |g, ids| {
                let s = g.sigmoid(ids[0]);
                let t = g.tanh(s);
                Ok(g.mean_all(t))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "error {err}");
    }
}
