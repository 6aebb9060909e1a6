//! Stacked LSTM forecaster: the window rows feed the bottom layer step by
//! step, the top layer's final hidden state maps through a linear head.

use rand::Rng;

use super::{ModelError, ModelSpec};
use crate::nn::layers::{linear, LstmCell};
use crate::nn::{Binder, Graph, NodeId, ParamId, ParamStore, Tensor};

pub struct LstmArch {
    cells: Vec<LstmCell>,
    head_w: ParamId,
    head_b: ParamId,
    hidden: usize,
}

impl LstmArch {
    pub fn build(
        spec: &ModelSpec,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let mut cells = Vec::with_capacity(spec.lstm_layers);
        for layer in 0..spec.lstm_layers {
            let in_dim = if layer == 0 {
                spec.in_features
            } else {
                spec.lstm_hidden
            };
            cells.push(LstmCell::new(
                store,
                &format!("lstm.l{layer}"),
                in_dim,
                spec.lstm_hidden,
                rng,
            )?);
        }
        let head_w = store.add_uniform(
            "head.w",
            &[spec.lstm_hidden, spec.n_outputs()],
            spec.lstm_hidden,
            rng,
        )?;
        let head_b = store.add_zeros("head.b", &[spec.n_outputs()])?;
        Ok(LstmArch {
            cells,
            head_w,
            head_b,
            hidden: spec.lstm_hidden,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        window_rows: &Tensor,
    ) -> Result<NodeId, ModelError> {
        let steps = window_rows.rows();
        let zero = Tensor::zeros(&[1, self.hidden]);
        let mut h: Vec<NodeId> = (0..self.cells.len())
            .map(|_| g.constant(zero.clone()))
            .collect();
        let mut c: Vec<NodeId> = (0..self.cells.len())
            .map(|_| g.constant(zero.clone()))
            .collect();
        for t in 0..steps {
            let row =
                Tensor::from_vec(&[1, window_rows.cols()], window_rows.row(t).to_vec())
                    .expect("row shape");
            let mut x = g.constant(row);
            for (layer, cell) in self.cells.iter().enumerate() {
                let (h_t, c_t) = cell.step(g, binder, store, x, h[layer], c[layer])?;
                h[layer] = h_t;
                c[layer] = c_t;
                x = h_t;
            }
        }
        let w = binder.bind(g, store, self.head_w);
        let b = binder.bind(g, store, self.head_b);
        let out = linear(g, *h.last().expect("at least one layer"), w, b)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelInstance;

    fn window(l: usize, f: usize, seed: f64) -> Tensor {
        let data: Vec<f64> = (0..l * f)
            .map(|i| ((i as f64 + seed) * 0.61).sin() * 0.5)
            .collect();
        Tensor::from_vec(&[l, f], data).unwrap()
    }

    #[test]
    fn output_is_scalar_in_mse_mode() {
        let spec = ModelSpec::lstm(6, 1);
        let m = ModelInstance::new(spec, 1).unwrap();
        let p = m.predict(&window(6, 38, 0.0)).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p[0].is_finite());
    }

    #[test]
    fn zero_params_output_equals_head_bias() {
        let mut spec = ModelSpec::lstm(4, 1);
        spec.lstm_layers = 2;
        spec.lstm_hidden = 3;
        let mut m = ModelInstance::new(spec, 0).unwrap();
        let zeros: Vec<Vec<f64>> = m
            .store()
            .iter()
            .map(|p| vec![0.0; p.tensor().len()])
            .collect();
        m.store_mut().load_values(&zeros).unwrap();
        // with all parameters zero the final hidden state is zero, so the
        // output is exactly the (zero) head bias
        let p = m.predict(&window(4, 38, 3.0)).unwrap();
        assert_eq!(p, vec![0.0]);

        // non-zero bias shows through unchanged
        let mut with_bias = zeros;
        *with_bias.last_mut().unwrap() = vec![0.125];
        m.store_mut().load_values(&with_bias).unwrap();
        let p = m.predict(&window(4, 38, 3.0)).unwrap();
        assert_eq!(p, vec![0.125]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = ModelInstance::new(ModelSpec::lstm(5, 2), 9).unwrap();
        let w = window(5, 38, 1.0);
        let a = m.predict(&w).unwrap();
        let b = m.predict(&w).unwrap();
        assert_eq!(a, b);
    }
}
