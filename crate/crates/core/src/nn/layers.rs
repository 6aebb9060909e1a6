//! The layer zoo: linear maps, layer norm with gain/bias, multi-head
//! attention, sinusoidal position encoding, and the LSTM cell.

use std::sync::Arc;

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{Binder, ParamId, ParamStore};
use super::tensor::Tensor;
use super::NnError;

/// `y = x W + b`, applied row by row.
pub fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Row standardization followed by elementwise gain and bias.
pub fn layer_norm(
    g: &mut Graph,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
) -> Result<NodeId, NnError> {
    let normed = g.layer_norm_rows(x)?;
    let scaled = g.mul_row(normed, gain)?;
    g.add_row(scaled, bias)
}

/// `LayerNorm(x + sublayer_out)` residual form.
pub fn add_norm(
    g: &mut Graph,
    x: NodeId,
    sublayer_out: NodeId,
    gain: NodeId,
    bias: NodeId,
) -> Result<NodeId, NnError> {
    let sum = g.add(x, sublayer_out)?;
    layer_norm(g, sum, gain, bias)
}

/// Lower-triangular visibility mask for autoregressive attention.
pub fn causal_mask(n: usize) -> Arc<Vec<bool>> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    Arc::new(m)
}

/// Sinusoid position encoding: `PE[n, 2i] = sin(n / 10000^(2i/d))` and
/// `PE[n, 2i+1] = cos` of the same argument.
pub fn sinusoidal_pe(len: usize, dim: usize) -> Result<Tensor, NnError> {
    if dim % 2 != 0 {
        return Err(NnError::OddDimension(dim));
    }
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::from_vec(&[len, dim], data)
}

struct HeadParams {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    b_q: ParamId,
    b_k: ParamId,
    b_v: ParamId,
}

/// Multi-head self/cross attention with per-head projections and a final
/// output projection back to `d_model`.
pub struct MultiHeadAttention {
    heads: Vec<HeadParams>,
    w_o: ParamId,
    b_o: ParamId,
}

impl MultiHeadAttention {
    /// Standard construction with `head_dim = d_model / heads`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if heads == 0 || d_model % heads != 0 {
            return Err(NnError::IndivisibleHeads { d_model, heads });
        }
        Self::with_head_dim(store, prefix, d_model, heads, d_model / heads, rng)
    }

    /// Construction with an explicit per-head width. The concatenated head
    /// outputs (`heads * head_dim`) are projected back to `d_model`, so any
    /// positive `head_dim` is valid.
    pub fn with_head_dim(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if heads == 0 || head_dim == 0 {
            return Err(NnError::IndivisibleHeads { d_model, heads });
        }
        let mut hp = Vec::with_capacity(heads);
        for h in 0..heads {
            let mk = |role: &str| format!("{prefix}.h{h}.{role}");
            hp.push(HeadParams {
                w_q: store.add_uniform(&mk("w_q"), &[d_model, head_dim], d_model, rng)?,
                w_k: store.add_uniform(&mk("w_k"), &[d_model, head_dim], d_model, rng)?,
                w_v: store.add_uniform(&mk("w_v"), &[d_model, head_dim], d_model, rng)?,
                b_q: store.add_zeros(&mk("b_q"), &[head_dim])?,
                b_k: store.add_zeros(&mk("b_k"), &[head_dim])?,
                b_v: store.add_zeros(&mk("b_v"), &[head_dim])?,
            });
        }
        let concat = heads * head_dim;
        let w_o = store.add_uniform(&format!("{prefix}.w_o"), &[concat, d_model], concat, rng)?;
        let b_o = store.add_zeros(&format!("{prefix}.b_o"), &[d_model])?;
        Ok(MultiHeadAttention { heads: hp, w_o, b_o })
    }

    /// Self-attention over `x`; `kv` may differ for cross-attention.
    pub fn apply(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        x: NodeId,
        kv: NodeId,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<NodeId, NnError> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let w_q = binder.bind(g, store, h.w_q);
            let w_k = binder.bind(g, store, h.w_k);
            let w_v = binder.bind(g, store, h.w_v);
            let b_q = binder.bind(g, store, h.b_q);
            let b_k = binder.bind(g, store, h.b_k);
            let b_v = binder.bind(g, store, h.b_v);
            let q = linear(g, x, w_q, b_q)?;
            let k = linear(g, kv, w_k, b_k)?;
            let v = linear(g, kv, w_v, b_v)?;
            outs.push(g.attention(q, k, v, mask.clone())?);
        }
        let cat = g.concat_cols(&outs)?;
        let w_o = binder.bind(g, store, self.w_o);
        let b_o = binder.bind(g, store, self.b_o);
        linear(g, cat, w_o, b_o)
    }
}

/// One LSTM layer's gate parameters: a single `[in+hidden, 4*hidden]`
/// matrix in gate order f, i, o, g and its bias (forget section +1).
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let w = store.add_uniform(
            &format!("{prefix}.w"),
            &[in_dim + hidden, 4 * hidden],
            in_dim + hidden,
            rng,
        )?;
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for v in &mut bias.data_mut()[0..hidden] {
            *v = 1.0; // forget-gate bias
        }
        let b = store.add(&format!("{prefix}.b"), bias)?;
        Ok(LstmCell { w, b, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// One step: takes `[1, in]` input and `[1, hidden]` state, returns
    /// `(h_t, c_t)`.
    pub fn step(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        store: &ParamStore,
        x: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId), NnError> {
        let w = binder.bind(g, store, self.w);
        let b = binder.bind(g, store, self.b);
        let hx = g.concat_cols(&[h_prev, x])?;
        let gates = linear(g, hx, w, b)?;
        let hdim = self.hidden;
        let f_pre = g.narrow_cols(gates, 0, hdim)?;
        let i_pre = g.narrow_cols(gates, hdim, hdim)?;
        let o_pre = g.narrow_cols(gates, 2 * hdim, hdim)?;
        let g_pre = g.narrow_cols(gates, 3 * hdim, hdim)?;
        let f = g.sigmoid(f_pre);
        let i = g.sigmoid(i_pre);
        let o = g.sigmoid(o_pre);
        let cand = g.tanh(g_pre);
        let fc = g.mul(f, c_prev)?;
        let ig = g.mul(i, cand)?;
        let c_t = g.add(fc, ig)?;
        let c_act = g.tanh(c_t);
        let h_t = g.mul(o, c_act)?;
        Ok((h_t, c_t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity_and_sum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let w = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let y = linear(&mut g, x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
    }

    #[test]
    fn pe_first_row_alternates_zero_one() {
        let pe = sinusoidal_pe(4, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe.at(0, 2 * i), 0.0);
            assert_eq!(pe.at(0, 2 * i + 1), 1.0);
        }
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-12);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn pe_rejects_odd_dimension() {
        assert!(matches!(sinusoidal_pe(4, 5), Err(NnError::OddDimension(5))));
    }

    #[test]
    fn pe_value_sin_of_one() {
        let pe = sinusoidal_pe(2, 2).unwrap();
        assert!((pe.at(1, 0) - 0.8414709848078965).abs() < 1e-12);
    }

    #[test]
    fn mha_requires_divisibility_without_explicit_head_dim() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "attn", 64, 6, &mut rng),
            Err(NnError::IndivisibleHeads { .. })
        ));
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::with_head_dim(&mut store, "attn", 64, 6, 10, &mut rng).is_ok());
    }

    #[test]
    fn mha_single_head_output_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, "attn", 4, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, false);
        let x = g.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        let y = mha.apply(&mut g, &mut binder, &store, x, x, None).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 4]);
    }

    #[test]
    fn lstm_cell_zero_params_zero_state() {
        // With all weights and biases zero the gates sit at 0.5, the
        // candidate at tanh(0)=0, so c_t = 0 and h_t = 0.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[5, 8])).unwrap();
        let b = store.add("b", Tensor::zeros(&[8])).unwrap();
        let cell = LstmCell { w, b, hidden: 2 };
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, false);
        let x = g.constant(Tensor::matrix(1, 3, vec![0.3, -0.4, 0.9]).unwrap());
        let h0 = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let c0 = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let (h1, c1) = cell.step(&mut g, &mut binder, &store, x, h0, c0).unwrap();
        assert_eq!(g.value(c1).data(), &[0.0, 0.0]);
        assert_eq!(g.value(h1).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_cell_retains_memory_with_saturated_gates() {
        // Large forget bias and very negative input-gate bias: c_t ~ c_prev.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[3, 8])).unwrap();
        let mut bias = Tensor::zeros(&[8]);
        bias.data_mut()[0] = 30.0; // forget
        bias.data_mut()[1] = 30.0;
        bias.data_mut()[2] = -30.0; // input
        bias.data_mut()[3] = -30.0;
        let b = store.add("b", bias).unwrap();
        let cell = LstmCell { w, b, hidden: 2 };
        let mut g = Graph::new();
        let mut binder = Binder::new(&store, false);
        let x = g.constant(Tensor::matrix(1, 1, vec![5.0]).unwrap());
        let h0 = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let c0 = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let (_, c1) = cell.step(&mut g, &mut binder, &store, x, h0, c0).unwrap();
        assert!((g.value(c1).data()[0] - 1.0).abs() < 1e-9);
        assert!((g.value(c1).data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lstm_forget_bias_initialized_to_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, "l0", 3, 4, &mut rng).unwrap();
        let bias = store.get(cell.b).tensor();
        assert_eq!(&bias.data()[0..4], &[1.0, 1.0, 1.0, 1.0]);
        assert!(bias.data()[4..].iter().all(|&v| v == 0.0));
    }
}
