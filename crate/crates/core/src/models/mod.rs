//! Model assembly: the transformer-encoder forecaster (`hfformer`), the
//! stacked-LSTM baseline, and the ablation variants.

mod hfformer;
mod lstm;

pub use hfformer::HfformerArch;
pub use lstm::LstmArch;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::graph::SpikingMode;
use crate::nn::losses::LossKind;
use crate::nn::optim::AdamWState;
use crate::nn::{checkpoint, Binder, Graph, NodeId, NnError, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("ablation flags are only valid for hfformer specs, got {0}")]
    InvalidAblation(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("spec parse: {0}")]
    SpecParse(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hfformer,
    Lstm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Hfformer => write!(f, "hfformer"),
            ModelKind::Lstm => write!(f, "lstm"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AblationFlags {
    pub use_positional_encoding: bool,
    pub use_transformer_decoder: bool,
    pub plain_prelu: bool,
}

/// Architecture configuration. `hfformer` defaults follow the tuned
/// hyperparameters: one encoder block of width 64 with 6 attention heads
/// and a two-layer linear decoder; the LSTM baseline uses 5 layers of 16.
///
/// 64 is not divisible by 6, so the per-head width is an explicit field
/// (default `d_model / heads` rounded down) and the concatenated heads are
/// projected back to `d_model`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub in_features: usize,
    pub look_back: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub encoder_blocks: usize,
    pub ffn_inner: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub loss: LossKind,
    pub quantiles: Vec<f64>,
    pub spike_temperature: f64,
    /// Activation order in the encoder feed-forward: PReLU first, then the
    /// spiking gate (the gate-last reading of the combined activation).
    pub prelu_before_spike: bool,
    /// Feature column fed to the autoregressive decoder ablation
    /// (the lagged log-return column in the standard 38-feature layout).
    pub decoder_input_col: usize,
    pub ablation: AblationFlags,
}

impl ModelSpec {
    pub fn hfformer(look_back: usize, horizon: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Hfformer,
            in_features: crate::features::FEATURE_DIM,
            look_back,
            horizon,
            d_model: 64,
            heads: 6,
            head_dim: 10,
            encoder_blocks: 1,
            ffn_inner: 256,
            lstm_layers: 5,
            lstm_hidden: 16,
            loss: LossKind::Mse,
            quantiles: vec![0.1, 0.5, 0.9],
            spike_temperature: 0.1,
            prelu_before_spike: true,
            decoder_input_col: crate::features::LAGGED_RETURN_COL,
            ablation: AblationFlags::default(),
        }
    }

    pub fn lstm(look_back: usize, horizon: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Lstm,
            ..ModelSpec::hfformer(look_back, horizon)
        }
    }

    /// Output width: one column per quantile under quantile loss, else 1.
    pub fn n_outputs(&self) -> usize {
        match self.loss {
            LossKind::Quantile => self.quantiles.len(),
            _ => 1,
        }
    }

    /// Index of the output used as the point forecast (closest to the
    /// median under quantile loss).
    pub fn point_output(&self) -> usize {
        match self.loss {
            LossKind::Quantile => {
                let mut best = 0;
                let mut dist = f64::INFINITY;
                for (i, &q) in self.quantiles.iter().enumerate() {
                    if (q - 0.5).abs() < dist {
                        dist = (q - 0.5).abs();
                        best = i;
                    }
                }
                best
            }
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.look_back == 0 {
            return Err(ModelError::InvalidSpec("look_back must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(ModelError::InvalidSpec("horizon must be >= 1".into()));
        }
        if self.in_features == 0 {
            return Err(ModelError::InvalidSpec("in_features must be >= 1".into()));
        }
        if self.loss == LossKind::Quantile {
            if self.quantiles.is_empty() {
                return Err(ModelError::InvalidSpec(
                    "quantile loss needs at least one quantile".into(),
                ));
            }
            for &q in &self.quantiles {
                if !(q > 0.0 && q < 1.0) {
                    return Err(ModelError::InvalidSpec(format!(
                        "quantile {q} outside (0, 1)"
                    )));
                }
            }
        }
        match self.kind {
            ModelKind::Hfformer => {
                if self.d_model == 0 || self.heads == 0 || self.head_dim == 0 {
                    return Err(ModelError::InvalidSpec(
                        "d_model, heads and head_dim must be positive".into(),
                    ));
                }
                if self.encoder_blocks == 0 || self.ffn_inner == 0 {
                    return Err(ModelError::InvalidSpec(
                        "encoder_blocks and ffn_inner must be positive".into(),
                    ));
                }
                if self.spike_temperature <= 0.0 {
                    return Err(ModelError::InvalidSpec(
                        "spike_temperature must be positive".into(),
                    ));
                }
                if self.ablation.use_positional_encoding && self.d_model % 2 != 0 {
                    return Err(ModelError::InvalidSpec(
                        "positional encoding needs an even d_model".into(),
                    ));
                }
                if self.ablation.use_transformer_decoder
                    && self.decoder_input_col >= self.in_features
                {
                    return Err(ModelError::InvalidSpec(format!(
                        "decoder_input_col {} out of range for {} features",
                        self.decoder_input_col, self.in_features
                    )));
                }
            }
            ModelKind::Lstm => {
                if self.lstm_layers == 0 || self.lstm_hidden == 0 {
                    return Err(ModelError::InvalidSpec(
                        "lstm_layers and lstm_hidden must be positive".into(),
                    ));
                }
                if self.ablation != AblationFlags::default() {
                    return Err(ModelError::InvalidAblation("lstm".into()));
                }
            }
        }
        Ok(())
    }

    /// Deterministic key-value text embedded in checkpoints.
    pub fn to_kv(&self) -> String {
        let quantiles = self
            .quantiles
            .iter()
            .map(|q| format!("{q}"))
            .collect::<Vec<_>>()
            .join(",");
        let loss = match self.loss {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Quantile => "quantile",
        };
        format!(
            "kind = {}\nin_features = {}\nlook_back = {}\nhorizon = {}\nd_model = {}\n\
             heads = {}\nhead_dim = {}\nencoder_blocks = {}\nffn_inner = {}\n\
             lstm_layers = {}\nlstm_hidden = {}\nloss = {}\nquantiles = {}\n\
             spike_temperature = {}\nprelu_before_spike = {}\ndecoder_input_col = {}\n\
             use_positional_encoding = {}\nuse_transformer_decoder = {}\nplain_prelu = {}\n",
            self.kind,
            self.in_features,
            self.look_back,
            self.horizon,
            self.d_model,
            self.heads,
            self.head_dim,
            self.encoder_blocks,
            self.ffn_inner,
            self.lstm_layers,
            self.lstm_hidden,
            loss,
            quantiles,
            self.spike_temperature,
            self.prelu_before_spike,
            self.decoder_input_col,
            self.ablation.use_positional_encoding,
            self.ablation.use_transformer_decoder,
            self.ablation.plain_prelu,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let mut spec = ModelSpec::hfformer(2, 1);
        let mut saw_kind = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::SpecParse(format!("line {}: `{line}`", ln + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| ModelError::SpecParse(format!("bad {what}: `{value}`"));
            match key {
                "kind" => {
                    saw_kind = true;
                    spec.kind = match value {
                        "hfformer" => ModelKind::Hfformer,
                        "lstm" => ModelKind::Lstm,
                        _ => return Err(bad("kind")),
                    };
                }
                "in_features" => spec.in_features = value.parse().map_err(|_| bad(key))?,
                "look_back" => spec.look_back = value.parse().map_err(|_| bad(key))?,
                "horizon" => spec.horizon = value.parse().map_err(|_| bad(key))?,
                "d_model" => spec.d_model = value.parse().map_err(|_| bad(key))?,
                "heads" => spec.heads = value.parse().map_err(|_| bad(key))?,
                "head_dim" => spec.head_dim = value.parse().map_err(|_| bad(key))?,
                "encoder_blocks" => spec.encoder_blocks = value.parse().map_err(|_| bad(key))?,
                "ffn_inner" => spec.ffn_inner = value.parse().map_err(|_| bad(key))?,
                "lstm_layers" => spec.lstm_layers = value.parse().map_err(|_| bad(key))?,
                "lstm_hidden" => spec.lstm_hidden = value.parse().map_err(|_| bad(key))?,
                "loss" => {
                    spec.loss = match value {
                        "mse" => LossKind::Mse,
                        "mae" => LossKind::Mae,
                        "quantile" => LossKind::Quantile,
                        _ => return Err(bad("loss")),
                    };
                }
                "quantiles" => {
                    spec.quantiles = value
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad(key))?;
                }
                "spike_temperature" => {
                    spec.spike_temperature = value.parse().map_err(|_| bad(key))?
                }
                "prelu_before_spike" => {
                    spec.prelu_before_spike = value.parse().map_err(|_| bad(key))?
                }
                "decoder_input_col" => {
                    spec.decoder_input_col = value.parse().map_err(|_| bad(key))?
                }
                "use_positional_encoding" => {
                    spec.ablation.use_positional_encoding = value.parse().map_err(|_| bad(key))?
                }
                "use_transformer_decoder" => {
                    spec.ablation.use_transformer_decoder = value.parse().map_err(|_| bad(key))?
                }
                "plain_prelu" => spec.ablation.plain_prelu = value.parse().map_err(|_| bad(key))?,
                other => return Err(ModelError::SpecParse(format!("unknown key `{other}`"))),
            }
        }
        if !saw_kind {
            return Err(ModelError::SpecParse("missing `kind`".into()));
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Named ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Replace the combined spiking+PReLU activation with plain PReLU.
    NoSpiking,
    /// Add the sinusoid positional encoding back.
    WithPe,
    /// Replace the linear decoder with an autoregressive attention decoder.
    TransformerDecoder,
}

/// Returns a spec differing from `base` only in the named flag.
pub fn build_variant(base: &ModelSpec, which: Ablation) -> Result<ModelSpec, ModelError> {
    if base.kind != ModelKind::Hfformer {
        return Err(ModelError::InvalidAblation(base.kind.to_string()));
    }
    let mut spec = base.clone();
    match which {
        Ablation::NoSpiking => spec.ablation.plain_prelu = true,
        Ablation::WithPe => spec.ablation.use_positional_encoding = true,
        Ablation::TransformerDecoder => spec.ablation.use_transformer_decoder = true,
    }
    spec.validate()?;
    Ok(spec)
}

enum Arch {
    Hfformer(HfformerArch),
    Lstm(LstmArch),
}

/// A spec plus its parameter store, ready for forward passes.
pub struct ModelInstance {
    spec: ModelSpec,
    store: ParamStore,
    arch: Arch,
}

impl ModelInstance {
    /// Builds parameters with a seeded RNG; the same `(spec, seed)` pair
    /// always yields identical initial values.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = match spec.kind {
            ModelKind::Hfformer => {
                Arch::Hfformer(HfformerArch::build(&spec, &mut store, &mut rng)?)
            }
            ModelKind::Lstm => Arch::Lstm(LstmArch::build(&spec, &mut store, &mut rng)?),
        };
        Ok(ModelInstance { spec, store, arch })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Appends the forward computation for one normalized `[L, in]` window
    /// and returns the `[1, n_outputs]` prediction node.
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        window_rows: &Tensor,
        spike_mode: SpikingMode,
    ) -> Result<NodeId, ModelError> {
        if window_rows.shape() != [self.spec.look_back, self.spec.in_features] {
            return Err(ModelError::Nn(NnError::ShapeMismatch(format!(
                "window {:?}, model expects [{}, {}]",
                window_rows.shape(),
                self.spec.look_back,
                self.spec.in_features
            ))));
        }
        let out = match &self.arch {
            Arch::Hfformer(a) => {
                a.forward(&self.spec, g, binder, &self.store, window_rows, spike_mode)?
            }
            Arch::Lstm(a) => a.forward(g, binder, &self.store, window_rows)?,
        };
        Ok(out)
    }

    /// Inference over one window; returns all output columns.
    pub fn predict(&self, window_rows: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.store, false);
        let out = self.forward(&mut g, &mut binder, window_rows, SpikingMode::Exact)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Scalar forecast (median output under quantile loss).
    pub fn point_forecast(&self, window_rows: &Tensor) -> Result<f64, ModelError> {
        let p = self.predict(window_rows)?;
        Ok(p[self.spec.point_output()])
    }

    /// Training-mode spiking behavior for this spec.
    pub fn train_spike_mode(&self) -> SpikingMode {
        SpikingMode::Surrogate {
            temperature: self.spec.spike_temperature,
        }
    }
}

/// Training provenance stored alongside a trained model.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub best_val_loss: f64,
}

pub struct TrainedModel {
    pub model: ModelInstance,
    pub meta: TrainMeta,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelInstance,
    optimizer: Option<&AdamWState>,
) -> Result<(), ModelError> {
    checkpoint::save(path, &model.spec.to_kv(), &model.store, optimizer)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelInstance, Option<AdamWState>), ModelError> {
    let data = checkpoint::load(path)?;
    let spec = ModelSpec::from_kv(&data.spec_text)?;
    let mut model = ModelInstance::new(spec, 0)?;
    checkpoint::apply(&data, &mut model.store)?;
    let opt = data.optimizer.as_ref().map(AdamWState::from);
    Ok((model, opt))
}
