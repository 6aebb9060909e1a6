//! Feature engineering: weighted midprices, log-returns, the 38-feature
//! row layout, online-normalized look-back windows, and an ADF probe.
//!
//! Row layout (38 columns): 9 bid prices (levels 1-9), 9 bid quantities,
//! 9 ask prices, 9 ask quantities, the lagged log-return over the forecast
//! horizon, and the weighted midprice.

pub mod adf;
pub mod dataset;

pub use adf::adf_statistic;
pub use dataset::{read_feature_bin, read_feature_csv, write_feature_bin, write_feature_csv};

use std::sync::Arc;

use thiserror::Error;

use crate::lob::{LobSnapshot, SnapshotStream};
use crate::nn::Tensor;

pub const FEATURE_DIM: usize = 38;
/// Book levels per side that enter the feature vector.
pub const FEATURE_LEVELS: usize = 9;
/// Column index of the lagged log-return feature.
pub const LAGGED_RETURN_COL: usize = 36;
/// Column index of the weighted midprice feature.
pub const WEIGHTED_MID_COL: usize = 37;

pub type FeatureRow = [f64; FEATURE_DIM];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("level-1 quantities sum to zero; microprice undefined")]
    ZeroQuantities,
    #[error("non-positive price {0}")]
    NonPositivePrice(f64),
    #[error("stream too short: need at least {needed} ticks, got {got}")]
    StreamTooShort { needed: usize, got: usize },
    #[error("window too short: need at least 2 rows, got {0}")]
    WindowTooShort(usize),
    #[error("series too short for ADF with max_lag {max_lag}: {len}")]
    SeriesTooShort { len: usize, max_lag: usize },
    #[error("singular regression design matrix")]
    SingularRegression,
    #[error("feature file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reference-price definition used for returns and features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MidMode {
    /// `(q_a * p_a + q_b * p_b) / 2` over level 1, as printed in the
    /// reference definition. Not quantity-invariant.
    Literal,
    /// Quantity-weighted microprice `(q_a * p_b + q_b * p_a) / (q_a + q_b)`.
    Microprice,
}

impl std::str::FromStr for MidMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "literal" => Ok(MidMode::Literal),
            "microprice" => Ok(MidMode::Microprice),
            other => Err(format!("unknown mid mode `{other}`")),
        }
    }
}

/// Level-1 weighted midprice in the requested mode.
pub fn weighted_midprice(s: &LobSnapshot, mode: MidMode) -> Result<f64, FeatureError> {
    let (pb, qb) = (s.bids[0].price, s.bids[0].qty);
    let (pa, qa) = (s.asks[0].price, s.asks[0].qty);
    match mode {
        MidMode::Literal => Ok((qa * pa + qb * pb) / 2.0),
        MidMode::Microprice => {
            if qa + qb == 0.0 {
                return Err(FeatureError::ZeroQuantities);
            }
            Ok((qa * pb + qb * pa) / (qa + qb))
        }
    }
}

/// `log(p_later / p_now)`.
pub fn log_return(p_now: f64, p_later: f64) -> Result<f64, FeatureError> {
    if p_now <= 0.0 {
        return Err(FeatureError::NonPositivePrice(p_now));
    }
    if p_later <= 0.0 {
        return Err(FeatureError::NonPositivePrice(p_later));
    }
    Ok((p_later / p_now).ln())
}

/// Per-feature normalization statistics of one window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStat {
    pub mean: f64,
    pub std: f64,
}

/// Feature rows plus targets derived from one deduplicated stream.
///
/// Row `j` describes stream tick `t = j + tau` (the lagged return needs
/// `t - tau`). `targets[j]`, defined for `j < rows - tau`, is the
/// log-return over ticks `(t, t + tau]`, which in row space is
/// `log(mid[j + tau] / mid[j])`.
#[derive(Clone, Debug)]
pub struct FeatureDataset {
    data: Vec<f64>,
    targets: Vec<f64>,
    tau: usize,
    mid_mode: MidMode,
}

impl FeatureDataset {
    pub fn n_rows(&self) -> usize {
        self.data.len() / FEATURE_DIM
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn mid_mode(&self) -> MidMode {
        self.mid_mode
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * FEATURE_DIM..(j + 1) * FEATURE_DIM]
    }

    pub fn target(&self, j: usize) -> f64 {
        self.targets[j]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Stream tick index of row `j`.
    pub fn t_index(&self, j: usize) -> usize {
        j + self.tau
    }

    /// Assemble a dataset from raw parts (deserialization and tests).
    pub fn from_parts(
        rows: Vec<f64>,
        targets: Vec<f64>,
        tau: usize,
        mid_mode: MidMode,
    ) -> Result<Self, FeatureError> {
        if rows.len() % FEATURE_DIM != 0 {
            return Err(FeatureError::Format(format!(
                "row data length {} is not a multiple of {FEATURE_DIM}",
                rows.len()
            )));
        }
        if targets.len() > rows.len() / FEATURE_DIM {
            return Err(FeatureError::Format(
                "more targets than feature rows".into(),
            ));
        }
        Ok(FeatureDataset {
            data: rows,
            targets,
            tau,
            mid_mode,
        })
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn fill_row(out: &mut [f64], snap: &LobSnapshot, lagged: f64, mid: f64) {
    for l in 0..FEATURE_LEVELS {
        out[l] = snap.bids[l].price;
        out[FEATURE_LEVELS + l] = snap.bids[l].qty;
        out[2 * FEATURE_LEVELS + l] = snap.asks[l].price;
        out[3 * FEATURE_LEVELS + l] = snap.asks[l].qty;
    }
    out[LAGGED_RETURN_COL] = lagged;
    out[WEIGHTED_MID_COL] = mid;
}

/// Build rows and targets from a deduplicated stream. Requires
/// `stream.len() > tau` so at least one lagged return exists.
pub fn build_dataset(
    stream: &SnapshotStream,
    tau: usize,
    mode: MidMode,
) -> Result<FeatureDataset, FeatureError> {
    let n = stream.len();
    if tau == 0 || n <= tau {
        return Err(FeatureError::StreamTooShort {
            needed: tau + 1,
            got: n,
        });
    }
    let mids: Vec<f64> = stream
        .snapshots
        .iter()
        .map(|s| weighted_midprice(s, mode))
        .collect::<Result<_, _>>()?;
    let rows = n - tau;
    let mut data = vec![0.0; rows * FEATURE_DIM];
    for j in 0..rows {
        let t = j + tau;
        let lagged = log_return(mids[t - tau], mids[t])?;
        fill_row(
            &mut data[j * FEATURE_DIM..(j + 1) * FEATURE_DIM],
            &stream.snapshots[t],
            lagged,
            mids[t],
        );
    }
    let n_targets = rows.saturating_sub(tau);
    let mut targets = Vec::with_capacity(n_targets);
    for j in 0..n_targets {
        let t = j + tau;
        targets.push(log_return(mids[t], mids[t + tau])?);
    }
    Ok(FeatureDataset {
        data,
        targets,
        tau,
        mid_mode: mode,
    })
}

/// The spec-level row view of [`build_dataset`].
pub fn build_feature_rows(
    stream: &SnapshotStream,
    tau: usize,
    mode: MidMode,
) -> Result<Vec<FeatureRow>, FeatureError> {
    let ds = build_dataset(stream, tau, mode)?;
    Ok((0..ds.n_rows())
        .map(|j| {
            let mut row = [0.0; FEATURE_DIM];
            row.copy_from_slice(ds.row(j));
            row
        })
        .collect())
}

/// Column-wise standardization using only the window's own rows
/// (population std). Columns with std below 1e-12 normalize to zeros.
pub fn online_normalize(
    window: &[f64],
    rows: usize,
) -> Result<(Vec<f64>, Vec<NormStat>), FeatureError> {
    if rows < 2 {
        return Err(FeatureError::WindowTooShort(rows));
    }
    debug_assert_eq!(window.len() % rows, 0);
    let cols = window.len() / rows;
    let mut out = vec![0.0; window.len()];
    let mut stats = Vec::with_capacity(cols);
    let nf = rows as f64;
    for c in 0..cols {
        let mut mean = 0.0;
        for r in 0..rows {
            mean += window[r * cols + c];
        }
        mean /= nf;
        let mut var = 0.0;
        for r in 0..rows {
            let d = window[r * cols + c] - mean;
            var += d * d;
        }
        var /= nf;
        let std = var.sqrt();
        if std < 1e-12 {
            stats.push(NormStat { mean, std: 0.0 });
            // leave zeros
        } else {
            stats.push(NormStat { mean, std });
            let inv = 1.0 / std;
            for r in 0..rows {
                out[r * cols + c] = (window[r * cols + c] - mean) * inv;
            }
        }
    }
    Ok((out, stats))
}

/// One normalized look-back window and its forecast target.
#[derive(Clone, Debug)]
pub struct FeatureWindow {
    /// `[L, 38]` normalized rows.
    pub rows: Tensor,
    /// Log-return over `(t_index, t_index + tau]`.
    pub target: f64,
    /// Per-feature (mean, std) used for normalization.
    pub norm_stats: Vec<NormStat>,
    /// Stream tick index of the window's last row.
    pub t_index: usize,
}

/// Lazy view over all valid windows of a dataset. Windows are normalized
/// on materialization; nothing after a window's end row ever enters its
/// statistics.
#[derive(Clone)]
pub struct WindowSet {
    dataset: Arc<FeatureDataset>,
    look_back: usize,
    ends: Vec<usize>,
}

impl WindowSet {
    pub fn build(
        dataset: Arc<FeatureDataset>,
        look_back: usize,
        stride: usize,
    ) -> Result<Self, FeatureError> {
        if look_back < 2 {
            return Err(FeatureError::WindowTooShort(look_back));
        }
        let stride = stride.max(1);
        let first = look_back - 1;
        let ends: Vec<usize> = (first..dataset.n_targets()).step_by(stride).collect();
        if ends.is_empty() {
            return Err(FeatureError::StreamTooShort {
                needed: look_back + dataset.tau(),
                got: dataset.n_rows(),
            });
        }
        Ok(WindowSet {
            dataset,
            look_back,
            ends,
        })
    }

    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    pub fn look_back(&self) -> usize {
        self.look_back
    }

    pub fn dataset(&self) -> &Arc<FeatureDataset> {
        &self.dataset
    }

    /// End row index (into the dataset) of window `i`.
    pub fn end_row(&self, i: usize) -> usize {
        self.ends[i]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.dataset.target(self.ends[i])
    }

    /// Materialize window `i` with per-window normalization.
    pub fn window(&self, i: usize) -> FeatureWindow {
        let end = self.ends[i];
        let start = end + 1 - self.look_back;
        let raw = &self.dataset.data[start * FEATURE_DIM..(end + 1) * FEATURE_DIM];
        let (normed, stats) =
            online_normalize(raw, self.look_back).expect("look_back >= 2 checked at build");
        FeatureWindow {
            rows: Tensor::from_vec(&[self.look_back, FEATURE_DIM], normed)
                .expect("window shape is consistent"),
            target: self.dataset.target(end),
            norm_stats: stats,
            t_index: self.dataset.t_index(end),
        }
    }

    /// Contiguous subset by window position, used for temporal splits.
    pub fn slice(&self, range: std::ops::Range<usize>) -> WindowSet {
        WindowSet {
            dataset: self.dataset.clone(),
            look_back: self.look_back,
            ends: self.ends[range].to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = FeatureWindow> + '_ {
        (0..self.len()).map(|i| self.window(i))
    }
}

/// Materialized window sequence.
pub fn make_windows(
    dataset: Arc<FeatureDataset>,
    look_back: usize,
    stride: usize,
) -> Result<Vec<FeatureWindow>, FeatureError> {
    let ws = WindowSet::build(dataset, look_back, stride)?;
    Ok(ws.iter().collect())
}
