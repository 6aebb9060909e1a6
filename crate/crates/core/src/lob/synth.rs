//! Seeded synthetic snapshot streams.
//!
//! Two generators: a plain geometric random walk for plumbing tests, and a
//! stream whose next-tick log-return is a linear function of current book
//! quantities plus noise, for end-to-end learnability experiments.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LobError, LobSnapshot, PriceLevel, SnapshotStream, DEPTH};

/// Geometric random-walk regime.
#[derive(Clone, Debug)]
pub struct SynthRegime {
    pub start_price: f64,
    /// Per-tick log drift.
    pub drift: f64,
    /// Per-tick log volatility (>= 0).
    pub vol: f64,
    /// Best bid/ask distance in USDT (> 0); deeper levels step by the same amount.
    pub spread: f64,
    /// Base quantity per level.
    pub depth_profile: [f64; DEPTH],
    /// Relative uniform jitter applied to every quantity.
    pub qty_jitter: f64,
    pub start_ts_ms: i64,
    pub tick_interval_ms: i64,
}

impl Default for SynthRegime {
    fn default() -> Self {
        SynthRegime {
            start_price: 20_000.0,
            drift: 0.0,
            vol: 2e-5,
            spread: 0.5,
            depth_profile: [1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.2, 2.4, 2.6, 2.8],
            qty_jitter: 0.3,
            start_ts_ms: 1_650_000_000_000,
            tick_interval_ms: 100,
        }
    }
}

fn book_around(
    mid: f64,
    spread: f64,
    bid_qty: &[f64; DEPTH],
    ask_qty: &[f64; DEPTH],
    ts: i64,
) -> Result<LobSnapshot, LobError> {
    let mut bids = [PriceLevel { price: 0.0, qty: 0.0 }; DEPTH];
    let mut asks = [PriceLevel { price: 0.0, qty: 0.0 }; DEPTH];
    for i in 0..DEPTH {
        bids[i] = PriceLevel {
            price: mid - spread / 2.0 - i as f64 * spread,
            qty: bid_qty[i],
        };
        asks[i] = PriceLevel {
            price: mid + spread / 2.0 + i as f64 * spread,
            qty: ask_qty[i],
        };
    }
    LobSnapshot::new(ts, bids, asks, 0)
}

/// Geometric random-walk stream: same seed, same bytes.
pub fn synth_lob_stream(
    seed: u64,
    n: usize,
    regime: &SynthRegime,
) -> Result<SnapshotStream, LobError> {
    if regime.spread <= 0.0 {
        return Err(LobError::InvalidRegime(format!(
            "spread must be positive, got {}",
            regime.spread
        )));
    }
    if regime.vol < 0.0 {
        return Err(LobError::InvalidRegime("negative volatility".into()));
    }
    if n == 0 {
        return Err(LobError::InvalidRegime("n must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = SnapshotStream::new(format!("synth-rw-{seed}"));
    let mut log_mid = regime.start_price.ln();
    for i in 0..n {
        let mut bid_qty = [0.0; DEPTH];
        let mut ask_qty = [0.0; DEPTH];
        for l in 0..DEPTH {
            let ub: f64 = rng.gen_range(-1.0..1.0);
            let ua: f64 = rng.gen_range(-1.0..1.0);
            bid_qty[l] = (regime.depth_profile[l] * (1.0 + regime.qty_jitter * ub)).max(0.0);
            ask_qty[l] = (regime.depth_profile[l] * (1.0 + regime.qty_jitter * ua)).max(0.0);
        }
        let ts = regime.start_ts_ms + i as i64 * regime.tick_interval_ms;
        let snap = book_around(log_mid.exp(), regime.spread, &bid_qty, &ask_qty, ts)?;
        stream.push(snap, 0)?;
        let z: f64 = StandardNormal.sample(&mut rng);
        log_mid += regime.drift + regime.vol * z;
    }
    Ok(stream)
}

/// Regime for the planted-signal stream. Level-1 quantities are pinned to
/// `base_qty` so the level-1 weighted midprice tracks the price path
/// exactly; deeper quantities follow AR(1) processes, and the next-tick
/// log-return is `beta * sum(bid_qty - ask_qty over signal levels) + eps`
/// with `beta` scaled so the planted signal variance equals the noise
/// variance (SNR 1) at horizon 1.
#[derive(Clone, Debug)]
pub struct PlantedRegime {
    pub start_price: f64,
    pub spread: f64,
    pub base_qty: f64,
    /// AR(1) coefficient of each quantity process.
    pub qty_phi: f64,
    /// Innovation std of each quantity process.
    pub qty_sigma: f64,
    /// Std of the unpredictable part of the per-tick log-return.
    pub noise_sigma: f64,
    /// Number of levels per side, starting at level 2, that carry signal.
    pub signal_levels: usize,
    pub start_ts_ms: i64,
    pub tick_interval_ms: i64,
}

impl Default for PlantedRegime {
    fn default() -> Self {
        PlantedRegime {
            start_price: 20_000.0,
            spread: 0.5,
            base_qty: 1.0,
            qty_phi: 0.85,
            qty_sigma: 0.1,
            noise_sigma: 2e-5,
            signal_levels: 5,
            start_ts_ms: 1_650_000_000_000,
            tick_interval_ms: 100,
        }
    }
}

impl PlantedRegime {
    /// Stationary variance of one quantity process.
    fn qty_var(&self) -> f64 {
        self.qty_sigma * self.qty_sigma / (1.0 - self.qty_phi * self.qty_phi)
    }

    /// Signal coefficient giving Var(signal) = Var(noise).
    pub fn beta(&self) -> f64 {
        self.noise_sigma / (2.0 * self.signal_levels as f64 * self.qty_var()).sqrt()
    }
}

/// Stream whose log-returns contain a linear-in-quantities signal at SNR 1.
pub fn synth_signal_stream(
    seed: u64,
    n: usize,
    regime: &PlantedRegime,
) -> Result<SnapshotStream, LobError> {
    if regime.spread <= 0.0 {
        return Err(LobError::InvalidRegime("spread must be positive".into()));
    }
    if !(0.0..1.0).contains(&regime.qty_phi) {
        return Err(LobError::InvalidRegime("qty_phi must be in [0, 1)".into()));
    }
    if regime.signal_levels == 0 || regime.signal_levels > DEPTH - 1 {
        return Err(LobError::InvalidRegime(format!(
            "signal_levels must be in 1..={}",
            DEPTH - 1
        )));
    }
    if n == 0 {
        return Err(LobError::InvalidRegime("n must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = regime.beta();
    let qty_floor = 0.05 * regime.base_qty;
    // AR(1) state per side and level (levels 2..DEPTH vary; level 1 pinned)
    let mut bid_q = [regime.base_qty; DEPTH];
    let mut ask_q = [regime.base_qty; DEPTH];
    let mut stream = SnapshotStream::new(format!("synth-planted-{seed}"));
    let mut log_mid = regime.start_price.ln();
    for i in 0..n {
        let ts = regime.start_ts_ms + i as i64 * regime.tick_interval_ms;
        let snap = book_around(log_mid.exp(), regime.spread, &bid_q, &ask_q, ts)?;
        stream.push(snap, 0)?;
        // planted component from the current book
        let mut imbalance = 0.0;
        for l in 1..=regime.signal_levels {
            imbalance += bid_q[l] - ask_q[l];
        }
        let eps: f64 = StandardNormal.sample(&mut rng);
        log_mid += beta * imbalance + regime.noise_sigma * eps;
        // evolve quantities for the next tick
        for l in 1..DEPTH {
            let zb: f64 = StandardNormal.sample(&mut rng);
            let za: f64 = StandardNormal.sample(&mut rng);
            bid_q[l] = (regime.base_qty
                + regime.qty_phi * (bid_q[l] - regime.base_qty)
                + regime.qty_sigma * zb)
                .max(qty_floor);
            ask_q[l] = (regime.base_qty
                + regime.qty_phi * (ask_q[l] - regime.base_qty)
                + regime.qty_sigma * za)
                .max(qty_floor);
        }
    }
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vol_path_is_deterministic_drift() {
        let regime = SynthRegime {
            drift: 0.001,
            vol: 0.0,
            ..SynthRegime::default()
        };
        let s = synth_lob_stream(7, 3, &regime).unwrap();
        let p0 = regime.start_price;
        for (k, snap) in s.snapshots.iter().enumerate() {
            let mid = (snap.bids[0].price + snap.asks[0].price) / 2.0;
            let want = p0 * (0.001 * k as f64).exp();
            assert!((mid / want - 1.0).abs() < 1e-12, "tick {k}: {mid} vs {want}");
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let regime = SynthRegime::default();
        let a = synth_lob_stream(7, 50, &regime).unwrap();
        let b = synth_lob_stream(7, 50, &regime).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
    }

    #[test]
    fn different_seeds_diverge() {
        let regime = SynthRegime::default();
        let a = synth_lob_stream(7, 50, &regime).unwrap();
        let b = synth_lob_stream(8, 50, &regime).unwrap();
        assert!(a.snapshots.iter().zip(&b.snapshots).any(|(x, y)| x != y));
    }

    #[test]
    fn non_positive_spread_is_invalid() {
        let regime = SynthRegime {
            spread: 0.0,
            ..SynthRegime::default()
        };
        assert!(matches!(
            synth_lob_stream(1, 10, &regime),
            Err(LobError::InvalidRegime(_))
        ));
    }

    #[test]
    fn planted_stream_is_deterministic_and_valid() {
        let regime = PlantedRegime::default();
        let a = synth_signal_stream(3, 200, &regime).unwrap();
        let b = synth_signal_stream(3, 200, &regime).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
        // level-1 quantities pinned
        assert!(a
            .snapshots
            .iter()
            .all(|s| s.bids[0].qty == regime.base_qty && s.asks[0].qty == regime.base_qty));
    }

    #[test]
    fn planted_signal_correlates_with_next_return() {
        // The realized next-tick log-return must correlate strongly
        // (~ sqrt(0.5) at SNR 1) with the planted imbalance.
        let regime = PlantedRegime::default();
        let s = synth_signal_stream(11, 4000, &regime).unwrap();
        let mids: Vec<f64> = s
            .snapshots
            .iter()
            .map(|x| (x.bids[0].price + x.asks[0].price) / 2.0)
            .collect();
        let imb: Vec<f64> = s
            .snapshots
            .iter()
            .map(|x| {
                (1..=regime.signal_levels)
                    .map(|l| x.bids[l].qty - x.asks[l].qty)
                    .sum::<f64>()
            })
            .collect();
        let rets: Vec<f64> = mids.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
        let n = rets.len();
        let mx = imb[..n].iter().sum::<f64>() / n as f64;
        let my = rets.iter().sum::<f64>() / n as f64;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for i in 0..n {
            let dx = imb[i] - mx;
            let dy = rets[i] - my;
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!(corr > 0.6, "corr {corr}");
    }
}
