//! Level-2 snapshot ingestion: parsing, validation, deduplication, and
//! seeded synthetic streams.

pub mod io;
pub mod synth;

pub use io::{parse_snapshot, read_csv, serialize_snapshot, write_csv, GapStats};
pub use synth::{synth_lob_stream, synth_signal_stream, PlantedRegime, SynthRegime};

use thiserror::Error;

/// Book depth carried by every snapshot.
pub const DEPTH: usize = 10;

#[derive(Debug, Error)]
pub enum LobError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: crossed book (best bid {bid} >= best ask {ask})")]
    CrossedBook { line: usize, bid: f64, ask: f64 },
    #[error("line {line}: {side} levels not sorted at level {level}")]
    UnsortedLevels {
        line: usize,
        side: &'static str,
        level: usize,
    },
    #[error("line {line}: non-positive price at {side} level {level}")]
    NonPositivePrice {
        line: usize,
        side: &'static str,
        level: usize,
    },
    #[error("line {line}: negative quantity at {side} level {level}")]
    NegativeQuantity {
        line: usize,
        side: &'static str,
        level: usize,
    },
    #[error("line {line}: {side} side is completely empty")]
    EmptySide { line: usize, side: &'static str },
    #[error("line {line}: timestamp {ts} arrives before {prev}")]
    OutOfOrderTimestamp { line: usize, ts: i64, prev: i64 },
    #[error("missing header line, expected `ts_ms,bp1,bq1,...`")]
    MissingHeader,
    #[error("invalid synthetic regime: {0}")]
    InvalidRegime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One (price, quantity) book level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriceLevel {
    pub price: f64,
    pub qty: f64,
}

/// One timestamped 10-level book observation. Bids are ordered best
/// (highest) first, asks best (lowest) first.
#[derive(Clone, Debug, PartialEq)]
pub struct LobSnapshot {
    pub timestamp_ms: i64,
    pub bids: [PriceLevel; DEPTH],
    pub asks: [PriceLevel; DEPTH],
}

impl LobSnapshot {
    /// Validates ordering, positivity, spread, and non-empty sides.
    /// `line` is carried into errors for diagnostics (0 for non-file data).
    pub fn new(
        timestamp_ms: i64,
        bids: [PriceLevel; DEPTH],
        asks: [PriceLevel; DEPTH],
        line: usize,
    ) -> Result<Self, LobError> {
        let s = LobSnapshot {
            timestamp_ms,
            bids,
            asks,
        };
        s.validate(line)?;
        Ok(s)
    }

    fn validate(&self, line: usize) -> Result<(), LobError> {
        for (side, levels) in [("bid", &self.bids), ("ask", &self.asks)] {
            for (i, l) in levels.iter().enumerate() {
                if !(l.price > 0.0) {
                    return Err(LobError::NonPositivePrice {
                        line,
                        side,
                        level: i + 1,
                    });
                }
                if !(l.qty >= 0.0) {
                    return Err(LobError::NegativeQuantity {
                        line,
                        side,
                        level: i + 1,
                    });
                }
            }
            if levels.iter().all(|l| l.qty == 0.0) {
                return Err(LobError::EmptySide { line, side });
            }
        }
        for i in 1..DEPTH {
            if self.bids[i].price >= self.bids[i - 1].price {
                return Err(LobError::UnsortedLevels {
                    line,
                    side: "bid",
                    level: i + 1,
                });
            }
            if self.asks[i].price <= self.asks[i - 1].price {
                return Err(LobError::UnsortedLevels {
                    line,
                    side: "ask",
                    level: i + 1,
                });
            }
        }
        if self.bids[0].price >= self.asks[0].price {
            return Err(LobError::CrossedBook {
                line,
                bid: self.bids[0].price,
                ask: self.asks[0].price,
            });
        }
        Ok(())
    }

    pub fn best_bid(&self) -> PriceLevel {
        self.bids[0]
    }

    pub fn best_ask(&self) -> PriceLevel {
        self.asks[0]
    }

    pub fn spread(&self) -> f64 {
        self.asks[0].price - self.bids[0].price
    }
}

/// Ordered snapshot sequence with non-decreasing timestamps.
#[derive(Clone, Debug, Default)]
pub struct SnapshotStream {
    pub snapshots: Vec<LobSnapshot>,
    pub source_id: String,
}

impl SnapshotStream {
    pub fn new(source_id: impl Into<String>) -> Self {
        SnapshotStream {
            snapshots: Vec::new(),
            source_id: source_id.into(),
        }
    }

    /// Appends a snapshot; out-of-order timestamps are rejected rather
    /// than reordered so collection faults stay visible.
    pub fn push(&mut self, snap: LobSnapshot, line: usize) -> Result<(), LobError> {
        if let Some(last) = self.snapshots.last() {
            if snap.timestamp_ms < last.timestamp_ms {
                return Err(LobError::OutOfOrderTimestamp {
                    line,
                    ts: snap.timestamp_ms,
                    prev: last.timestamp_ms,
                });
            }
        }
        self.snapshots.push(snap);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }
}

/// Midprice equality for deduplication compares values rounded to 8
/// fractional digits (exchange tick precision), which keeps float noise
/// from retaining near-duplicates.
fn round8_key(x: f64) -> i128 {
    (x * 1e8).round() as i128
}

/// Drops snapshots whose midprice equals the previously *kept* snapshot's
/// midprice. The first snapshot is always kept and order is preserved.
pub fn dedup_stream(
    stream: &SnapshotStream,
    midprice: impl Fn(&LobSnapshot) -> f64,
) -> SnapshotStream {
    let mut out = SnapshotStream::new(stream.source_id.clone());
    let mut last_key: Option<i128> = None;
    for snap in &stream.snapshots {
        let key = round8_key(midprice(snap));
        if last_key != Some(key) {
            out.snapshots.push(snap.clone());
            last_key = Some(key);
        }
    }
    out
}
