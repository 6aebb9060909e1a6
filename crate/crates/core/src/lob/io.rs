//! CSV parsing and serialization of snapshot streams.
//!
//! Format: a header line `ts_ms,bp1,bq1,...,bp10,bq10,ap1,aq1,...,ap10,aq10`
//! followed by one row per snapshot; UTF-8, `.` decimal separator. Floats
//! are written with the shortest round-trip representation, so
//! parse(serialize(s)) reproduces `s` bit for bit.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{LobError, LobSnapshot, PriceLevel, SnapshotStream, DEPTH};

pub const CSV_HEADER: &str = "ts_ms,bp1,bq1,bp2,bq2,bp3,bq3,bp4,bq4,bp5,bq5,bp6,bq6,bp7,bq7,bp8,bq8,bp9,bq9,bp10,bq10,ap1,aq1,ap2,aq2,ap3,aq3,ap4,aq4,ap5,aq5,ap6,aq6,ap7,aq7,ap8,aq8,ap9,aq9,ap10,aq10";

const FIELDS: usize = 1 + 4 * DEPTH;

/// Parses one delimited record (no trailing newline) into a validated
/// snapshot. `line` is used for error reporting only.
pub fn parse_snapshot_at(record: &str, line: usize) -> Result<LobSnapshot, LobError> {
    let mut fields = record.split(',');
    let count = record.split(',').count();
    if count != FIELDS {
        return Err(LobError::MalformedRecord {
            line,
            reason: format!("expected {FIELDS} fields, got {count}"),
        });
    }
    let ts_field = fields.next().unwrap().trim();
    let timestamp_ms: i64 = ts_field.parse().map_err(|_| LobError::MalformedRecord {
        line,
        reason: format!("bad timestamp `{ts_field}`"),
    })?;
    let mut nums = [0.0f64; 4 * DEPTH];
    for slot in nums.iter_mut() {
        let f = fields.next().unwrap().trim();
        *slot = f.parse().map_err(|_| LobError::MalformedRecord {
            line,
            reason: format!("non-numeric field `{f}`"),
        })?;
    }
    let mut bids = [PriceLevel { price: 0.0, qty: 0.0 }; DEPTH];
    let mut asks = [PriceLevel { price: 0.0, qty: 0.0 }; DEPTH];
    for i in 0..DEPTH {
        bids[i] = PriceLevel {
            price: nums[2 * i],
            qty: nums[2 * i + 1],
        };
        asks[i] = PriceLevel {
            price: nums[2 * DEPTH + 2 * i],
            qty: nums[2 * DEPTH + 2 * i + 1],
        };
    }
    LobSnapshot::new(timestamp_ms, bids, asks, line)
}

pub fn parse_snapshot(record: &str) -> Result<LobSnapshot, LobError> {
    parse_snapshot_at(record, 0)
}

pub fn serialize_snapshot(s: &LobSnapshot) -> String {
    let mut out = String::with_capacity(FIELDS * 12);
    out.push_str(&s.timestamp_ms.to_string());
    for l in s.bids.iter().chain(s.asks.iter()) {
        out.push(',');
        out.push_str(&format!("{}", l.price));
        out.push(',');
        out.push_str(&format!("{}", l.qty));
    }
    out
}

pub fn read_csv(path: &Path) -> Result<SnapshotStream, LobError> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    if !header.trim_end().starts_with("ts_ms") {
        return Err(LobError::MissingHeader);
    }
    let source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stream".into());
    let mut stream = SnapshotStream::new(source);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 2; // 1-based, after the header
        let snap = parse_snapshot_at(&line, lineno)?;
        stream.push(snap, lineno)?;
    }
    Ok(stream)
}

pub fn write_csv(stream: &SnapshotStream, path: &Path) -> Result<(), LobError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{CSV_HEADER}")?;
    for s in &stream.snapshots {
        writeln!(w, "{}", serialize_snapshot(s))?;
    }
    w.flush()?;
    Ok(())
}

/// Inter-arrival statistics of a stream, reported by ingest.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct GapStats {
    /// Bucket upper bounds in ms: <=50, <=100, <=200, <=500, <=1000, rest.
    pub buckets: [u64; 6],
    pub max_gap_ms: i64,
    pub mean_gap_ms: f64,
}

impl GapStats {
    pub fn of(stream: &SnapshotStream) -> GapStats {
        let mut stats = GapStats::default();
        let mut total: i64 = 0;
        let mut count: u64 = 0;
        for pair in stream.snapshots.windows(2) {
            let gap = pair[1].timestamp_ms - pair[0].timestamp_ms;
            let idx = match gap {
                g if g <= 50 => 0,
                g if g <= 100 => 1,
                g if g <= 200 => 2,
                g if g <= 500 => 3,
                g if g <= 1000 => 4,
                _ => 5,
            };
            stats.buckets[idx] += 1;
            stats.max_gap_ms = stats.max_gap_ms.max(gap);
            total += gap;
            count += 1;
        }
        if count > 0 {
            stats.mean_gap_ms = total as f64 / count as f64;
        }
        stats
    }
}
