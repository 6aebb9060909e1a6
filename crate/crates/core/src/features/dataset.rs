//! Feature dataset serialization.
//!
//! Two formats, both documented in the README:
//!
//! - CSV: header `f0,...,f37,target`, one feature row plus its target per
//!   line. Only rows with a defined target are written.
//! - Binary: 8-byte magic `HFLABFTR`, version byte, `u32` row count,
//!   `u32` feature count, `u32` horizon, mid-mode byte, then row-major
//!   records of 38 features and the target as little-endian f64.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureDataset, FeatureError, MidMode, FEATURE_DIM};

const MAGIC: &[u8; 8] = b"HFLABFTR";
const VERSION: u8 = 1;

pub fn write_feature_csv(ds: &FeatureDataset, path: &Path) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..FEATURE_DIM).map(|i| format!("f{i}")).collect();
    writeln!(w, "{},target", header.join(","))?;
    for j in 0..ds.n_targets() {
        let row = ds.row(j);
        let mut line = String::with_capacity(FEATURE_DIM * 12);
        for v in row {
            line.push_str(&format!("{v}"));
            line.push(',');
        }
        line.push_str(&format!("{}", ds.target(j)));
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV feature dataset. The horizon and mid mode are not stored in
/// CSV and must be supplied by the caller's configuration.
pub fn read_feature_csv(
    path: &Path,
    tau: usize,
    mid_mode: MidMode,
) -> Result<FeatureDataset, FeatureError> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    if !header.starts_with("f0,") {
        return Err(FeatureError::Format("missing feature CSV header".into()));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != FEATURE_DIM + 1 {
            return Err(FeatureError::Format(format!(
                "line {}: expected {} fields, got {}",
                i + 2,
                FEATURE_DIM + 1,
                fields.len()
            )));
        }
        for f in &fields[..FEATURE_DIM] {
            rows.push(f.trim().parse::<f64>().map_err(|_| {
                FeatureError::Format(format!("line {}: non-numeric `{f}`", i + 2))
            })?);
        }
        let t = fields[FEATURE_DIM].trim();
        targets.push(
            t.parse::<f64>()
                .map_err(|_| FeatureError::Format(format!("line {}: bad target `{t}`", i + 2)))?,
        );
    }
    FeatureDataset::from_parts(rows, targets, tau, mid_mode)
}

pub fn write_feature_bin(ds: &FeatureDataset, path: &Path) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(ds.n_targets() as u32).to_le_bytes())?;
    w.write_all(&(FEATURE_DIM as u32).to_le_bytes())?;
    w.write_all(&(ds.tau() as u32).to_le_bytes())?;
    w.write_all(&[match ds.mid_mode() {
        MidMode::Literal => 0u8,
        MidMode::Microprice => 1u8,
    }])?;
    for j in 0..ds.n_targets() {
        for v in ds.row(j) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&ds.target(j).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_bin(path: &Path) -> Result<FeatureDataset, FeatureError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 22 || &bytes[0..8] != MAGIC {
        return Err(FeatureError::Format("bad magic".into()));
    }
    if bytes[8] != VERSION {
        return Err(FeatureError::Format(format!(
            "unsupported version {}",
            bytes[8]
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let n_rows = u32_at(9);
    let n_features = u32_at(13);
    let tau = u32_at(17);
    if n_features != FEATURE_DIM {
        return Err(FeatureError::Format(format!(
            "expected {FEATURE_DIM} features, file has {n_features}"
        )));
    }
    let mid_mode = match bytes[21] {
        0 => MidMode::Literal,
        1 => MidMode::Microprice,
        other => {
            return Err(FeatureError::Format(format!("unknown mid mode {other}")));
        }
    };
    let expected = 22 + n_rows * (FEATURE_DIM + 1) * 8;
    if bytes.len() != expected {
        return Err(FeatureError::Format(format!(
            "expected {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut rows = Vec::with_capacity(n_rows * FEATURE_DIM);
    let mut targets = Vec::with_capacity(n_rows);
    let mut off = 22;
    let f64_at = |off: &mut usize| {
        let v = f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
        *off += 8;
        v
    };
    for _ in 0..n_rows {
        for _ in 0..FEATURE_DIM {
            rows.push(f64_at(&mut off));
        }
        targets.push(f64_at(&mut off));
    }
    FeatureDataset::from_parts(rows, targets, tau, mid_mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_dataset, tests::snapshot};
    use crate::lob::SnapshotStream;

    fn sample_dataset() -> FeatureDataset {
        let mut s = SnapshotStream::new("t");
        for i in 0..20 {
            let mid = 100.0 + (i as f64 * 0.7).sin();
            s.push(snapshot(i as i64 * 100, mid, 1.0, 1.0), 0).unwrap();
        }
        build_dataset(&s, 3, MidMode::Literal).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        let ds = sample_dataset();
        write_feature_csv(&ds, &path).unwrap();
        let back = read_feature_csv(&path, ds.tau(), ds.mid_mode()).unwrap();
        assert_eq!(back.n_targets(), ds.n_targets());
        for j in 0..ds.n_targets() {
            assert_eq!(back.row(j), ds.row(j));
            assert_eq!(back.target(j), ds.target(j));
        }
    }

    #[test]
    fn binary_round_trip_preserves_bits_and_tau() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let ds = sample_dataset();
        write_feature_bin(&ds, &path).unwrap();
        let back = read_feature_bin(&path).unwrap();
        assert_eq!(back.tau(), ds.tau());
        assert_eq!(back.mid_mode(), ds.mid_mode());
        for j in 0..ds.n_targets() {
            for (a, b) in back.row(j).iter().zip(ds.row(j)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        let ds = sample_dataset();
        write_feature_bin(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_feature_bin(&path),
            Err(FeatureError::Format(_))
        ));
    }
}
