//! File formats: model files, reports, dataset CSVs, and sidecars.
//!
//! Model, certificate, scenario, and probe files are pretty-printed JSON
//! with shortest-round-trip float formatting, so a write → read cycle is
//! bit-exact and repeated writes of the same value are byte-identical.
//! Dataset sequences are CSV in SI units (`t, u1..u6, y1..y12`) with a
//! sidecar normalizer carrying per-channel min/max.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{de::DeserializeOwned, Serialize};

use crate::data::{DatasetSplit, Sequence};
use crate::models::Model;
use crate::plant::Normalizer;
use crate::predict::AnyModel;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}: parse error: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, message: impl ToString) -> IoError {
    IoError::Parse { path: path.display().to_string(), message: message.to_string() }
}

/// Writes a value as pretty JSON (with a trailing newline).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| file_err(path, e))?;
    }
    let mut body = serde_json::to_vec_pretty(value)
        .map_err(|e| IoError::Format { path: path.display().to_string(), message: e.to_string() })?;
    body.push(b'\n');
    let mut f = fs::File::create(path).map_err(|e| file_err(path, e))?;
    f.write_all(&body).map_err(|e| file_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let body = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&body).map_err(|e| parse_err(path, e))
}

/// Model file: any of the six architectures under one tagged wrapper.
pub fn write_model(path: &Path, model: &AnyModel) -> Result<(), IoError> {
    write_json(path, model)
}

pub fn read_model(path: &Path) -> Result<AnyModel, IoError> {
    let model: AnyModel = read_json(path)?;
    if let AnyModel::Core(m) = &model {
        m.validate().map_err(|e| parse_err(path, e))?;
    }
    if let AnyModel::Composite(c) = &model {
        c.validate().map_err(|e| parse_err(path, e))?;
    }
    Ok(model)
}

/// Core-architecture model file; composite/black-box files are rejected.
pub fn read_core_model(path: &Path) -> Result<Model, IoError> {
    match read_model(path)? {
        AnyModel::Core(m) => Ok(m),
        other => Err(IoError::Format {
            path: path.display().to_string(),
            message: format!("expected a core architecture (nnarx/esn/lstm/gru), found {}", other.describe()),
        }),
    }
}

// ---------------------------------------------------------------------------
// Dataset CSV
// ---------------------------------------------------------------------------

/// Writes one sequence as CSV: `t, u1..u_m, y1..y_n` in SI units.
pub fn write_sequence_csv(path: &Path, seq: &Sequence, dt_sample: f64) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| file_err(path, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=seq.n_u()).map(|j| format!("u{j}")));
    header.extend((1..=seq.n_y()).map(|j| format!("y{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for k in 0..seq.len() {
        let mut rec = Vec::with_capacity(1 + seq.n_u() + seq.n_y());
        rec.push(format!("{}", k as f64 * dt_sample));
        rec.extend(seq.u.row(k).iter().map(|v| format!("{v}")));
        rec.extend(seq.y.row(k).iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    IoError::Parse { path: path.display().to_string(), message: e.to_string() }
}

/// Reads a sequence CSV written by [`write_sequence_csv`].
pub fn read_sequence_csv(path: &Path, id: usize, n_u: usize, n_y: usize) -> Result<Sequence, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut u_rows: Vec<f64> = Vec::new();
    let mut y_rows: Vec<f64> = Vec::new();
    let mut t_len = 0usize;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 1 + n_u + n_y {
            return Err(parse_err(
                path,
                format!("row {} has {} fields, expected {}", t_len + 2, rec.len(), 1 + n_u + n_y),
            ));
        }
        for j in 0..n_u {
            u_rows.push(rec[1 + j].parse::<f64>().map_err(|e| parse_err(path, e))?);
        }
        for j in 0..n_y {
            y_rows.push(rec[1 + n_u + j].parse::<f64>().map_err(|e| parse_err(path, e))?);
        }
        t_len += 1;
    }
    let u = Array2::from_shape_vec((t_len, n_u), u_rows)
        .map_err(|e| parse_err(path, e))?;
    let y = Array2::from_shape_vec((t_len, n_y), y_rows)
        .map_err(|e| parse_err(path, e))?;
    Ok(Sequence { id, u, y })
}

/// On-disk dataset layout: sequences, split file, normalizer sidecar.
pub const SPLIT_FILE: &str = "split.json";
pub const NORMALIZER_FILE: &str = "normalizer.json";

pub fn sequence_file_name(id: usize) -> String {
    format!("seq_{id:04}.csv")
}

/// Reads a generated dataset directory into normalized training form.
pub fn read_dataset_dir(dir: &Path, n_u: usize, n_y: usize) -> Result<crate::data::Dataset, IoError> {
    let split: DatasetSplit = read_json(&dir.join(SPLIT_FILE))?;
    let normalizer: Normalizer = read_json(&dir.join(NORMALIZER_FILE))?;
    let n_total = split.training.len() + split.validation.len() + split.test.len();
    let mut sequences = Vec::with_capacity(n_total);
    for id in 0..n_total {
        let raw = read_sequence_csv(&dir.join(sequence_file_name(id)), id, n_u, n_y)?;
        sequences.push(normalizer.apply_sequence(&raw));
    }
    split
        .validate(sequences.len())
        .map_err(|m| parse_err(&dir.join(SPLIT_FILE), m))?;
    Ok(crate::data::Dataset { sequences, split, normalizer })
}

// ---------------------------------------------------------------------------
// Comparison table CSV
// ---------------------------------------------------------------------------

/// Writes the FIT comparison as CSV: one column per output channel in plant
/// order plus the overall mean, one row per model.
pub fn write_comparison_csv(path: &Path, table: &crate::physics::ComparisonTable) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| file_err(path, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["model".to_string()];
    header.extend(table.channel_names.iter().cloned());
    header.push("overall".to_string());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (name, per_channel, overall) in &table.rows {
        let mut rec = vec![name.clone()];
        rec.extend(per_channel.iter().map(|v| format!("{v}")));
        rec.push(format!("{overall}"));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

/// Writes the training trace as CSV: epoch, train_mse, val_mse, margins.
pub fn write_trace_csv(path: &Path, trace: &crate::training::TrainTrace) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| file_err(path, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let n_margins = trace.epochs.first().map(|e| e.margins.len()).unwrap_or(0);
    let mut header = vec!["epoch".to_string(), "train_mse".to_string(), "val_mse".to_string()];
    header.extend((1..=n_margins).map(|j| format!("margin_{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for rec in &trace.epochs {
        let mut row = vec![
            format!("{}", rec.epoch),
            format!("{}", rec.train_mse),
            format!("{}", rec.val_mse),
        ];
        row.extend(rec.margins.iter().map(|v| format!("{v}")));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{zero_model, Dims};

    #[test]
    fn model_json_round_trip_is_exact() {
        let mut m = zero_model("gru", Dims::new(2, 1, 3)).unwrap();
        if let crate::models::ModelParams::Gru(p) = &mut m.params {
            p.u_r[[0, 1]] = std::f64::consts::PI;
            p.b_o[0] = 1.0 / 3.0;
            p.w_z[[2, 0]] = 1e-17;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        write_model(&path, &AnyModel::Core(m.clone())).unwrap();
        let back = read_core_model(&path).unwrap();
        assert_eq!(back, m);
        // Re-writing produces identical bytes.
        let first = std::fs::read(&path).unwrap();
        write_model(&path, &AnyModel::Core(back)).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn sequence_csv_round_trip() {
        let seq = Sequence {
            id: 3,
            u: Array2::from_shape_fn((7, 2), |(k, j)| (k as f64) * 0.3 + j as f64 / 7.0),
            y: Array2::from_shape_fn((7, 3), |(k, j)| (k as f64).sin() * (j as f64 + 0.5)),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.csv");
        write_sequence_csv(&path, &seq, 0.1).unwrap();
        let back = read_sequence_csv(&path, 3, 2, 3).unwrap();
        assert_eq!(back.u, seq.u);
        assert_eq!(back.y, seq.y);
    }
}
