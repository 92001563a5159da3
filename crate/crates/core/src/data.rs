//! Input-output sequences and dataset splits for identification.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

/// One timestamped input-output trajectory (normalized channels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: usize,
    /// T × n_u.
    pub u: Array2<f64>,
    /// T × n_y measured outputs.
    pub y: Array2<f64>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_u(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.y.ncols()
    }

    /// Input row k as an owned vector.
    pub fn u_at(&self, k: usize) -> Array1<f64> {
        self.u.row(k).to_owned()
    }

    /// All input rows as owned vectors (the shape `simulate` consumes).
    pub fn u_rows(&self) -> Vec<Array1<f64>> {
        (0..self.len()).map(|k| self.u_at(k)).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.u.nrows() != self.y.nrows() {
            return Err(format!(
                "sequence {}: input length {} != output length {}",
                self.id,
                self.u.nrows(),
                self.y.nrows()
            ));
        }
        if self.u.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(format!("sequence {}: non-finite entries", self.id));
        }
        Ok(())
    }
}

/// Partition of sequence ids into training / validation / test pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub training: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Subsequence length.
    pub t_s: usize,
    /// Washout: prediction steps excluded from losses and metrics.
    pub t_w: usize,
}

impl DatasetSplit {
    pub fn validate(&self, n_sequences: usize) -> Result<(), String> {
        if self.t_w >= self.t_s {
            return Err(format!("washout {} must be < subsequence length {}", self.t_w, self.t_s));
        }
        let mut seen = vec![false; n_sequences];
        for &id in self.training.iter().chain(&self.validation).chain(&self.test) {
            if id >= n_sequences {
                return Err(format!("split references unknown sequence id {id}"));
            }
            if seen[id] {
                return Err(format!("sequence id {id} appears in more than one split"));
            }
            seen[id] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err("split does not cover all sequence ids".to_string());
        }
        Ok(())
    }
}

/// Sequences plus their split and the normalizer that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub split: DatasetSplit,
    pub normalizer: crate::plant::Normalizer,
}

impl Dataset {
    pub fn by_id(&self, id: usize) -> &Sequence {
        &self.sequences[id]
    }

    pub fn subset(&self, ids: &[usize]) -> Vec<&Sequence> {
        ids.iter().map(|&id| self.by_id(id)).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SubsequenceError {
    #[error("subsequence length {t_s} exceeds the raw sequence length {len}")]
    TooLong { t_s: usize, len: usize },
    #[error("stride must be >= 1")]
    ZeroStride,
}

/// Extracts partially overlapping windows `[j·stride, j·stride + t_s)` from
/// one long record; ids are sequential from `first_id`.
pub fn make_subsequences(
    raw: &Sequence,
    t_s: usize,
    stride: usize,
    first_id: usize,
) -> Result<Vec<Sequence>, SubsequenceError> {
    if stride == 0 {
        return Err(SubsequenceError::ZeroStride);
    }
    let len = raw.len();
    if t_s > len {
        return Err(SubsequenceError::TooLong { t_s, len });
    }
    let count = (len - t_s) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let start = j * stride;
        out.push(Sequence {
            id: first_id + j,
            u: raw.u.slice(s![start..start + t_s, ..]).to_owned(),
            y: raw.y.slice(s![start..start + t_s, ..]).to_owned(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_sequence(t: usize) -> Sequence {
        Sequence {
            id: 0,
            u: Array2::from_shape_fn((t, 2), |(k, j)| (k * 10 + j) as f64),
            y: Array2::from_shape_fn((t, 1), |(k, _)| k as f64),
        }
    }

    #[test]
    fn single_window_when_lengths_match() {
        let raw = ramp_sequence(10);
        let subs = make_subsequences(&raw, 10, 1, 0).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].u, raw.u);
    }

    #[test]
    fn overlapping_windows() {
        let raw = ramp_sequence(12);
        let subs = make_subsequences(&raw, 10, 2, 5).unwrap();
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[0].id, 5);
        assert_eq!(subs[1].id, 6);
        assert_eq!(subs[0].y[[0, 0]], 0.0);
        assert_eq!(subs[1].y[[0, 0]], 2.0);
    }

    #[test]
    fn non_overlapping_window_count() {
        // stride >= t_s: count = floor((T - t_s)/stride) + 1.
        let raw = ramp_sequence(25);
        let subs = make_subsequences(&raw, 5, 7, 0).unwrap();
        assert_eq!(subs.len(), (25 - 5) / 7 + 1);
        for (j, s) in subs.iter().enumerate() {
            assert_eq!(s.y[[0, 0]], (j * 7) as f64);
        }
    }

    #[test]
    fn window_longer_than_record_errors() {
        let raw = ramp_sequence(4);
        assert!(make_subsequences(&raw, 5, 1, 0).is_err());
    }

    #[test]
    fn split_validation_catches_overlap() {
        let split = DatasetSplit {
            training: vec![0, 1],
            validation: vec![1],
            test: vec![2],
            t_s: 10,
            t_w: 2,
        };
        assert!(split.validate(3).is_err());
        let ok = DatasetSplit {
            training: vec![0, 1],
            validation: vec![2],
            test: vec![3],
            t_s: 10,
            t_w: 2,
        };
        assert!(ok.validate(4).is_ok());
    }
}
