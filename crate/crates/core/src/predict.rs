//! One prediction interface over the core architectures, the composite, and
//! the black-box stack, so metrics and comparisons treat them uniformly.

use ndarray::Array2;

use crate::data::{Dataset, Sequence};
use crate::models::Model;
use crate::physics::{BlackBoxModel, CompositeModel, OutputActivation};
use crate::plant::Normalizer;
use crate::training::{fit_metric_with, FitReport, TrainError};

/// Any trainable model in this crate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "model_kind", rename_all = "lowercase")]
pub enum AnyModel {
    Core(Model),
    Composite(CompositeModel),
    BlackBox(BlackBoxModel),
}

impl AnyModel {
    pub fn n_u(&self) -> usize {
        match self {
            AnyModel::Core(m) => m.dims.n_u,
            AnyModel::Composite(c) => c.n_u,
            AnyModel::BlackBox(b) => b.n_u,
        }
    }

    pub fn n_y(&self) -> usize {
        match self {
            AnyModel::Core(m) => m.dims.n_y,
            AnyModel::Composite(c) => c.total_output_width(),
            AnyModel::BlackBox(b) => b.n_y(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            AnyModel::Core(m) => m.architecture().to_string(),
            AnyModel::Composite(c) => format!("composite({} blocks)", c.n_blocks()),
            AnyModel::BlackBox(b) => format!("blackbox({} layers)", b.layers.len()),
        }
    }

    /// Open-loop prediction in physical units for one normalized sequence:
    /// simulate from zero state, then map each channel back to its physical
    /// range (sigmoid-wrapped composite channels already are physical).
    pub fn predict_physical(
        &self,
        seq: &Sequence,
        normalizer: &Normalizer,
    ) -> Result<Array2<f64>, TrainError> {
        let t = seq.len();
        let n_y = self.n_y();
        let mut out = Array2::zeros((t, n_y));
        match self {
            AnyModel::Core(m) => {
                let (ys, _) = m.simulate(&m.zero_state(), &seq.u_rows())?;
                for (k, y) in ys.iter().enumerate() {
                    for j in 0..n_y {
                        out[[k, j]] = normalizer.y[j].invert(y[j]);
                    }
                }
            }
            AnyModel::BlackBox(b) => {
                let ys = crate::physics::blackbox_simulate(b, &b.zero_state(), &seq.u_rows())?;
                for (k, y) in ys.iter().enumerate() {
                    for j in 0..n_y {
                        out[[k, j]] = normalizer.y[j].invert(y[j]);
                    }
                }
            }
            AnyModel::Composite(c) => {
                let ys = crate::physics::composite_simulate(c, &c.zero_state(), &seq.u_rows())?;
                for (k, y) in ys.iter().enumerate() {
                    for j in 0..n_y {
                        out[[k, j]] = match c.channel_activation(j) {
                            OutputActivation::Identity => normalizer.y[j].invert(y[j]),
                            OutputActivation::Sigmoid => y[j],
                        };
                    }
                }
            }
        }
        Ok(out)
    }

    /// FIT over a dataset subset, all channels evaluated in physical units.
    pub fn fit(&self, dataset: &Dataset, ids: &[usize]) -> Result<FitReport, TrainError> {
        if ids.is_empty() {
            return Err(TrainError::EmptySubset);
        }
        let seqs = dataset.subset(ids);
        let normalizer = &dataset.normalizer;
        // Physical-unit targets.
        let targets: Vec<Array2<f64>> = seqs
            .iter()
            .map(|s| {
                let mut y = s.y.clone();
                for mut row in y.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = normalizer.y[j].invert(*v);
                    }
                }
                y
            })
            .collect();
        fit_metric_with(|i| self.predict_physical(seqs[i], normalizer), &targets, dataset.split.t_w)
    }
}
