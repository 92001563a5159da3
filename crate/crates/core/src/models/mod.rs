//! State-space recurrent models: NNARX, ESN, LSTM, and GRU.
//!
//! Every architecture is an explicit map `(x_k, u_k) -> (x_{k+1}, y_k)` in
//! 64-bit floating point, with hand-derived backpropagation through time for
//! the exact computational graph of [`Model::simulate`]. There is no autodiff
//! engine; each architecture's gradient lives next to its forward pass.

mod esn;
mod gru;
mod lstm;
mod nnarx;

pub use esn::generate_reservoir;
pub(crate) use esn::forced_update as esn_forced_update;
pub(crate) use gru::accumulate_outer as accumulate_outer_pub;
pub use lstm::{lstm_cell_backward, lstm_cell_forward, LstmCellCache, LstmCellParams};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Argument clamp for `exp`-based activations. |σ(40) − 1| < 5e-18 and
/// |tanh(40) − 1| < 1e-34, so the clamp is invisible at f64 precision.
pub(crate) const GATE_CLAMP: f64 = 40.0;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-GATE_CLAMP, GATE_CLAMP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    x.clamp(-GATE_CLAMP, GATE_CLAMP).tanh()
}

/// Model dimensions. `horizon` is the NNARX regression horizon N and is
/// absent for the other architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_u: usize,
    pub n_y: usize,
    /// Hidden width: FFNN hidden layer (NNARX), reservoir size (ESN),
    /// number of units (LSTM, GRU).
    pub n_x: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

impl Dims {
    pub fn new(n_u: usize, n_y: usize, n_x: usize) -> Self {
        Dims { n_u, n_y, n_x, horizon: None }
    }

    pub fn nnarx(n_u: usize, n_y: usize, n_hidden: usize, horizon: usize) -> Self {
        Dims { n_u, n_y, n_x: n_hidden, horizon: Some(horizon) }
    }

    fn check_positive(&self) -> Result<(), ModelError> {
        if self.n_u == 0 || self.n_y == 0 || self.n_x == 0 || self.horizon == Some(0) {
            return Err(ModelError::InvalidParams {
                what: format!("dimensions must be strictly positive: {self:?}"),
            });
        }
        Ok(())
    }
}

/// Hidden-layer activation of the NNARX regression FFNN. Both choices are
/// Lipschitz with ψ(0) = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(x),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = tanh(x);
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Lipschitz constant (both activations have sup |ψ′| = 1).
    pub fn lipschitz(self) -> f64 {
        1.0
    }
}

/// NNARX weights: single hidden layer FFNN regressing the next output over
/// the stacked window of past outputs and inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnarxParams {
    /// Output layer, n_y × n_hidden.
    pub u0: Array2<f64>,
    pub b0: Array1<f64>,
    /// Hidden layer on the current input, n_hidden × n_u.
    pub w1: Array2<f64>,
    /// Hidden layer on the delay-line state, n_hidden × N(n_y+n_u).
    pub u1: Array2<f64>,
    pub b1: Array1<f64>,
    pub activation: Activation,
    /// Lipschitz constant of the activation (≥ sup |ψ′|).
    pub lipschitz: f64,
}

/// ESN weights. The reservoir (`w_x`, `w_u`, `w_y`) is generated once and
/// never trained; only the readout (`w_out1`, `w_out2`) is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsnParams {
    /// Fixed sparse reservoir matrix, n_x × n_x, with ‖w_x‖₂ < 1.
    pub w_x: Array2<f64>,
    /// Fixed input weights, n_x × n_u.
    pub w_u: Array2<f64>,
    /// Fixed output-feedback weights, n_x × n_y.
    pub w_y: Array2<f64>,
    /// Trained readout on the reservoir state, n_y × n_x.
    pub w_out1: Array2<f64>,
    /// Trained readout on the previous input, n_y × n_u.
    pub w_out2: Array2<f64>,
    /// ‖w_x‖₂ cached at generation time.
    pub spectral_norm_wx: f64,
}

/// GRU weights. `w_r/u_r/b_r` form the candidate-state block, `w_z/…` the
/// update gate and `w_f/…` the forget gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_r: Array2<f64>,
    pub u_r: Array2<f64>,
    pub b_r: Array1<f64>,
    pub w_z: Array2<f64>,
    pub u_z: Array2<f64>,
    pub b_z: Array1<f64>,
    pub w_f: Array2<f64>,
    pub u_f: Array2<f64>,
    pub b_f: Array1<f64>,
    /// Output map, n_y × n_x.
    pub u_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

/// Full LSTM: gate cell plus the affine output map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    #[serde(flatten)]
    pub cell: LstmCellParams,
    /// Output map, n_y × n_x.
    pub u_y: Array2<f64>,
    pub b_y: Array1<f64>,
}

/// Tagged union over the four architectures' weight sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "lowercase")]
pub enum ModelParams {
    Nnarx(NnarxParams),
    Esn(EsnParams),
    Lstm(LstmParams),
    Gru(GruParams),
}

impl ModelParams {
    pub fn architecture(&self) -> &'static str {
        match self {
            ModelParams::Nnarx(_) => "nnarx",
            ModelParams::Esn(_) => "esn",
            ModelParams::Lstm(_) => "lstm",
            ModelParams::Gru(_) => "gru",
        }
    }
}

/// Architecture-specific state vector.
///
/// Layouts: NNARX stacks the delay line `[z_1; …; z_N]` with
/// `z_i = [y; u]`; ESN is `[reservoir; previous input]` (the one-slot input
/// memory feeding the readout); LSTM is `[χ; ξ]`; GRU is plain `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVec(pub Array1<f64>);

impl StateVec {
    pub fn zeros(len: usize) -> Self {
        StateVec(Array1::zeros(len))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch in {matrix}: expected {expected}, got {got}")]
    DimensionMismatch { matrix: &'static str, expected: usize, got: usize },
    #[error("non-finite value first appeared at time step {step}")]
    NonFinite { step: usize },
    #[error("invalid parameters: {what}")]
    InvalidParams { what: String },
    #[error("at time step {step}: {source}")]
    AtStep { step: usize, source: Box<ModelError> },
}

/// A model: dimensions, weights, and (optionally) where its random pieces
/// came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub dims: Dims,
    pub params: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_provenance: Option<String>,
}

impl Model {
    pub fn new(dims: Dims, params: ModelParams) -> Self {
        Model { dims, params, seed_provenance: None }
    }

    pub fn architecture(&self) -> &'static str {
        self.params.architecture()
    }

    /// Length of the architecture's state vector.
    pub fn state_len(&self) -> usize {
        let d = &self.dims;
        match &self.params {
            ModelParams::Nnarx(_) => d.horizon.unwrap_or(1) * (d.n_y + d.n_u),
            ModelParams::Esn(_) => d.n_x + d.n_u,
            ModelParams::Lstm(_) => 2 * d.n_x,
            ModelParams::Gru(_) => d.n_x,
        }
    }

    /// All-zero initial state (the training default; washout absorbs it).
    pub fn zero_state(&self) -> StateVec {
        StateVec::zeros(self.state_len())
    }

    /// Componentwise box of admissible states, used when sampling initial
    /// conditions for probes and scenario verification.
    pub fn admissible_state_box(&self) -> (Array1<f64>, Array1<f64>) {
        let n = self.state_len();
        match &self.params {
            // Reservoir components live in σ's range (0,1); the input slot
            // carries normalized inputs.
            ModelParams::Esn(_) => {
                let mut lo = Array1::from_elem(n, -1.0);
                let mut hi = Array1::from_elem(n, 1.0);
                for i in 0..self.dims.n_x {
                    lo[i] = 0.0;
                    hi[i] = 1.0;
                }
                (lo, hi)
            }
            // Data windows (NNARX), gated states (LSTM, GRU) are unity-bounded.
            _ => (Array1::from_elem(n, -1.0), Array1::from_elem(n, 1.0)),
        }
    }

    fn check_step_inputs(&self, x: &StateVec, u: &Array1<f64>) -> Result<(), ModelError> {
        self.dims.check_positive()?;
        if u.len() != self.dims.n_u {
            return Err(ModelError::DimensionMismatch {
                matrix: "u",
                expected: self.dims.n_u,
                got: u.len(),
            });
        }
        if x.len() != self.state_len() {
            return Err(ModelError::DimensionMismatch {
                matrix: "x",
                expected: self.state_len(),
                got: x.len(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParams { what: "input u contains non-finite values".into() });
        }
        Ok(())
    }

    /// One exact state-space step: `(x_k, u_k) -> (x_{k+1}, y_k)`.
    ///
    /// The output is evaluated from the current state (none of the four
    /// architectures has direct input feedthrough; the ESN readout's
    /// `u_{k-1}` term reads the input-memory slot of the state).
    pub fn step(&self, x: &StateVec, u: &Array1<f64>) -> Result<(StateVec, Array1<f64>), ModelError> {
        self.check_step_inputs(x, u)?;
        Ok(match &self.params {
            ModelParams::Nnarx(p) => nnarx::step(p, &self.dims, x, u),
            ModelParams::Esn(p) => esn::step(p, &self.dims, x, u),
            ModelParams::Lstm(p) => lstm::step(p, &self.dims, x, u),
            ModelParams::Gru(p) => gru::step(p, x, u),
        })
    }

    /// Output map `y = g(x)` alone, without advancing the state.
    pub fn output(&self, x: &StateVec) -> Result<Array1<f64>, ModelError> {
        if x.len() != self.state_len() {
            return Err(ModelError::DimensionMismatch {
                matrix: "x",
                expected: self.state_len(),
                got: x.len(),
            });
        }
        Ok(match &self.params {
            ModelParams::Nnarx(_) => nnarx::output(&self.dims, x),
            ModelParams::Esn(p) => esn::output(p, &self.dims, x),
            ModelParams::Lstm(p) => lstm::output(p, &self.dims, x),
            ModelParams::Gru(p) => gru::output(p, x),
        })
    }

    /// Runs `step` over the whole input sequence.
    ///
    /// `y_seq[k]` and `x_seq[k]` are exactly the k-fold composition of
    /// `step`: `y_seq[k]` is the output at time k and `x_seq[k]` the state
    /// after consuming `u_seq[k]`.
    pub fn simulate(
        &self,
        x0: &StateVec,
        u_seq: &[Array1<f64>],
    ) -> Result<(Vec<Array1<f64>>, Vec<StateVec>), ModelError> {
        if u_seq.is_empty() {
            return Err(ModelError::InvalidParams { what: "empty input sequence".into() });
        }
        let mut x = x0.clone();
        let mut ys = Vec::with_capacity(u_seq.len());
        let mut xs = Vec::with_capacity(u_seq.len());
        for (k, u) in u_seq.iter().enumerate() {
            let (xn, y) = self
                .step(&x, u)
                .map_err(|e| ModelError::AtStep { step: k, source: Box::new(e) })?;
            ys.push(y);
            xs.push(xn.clone());
            x = xn;
        }
        Ok((ys, xs))
    }

    /// Gradient of a scalar loss with respect to the weights, through the
    /// exact computational graph of [`Model::simulate`].
    ///
    /// `loss_tail[k]` must hold ∂L/∂y_k (zero vectors during the washout
    /// prefix). For the ESN only the readout receives gradient; the fixed
    /// reservoir blocks of the returned structure are identically zero.
    pub fn bptt_gradient(
        &self,
        x0: &StateVec,
        u_seq: &[Array1<f64>],
        loss_tail: &[Array1<f64>],
    ) -> Result<ModelParams, ModelError> {
        if loss_tail.len() != u_seq.len() {
            return Err(ModelError::DimensionMismatch {
                matrix: "loss_tail",
                expected: u_seq.len(),
                got: loss_tail.len(),
            });
        }
        self.check_step_inputs(x0, u_seq.first().ok_or_else(|| ModelError::InvalidParams {
            what: "empty input sequence".into(),
        })?)?;
        match &self.params {
            ModelParams::Nnarx(p) => nnarx::bptt(p, &self.dims, x0, u_seq, loss_tail).map(ModelParams::Nnarx),
            ModelParams::Esn(p) => esn::bptt(p, &self.dims, x0, u_seq, loss_tail).map(ModelParams::Esn),
            ModelParams::Lstm(p) => lstm::bptt(p, &self.dims, x0, u_seq, loss_tail).map(ModelParams::Lstm),
            ModelParams::Gru(p) => gru::bptt(p, x0, u_seq, loss_tail).map(ModelParams::Gru),
        }
    }

    /// Checks weight shapes against `dims` and rejects non-finite entries.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.dims.check_positive()?;
        let d = &self.dims;
        let check = |name: &'static str, rows: usize, cols: usize, m: &Array2<f64>| {
            if m.dim() != (rows, cols) {
                return Err(ModelError::DimensionMismatch {
                    matrix: name,
                    expected: rows * cols,
                    got: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::InvalidParams { what: format!("{name} contains non-finite entries") });
            }
            Ok(())
        };
        let check_v = |name: &'static str, len: usize, v: &Array1<f64>| {
            if v.len() != len {
                return Err(ModelError::DimensionMismatch { matrix: name, expected: len, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::InvalidParams { what: format!("{name} contains non-finite entries") });
            }
            Ok(())
        };
        match &self.params {
            ModelParams::Nnarx(p) => {
                let n = d.horizon.ok_or_else(|| ModelError::InvalidParams {
                    what: "NNARX requires dims.horizon".into(),
                })?;
                let state = n * (d.n_y + d.n_u);
                check("u0", d.n_y, d.n_x, &p.u0)?;
                check_v("b0", d.n_y, &p.b0)?;
                check("w1", d.n_x, d.n_u, &p.w1)?;
                check("u1", d.n_x, state, &p.u1)?;
                check_v("b1", d.n_x, &p.b1)?;
                if p.lipschitz <= 0.0 {
                    return Err(ModelError::InvalidParams { what: "lipschitz must be positive".into() });
                }
            }
            ModelParams::Esn(p) => {
                check("w_x", d.n_x, d.n_x, &p.w_x)?;
                check("w_u", d.n_x, d.n_u, &p.w_u)?;
                check("w_y", d.n_x, d.n_y, &p.w_y)?;
                check("w_out1", d.n_y, d.n_x, &p.w_out1)?;
                check("w_out2", d.n_y, d.n_u, &p.w_out2)?;
            }
            ModelParams::Lstm(p) => {
                for (name, m) in [
                    ("w_f", &p.cell.w_f), ("w_i", &p.cell.w_i), ("w_c", &p.cell.w_c), ("w_o", &p.cell.w_o),
                ] {
                    check(name, d.n_x, d.n_u, m)?;
                }
                for (name, m) in [
                    ("u_f", &p.cell.u_f), ("u_i", &p.cell.u_i), ("u_c", &p.cell.u_c), ("u_o", &p.cell.u_o),
                ] {
                    check(name, d.n_x, d.n_x, m)?;
                }
                for (name, v) in [
                    ("b_f", &p.cell.b_f), ("b_i", &p.cell.b_i), ("b_c", &p.cell.b_c), ("b_o", &p.cell.b_o),
                ] {
                    check_v(name, d.n_x, v)?;
                }
                check("u_y", d.n_y, d.n_x, &p.u_y)?;
                check_v("b_y", d.n_y, &p.b_y)?;
            }
            ModelParams::Gru(p) => {
                for (name, m) in [("w_r", &p.w_r), ("w_z", &p.w_z), ("w_f", &p.w_f)] {
                    check(name, d.n_x, d.n_u, m)?;
                }
                for (name, m) in [("u_r", &p.u_r), ("u_z", &p.u_z), ("u_f", &p.u_f)] {
                    check(name, d.n_x, d.n_x, m)?;
                }
                for (name, v) in [("b_r", &p.b_r), ("b_z", &p.b_z), ("b_f", &p.b_f)] {
                    check_v(name, d.n_x, v)?;
                }
                check("u_o", d.n_y, d.n_x, &p.u_o)?;
                check_v("b_o", d.n_y, &p.b_o)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trainable-parameter flattening. Optimizers, finite differences, and the
// penalty gradient all work on this flat view; the coordinate order is the
// declaration order of the fields below and is part of the format contract.
// ---------------------------------------------------------------------------

fn push_mat(out: &mut Vec<f64>, m: &Array2<f64>) {
    out.extend(m.iter().copied());
}

fn push_vec(out: &mut Vec<f64>, v: &Array1<f64>) {
    out.extend(v.iter().copied());
}

fn take_mat(m: &mut Array2<f64>, vals: &[f64], pos: &mut usize) {
    for x in m.iter_mut() {
        *x = vals[*pos];
        *pos += 1;
    }
}

fn take_vec(v: &mut Array1<f64>, vals: &[f64], pos: &mut usize) {
    for x in v.iter_mut() {
        *x = vals[*pos];
        *pos += 1;
    }
}

impl ModelParams {
    /// A same-shaped container with every entry zero, used for gradients
    /// and optimizer moments.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        z.for_each_trainable_mut(|m| m.fill(0.0), |v| v.fill(0.0));
        if let ModelParams::Esn(p) = &mut z {
            // Fixed reservoir blocks are zero in gradient containers too.
            p.w_x.fill(0.0);
            p.w_u.fill(0.0);
            p.w_y.fill(0.0);
            p.spectral_norm_wx = 0.0;
        }
        z
    }

    fn for_each_trainable_mut(
        &mut self,
        mut on_mat: impl FnMut(&mut Array2<f64>),
        mut on_vec: impl FnMut(&mut Array1<f64>),
    ) {
        match self {
            ModelParams::Nnarx(p) => {
                on_mat(&mut p.u0);
                on_vec(&mut p.b0);
                on_mat(&mut p.w1);
                on_mat(&mut p.u1);
                on_vec(&mut p.b1);
            }
            ModelParams::Esn(p) => {
                on_mat(&mut p.w_out1);
                on_mat(&mut p.w_out2);
            }
            ModelParams::Lstm(p) => {
                on_mat(&mut p.cell.w_f);
                on_mat(&mut p.cell.u_f);
                on_vec(&mut p.cell.b_f);
                on_mat(&mut p.cell.w_i);
                on_mat(&mut p.cell.u_i);
                on_vec(&mut p.cell.b_i);
                on_mat(&mut p.cell.w_c);
                on_mat(&mut p.cell.u_c);
                on_vec(&mut p.cell.b_c);
                on_mat(&mut p.cell.w_o);
                on_mat(&mut p.cell.u_o);
                on_vec(&mut p.cell.b_o);
                on_mat(&mut p.u_y);
                on_vec(&mut p.b_y);
            }
            ModelParams::Gru(p) => {
                on_mat(&mut p.w_r);
                on_mat(&mut p.u_r);
                on_vec(&mut p.b_r);
                on_mat(&mut p.w_z);
                on_mat(&mut p.u_z);
                on_vec(&mut p.b_z);
                on_mat(&mut p.w_f);
                on_mat(&mut p.u_f);
                on_vec(&mut p.b_f);
                on_mat(&mut p.u_o);
                on_vec(&mut p.b_o);
            }
        }
    }

    /// Trainable coordinates in declaration order. The ESN exposes only the
    /// readout; its fixed reservoir never appears in this view.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            ModelParams::Nnarx(p) => {
                push_mat(&mut out, &p.u0);
                push_vec(&mut out, &p.b0);
                push_mat(&mut out, &p.w1);
                push_mat(&mut out, &p.u1);
                push_vec(&mut out, &p.b1);
            }
            ModelParams::Esn(p) => {
                push_mat(&mut out, &p.w_out1);
                push_mat(&mut out, &p.w_out2);
            }
            ModelParams::Lstm(p) => {
                push_mat(&mut out, &p.cell.w_f);
                push_mat(&mut out, &p.cell.u_f);
                push_vec(&mut out, &p.cell.b_f);
                push_mat(&mut out, &p.cell.w_i);
                push_mat(&mut out, &p.cell.u_i);
                push_vec(&mut out, &p.cell.b_i);
                push_mat(&mut out, &p.cell.w_c);
                push_mat(&mut out, &p.cell.u_c);
                push_vec(&mut out, &p.cell.b_c);
                push_mat(&mut out, &p.cell.w_o);
                push_mat(&mut out, &p.cell.u_o);
                push_vec(&mut out, &p.cell.b_o);
                push_mat(&mut out, &p.u_y);
                push_vec(&mut out, &p.b_y);
            }
            ModelParams::Gru(p) => {
                push_mat(&mut out, &p.w_r);
                push_mat(&mut out, &p.u_r);
                push_vec(&mut out, &p.b_r);
                push_mat(&mut out, &p.w_z);
                push_mat(&mut out, &p.u_z);
                push_vec(&mut out, &p.b_z);
                push_mat(&mut out, &p.w_f);
                push_mat(&mut out, &p.u_f);
                push_vec(&mut out, &p.b_f);
                push_mat(&mut out, &p.u_o);
                push_vec(&mut out, &p.b_o);
            }
        }
        out
    }

    /// Writes flat trainable coordinates back (inverse of
    /// [`ModelParams::flatten_trainable`]).
    pub fn assign_trainable(&mut self, vals: &[f64]) {
        let mut pos = 0;
        match self {
            ModelParams::Nnarx(p) => {
                take_mat(&mut p.u0, vals, &mut pos);
                take_vec(&mut p.b0, vals, &mut pos);
                take_mat(&mut p.w1, vals, &mut pos);
                take_mat(&mut p.u1, vals, &mut pos);
                take_vec(&mut p.b1, vals, &mut pos);
            }
            ModelParams::Esn(p) => {
                take_mat(&mut p.w_out1, vals, &mut pos);
                take_mat(&mut p.w_out2, vals, &mut pos);
            }
            ModelParams::Lstm(p) => {
                take_mat(&mut p.cell.w_f, vals, &mut pos);
                take_mat(&mut p.cell.u_f, vals, &mut pos);
                take_vec(&mut p.cell.b_f, vals, &mut pos);
                take_mat(&mut p.cell.w_i, vals, &mut pos);
                take_mat(&mut p.cell.u_i, vals, &mut pos);
                take_vec(&mut p.cell.b_i, vals, &mut pos);
                take_mat(&mut p.cell.w_c, vals, &mut pos);
                take_mat(&mut p.cell.u_c, vals, &mut pos);
                take_vec(&mut p.cell.b_c, vals, &mut pos);
                take_mat(&mut p.cell.w_o, vals, &mut pos);
                take_mat(&mut p.cell.u_o, vals, &mut pos);
                take_vec(&mut p.cell.b_o, vals, &mut pos);
                take_mat(&mut p.u_y, vals, &mut pos);
                take_vec(&mut p.b_y, vals, &mut pos);
            }
            ModelParams::Gru(p) => {
                take_mat(&mut p.w_r, vals, &mut pos);
                take_mat(&mut p.u_r, vals, &mut pos);
                take_vec(&mut p.b_r, vals, &mut pos);
                take_mat(&mut p.w_z, vals, &mut pos);
                take_mat(&mut p.u_z, vals, &mut pos);
                take_vec(&mut p.b_z, vals, &mut pos);
                take_mat(&mut p.w_f, vals, &mut pos);
                take_mat(&mut p.u_f, vals, &mut pos);
                take_vec(&mut p.b_f, vals, &mut pos);
                take_mat(&mut p.u_o, vals, &mut pos);
                take_vec(&mut p.b_o, vals, &mut pos);
            }
        }
        assert_eq!(pos, vals.len(), "trainable coordinate count mismatch");
    }

    pub fn trainable_len(&self) -> usize {
        self.flatten_trainable().len()
    }
}

/// Random model initialization: trained weights uniform in
/// [−1/√fan_in, 1/√fan_in], biases zero.
pub fn init_model(
    arch: &str,
    dims: Dims,
    rng: &mut impl rand::Rng,
) -> Result<Model, ModelError> {
    let mut mat = |rows: usize, cols: usize, fan_in: usize| {
        let s = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-s..=s))
    };
    let d = dims;
    let params = match arch {
        "nnarx" => {
            let n = d.horizon.ok_or_else(|| ModelError::InvalidParams {
                what: "NNARX requires dims.horizon".into(),
            })?;
            let state = n * (d.n_y + d.n_u);
            ModelParams::Nnarx(NnarxParams {
                u0: mat(d.n_y, d.n_x, d.n_x),
                b0: Array1::zeros(d.n_y),
                w1: mat(d.n_x, d.n_u, d.n_u + state),
                u1: mat(d.n_x, state, d.n_u + state),
                b1: Array1::zeros(d.n_x),
                activation: Activation::Tanh,
                lipschitz: 1.0,
            })
        }
        "lstm" => {
            let fan = d.n_u + d.n_x;
            ModelParams::Lstm(LstmParams {
                cell: LstmCellParams {
                    w_f: mat(d.n_x, d.n_u, fan),
                    u_f: mat(d.n_x, d.n_x, fan),
                    b_f: Array1::zeros(d.n_x),
                    w_i: mat(d.n_x, d.n_u, fan),
                    u_i: mat(d.n_x, d.n_x, fan),
                    b_i: Array1::zeros(d.n_x),
                    w_c: mat(d.n_x, d.n_u, fan),
                    u_c: mat(d.n_x, d.n_x, fan),
                    b_c: Array1::zeros(d.n_x),
                    w_o: mat(d.n_x, d.n_u, fan),
                    u_o: mat(d.n_x, d.n_x, fan),
                    b_o: Array1::zeros(d.n_x),
                },
                u_y: mat(d.n_y, d.n_x, d.n_x),
                b_y: Array1::zeros(d.n_y),
            })
        }
        "gru" => {
            let fan = d.n_u + d.n_x;
            ModelParams::Gru(GruParams {
                w_r: mat(d.n_x, d.n_u, fan),
                u_r: mat(d.n_x, d.n_x, fan),
                b_r: Array1::zeros(d.n_x),
                w_z: mat(d.n_x, d.n_u, fan),
                u_z: mat(d.n_x, d.n_x, fan),
                b_z: Array1::zeros(d.n_x),
                w_f: mat(d.n_x, d.n_u, fan),
                u_f: mat(d.n_x, d.n_x, fan),
                b_f: Array1::zeros(d.n_x),
                u_o: mat(d.n_y, d.n_x, d.n_x),
                b_o: Array1::zeros(d.n_y),
            })
        }
        other => {
            return Err(ModelError::InvalidParams { what: format!("unknown architecture '{other}'") })
        }
    };
    let model = Model::new(dims, params);
    model.validate()?;
    Ok(model)
}

/// All-zero weights for an architecture, mostly useful in tests and as
/// optimizer scratch.
pub fn zero_model(arch: &str, dims: Dims) -> Result<Model, ModelError> {
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    use rand_chacha::rand_core::SeedableRng;
    let mut m = init_model(arch, dims, &mut rng)?;
    let zeroed = m.params.zeros_like();
    m.params = zeroed;
    Ok(m)
}
