//! Sufficient stability conditions on the weights, ν(Φ) < 0, plus empirical
//! probes.
//!
//! Each architecture has one or more scalar margins built from weight norms;
//! strict negativity of every margin certifies ISS and/or δISS. The margins
//! are exposed together with subgradients so training can penalize
//! violations, and [`probe_delta_iss`] / [`estimate_gain`] provide empirical
//! (non-certifying) diagnostics.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{
    inf_norm, inf_norm_stacked, inf_norm_stacked_argmax, l2, spectral_norm, top_singular_triplet,
};
use crate::models::{
    sigmoid, EsnParams, GruParams, LstmParams, Model, ModelError, ModelParams, NnarxParams,
    StateVec,
};
use crate::rng::{substream, Stream};

/// Margins are "satisfied" only when strictly below minus this, so
/// floating-point boundary cases never flap between pass and fail.
pub const MARGIN_TOLERANCE: f64 = 1e-9;

/// Default probe horizon: smallest K with 0.9^K < 1e-4 is 88, rounded up.
pub const DEFAULT_PROBE_HORIZON: usize = 100;

/// One evaluated inequality.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Margin {
    pub name: String,
    /// Left-hand side of the inequality; negative means satisfied.
    pub value: f64,
    /// Power-iteration residual of any spectral norm entering the value
    /// (0 when none does).
    pub norm_residual: f64,
}

/// Auxiliary gate bounds entering the LSTM/GRU conditions. All σ̄ values lie
/// in (0,1) and all φ̄ values in [0,1).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct AuxiliaryBounds {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_o: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// Result of evaluating an architecture's full set of stability conditions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CertificateReport {
    pub architecture: String,
    /// Property the margins certify when they all pass.
    pub property: String,
    pub margins: Vec<Margin>,
    pub auxiliary: AuxiliaryBounds,
    /// True iff every margin is strictly below -[`MARGIN_TOLERANCE`].
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CertificateReport {
    pub fn max_margin(&self) -> f64 {
        self.margins.iter().map(|m| m.value).fold(f64::NEG_INFINITY, f64::max)
    }
}

fn margins_pass(margins: &[Margin]) -> bool {
    margins.iter().all(|m| m.value < -MARGIN_TOLERANCE)
}

#[derive(Debug, thiserror::Error)]
pub enum CertificateError {
    #[error("reservoir violates the generation contract: ‖w_x‖₂ = {norm} >= 1")]
    ReservoirNotSchur { norm: f64 },
    #[error("weights contain non-finite entries")]
    NonFiniteWeights,
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---------------------------------------------------------------------------
// Per-architecture margins
// ---------------------------------------------------------------------------

/// NNARX margin: ‖u0‖₂ ‖u1‖₂ − 1/(L_ψ √N).
pub fn nu_nnarx(p: &NnarxParams, horizon: usize) -> Margin {
    let s0 = spectral_norm(p.u0.view());
    let s1 = spectral_norm(p.u1.view());
    Margin {
        name: "nnarx_iss_delta_iss".into(),
        value: s0.value * s1.value - 1.0 / (p.lipschitz * (horizon as f64).sqrt()),
        norm_residual: s0.residual.max(s1.residual),
    }
}

/// ESN margin: ‖w_x − w_y w_out1‖₂ − 1, valid only under ‖w_x‖₂ < 1.
pub fn nu_esn(p: &EsnParams) -> Result<Margin, CertificateError> {
    let wx_norm = spectral_norm(p.w_x.view());
    if wx_norm.value >= 1.0 {
        return Err(CertificateError::ReservoirNotSchur { norm: wx_norm.value });
    }
    let m = &p.w_x - &p.w_y.dot(&p.w_out1);
    let s = spectral_norm(m.view());
    Ok(Margin {
        name: "esn_delta_iss".into(),
        value: s.value - 1.0,
        norm_residual: s.residual.max(wx_norm.residual),
    })
}

/// LSTM margins and auxiliary bounds: the ISS condition plus the δISS pair.
///
/// The candidate-block bound tanh(‖[w_c u_c b_c]‖∞) serves as φ̄_c wherever
/// a candidate bound appears.
pub fn nu_lstm(p: &LstmParams) -> Result<(Margin, [Margin; 2], AuxiliaryBounds), CertificateError> {
    let c = &p.cell;
    for m in [&c.w_f, &c.u_f, &c.w_i, &c.u_i, &c.w_c, &c.u_c, &c.w_o, &c.u_o] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(CertificateError::NonFiniteWeights);
        }
    }
    let sigma_f = sigmoid(inf_norm_stacked(c.w_f.view(), c.u_f.view(), &c.b_f));
    let sigma_i = sigmoid(inf_norm_stacked(c.w_i.view(), c.u_i.view(), &c.b_i));
    let sigma_o = sigmoid(inf_norm_stacked(c.w_o.view(), c.u_o.view(), &c.b_o));
    let phi_c = inf_norm_stacked(c.w_c.view(), c.u_c.view(), &c.b_c).tanh();

    let uc = spectral_norm(c.u_c.view());
    let uf = spectral_norm(c.u_f.view());
    let ui = spectral_norm(c.u_i.view());
    let uo = spectral_norm(c.u_o.view());
    let residual = [uc.residual, uf.residual, ui.residual, uo.residual]
        .into_iter()
        .fold(0.0, f64::max);

    let iss = Margin {
        name: "lstm_iss".into(),
        value: sigma_f + sigma_o * sigma_i * uc.value - 1.0,
        norm_residual: uc.residual,
    };

    let ratio = sigma_i * phi_c / (1.0 - sigma_f);
    let alpha = 0.25 * uf.value * ratio + sigma_i * uc.value + 0.25 * ui.value * phi_c;
    let phi_x = ratio.tanh();
    let d1 = Margin {
        name: "lstm_delta_iss_1".into(),
        value: -1.0 + sigma_f + alpha * sigma_o + 0.25 * phi_x * uo.value
            - 0.25 * sigma_f * phi_x * uo.value,
        norm_residual: residual,
    };
    let d2 = Margin {
        name: "lstm_delta_iss_2".into(),
        value: 0.25 * sigma_f * phi_x * uo.value - 1.0,
        norm_residual: uo.residual,
    };
    let aux = AuxiliaryBounds {
        sigma_f: Some(sigma_f),
        sigma_i: Some(sigma_i),
        sigma_o: Some(sigma_o),
        phi_c: Some(phi_c),
        phi_x: Some(phi_x),
        alpha: Some(alpha),
        ..Default::default()
    };
    Ok((iss, [d1, d2], aux))
}

/// GRU margins and auxiliary bounds: the ISS condition and the δISS
/// condition.
pub fn nu_gru(p: &GruParams) -> Result<(Margin, Margin, AuxiliaryBounds), CertificateError> {
    for m in [&p.w_r, &p.u_r, &p.w_z, &p.u_z, &p.w_f, &p.u_f] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(CertificateError::NonFiniteWeights);
        }
    }
    let sigma_f = sigmoid(inf_norm_stacked(p.w_f.view(), p.u_f.view(), &p.b_f));
    let sigma_z = sigmoid(inf_norm_stacked(p.w_z.view(), p.u_z.view(), &p.b_z));
    let phi_r = inf_norm_stacked(p.w_r.view(), p.u_r.view(), &p.b_r).tanh();
    let ur = inf_norm(p.u_r.view());
    let uf = inf_norm(p.u_f.view());
    let uz = inf_norm(p.u_z.view());

    let iss = Margin { name: "gru_iss".into(), value: ur * sigma_f - 1.0, norm_residual: 0.0 };
    let delta = Margin {
        name: "gru_delta_iss".into(),
        value: ur * (0.25 * uf + sigma_f) + 0.25 * (1.0 + phi_r) / (1.0 - sigma_z) * uz - 1.0,
        norm_residual: 0.0,
    };
    let aux = AuxiliaryBounds {
        sigma_f: Some(sigma_f),
        sigma_z: Some(sigma_z),
        phi_r: Some(phi_r),
        ..Default::default()
    };
    Ok((iss, delta, aux))
}

/// Evaluates every stability condition of the model's architecture.
pub fn certify(model: &Model) -> Result<CertificateReport, CertificateError> {
    model.validate()?;
    let (margins, auxiliary, note) = match &model.params {
        ModelParams::Nnarx(p) => {
            let horizon = model.dims.horizon.unwrap_or(1);
            (vec![nu_nnarx(p, horizon)], AuxiliaryBounds::default(), None)
        }
        ModelParams::Esn(p) => (vec![nu_esn(p)?], AuxiliaryBounds::default(), None),
        ModelParams::Lstm(p) => {
            let (iss, [d1, d2], aux) = nu_lstm(p)?;
            (
                vec![iss, d1, d2],
                aux,
                Some("the candidate-block tanh bound is used as phi_c in alpha and phi_x".to_string()),
            )
        }
        ModelParams::Gru(p) => {
            let (iss, delta, aux) = nu_gru(p)?;
            (vec![iss, delta], aux, None)
        }
    };
    let pass = margins_pass(&margins);
    Ok(CertificateReport {
        architecture: model.architecture().to_string(),
        property: "both".to_string(),
        margins,
        auxiliary,
        pass,
        note,
    })
}

// ---------------------------------------------------------------------------
// Margin subgradients (penalty inputs for training)
// ---------------------------------------------------------------------------

fn sign(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum()
    }
}

/// Subgradient of ‖[w | u | b]‖∞ scaled by `scale`, distributed into
/// same-shaped containers. Ties pick the first maximizing row.
fn stacked_norm_subgrad(
    w: &Array2<f64>,
    u: &Array2<f64>,
    b: &Array1<f64>,
    scale: f64,
    gw: &mut Array2<f64>,
    gu: &mut Array2<f64>,
    gb: &mut Array1<f64>,
) {
    let (_, row) = inf_norm_stacked_argmax(w.view(), u.view(), b);
    for (j, v) in w.row(row).iter().enumerate() {
        gw[[row, j]] += scale * sign(*v);
    }
    for (j, v) in u.row(row).iter().enumerate() {
        gu[[row, j]] += scale * sign(*v);
    }
    gb[row] += scale * sign(b[row]);
}

/// Subgradient of the induced ∞-norm.
fn inf_norm_subgrad(m: &Array2<f64>, scale: f64, gm: &mut Array2<f64>) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, row) in m.rows().into_iter().enumerate() {
        let s: f64 = row.iter().map(|x| x.abs()).sum();
        if s > best {
            best = s;
            arg = i;
        }
    }
    for (j, v) in m.row(arg).iter().enumerate() {
        gm[[arg, j]] += scale * sign(*v);
    }
}

/// Subgradient of the spectral norm: u₁ v₁ᵀ scaled.
fn spectral_norm_subgrad(m: &Array2<f64>, scale: f64, gm: &mut Array2<f64>) {
    let (_, u, v) = top_singular_triplet(m.view());
    for i in 0..gm.nrows() {
        if u[i] == 0.0 {
            continue;
        }
        for j in 0..gm.ncols() {
            gm[[i, j]] += scale * u[i] * v[j];
        }
    }
}

/// Margins with subgradients w.r.t. the weights, one same-shaped container
/// per margin, ordered as in [`certify`].
pub fn margin_gradients(model: &Model) -> Result<Vec<(f64, ModelParams)>, CertificateError> {
    match &model.params {
        ModelParams::Nnarx(p) => {
            let horizon = model.dims.horizon.unwrap_or(1);
            let m = nu_nnarx(p, horizon);
            let mut g = model.params.zeros_like();
            if let ModelParams::Nnarx(gp) = &mut g {
                let (s0, u0u, u0v) = top_singular_triplet(p.u0.view());
                let (s1, u1u, u1v) = top_singular_triplet(p.u1.view());
                // d(s0 s1) = s1 ds0 + s0 ds1.
                for i in 0..gp.u0.nrows() {
                    for j in 0..gp.u0.ncols() {
                        gp.u0[[i, j]] = s1 * u0u[i] * u0v[j];
                    }
                }
                for i in 0..gp.u1.nrows() {
                    for j in 0..gp.u1.ncols() {
                        gp.u1[[i, j]] = s0 * u1u[i] * u1v[j];
                    }
                }
            }
            Ok(vec![(m.value, g)])
        }
        ModelParams::Esn(p) => {
            let m = nu_esn(p)?;
            let mut g = model.params.zeros_like();
            if let ModelParams::Esn(gp) = &mut g {
                // ν = ‖w_x − w_y w_out1‖₂ − 1; d/d(w_out1) = −w_yᵀ u vᵀ.
                let diff = &p.w_x - &p.w_y.dot(&p.w_out1);
                let (_, u, v) = top_singular_triplet(diff.view());
                let wyu = p.w_y.t().dot(&u);
                for i in 0..gp.w_out1.nrows() {
                    for j in 0..gp.w_out1.ncols() {
                        gp.w_out1[[i, j]] = -wyu[i] * v[j];
                    }
                }
            }
            Ok(vec![(m.value, g)])
        }
        ModelParams::Lstm(p) => {
            let (iss, [d1, d2], aux) = nu_lstm(p)?;
            let c = &p.cell;
            let sf = aux.sigma_f.unwrap();
            let si = aux.sigma_i.unwrap();
            let so = aux.sigma_o.unwrap();
            let pc = aux.phi_c.unwrap();
            let px = aux.phi_x.unwrap();
            let alpha = aux.alpha.unwrap();
            let uc = spectral_norm(c.u_c.view()).value;
            let uf = spectral_norm(c.u_f.view()).value;
            let ui = spectral_norm(c.u_i.view()).value;
            let uo = spectral_norm(c.u_o.view()).value;

            let dsf = sf * (1.0 - sf);
            let dsi = si * (1.0 - si);
            let dso = so * (1.0 - so);
            let dpc = 1.0 - pc * pc;
            let ratio = si * pc / (1.0 - sf);
            let dpx_dratio = 1.0 - px * px;
            let dratio_dsf = si * pc / ((1.0 - sf) * (1.0 - sf));
            let dratio_dsi = pc / (1.0 - sf);
            let dratio_dpc = si / (1.0 - sf);

            // ISS: σ̄_f + σ̄_o σ̄_i ‖u_c‖₂ − 1.
            let mut g_iss = model.params.zeros_like();
            if let ModelParams::Lstm(gp) = &mut g_iss {
                let gc = &mut gp.cell;
                stacked_norm_subgrad(&c.w_f, &c.u_f, &c.b_f, dsf, &mut gc.w_f, &mut gc.u_f, &mut gc.b_f);
                stacked_norm_subgrad(&c.w_i, &c.u_i, &c.b_i, dsi * so * uc, &mut gc.w_i, &mut gc.u_i, &mut gc.b_i);
                stacked_norm_subgrad(&c.w_o, &c.u_o, &c.b_o, dso * si * uc, &mut gc.w_o, &mut gc.u_o, &mut gc.b_o);
                spectral_norm_subgrad(&c.u_c, so * si, &mut gc.u_c);
            }

            // δISS 1: −1 + σ̄_f + α σ̄_o + ¼ φ̄_x ‖u_o‖₂ (1 − σ̄_f), with
            // α = ¼‖u_f‖₂ ratio + σ̄_i ‖u_c‖₂ + ¼‖u_i‖₂ φ̄_c.
            let mut g_d1 = model.params.zeros_like();
            if let ModelParams::Lstm(gp) = &mut g_d1 {
                let gc = &mut gp.cell;
                let quarter_uo = 0.25 * uo * (1.0 - sf);
                let dm_dratio = so * 0.25 * uf + quarter_uo * dpx_dratio;
                let dm_dsf = 1.0 + dm_dratio * dratio_dsf - 0.25 * px * uo;
                let dm_dsi = so * uc + dm_dratio * dratio_dsi;
                let dm_dpc = so * 0.25 * ui + dm_dratio * dratio_dpc;
                stacked_norm_subgrad(&c.w_f, &c.u_f, &c.b_f, dm_dsf * dsf, &mut gc.w_f, &mut gc.u_f, &mut gc.b_f);
                stacked_norm_subgrad(&c.w_i, &c.u_i, &c.b_i, dm_dsi * dsi, &mut gc.w_i, &mut gc.u_i, &mut gc.b_i);
                stacked_norm_subgrad(&c.w_o, &c.u_o, &c.b_o, alpha * dso, &mut gc.w_o, &mut gc.u_o, &mut gc.b_o);
                stacked_norm_subgrad(&c.w_c, &c.u_c, &c.b_c, dm_dpc * dpc, &mut gc.w_c, &mut gc.u_c, &mut gc.b_c);
                spectral_norm_subgrad(&c.u_f, so * 0.25 * ratio, &mut gc.u_f);
                spectral_norm_subgrad(&c.u_c, so * si, &mut gc.u_c);
                spectral_norm_subgrad(&c.u_i, so * 0.25 * pc, &mut gc.u_i);
                spectral_norm_subgrad(&c.u_o, 0.25 * px * (1.0 - sf), &mut gc.u_o);
            }

            // δISS 2: ¼ σ̄_f φ̄_x ‖u_o‖₂ − 1.
            let mut g_d2 = model.params.zeros_like();
            if let ModelParams::Lstm(gp) = &mut g_d2 {
                let gc = &mut gp.cell;
                let dm_dratio = 0.25 * sf * uo * dpx_dratio;
                let dm_dsf = 0.25 * px * uo + dm_dratio * dratio_dsf;
                stacked_norm_subgrad(&c.w_f, &c.u_f, &c.b_f, dm_dsf * dsf, &mut gc.w_f, &mut gc.u_f, &mut gc.b_f);
                stacked_norm_subgrad(&c.w_i, &c.u_i, &c.b_i, dm_dratio * dratio_dsi * dsi, &mut gc.w_i, &mut gc.u_i, &mut gc.b_i);
                stacked_norm_subgrad(&c.w_c, &c.u_c, &c.b_c, dm_dratio * dratio_dpc * dpc, &mut gc.w_c, &mut gc.u_c, &mut gc.b_c);
                spectral_norm_subgrad(&c.u_o, 0.25 * sf * px, &mut gc.u_o);
            }
            Ok(vec![(iss.value, g_iss), (d1.value, g_d1), (d2.value, g_d2)])
        }
        ModelParams::Gru(p) => {
            let (iss, delta, aux) = nu_gru(p)?;
            let sf = aux.sigma_f.unwrap();
            let sz = aux.sigma_z.unwrap();
            let pr = aux.phi_r.unwrap();
            let ur = inf_norm(p.u_r.view());
            let uf = inf_norm(p.u_f.view());
            let uz = inf_norm(p.u_z.view());
            let dsf = sf * (1.0 - sf);
            let dsz = sz * (1.0 - sz);
            let dpr = 1.0 - pr * pr;

            let mut g_iss = model.params.zeros_like();
            if let ModelParams::Gru(gp) = &mut g_iss {
                inf_norm_subgrad(&p.u_r, sf, &mut gp.u_r);
                stacked_norm_subgrad(&p.w_f, &p.u_f, &p.b_f, ur * dsf, &mut gp.w_f, &mut gp.u_f, &mut gp.b_f);
            }

            let mut g_delta = model.params.zeros_like();
            if let ModelParams::Gru(gp) = &mut g_delta {
                inf_norm_subgrad(&p.u_r, 0.25 * uf + sf, &mut gp.u_r);
                inf_norm_subgrad(&p.u_f, 0.25 * ur, &mut gp.u_f);
                stacked_norm_subgrad(&p.w_f, &p.u_f, &p.b_f, ur * dsf, &mut gp.w_f, &mut gp.u_f, &mut gp.b_f);
                inf_norm_subgrad(&p.u_z, 0.25 * (1.0 + pr) / (1.0 - sz), &mut gp.u_z);
                stacked_norm_subgrad(
                    &p.w_z,
                    &p.u_z,
                    &p.b_z,
                    0.25 * (1.0 + pr) * uz / ((1.0 - sz) * (1.0 - sz)) * dsz,
                    &mut gp.w_z,
                    &mut gp.u_z,
                    &mut gp.b_z,
                );
                stacked_norm_subgrad(
                    &p.w_r,
                    &p.u_r,
                    &p.b_r,
                    0.25 * uz / (1.0 - sz) * dpr,
                    &mut gp.w_r,
                    &mut gp.u_r,
                    &mut gp.b_r,
                );
            }
            Ok(vec![(iss.value, g_iss), (delta.value, g_delta)])
        }
    }
}

// ---------------------------------------------------------------------------
// Empirical probes
// ---------------------------------------------------------------------------

/// How probe inputs are drawn; all classes are unity-bounded.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputClass {
    /// Independent uniform draws in [-1, 1] per channel per step.
    #[default]
    Uniform,
    Zero,
}

impl InputClass {
    pub(crate) fn draw<R: Rng>(&self, n_u: usize, len: usize, rng: &mut R) -> Vec<Array1<f64>> {
        (0..len)
            .map(|_| match self {
                InputClass::Uniform => Array1::from_shape_fn(n_u, |_| rng.random_range(-1.0..=1.0)),
                InputClass::Zero => Array1::zeros(n_u),
            })
            .collect()
    }
}

/// Outcome of an empirical δISS probe.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmpiricalStabilityProbe {
    pub trials: usize,
    pub horizon: usize,
    /// Max over trials of ‖x_a,K − x_b,K‖₂.
    pub max_terminal_distance: f64,
    pub input_class: InputClass,
    pub tolerance: f64,
    /// True iff the max terminal distance fell below the tolerance. The
    /// probe is diagnostic: certificate failure does not imply probe failure.
    pub verdict: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("probe horizon must be >= 1")]
    ZeroHorizon,
    #[error("perturbation level list is empty")]
    NoLevels,
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn sample_box<R: Rng>(lo: &Array1<f64>, hi: &Array1<f64>, rng: &mut R) -> StateVec {
    StateVec(Array1::from_shape_fn(lo.len(), |i| rng.random_range(lo[i]..=hi[i])))
}

/// Runs trial pairs of trajectories from different random initial states
/// under one shared input sequence per trial and reports the worst terminal
/// state distance.
pub fn probe_delta_iss(
    model: &Model,
    trials: usize,
    horizon: usize,
    input_class: InputClass,
    tolerance: f64,
    rng_seed: u64,
) -> Result<EmpiricalStabilityProbe, ProbeError> {
    if horizon < 1 {
        return Err(ProbeError::ZeroHorizon);
    }
    let (lo, hi) = model.admissible_state_box();
    let mut max_dist = 0.0_f64;
    for trial in 0..trials {
        let mut rng = substream(rng_seed, Stream::Probe, trial as u64);
        let xa = sample_box(&lo, &hi, &mut rng);
        let xb = sample_box(&lo, &hi, &mut rng);
        let u_seq = input_class.draw(model.dims.n_u, horizon, &mut rng);
        let (_, xs_a) = model.simulate(&xa, &u_seq)?;
        let (_, xs_b) = model.simulate(&xb, &u_seq)?;
        let d = l2(&(&xs_a.last().unwrap().0 - &xs_b.last().unwrap().0));
        max_dist = max_dist.max(d);
    }
    Ok(EmpiricalStabilityProbe {
        trials,
        horizon,
        max_terminal_distance: max_dist,
        input_class,
        tolerance,
        verdict: max_dist < tolerance,
    })
}

/// Empirical input-perturbation gain: a staircase level → worst state
/// deviation, nondecreasing by construction (running max).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GainEstimate {
    pub levels: Vec<f64>,
    pub max_deviation: Vec<f64>,
    /// False when the model failed its certificate; the numbers are then
    /// advisory only.
    pub certified: bool,
}

/// Samples input pairs at each perturbation level (common initial state,
/// per-step perturbations with ‖δu_k‖₂ ≤ δ) and records the worst ‖δx_k‖₂
/// over k and trials.
pub fn estimate_gain(
    model: &Model,
    perturbation_levels: &[f64],
    trials: usize,
    horizon: usize,
    rng_seed: u64,
) -> Result<GainEstimate, ProbeError> {
    if perturbation_levels.is_empty() {
        return Err(ProbeError::NoLevels);
    }
    if horizon < 1 {
        return Err(ProbeError::ZeroHorizon);
    }
    let certified = certify(model).map(|r| r.pass).unwrap_or(false);
    let (lo, hi) = model.admissible_state_box();
    let n_u = model.dims.n_u;
    let mut deviations = Vec::with_capacity(perturbation_levels.len());
    let mut running = 0.0_f64;
    for (li, &level) in perturbation_levels.iter().enumerate() {
        let mut worst = 0.0_f64;
        for trial in 0..trials {
            let mut rng = substream(rng_seed, Stream::Gain, (li * trials + trial) as u64);
            let x0 = sample_box(&lo, &hi, &mut rng);
            let base = InputClass::Uniform.draw(n_u, horizon, &mut rng);
            // Per-step perturbation inside the ℓ2 ball of radius `level`.
            let perturbed: Vec<Array1<f64>> = base
                .iter()
                .map(|u| {
                    let dir = Array1::from_shape_fn(n_u, |_| rng.random_range(-1.0_f64..=1.0));
                    let norm = l2(&dir);
                    let radius: f64 = rng.random_range(0.0..=1.0);
                    let scale = if norm > 0.0 { level * radius / norm } else { 0.0 };
                    u + &(dir * scale)
                })
                .collect();
            let (_, xs_a) = model.simulate(&x0, &base)?;
            let (_, xs_b) = model.simulate(&x0, &perturbed)?;
            for (a, b) in xs_a.iter().zip(xs_b.iter()) {
                worst = worst.max(l2(&(&a.0 - &b.0)));
            }
        }
        running = running.max(worst);
        deviations.push(running);
    }
    Ok(GainEstimate { levels: perturbation_levels.to_vec(), max_deviation: deviations, certified })
}
