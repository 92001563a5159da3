//! Echo state network: fixed random reservoir, trained linear readout.
//!
//! State `[x; u_prev]`: the reservoir plus a one-slot input memory so the
//! readout's `u_{k-1}` term fits the uniform `(x, u) -> (x', y)` interface.
//!
//! ```text
//! y_k = w_out1 x_k + w_out2 u_{k-1}
//! x_{k+1} = σ(w_x x_k + w_u u_k + w_y y_k)
//! ```
//!
//! In free-run simulation the feedback term consumes the model's own output,
//! so readout gradients flow through the state recursion; BPTT here accounts
//! for that while leaving the fixed reservoir blocks at zero.

use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::gru::accumulate_outer;
use super::{sigmoid, Dims, EsnParams, Model, ModelError, ModelParams, StateVec};
use crate::linalg::spectral_norm_full;

fn split(x: &StateVec, n_x: usize) -> (Array1<f64>, Array1<f64>) {
    (x.0.slice(s![..n_x]).to_owned(), x.0.slice(s![n_x..]).to_owned())
}

fn join(r: &Array1<f64>, up: &Array1<f64>) -> StateVec {
    let mut v = Array1::zeros(r.len() + up.len());
    v.slice_mut(s![..r.len()]).assign(r);
    v.slice_mut(s![r.len()..]).assign(up);
    StateVec(v)
}

pub(super) fn output(p: &EsnParams, dims: &Dims, x: &StateVec) -> Array1<f64> {
    let (r, up) = split(x, dims.n_x);
    p.w_out1.dot(&r) + p.w_out2.dot(&up)
}

pub(super) fn step(p: &EsnParams, dims: &Dims, x: &StateVec, u: &Array1<f64>) -> (StateVec, Array1<f64>) {
    let (r, up) = split(x, dims.n_x);
    let y = p.w_out1.dot(&r) + p.w_out2.dot(&up);
    let r_next = (p.w_x.dot(&r) + p.w_u.dot(u) + p.w_y.dot(&y)).mapv(sigmoid);
    (join(&r_next, u), y)
}

/// Reservoir update with an externally supplied output (teacher forcing).
pub(crate) fn forced_update(p: &EsnParams, r: &Array1<f64>, u: &Array1<f64>, y: &Array1<f64>) -> Array1<f64> {
    (p.w_x.dot(r) + p.w_u.dot(u) + p.w_y.dot(y)).mapv(sigmoid)
}

pub(super) fn bptt(
    p: &EsnParams,
    dims: &Dims,
    x0: &StateVec,
    u_seq: &[Array1<f64>],
    loss_tail: &[Array1<f64>],
) -> Result<EsnParams, ModelError> {
    let t_len = u_seq.len();
    let n_x = dims.n_x;

    // Forward caches: reservoir states r_k, input memories up_k, outputs y_k.
    let (mut r, mut up) = split(x0, n_x);
    let mut rs = Vec::with_capacity(t_len + 1);
    let mut ups = Vec::with_capacity(t_len);
    let mut ys = Vec::with_capacity(t_len);
    rs.push(r.clone());
    for (k, u) in u_seq.iter().enumerate() {
        let y = p.w_out1.dot(&r) + p.w_out2.dot(&up);
        let rn = forced_update(p, &r, u, &y);
        if rn.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { step: k });
        }
        ups.push(up.clone());
        ys.push(y);
        rs.push(rn.clone());
        r = rn;
        up = u.clone();
    }

    let mut g = EsnParams {
        w_x: Array2::zeros(p.w_x.dim()),
        w_u: Array2::zeros(p.w_u.dim()),
        w_y: Array2::zeros(p.w_y.dim()),
        w_out1: Array2::zeros(p.w_out1.dim()),
        w_out2: Array2::zeros(p.w_out2.dim()),
        spectral_norm_wx: 0.0,
    };
    let mut dr_next = Array1::<f64>::zeros(n_x);
    let mut dup_next = Array1::<f64>::zeros(dims.n_u);
    for k in (0..t_len).rev() {
        // σ'(pre) from the stored post-activation value.
        let r_new = &rs[k + 1];
        let dpre = &dr_next * r_new * &(1.0 - r_new);
        // y_k feeds both the loss and (via w_y) the state update.
        let mut dy = loss_tail[k].clone();
        dy += &p.w_y.t().dot(&dpre);
        accumulate_outer(&mut g.w_out1, &dy, &rs[k]);
        accumulate_outer(&mut g.w_out2, &dy, &ups[k]);
        dr_next = p.w_x.t().dot(&dpre) + p.w_out1.t().dot(&dy);
        // up_{k+1} = u_k is an input, not a parameter; only the readout
        // consumed up_k.
        let _ = dup_next;
        dup_next = p.w_out2.t().dot(&dy);
    }
    Ok(g)
}

#[derive(Debug, thiserror::Error)]
pub enum ReservoirError {
    #[error("sparsity must lie in [0, 1), got {0}")]
    BadSparsity(f64),
    #[error("target spectral norm must lie in (0, 1), got {0}")]
    BadTargetNorm(f64),
}

/// Generates the fixed part of an ESN and zero-initialized readouts.
///
/// `w_x` gets dense uniform entries, exactly `round(sparsity · n_x²)` of
/// them zeroed at seeded random positions, then a rescale so that
/// ‖w_x‖₂ = `target_norm` to power-iteration accuracy (1e-8). `w_u` and
/// `w_y` entries are uniform in [-1, 1] scaled by 0.1.
pub fn generate_reservoir(
    dims: Dims,
    sparsity: f64,
    target_norm: f64,
    seed: u64,
) -> Result<Model, ReservoirError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(ReservoirError::BadSparsity(sparsity));
    }
    if !(target_norm > 0.0 && target_norm < 1.0) {
        return Err(ReservoirError::BadTargetNorm(target_norm));
    }
    let mut rng = crate::rng::substream(seed, crate::rng::Stream::Init, 0);
    let n = dims.n_x;
    let mut w_x = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..=1.0));

    // Zero an exact count of entries via a seeded partial Fisher-Yates.
    let zero_count = (sparsity * (n * n) as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n * n).collect();
    for i in 0..zero_count {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    for &flat in idx.iter().take(zero_count) {
        w_x[[flat / n, flat % n]] = 0.0;
    }

    // Rescale to the target spectral norm; a second pass removes the
    // first-order estimation error.
    for _ in 0..2 {
        let sn = spectral_norm_full(w_x.view(), 10_000, 1e-12).value;
        if sn > 0.0 {
            w_x.mapv_inplace(|v| v * target_norm / sn);
        }
    }
    let achieved = spectral_norm_full(w_x.view(), 10_000, 1e-12).value;

    let w_u = Array2::from_shape_fn((n, dims.n_u), |_| 0.1 * rng.random_range(-1.0..=1.0));
    let w_y = Array2::from_shape_fn((n, dims.n_y), |_| 0.1 * rng.random_range(-1.0..=1.0));
    let params = EsnParams {
        w_x,
        w_u,
        w_y,
        w_out1: Array2::zeros((dims.n_y, n)),
        w_out2: Array2::zeros((dims.n_y, dims.n_u)),
        spectral_norm_wx: achieved,
    };
    let mut model = Model::new(dims, ModelParams::Esn(params));
    model.seed_provenance = Some(format!("reservoir-seed:{seed}"));
    Ok(model)
}
