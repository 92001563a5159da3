//! LSTM cell, output map, and hand-derived BPTT.
//!
//! The state is `x = [χ; ξ]` (cell and hidden parts):
//!
//! ```text
//! f_k = σ(w_f u_k + u_f ξ_k + b_f)
//! i_k = σ(w_i u_k + u_i ξ_k + b_i)
//! o_k = σ(w_o u_k + u_o ξ_k + b_o)
//! χ_{k+1} = f_k ∘ χ_k + i_k ∘ tanh(w_c u_k + u_c ξ_k + b_c)
//! ξ_{k+1} = o_k ∘ tanh(χ_{k+1})
//! y_k = u_y ξ_k + b_y
//! ```
//!
//! The cell functions are public so the composite and stacked models reuse
//! the exact same arithmetic.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::gru::accumulate_outer;
use super::{sigmoid, tanh, Dims, LstmParams, ModelError, StateVec};

/// The four gate blocks of one LSTM cell (no output map).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub w_f: Array2<f64>,
    pub u_f: Array2<f64>,
    pub b_f: Array1<f64>,
    pub w_i: Array2<f64>,
    pub u_i: Array2<f64>,
    pub b_i: Array1<f64>,
    pub w_c: Array2<f64>,
    pub u_c: Array2<f64>,
    pub b_c: Array1<f64>,
    pub w_o: Array2<f64>,
    pub u_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

impl LstmCellParams {
    pub fn zeros(n_x: usize, n_u: usize) -> Self {
        LstmCellParams {
            w_f: Array2::zeros((n_x, n_u)),
            u_f: Array2::zeros((n_x, n_x)),
            b_f: Array1::zeros(n_x),
            w_i: Array2::zeros((n_x, n_u)),
            u_i: Array2::zeros((n_x, n_x)),
            b_i: Array1::zeros(n_x),
            w_c: Array2::zeros((n_x, n_u)),
            u_c: Array2::zeros((n_x, n_x)),
            b_c: Array1::zeros(n_x),
            w_o: Array2::zeros((n_x, n_u)),
            u_o: Array2::zeros((n_x, n_x)),
            b_o: Array1::zeros(n_x),
        }
    }

    pub fn units(&self) -> usize {
        self.b_f.len()
    }

    pub fn input_width(&self) -> usize {
        self.w_f.ncols()
    }
}

/// Values cached by one forward cell evaluation, enough to run the exact
/// reverse pass.
#[derive(Debug, Clone)]
pub struct LstmCellCache {
    pub u: Array1<f64>,
    pub c_prev: Array1<f64>,
    pub h_prev: Array1<f64>,
    pub f: Array1<f64>,
    pub i: Array1<f64>,
    pub o: Array1<f64>,
    pub g: Array1<f64>,
    /// tanh(χ_{k+1})
    pub t: Array1<f64>,
}

/// One LSTM cell step; returns the new cell/hidden parts and the cache.
pub fn lstm_cell_forward(
    p: &LstmCellParams,
    u: &Array1<f64>,
    c: &Array1<f64>,
    h: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>, LstmCellCache) {
    let f = (p.w_f.dot(u) + p.u_f.dot(h) + &p.b_f).mapv(sigmoid);
    let i = (p.w_i.dot(u) + p.u_i.dot(h) + &p.b_i).mapv(sigmoid);
    let o = (p.w_o.dot(u) + p.u_o.dot(h) + &p.b_o).mapv(sigmoid);
    let g = (p.w_c.dot(u) + p.u_c.dot(h) + &p.b_c).mapv(tanh);
    let c_next = &f * c + &i * &g;
    let t = c_next.mapv(tanh);
    let h_next = &o * &t;
    let cache = LstmCellCache {
        u: u.clone(),
        c_prev: c.clone(),
        h_prev: h.clone(),
        f,
        i,
        o,
        g,
        t,
    };
    (c_next, h_next, cache)
}

/// Reverse pass of one cell step.
///
/// Given ∂L/∂χ_{k+1} and ∂L/∂ξ_{k+1}, accumulates weight gradients into
/// `grads` and returns (∂L/∂χ_k, ∂L/∂ξ_k, ∂L/∂u_k).
pub fn lstm_cell_backward(
    p: &LstmCellParams,
    cache: &LstmCellCache,
    dc_next: &Array1<f64>,
    dh_next: &Array1<f64>,
    grads: &mut LstmCellParams,
) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let (f, i, o, g, t) = (&cache.f, &cache.i, &cache.o, &cache.g, &cache.t);
    let do_ = dh_next * t;
    let dc = dh_next * o * &(1.0 - t * t) + dc_next;

    let df = &dc * &cache.c_prev;
    let di = &dc * g;
    let dg = &dc * i;
    let dc_prev = &dc * f;

    let dag = &dg * &(1.0 - g * g);
    let daf = &df * f * &(1.0 - f);
    let dai = &di * i * &(1.0 - i);
    let dao = &do_ * o * &(1.0 - o);

    accumulate_outer(&mut grads.w_c, &dag, &cache.u);
    accumulate_outer(&mut grads.u_c, &dag, &cache.h_prev);
    grads.b_c += &dag;
    accumulate_outer(&mut grads.w_f, &daf, &cache.u);
    accumulate_outer(&mut grads.u_f, &daf, &cache.h_prev);
    grads.b_f += &daf;
    accumulate_outer(&mut grads.w_i, &dai, &cache.u);
    accumulate_outer(&mut grads.u_i, &dai, &cache.h_prev);
    grads.b_i += &dai;
    accumulate_outer(&mut grads.w_o, &dao, &cache.u);
    accumulate_outer(&mut grads.u_o, &dao, &cache.h_prev);
    grads.b_o += &dao;

    let dh_prev = p.u_c.t().dot(&dag)
        + p.u_f.t().dot(&daf)
        + p.u_i.t().dot(&dai)
        + p.u_o.t().dot(&dao);
    let du = p.w_c.t().dot(&dag)
        + p.w_f.t().dot(&daf)
        + p.w_i.t().dot(&dai)
        + p.w_o.t().dot(&dao);
    (dc_prev, dh_prev, du)
}

fn split(x: &StateVec, n_x: usize) -> (Array1<f64>, Array1<f64>) {
    let c = x.0.slice(ndarray::s![..n_x]).to_owned();
    let h = x.0.slice(ndarray::s![n_x..]).to_owned();
    (c, h)
}

fn join(c: &Array1<f64>, h: &Array1<f64>) -> StateVec {
    let mut v = Array1::zeros(c.len() + h.len());
    v.slice_mut(ndarray::s![..c.len()]).assign(c);
    v.slice_mut(ndarray::s![c.len()..]).assign(h);
    StateVec(v)
}

pub(super) fn output(p: &LstmParams, dims: &Dims, x: &StateVec) -> Array1<f64> {
    let (_, h) = split(x, dims.n_x);
    p.u_y.dot(&h) + &p.b_y
}

pub(super) fn step(p: &LstmParams, dims: &Dims, x: &StateVec, u: &Array1<f64>) -> (StateVec, Array1<f64>) {
    let (c, h) = split(x, dims.n_x);
    let y = p.u_y.dot(&h) + &p.b_y;
    let (c_next, h_next, _) = lstm_cell_forward(&p.cell, u, &c, &h);
    (join(&c_next, &h_next), y)
}

pub(super) fn bptt(
    p: &LstmParams,
    dims: &Dims,
    x0: &StateVec,
    u_seq: &[Array1<f64>],
    loss_tail: &[Array1<f64>],
) -> Result<LstmParams, ModelError> {
    let t_len = u_seq.len();
    let (mut c, mut h) = split(x0, dims.n_x);
    let mut caches = Vec::with_capacity(t_len);
    for (k, u) in u_seq.iter().enumerate() {
        let (cn, hn, cache) = lstm_cell_forward(&p.cell, u, &c, &h);
        if cn.iter().chain(hn.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { step: k });
        }
        caches.push(cache);
        c = cn;
        h = hn;
    }

    let n = dims.n_x;
    let mut grads = LstmParams {
        cell: LstmCellParams::zeros(n, dims.n_u),
        u_y: Array2::zeros(p.u_y.dim()),
        b_y: Array1::zeros(p.b_y.len()),
    };
    let mut dc_next = Array1::<f64>::zeros(n);
    let mut dh_next = Array1::<f64>::zeros(n);
    for k in (0..t_len).rev() {
        let cache = &caches[k];
        // Output reads the pre-update hidden part ξ_k.
        let dy = &loss_tail[k];
        accumulate_outer(&mut grads.u_y, dy, &cache.h_prev);
        grads.b_y += dy;

        let (dc, mut dh, _du) =
            lstm_cell_backward(&p.cell, cache, &dc_next, &dh_next, &mut grads.cell);
        dh += &p.u_y.t().dot(dy);
        dc_next = dc;
        dh_next = dh;
    }
    Ok(grads)
}
