//! NNARX in normal canonical form: a delay line of past `[y; u]` pairs with
//! an FFNN regression producing the next output.
//!
//! State `x = [z_1; …; z_N]`, `z_i ∈ R^{n_y+n_u}`; one step shifts the line
//! and writes `z_N = [f_NN(x, u); u]`, and the output reads the first `n_y`
//! components of `z_N`.

use ndarray::{s, Array1, Array2};

use super::gru::accumulate_outer;
use super::{Dims, ModelError, NnarxParams, StateVec};

fn block_width(dims: &Dims) -> usize {
    dims.n_y + dims.n_u
}

fn horizon(dims: &Dims) -> usize {
    dims.horizon.expect("NNARX dims carry a horizon")
}

/// FFNN regression f_NN(x, u) = u0 ψ(w1 u + u1 x + b1) + b0 and its
/// hidden pre-activation / activation values.
fn regress(p: &NnarxParams, x: &Array1<f64>, u: &Array1<f64>) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let a = p.w1.dot(u) + p.u1.dot(x) + &p.b1;
    let r = a.mapv(|v| p.activation.eval(v));
    let f = p.u0.dot(&r) + &p.b0;
    (f, a, r)
}

pub(super) fn output(dims: &Dims, x: &StateVec) -> Array1<f64> {
    let m = block_width(dims);
    let n = horizon(dims);
    let start = (n - 1) * m;
    x.0.slice(s![start..start + dims.n_y]).to_owned()
}

pub(super) fn step(p: &NnarxParams, dims: &Dims, x: &StateVec, u: &Array1<f64>) -> (StateVec, Array1<f64>) {
    let m = block_width(dims);
    let n = horizon(dims);
    let y = output(dims, x);
    let (f, _, _) = regress(p, &x.0, u);
    let mut xn = Array1::zeros(n * m);
    // Shift the delay line: block i takes block i+1.
    if n > 1 {
        xn.slice_mut(s![..(n - 1) * m]).assign(&x.0.slice(s![m..]));
    }
    xn.slice_mut(s![(n - 1) * m..(n - 1) * m + dims.n_y]).assign(&f);
    xn.slice_mut(s![(n - 1) * m + dims.n_y..]).assign(u);
    (StateVec(xn), y)
}

pub(super) fn bptt(
    p: &NnarxParams,
    dims: &Dims,
    x0: &StateVec,
    u_seq: &[Array1<f64>],
    loss_tail: &[Array1<f64>],
) -> Result<NnarxParams, ModelError> {
    let m = block_width(dims);
    let n = horizon(dims);
    let t_len = u_seq.len();

    // Forward with caches: states, hidden pre-activations, activations.
    let mut xs = Vec::with_capacity(t_len + 1);
    xs.push(x0.0.clone());
    let mut pre = Vec::with_capacity(t_len);
    let mut act = Vec::with_capacity(t_len);
    for (k, u) in u_seq.iter().enumerate() {
        let x = &xs[k];
        let (f, a, r) = regress(p, x, u);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { step: k });
        }
        let mut xn = Array1::zeros(n * m);
        if n > 1 {
            xn.slice_mut(s![..(n - 1) * m]).assign(&x.slice(s![m..]));
        }
        xn.slice_mut(s![(n - 1) * m..(n - 1) * m + dims.n_y]).assign(&f);
        xn.slice_mut(s![(n - 1) * m + dims.n_y..]).assign(u);
        xs.push(xn);
        pre.push(a);
        act.push(r);
    }

    let mut g = NnarxParams {
        u0: Array2::zeros(p.u0.dim()),
        b0: Array1::zeros(p.b0.len()),
        w1: Array2::zeros(p.w1.dim()),
        u1: Array2::zeros(p.u1.dim()),
        b1: Array1::zeros(p.b1.len()),
        activation: p.activation,
        lipschitz: 0.0,
    };
    let mut dx_next = Array1::<f64>::zeros(n * m);
    for k in (0..t_len).rev() {
        let x = &xs[k];
        let u = &u_seq[k];
        let mut dx = Array1::<f64>::zeros(n * m);

        // Output y_k reads the first n_y entries of the last block of x_k.
        let dy = &loss_tail[k];
        let start = (n - 1) * m;
        for (j, v) in dy.iter().enumerate() {
            dx[start + j] += v;
        }

        // Delay-line shift: d x_k[block i+1] += d x_{k+1}[block i].
        for i in 0..n - 1 {
            for j in 0..m {
                dx[(i + 1) * m + j] += dx_next[i * m + j];
            }
        }

        // Regression output occupies the first n_y slots of the new last
        // block; the trailing n_u slots hold u_k and carry no weight grads.
        let dfnn = dx_next.slice(s![start..start + dims.n_y]).to_owned();
        accumulate_outer(&mut g.u0, &dfnn, &act[k]);
        g.b0 += &dfnn;
        let dr = p.u0.t().dot(&dfnn);
        let da = &dr * &pre[k].mapv(|v| p.activation.deriv(v));
        accumulate_outer(&mut g.w1, &da, u);
        accumulate_outer(&mut g.u1, &da, x);
        g.b1 += &da;
        dx += &p.u1.t().dot(&da);

        dx_next = dx;
    }
    Ok(g)
}
