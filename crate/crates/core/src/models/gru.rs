//! GRU forward step and hand-derived BPTT.
//!
//! State update (Hadamard products written ∘):
//!
//! ```text
//! z_k = σ(w_z u_k + u_z x_k + b_z)          update gate
//! f_k = σ(w_f u_k + u_f x_k + b_f)          forget gate
//! r_k = tanh(w_r u_k + u_r (f_k ∘ x_k) + b_r)   candidate
//! x_{k+1} = z_k ∘ x_k + (1 − z_k) ∘ r_k
//! y_k = u_o x_k + b_o
//! ```

use ndarray::Array1;

use super::{sigmoid, tanh, GruParams, ModelError, StateVec};

struct StepParts {
    x_next: Array1<f64>,
    z: Array1<f64>,
    f: Array1<f64>,
    r: Array1<f64>,
}

fn advance(p: &GruParams, x: &Array1<f64>, u: &Array1<f64>) -> StepParts {
    let z = (p.w_z.dot(u) + p.u_z.dot(x) + &p.b_z).mapv(sigmoid);
    let f = (p.w_f.dot(u) + p.u_f.dot(x) + &p.b_f).mapv(sigmoid);
    let fx = &f * x;
    let r = (p.w_r.dot(u) + p.u_r.dot(&fx) + &p.b_r).mapv(tanh);
    let x_next = &z * x + (1.0 - &z) * &r;
    StepParts { x_next, z, f, r }
}

pub(super) fn output(p: &GruParams, x: &StateVec) -> Array1<f64> {
    p.u_o.dot(&x.0) + &p.b_o
}

pub(super) fn step(p: &GruParams, x: &StateVec, u: &Array1<f64>) -> (StateVec, Array1<f64>) {
    let y = output(p, x);
    let parts = advance(p, &x.0, u);
    (StateVec(parts.x_next), y)
}

pub(super) fn bptt(
    p: &GruParams,
    x0: &StateVec,
    u_seq: &[Array1<f64>],
    loss_tail: &[Array1<f64>],
) -> Result<GruParams, ModelError> {
    let t_len = u_seq.len();
    // Forward pass, caching states and gate values.
    let mut xs = Vec::with_capacity(t_len + 1);
    xs.push(x0.0.clone());
    let mut zs = Vec::with_capacity(t_len);
    let mut fs = Vec::with_capacity(t_len);
    let mut rs = Vec::with_capacity(t_len);
    for (k, u) in u_seq.iter().enumerate() {
        let parts = advance(p, &xs[k], u);
        if parts.x_next.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { step: k });
        }
        xs.push(parts.x_next);
        zs.push(parts.z);
        fs.push(parts.f);
        rs.push(parts.r);
    }

    let mut g = zero_grads(p);
    let n = p.b_r.len();
    let mut dx_next = Array1::<f64>::zeros(n);
    for k in (0..t_len).rev() {
        let x = &xs[k];
        let u = &u_seq[k];
        let (z, f, r) = (&zs[k], &fs[k], &rs[k]);

        // Output y_k = u_o x_k + b_o.
        let dy = &loss_tail[k];
        accumulate_outer(&mut g.u_o, dy, x);
        g.b_o += dy;
        let mut dx = p.u_o.t().dot(dy);

        // Transition to x_{k+1}.
        let dxp = &dx_next;
        let dz = dxp * &(x - r);
        let dr = dxp * &(1.0 - z);
        dx = dx + dxp * z;

        let dar = &dr * &(1.0 - r * r);
        let fx = f * x;
        accumulate_outer(&mut g.w_r, &dar, u);
        accumulate_outer(&mut g.u_r, &dar, &fx);
        g.b_r += &dar;
        let dfx = p.u_r.t().dot(&dar);
        let df = &dfx * x;
        dx = dx + &dfx * f;

        let daf = &df * f * &(1.0 - f);
        accumulate_outer(&mut g.w_f, &daf, u);
        accumulate_outer(&mut g.u_f, &daf, x);
        g.b_f += &daf;
        dx = dx + p.u_f.t().dot(&daf);

        let daz = &dz * z * &(1.0 - z);
        accumulate_outer(&mut g.w_z, &daz, u);
        accumulate_outer(&mut g.u_z, &daz, x);
        g.b_z += &daz;
        dx = dx + p.u_z.t().dot(&daz);

        dx_next = dx;
    }
    Ok(g)
}

fn zero_grads(p: &GruParams) -> GruParams {
    GruParams {
        w_r: ndarray::Array2::zeros(p.w_r.dim()),
        u_r: ndarray::Array2::zeros(p.u_r.dim()),
        b_r: Array1::zeros(p.b_r.len()),
        w_z: ndarray::Array2::zeros(p.w_z.dim()),
        u_z: ndarray::Array2::zeros(p.u_z.dim()),
        b_z: Array1::zeros(p.b_z.len()),
        w_f: ndarray::Array2::zeros(p.w_f.dim()),
        u_f: ndarray::Array2::zeros(p.u_f.dim()),
        b_f: Array1::zeros(p.b_f.len()),
        u_o: ndarray::Array2::zeros(p.u_o.dim()),
        b_o: Array1::zeros(p.b_o.len()),
    }
}

/// g += d · vᵀ
pub(crate) fn accumulate_outer(g: &mut ndarray::Array2<f64>, d: &Array1<f64>, v: &Array1<f64>) {
    for (i, di) in d.iter().enumerate() {
        if *di == 0.0 {
            continue;
        }
        let mut row = g.row_mut(i);
        for (j, vj) in v.iter().enumerate() {
            row[j] += di * vj;
        }
    }
}
