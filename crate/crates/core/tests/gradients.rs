//! Central finite-difference oracles for every hand-derived gradient path:
//! the four core architectures, the wired composite, the stacked black-box,
//! and the certificate margin subgradients.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use rnnsid_core::models::{generate_reservoir, init_model, Dims, Model, ModelParams, StateVec};
use rnnsid_core::physics::{
    blackbox_bptt, blackbox_simulate, build_blackbox, build_composite, composite_bptt,
    composite_simulate, BlackBoxModel, CompositeModel,
};

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Fixed random per-step output weights make the scalar loss Σ_k c_k·y_k.
fn random_tails(n_y: usize, t: usize, rng: &mut ChaCha12Rng) -> Vec<Array1<f64>> {
    (0..t)
        .map(|_| Array1::from_shape_fn(n_y, |_| rng.random_range(-1.0..=1.0)))
        .collect()
}

fn random_inputs(n_u: usize, t: usize, rng: &mut ChaCha12Rng) -> Vec<Array1<f64>> {
    (0..t)
        .map(|_| Array1::from_shape_fn(n_u, |_| rng.random_range(-1.0..=1.0)))
        .collect()
}

fn linear_loss(ys: &[Array1<f64>], tails: &[Array1<f64>]) -> f64 {
    ys.iter().zip(tails).map(|(y, c)| y.dot(c)).sum()
}

fn check_core_model(model: &Model, trial: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(900 + trial);
    let t = 10;
    let u_seq = random_inputs(model.dims.n_u, t, &mut rng);
    let tails = random_tails(model.dims.n_y, t, &mut rng);
    let x0 = model.zero_state();

    let grad = model.bptt_gradient(&x0, &u_seq, &tails).unwrap();
    let grad_flat = grad.flatten_trainable();

    let theta = model.params.flatten_trainable();
    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        let mut probe = model.clone();
        let mut th = theta.clone();
        th[i] = theta[i] + FD_STEP;
        probe.params.assign_trainable(&th);
        let (ys_p, _) = probe.simulate(&x0, &u_seq).unwrap();
        th[i] = theta[i] - FD_STEP;
        probe.params.assign_trainable(&th);
        let (ys_m, _) = probe.simulate(&x0, &u_seq).unwrap();
        let fd = (linear_loss(&ys_p, &tails) - linear_loss(&ys_m, &tails)) / (2.0 * FD_STEP);
        if grad_flat[i].abs().max(fd.abs()) < 1e-10 {
            continue;
        }
        worst = worst.max(rel_err(grad_flat[i], fd));
    }
    assert!(
        worst < REL_TOL,
        "{} trial {trial}: worst relative gradient error {worst}",
        model.architecture()
    );
}

#[test]
fn gru_gradient_matches_finite_differences() {
    for trial in 0..20 {
        let mut rng = ChaCha12Rng::seed_from_u64(trial);
        let n_x = 2 + (trial % 3) as usize;
        let model = init_model("gru", Dims::new(2, 2, n_x), &mut rng).unwrap();
        check_core_model(&model, trial);
    }
}

#[test]
fn lstm_gradient_matches_finite_differences() {
    for trial in 0..20 {
        let mut rng = ChaCha12Rng::seed_from_u64(100 + trial);
        let n_x = 2 + (trial % 3) as usize;
        let model = init_model("lstm", Dims::new(2, 2, n_x), &mut rng).unwrap();
        check_core_model(&model, trial);
    }
}

#[test]
fn nnarx_gradient_matches_finite_differences() {
    for trial in 0..20 {
        let mut rng = ChaCha12Rng::seed_from_u64(200 + trial);
        let horizon = 1 + (trial % 3) as usize;
        let model = init_model("nnarx", Dims::nnarx(2, 1, 4, horizon), &mut rng).unwrap();
        check_core_model(&model, trial);
    }
}

#[test]
fn esn_readout_gradient_matches_finite_differences() {
    for trial in 0..10 {
        let mut model = generate_reservoir(Dims::new(2, 2, 6), 0.5, 0.8, 300 + trial).unwrap();
        // Random readout so the feedback path w_y·y carries signal.
        let mut rng = ChaCha12Rng::seed_from_u64(400 + trial);
        if let ModelParams::Esn(p) = &mut model.params {
            p.w_out1.mapv_inplace(|_| rng.random_range(-0.5..=0.5));
            p.w_out2.mapv_inplace(|_| rng.random_range(-0.5..=0.5));
        }
        check_core_model(&model, trial);
    }
}

#[test]
fn esn_fixed_reservoir_receives_zero_gradient() {
    let model = {
        let mut m = generate_reservoir(Dims::new(2, 1, 5), 0.3, 0.9, 7).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        if let ModelParams::Esn(p) = &mut m.params {
            p.w_out1.mapv_inplace(|_| rng.random_range(-0.5..=0.5));
        }
        m
    };
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let u_seq = random_inputs(2, 12, &mut rng);
    let tails = random_tails(1, 12, &mut rng);
    let grad = model.bptt_gradient(&model.zero_state(), &u_seq, &tails).unwrap();
    if let ModelParams::Esn(g) = grad {
        assert!(g.w_x.iter().all(|v| *v == 0.0));
        assert!(g.w_u.iter().all(|v| *v == 0.0));
        assert!(g.w_y.iter().all(|v| *v == 0.0));
        assert!(g.w_out1.iter().any(|v| *v != 0.0));
    } else {
        panic!("gradient container must stay ESN-shaped");
    }
}

#[test]
fn zero_loss_tail_gives_zero_gradient() {
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    let model = init_model("gru", Dims::new(2, 1, 3), &mut rng).unwrap();
    let u_seq = random_inputs(2, 8, &mut rng);
    let tails = vec![Array1::zeros(1); 8];
    let grad = model.bptt_gradient(&model.zero_state(), &u_seq, &tails).unwrap();
    assert!(grad.flatten_trainable().iter().all(|v| *v == 0.0));
}

#[test]
fn lstm_single_step_output_bias_gradient_is_tail() {
    // y = u_y ξ + b_y is affine in b_y, so ∂(cᵀy)/∂b_y = c for one step.
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let model = init_model("lstm", Dims::new(2, 3, 4), &mut rng).unwrap();
    let u_seq = random_inputs(2, 1, &mut rng);
    let tail = Array1::from(vec![0.25, -1.5, 2.0]);
    let grad = model.bptt_gradient(&model.zero_state(), &u_seq, &[tail.clone()]).unwrap();
    if let ModelParams::Lstm(g) = grad {
        for j in 0..3 {
            assert!((g.b_y[j] - tail[j]).abs() < 1e-15);
        }
    } else {
        panic!("expected LSTM gradient");
    }
}

// ---------------------------------------------------------------------------
// Composite and black-box
// ---------------------------------------------------------------------------

fn composite_flat(cm: &CompositeModel) -> Vec<f64> {
    let mut out = Vec::new();
    for b in &cm.blocks {
        let lstm = Model::new(Dims::new(b.cell.input_width(), b.b_y.len(), b.cell.units()), ModelParams::Lstm(b.clone()));
        out.extend(lstm.params.flatten_trainable());
    }
    out
}

fn composite_assign(cm: &mut CompositeModel, vals: &[f64]) {
    let mut pos = 0;
    for b in &mut cm.blocks {
        let mut lstm = Model::new(
            Dims::new(b.cell.input_width(), b.b_y.len(), b.cell.units()),
            ModelParams::Lstm(b.clone()),
        );
        let len = lstm.params.trainable_len();
        lstm.params.assign_trainable(&vals[pos..pos + len]);
        if let ModelParams::Lstm(p) = lstm.params {
            *b = p;
        }
        pos += len;
    }
    assert_eq!(pos, vals.len());
}

#[test]
fn composite_gradient_matches_finite_differences() {
    for trial in 0..20 {
        let cm = build_composite(2, 500 + trial);
        let mut rng = ChaCha12Rng::seed_from_u64(600 + trial);
        let t = 10;
        let u_seq = random_inputs(6, t, &mut rng);
        let tails = random_tails(cm.total_output_width(), t, &mut rng);

        let grads = composite_bptt(&cm, &cm.zero_state(), &u_seq, &tails).unwrap();
        let grad_flat: Vec<f64> = {
            let gm = CompositeModel {
                blocks: grads,
                wiring: cm.wiring.clone(),
                sigma: cm.sigma.clone(),
                n_u: cm.n_u,
            };
            composite_flat(&gm)
        };

        let theta = composite_flat(&cm);
        let mut worst = 0.0_f64;
        for i in 0..theta.len() {
            let mut probe = cm.clone();
            let mut th = theta.clone();
            th[i] = theta[i] + FD_STEP;
            composite_assign(&mut probe, &th);
            let ys_p = composite_simulate(&probe, &probe.zero_state(), &u_seq).unwrap();
            th[i] = theta[i] - FD_STEP;
            composite_assign(&mut probe, &th);
            let ys_m = composite_simulate(&probe, &probe.zero_state(), &u_seq).unwrap();
            let fd = (linear_loss(&ys_p, &tails) - linear_loss(&ys_m, &tails)) / (2.0 * FD_STEP);
            if grad_flat[i].abs().max(fd.abs()) < 1e-10 {
                continue;
            }
            worst = worst.max(rel_err(grad_flat[i], fd));
        }
        assert!(worst < REL_TOL, "composite trial {trial}: worst relative error {worst}");
    }
}

fn bb_flat(bb: &BlackBoxModel) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &bb.layers {
        let lstm_params = rnnsid_core::models::LstmParams {
            cell: l.clone(),
            u_y: ndarray::Array2::zeros((1, l.units())),
            b_y: Array1::zeros(1),
        };
        let m = Model::new(
            Dims::new(l.input_width(), 1, l.units()),
            ModelParams::Lstm(lstm_params),
        );
        let flat = m.params.flatten_trainable();
        // Drop the dummy head (u_y has units entries, b_y one).
        out.extend(&flat[..flat.len() - l.units() - 1]);
    }
    out.extend(bb.head_w.iter().copied());
    out.extend(bb.head_b.iter().copied());
    out
}

fn bb_assign(bb: &mut BlackBoxModel, vals: &[f64]) {
    let mut pos = 0;
    for l in &mut bb.layers {
        let units = l.units();
        let lstm_params = rnnsid_core::models::LstmParams {
            cell: l.clone(),
            u_y: ndarray::Array2::zeros((1, units)),
            b_y: Array1::zeros(1),
        };
        let mut m = Model::new(
            Dims::new(l.input_width(), 1, units),
            ModelParams::Lstm(lstm_params),
        );
        let cell_len = m.params.trainable_len() - units - 1;
        let mut padded = vals[pos..pos + cell_len].to_vec();
        padded.extend(std::iter::repeat(0.0).take(units + 1));
        m.params.assign_trainable(&padded);
        if let ModelParams::Lstm(p) = m.params {
            *l = p.cell;
        }
        pos += cell_len;
    }
    for x in bb.head_w.iter_mut() {
        *x = vals[pos];
        pos += 1;
    }
    for x in bb.head_b.iter_mut() {
        *x = vals[pos];
        pos += 1;
    }
    assert_eq!(pos, vals.len());
}

#[test]
fn blackbox_gradient_matches_finite_differences() {
    for trial in 0..10 {
        let bb = build_blackbox(3, 2, &[2, 2, 2], 700 + trial);
        let mut rng = ChaCha12Rng::seed_from_u64(800 + trial);
        let t = 10;
        let u_seq = random_inputs(3, t, &mut rng);
        let tails = random_tails(2, t, &mut rng);

        let grads = blackbox_bptt(&bb, &bb.zero_state(), &u_seq, &tails).unwrap();
        let grad_flat = bb_flat(&grads);

        let theta = bb_flat(&bb);
        let mut worst = 0.0_f64;
        for i in 0..theta.len() {
            let mut probe = bb.clone();
            let mut th = theta.clone();
            th[i] = theta[i] + FD_STEP;
            bb_assign(&mut probe, &th);
            let ys_p = blackbox_simulate(&probe, &probe.zero_state(), &u_seq).unwrap();
            th[i] = theta[i] - FD_STEP;
            bb_assign(&mut probe, &th);
            let ys_m = blackbox_simulate(&probe, &probe.zero_state(), &u_seq).unwrap();
            let fd = (linear_loss(&ys_p, &tails) - linear_loss(&ys_m, &tails)) / (2.0 * FD_STEP);
            if grad_flat[i].abs().max(fd.abs()) < 1e-10 {
                continue;
            }
            worst = worst.max(rel_err(grad_flat[i], fd));
        }
        assert!(worst < REL_TOL, "blackbox trial {trial}: worst relative error {worst}");
    }
}

// ---------------------------------------------------------------------------
// Certificate margin subgradients
// ---------------------------------------------------------------------------

#[test]
fn margin_gradients_match_finite_differences() {
    // Margins are piecewise smooth (norm argmax rows, singular pairs); at
    // generic random points the subgradient is the gradient. A looser
    // tolerance absorbs the power-iteration residual in the spectral terms.
    for (arch, seed) in [("gru", 1u64), ("lstm", 2), ("nnarx", 3)] {
        let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
        let dims = if arch == "nnarx" { Dims::nnarx(2, 2, 3, 3) } else { Dims::new(2, 2, 3) };
        let model = init_model(arch, dims, &mut rng).unwrap();
        check_margin_gradients(&model, arch);
    }
    // ESN: random readout so the margin depends on w_out1.
    let mut model = generate_reservoir(Dims::new(2, 2, 5), 0.4, 0.7, 11).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    if let ModelParams::Esn(p) = &mut model.params {
        p.w_out1.mapv_inplace(|_| rng.random_range(-0.5..=0.5));
    }
    check_margin_gradients(&model, "esn");
}

fn check_margin_gradients(model: &Model, arch: &str) {
    let h = 1e-6;
    let pairs = rnnsid_core::certificates::margin_gradients(model).unwrap();
    let theta = model.params.flatten_trainable();
    for (mi, (_, grad)) in pairs.iter().enumerate() {
        let gflat = grad.flatten_trainable();
        let mut worst = 0.0_f64;
        for i in 0..theta.len() {
            let mut th = theta.clone();
            let mut probe = model.clone();
            th[i] = theta[i] + h;
            probe.params.assign_trainable(&th);
            let up = margin_value(&probe, mi);
            th[i] = theta[i] - h;
            probe.params.assign_trainable(&th);
            let dn = margin_value(&probe, mi);
            let fd = (up - dn) / (2.0 * h);
            if gflat[i].abs().max(fd.abs()) < 1e-7 {
                continue;
            }
            worst = worst.max(rel_err(gflat[i], fd));
        }
        assert!(worst < 2e-3, "{arch} margin {mi}: worst relative error {worst}");
    }
}

fn margin_value(model: &Model, index: usize) -> f64 {
    rnnsid_core::certificates::certify(model).unwrap().margins[index].value
}

// ---------------------------------------------------------------------------
// Non-finite detection
// ---------------------------------------------------------------------------

#[test]
fn bptt_reports_first_overflow_step() {
    // A relu NNARX with huge output weights doubles its prediction every
    // step until the regression overflows.
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let mut model = init_model("nnarx", Dims::nnarx(1, 1, 2, 1), &mut rng).unwrap();
    if let ModelParams::Nnarx(p) = &mut model.params {
        p.activation = rnnsid_core::models::Activation::Relu;
        p.u0.fill(1e300);
        p.u1.fill(1e300);
        p.w1.fill(1e300);
        p.b1.fill(1.0);
    }
    let u_seq: Vec<Array1<f64>> = (0..5).map(|_| Array1::from(vec![1.0])).collect();
    let tails: Vec<Array1<f64>> = (0..5).map(|_| Array1::from(vec![1.0])).collect();
    let err = model.bptt_gradient(&StateVec::zeros(2), &u_seq, &tails).unwrap_err();
    match err {
        rnnsid_core::models::ModelError::NonFinite { step } => assert_eq!(step, 0),
        other => panic!("expected NonFinite, got {other}"),
    }
}
