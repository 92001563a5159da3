//! Training: washout-aware MSE, a hinge penalty on certificate margins,
//! minibatch gradient descent with validation-based stopping, and the ESN's
//! ridge least-squares path.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certificates::{self, CertificateError};
use crate::data::{Dataset, Sequence};
use crate::linalg::{solve_spd, SolveError};
use crate::models::{Model, ModelError, ModelParams, StateVec};
use crate::rng::{substream, Stream};

/// Gradient-based optimizer choice and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    RmsProp { lr: f64, decay: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn rmsprop(lr: f64) -> Self {
        Optimizer::RmsProp { lr, decay: 0.9, eps: 1e-8 }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Optimizer::Adam { lr, .. } | Optimizer::RmsProp { lr, .. } => *lr,
        }
    }
}

/// Optimizer state over the flat trainable-coordinate vector.
pub(crate) struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptState {
    pub(crate) fn new(n: usize) -> Self {
        OptState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub(crate) fn update(&mut self, opt: &Optimizer, params: &mut [f64], grad: &[f64]) {
        match *opt {
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            Optimizer::RmsProp { lr, decay, eps } => {
                for i in 0..params.len() {
                    self.v[i] = decay * self.v[i] + (1.0 - decay) * grad[i] * grad[i];
                    params[i] -= lr * grad[i] / (self.v[i].sqrt() + eps);
                }
            }
        }
    }
}

/// Hinge-penalty schedule on the certificate margins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySchedule {
    /// Margins are pushed below -slack, not just below zero.
    pub slack: f64,
    pub weight: f64,
    /// Multiplier applied every `ramp_every` epochs while still violated.
    pub ramp: f64,
    pub ramp_every: usize,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        PenaltySchedule { slack: 0.02, weight: 1.0, ramp: 1.5, ramp_every: 50 }
    }
}

/// Initial-state policy for loss evaluation during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum X0Policy {
    /// Zero state; the washout absorbs it.
    #[default]
    Zero,
    /// Uniform draw in the admissible state box, seeded per (epoch, id).
    Random,
}

/// Stability property to enforce during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetProperty {
    #[default]
    None,
    Iss,
    DeltaIss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub penalty: PenaltySchedule,
    /// Stop once validation MSE has not improved for this many epochs.
    pub patience: usize,
    pub seed: u64,
    pub x0_policy: X0Policy,
    /// Ridge parameter of the ESN least-squares path.
    pub ridge_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::adam(5e-3),
            epochs: 200,
            batch_size: 16,
            penalty: PenaltySchedule::default(),
            patience: 50,
            seed: 0,
            x0_policy: X0Policy::Zero,
            ridge_lambda: 1e-6,
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub margins: Vec<f64>,
    /// Wall-clock seconds for the epoch. Not part of the CSV trace, so
    /// artifacts stay byte-stable across reruns.
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

/// Result of a training run; `certified` is false when a target property
/// was requested but no epoch produced passing margins — `model` then holds
/// the best uncertified snapshot.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: TrainTrace,
    pub certified: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training subset is empty")]
    EmptySubset,
    #[error("washout {t_w} must be smaller than the subsequence length {t_s}")]
    WashoutTooLong { t_w: usize, t_s: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("model/dataset dimension mismatch: {0}")]
    DataMismatch(String),
}

fn check_dims(model: &Model, seqs: &[&Sequence]) -> Result<(), TrainError> {
    for s in seqs {
        if s.n_u() != model.dims.n_u || s.n_y() != model.dims.n_y {
            return Err(TrainError::DataMismatch(format!(
                "sequence {} is {}x{} channels, model wants {}x{}",
                s.id,
                s.n_u(),
                s.n_y(),
                model.dims.n_u,
                model.dims.n_y
            )));
        }
    }
    Ok(())
}

fn initial_state(model: &Model, policy: X0Policy, seed: u64, epoch: usize, id: usize) -> StateVec {
    match policy {
        X0Policy::Zero => model.zero_state(),
        X0Policy::Random => {
            let (lo, hi) = model.admissible_state_box();
            let mut rng = substream(seed, Stream::Init, ((epoch as u64) << 32) | id as u64);
            StateVec(Array1::from_shape_fn(lo.len(), |i| rng.random_range(lo[i]..=hi[i])))
        }
    }
}

/// Washout-aware mean square error over a subset of sequences:
/// `1/(|I|(T_s−T_w)) Σ_i Σ_{k=T_w}^{T_s−1} ‖y_k − y_m,k‖²`.
pub fn mse(
    model: &Model,
    sequences: &[&Sequence],
    t_w: usize,
    x0_policy: X0Policy,
    seed: u64,
) -> Result<f64, TrainError> {
    if sequences.is_empty() {
        return Err(TrainError::EmptySubset);
    }
    check_dims(model, sequences)?;
    let t_s = sequences[0].len();
    if t_w >= t_s {
        return Err(TrainError::WashoutTooLong { t_w, t_s });
    }
    let mut total = 0.0;
    for seq in sequences {
        let x0 = initial_state(model, x0_policy, seed, 0, seq.id);
        let (ys, _) = model.simulate(&x0, &seq.u_rows())?;
        for k in t_w..seq.len() {
            let diff = &ys[k] - &seq.y.row(k);
            total += diff.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(total / (sequences.len() as f64 * (t_s - t_w) as f64))
}

/// Piecewise-linear hinge on the margins: Σ_j w_j · max(ν_j + slack, 0).
pub fn penalty_rho(nu_margins: &[f64], weights: &[f64], slack: f64) -> f64 {
    nu_margins
        .iter()
        .zip(weights)
        .map(|(nu, w)| w * (nu + slack).max(0.0))
        .sum()
}

/// Margin indices penalized (and required to pass) for a target property.
fn targeted_margins(model: &Model, target: TargetProperty) -> Vec<usize> {
    use crate::models::ModelParams as P;
    match (target, &model.params) {
        (TargetProperty::None, _) => vec![],
        // NNARX and ESN have a single condition covering both properties.
        (_, P::Nnarx(_)) | (_, P::Esn(_)) => vec![0],
        (TargetProperty::Iss, P::Lstm(_)) => vec![0],
        // Enforcing δISS keeps the ISS condition in the set so a certified
        // snapshot passes the full report.
        (TargetProperty::DeltaIss, P::Lstm(_)) => vec![0, 1, 2],
        (TargetProperty::Iss, P::Gru(_)) => vec![0],
        (TargetProperty::DeltaIss, P::Gru(_)) => vec![0, 1],
    }
}

fn margins_of(model: &Model) -> Result<Vec<f64>, TrainError> {
    Ok(certificates::certify(model)?.margins.iter().map(|m| m.value).collect())
}

fn targeted_pass(margins: &[f64], targeted: &[usize]) -> bool {
    targeted.iter().all(|&j| margins[j] < -certificates::MARGIN_TOLERANCE)
}

/// Per-minibatch loss gradient over the flat trainable coordinates:
/// the sum of `bptt_gradient` over the (id-sorted) members with the MSE
/// normalization folded into the loss tails.
fn minibatch_gradient(
    model: &Model,
    batch: &[&Sequence],
    t_w: usize,
    x0_policy: X0Policy,
    seed: u64,
    epoch: usize,
) -> Result<Vec<f64>, TrainError> {
    let t_s = batch[0].len();
    let scale = 2.0 / (batch.len() as f64 * (t_s - t_w) as f64);
    let mut grad: Option<Vec<f64>> = None;
    for seq in batch {
        let x0 = initial_state(model, x0_policy, seed, epoch, seq.id);
        let u_rows = seq.u_rows();
        let (ys, _) = model.simulate(&x0, &u_rows)?;
        let tails: Vec<Array1<f64>> = (0..t_s)
            .map(|k| {
                if k < t_w {
                    Array1::zeros(model.dims.n_y)
                } else {
                    (&ys[k] - &seq.y.row(k)) * scale
                }
            })
            .collect();
        let g = model.bptt_gradient(&x0, &u_rows, &tails)?;
        let flat = g.flatten_trainable();
        match &mut grad {
            None => grad = Some(flat),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(flat.iter()) {
                    *a += b;
                }
            }
        }
    }
    Ok(grad.expect("nonempty batch"))
}

/// Full training loop: shuffled minibatches, optional stability penalty,
/// validation-based stopping, best-(certified-)snapshot selection.
pub fn train(
    model0: &Model,
    dataset: &Dataset,
    config: &TrainConfig,
    target: TargetProperty,
) -> Result<TrainOutcome, TrainError> {
    model0.validate()?;
    let split = &dataset.split;
    let train_seqs = dataset.subset(&split.training);
    if train_seqs.is_empty() {
        return Err(TrainError::EmptySubset);
    }
    check_dims(model0, &train_seqs)?;
    let t_s = train_seqs[0].len();
    let t_w = split.t_w;
    if t_w >= t_s {
        return Err(TrainError::WashoutTooLong { t_w, t_s });
    }
    let val_seqs = dataset.subset(&split.validation);
    let targeted = targeted_margins(model0, target);

    if config.epochs == 0 {
        let certified = if targeted.is_empty() {
            true
        } else {
            targeted_pass(&margins_of(model0)?, &targeted)
        };
        return Ok(TrainOutcome { model: model0.clone(), trace: TrainTrace::default(), certified });
    }

    let mut model = model0.clone();
    let mut flat = model.params.flatten_trainable();
    let mut opt_state = OptState::new(flat.len());
    let mut penalty_weight = config.penalty.weight;
    let mut trace = TrainTrace::default();

    let mut best_val = f64::INFINITY;
    let mut best_certified: Option<Model> = None;
    let mut best_cert_val = f64::INFINITY;
    let mut best_any: Option<Model> = None;
    let mut best_any_val = f64::INFINITY;
    let mut epochs_since_improve = 0usize;

    for epoch in 0..config.epochs {
        let started = std::time::Instant::now();
        // Seeded shuffle of the training ids.
        let mut ids = split.training.clone();
        let mut rng = substream(config.seed, Stream::Minibatch, epoch as u64);
        for i in (1..ids.len()).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        for chunk in ids.chunks(config.batch_size.max(1)) {
            let mut batch_ids = chunk.to_vec();
            // Accumulation order is fixed by id so results are independent
            // of any execution interleaving.
            batch_ids.sort_unstable();
            let batch: Vec<&Sequence> = batch_ids.iter().map(|&id| dataset.by_id(id)).collect();
            let mut grad =
                minibatch_gradient(&model, &batch, t_w, config.x0_policy, config.seed, epoch)?;
            if !targeted.is_empty() {
                for (j, (margin, margin_grad)) in
                    certificates::margin_gradients(&model)?.into_iter().enumerate()
                {
                    if targeted.contains(&j) && margin + config.penalty.slack > 0.0 {
                        for (a, b) in grad.iter_mut().zip(margin_grad.flatten_trainable()) {
                            *a += penalty_weight * b;
                        }
                    }
                }
            }
            opt_state.update(&config.optimizer, &mut flat, &grad);
            model.params.assign_trainable(&flat);
        }

        let train_mse = mse(&model, &train_seqs, t_w, config.x0_policy, config.seed)?;
        let val_mse = if val_seqs.is_empty() {
            train_mse
        } else {
            mse(&model, &val_seqs, t_w, config.x0_policy, config.seed)?
        };
        let margins = margins_of(&model)?;
        let cert_ok = targeted.is_empty() || targeted_pass(&margins, &targeted);

        trace.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            margins: margins.clone(),
            wall_clock_s: started.elapsed().as_secs_f64(),
        });

        if val_mse < best_any_val {
            best_any_val = val_mse;
            best_any = Some(model.clone());
        }
        if val_mse < best_val {
            best_val = val_mse;
            epochs_since_improve = 0;
        } else {
            epochs_since_improve += 1;
        }
        // Among certified epochs keep the best-validation snapshot.
        if cert_ok && val_mse < best_cert_val {
            best_cert_val = val_mse;
            best_certified = Some(model.clone());
        }

        // Geometric penalty ramp while the targeted margins stay violated.
        if !targeted.is_empty()
            && !cert_ok
            && config.penalty.ramp_every > 0
            && (epoch + 1) % config.penalty.ramp_every == 0
        {
            penalty_weight *= config.penalty.ramp;
        }

        if epochs_since_improve >= config.patience && cert_ok {
            break;
        }
    }

    match best_certified {
        Some(m) => Ok(TrainOutcome { model: m, trace, certified: true }),
        None => Ok(TrainOutcome {
            model: best_any.unwrap_or(model),
            trace,
            certified: targeted.is_empty(),
        }),
    }
}

// ---------------------------------------------------------------------------
// ESN least squares
// ---------------------------------------------------------------------------

/// Trains the ESN readout by ridge least squares on teacher-forced
/// reservoir trajectories (the feedback term consumes the measured output).
///
/// With λ = 0 a rank-deficient regressor matrix is an error suggesting
/// λ > 0; for λ > 0 the returned weights satisfy the ridge normal equations.
pub fn train_esn(model: &Model, dataset: &Dataset, lambda: f64) -> Result<Model, TrainError> {
    let p = match &model.params {
        ModelParams::Esn(p) => p,
        _ => {
            return Err(TrainError::DataMismatch(format!(
                "train_esn expects an ESN, got {}",
                model.architecture()
            )))
        }
    };
    let train_seqs = dataset.subset(&dataset.split.training);
    if train_seqs.is_empty() {
        return Err(TrainError::EmptySubset);
    }
    check_dims(model, &train_seqs)?;
    let t_w = dataset.split.t_w;
    let n_x = model.dims.n_x;
    let n_u = model.dims.n_u;
    let n_y = model.dims.n_y;

    // Collect post-washout regressor rows [r_k | u_{k-1}] and targets y_m,k.
    let mut rows: Vec<Array1<f64>> = Vec::new();
    let mut targets: Vec<Array1<f64>> = Vec::new();
    for seq in &train_seqs {
        let t_s = seq.len();
        if t_w >= t_s {
            return Err(TrainError::WashoutTooLong { t_w, t_s });
        }
        let mut r = Array1::<f64>::zeros(n_x);
        let mut up = Array1::<f64>::zeros(n_u);
        for k in 0..t_s {
            let u = seq.u_at(k);
            let ym = seq.y.row(k).to_owned();
            if k >= t_w {
                let mut row = Array1::zeros(n_x + n_u);
                row.slice_mut(ndarray::s![..n_x]).assign(&r);
                row.slice_mut(ndarray::s![n_x..]).assign(&up);
                rows.push(row);
                targets.push(ym.clone());
            }
            r = crate::models::esn_forced_update(p, &r, &u, &ym);
            up = u;
        }
    }
    let m = rows.len();
    let d = n_x + n_u;
    let mut reg = Array2::zeros((m, d));
    let mut tgt = Array2::zeros((m, n_y));
    for (i, row) in rows.iter().enumerate() {
        reg.row_mut(i).assign(row);
        tgt.row_mut(i).assign(&targets[i]);
    }

    // Normal equations (RᵀR + λI)Θ = RᵀY, Θ columns are output channels.
    let mut gram = reg.t().dot(&reg);
    for i in 0..d {
        gram[[i, i]] += lambda;
    }
    let rhs = reg.t().dot(&tgt);
    let theta = solve_spd(&gram, &rhs)?;

    let mut trained = model.clone();
    if let ModelParams::Esn(tp) = &mut trained.params {
        for c in 0..n_y {
            for j in 0..n_x {
                tp.w_out1[[c, j]] = theta[[j, c]];
            }
            for j in 0..n_u {
                tp.w_out2[[c, j]] = theta[[n_x + j, c]];
            }
        }
    }
    Ok(trained)
}

/// ESN training under a stability target: the ridge parameter escalates
/// geometrically until the certificate passes (λ → ∞ sends the readout to
/// zero, where the margin is ‖w_x‖₂ − 1 < 0, so this terminates).
pub fn train_esn_certified(
    model: &Model,
    dataset: &Dataset,
    lambda0: f64,
) -> Result<TrainOutcome, TrainError> {
    let mut lambda = lambda0.max(1e-12);
    for _ in 0..64 {
        let trained = train_esn(model, dataset, lambda)?;
        let report = certificates::certify(&trained)?;
        if report.pass {
            return Ok(TrainOutcome { model: trained, trace: TrainTrace::default(), certified: true });
        }
        lambda *= 10.0;
    }
    let fallback = train_esn(model, dataset, lambda)?;
    Ok(TrainOutcome { model: fallback, trace: TrainTrace::default(), certified: false })
}

// ---------------------------------------------------------------------------
// FIT metric
// ---------------------------------------------------------------------------

/// Per-channel and overall FIT [%].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub per_channel: Vec<f64>,
    pub overall: f64,
    /// Number of per-term denominators floored at 1e-9 (measured output
    /// equal to its mean at some step).
    pub floored_terms: usize,
}

/// FIT over a test subset given a prediction function returning the model's
/// trajectory for a sequence (same space as `targets`, typically physical
/// units).
///
/// Per channel: `100·(1 − 1/(|I|(T_s−T_w)) Σ_{i,k} |y − y_m| / |y_m − y_avg|)`,
/// with `y_avg` the channel mean over the subset and per-term denominators
/// floored at 1e-9.
pub fn fit_metric_with<F>(
    mut predict: F,
    targets: &[Array2<f64>],
    t_w: usize,
) -> Result<FitReport, TrainError>
where
    F: FnMut(usize) -> Result<Array2<f64>, TrainError>,
{
    if targets.is_empty() {
        return Err(TrainError::EmptySubset);
    }
    let n_y = targets[0].ncols();
    let t_s = targets[0].nrows();
    if t_w >= t_s {
        return Err(TrainError::WashoutTooLong { t_w, t_s });
    }

    // Channel means over the counted steps of the subset.
    let mut y_avg = vec![0.0; n_y];
    let mut count = 0usize;
    for y in targets {
        for k in t_w..y.nrows() {
            for j in 0..n_y {
                y_avg[j] += y[[k, j]];
            }
            count += 1;
        }
    }
    for v in &mut y_avg {
        *v /= count as f64;
    }

    let mut sums = vec![0.0; n_y];
    let mut floored = 0usize;
    for (i, y_m) in targets.iter().enumerate() {
        let y = predict(i)?;
        if y.dim() != y_m.dim() {
            return Err(TrainError::DataMismatch(format!(
                "prediction shape {:?} vs target {:?}",
                y.dim(),
                y_m.dim()
            )));
        }
        for k in t_w..y_m.nrows() {
            for j in 0..n_y {
                let num = (y[[k, j]] - y_m[[k, j]]).abs();
                let mut den = (y_m[[k, j]] - y_avg[j]).abs();
                if den < 1e-9 {
                    den = 1e-9;
                    floored += 1;
                }
                sums[j] += num / den;
            }
        }
    }
    let norm = (targets.len() * (t_s - t_w)) as f64;
    let per_channel: Vec<f64> = sums.iter().map(|s| 100.0 * (1.0 - s / norm)).collect();
    let overall = per_channel.iter().sum::<f64>() / n_y as f64;
    Ok(FitReport { per_channel, overall, floored_terms: floored })
}

/// FIT of a core model on a dataset subset, evaluated in physical units
/// (open-loop prediction from zero state with washout).
pub fn fit_metric(model: &Model, dataset: &Dataset, ids: &[usize]) -> Result<FitReport, TrainError> {
    crate::predict::AnyModel::Core(model.clone()).fit(dataset, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_hinge_arithmetic() {
        assert_eq!(penalty_rho(&[-0.5, -0.1], &[1.0, 1.0], 0.02), 0.0);
        let v = penalty_rho(&[0.3], &[1.0], 0.05);
        assert!((v - 0.35).abs() < 1e-15);
        assert_eq!(penalty_rho(&[0.3, -1.0], &[2.0, 5.0], 0.05), 0.7);
    }

    #[test]
    fn fit_perfect_and_mean_predictor() {
        let targets: Vec<Array2<f64>> = (0..3)
            .map(|i| Array2::from_shape_fn((20, 2), |(k, j)| (i + k + j) as f64 * 0.1))
            .collect();
        // Perfect predictor scores exactly 100 per channel.
        let fit = fit_metric_with(|i| Ok(targets[i].clone()), &targets, 4).unwrap();
        for f in &fit.per_channel {
            assert_eq!(*f, 100.0);
        }
        assert_eq!(fit.overall, 100.0);

        // A mean predictor scores (about) zero.
        let mut y_avg = vec![0.0; 2];
        let mut n = 0;
        for t in &targets {
            for k in 4..t.nrows() {
                y_avg[0] += t[[k, 0]];
                y_avg[1] += t[[k, 1]];
                n += 1;
            }
        }
        y_avg[0] /= n as f64;
        y_avg[1] /= n as f64;
        let fit = fit_metric_with(
            |_| Ok(Array2::from_shape_fn((20, 2), |(_, j)| y_avg[j])),
            &targets,
            4,
        )
        .unwrap();
        assert!(fit.overall.abs() < 0.5, "overall {}", fit.overall);
    }
}
