//! Scenario-based probabilistic bounding of the output reachable set.
//!
//! Draw S independent (initial state, input sequence) samples, simulate K
//! steps, and scale a convex template until it covers every sampled output.
//! The scaling program is one-dimensional, so the optimum is the exact
//! max-gauge over all sampled outputs — no solver involved. With
//! S ≥ (2/ε)(ln(1/β) + 1) the scaled template bounds the output reachable
//! set up to violation probability ε at confidence 1 − β.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certificates;
use crate::models::{Model, ModelError, StateVec};
use crate::rng::{substream, Stream};
use crate::signal::{multilevel_signal, MultilevelChannel};

/// Convex template scaled around its center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Template {
    /// Axis-aligned box: gauge = max_j |y_j − c_j| / r_j.
    Box { center: Vec<f64>, radii: Vec<f64> },
    /// Axis-aligned ellipsoid: gauge = sqrt(Σ ((y_j − c_j)/r_j)²).
    Ellipsoid { center: Vec<f64>, radii: Vec<f64> },
}

impl Template {
    pub fn center(&self) -> &[f64] {
        match self {
            Template::Box { center, .. } | Template::Ellipsoid { center, .. } => center,
        }
    }

    pub fn radii(&self) -> &[f64] {
        match self {
            Template::Box { radii, .. } | Template::Ellipsoid { radii, .. } => radii,
        }
    }

    pub fn validate(&self) -> Result<(), VerificationError> {
        if self.center().len() != self.radii().len() {
            return Err(VerificationError::BadTemplate("center/radii length mismatch".into()));
        }
        if self.radii().iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(VerificationError::BadTemplate("radii must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Minkowski gauge of `y` with respect to the template: the smallest ρ ≥ 0
/// with y ∈ ρ·(template − center) + center.
pub fn gauge(template: &Template, y: &Array1<f64>) -> Result<f64, VerificationError> {
    template.validate()?;
    let c = template.center();
    let r = template.radii();
    if y.len() != c.len() {
        return Err(VerificationError::BadTemplate(format!(
            "output width {} vs template width {}",
            y.len(),
            c.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(VerificationError::NonFiniteOutput { step: 0, certified: true });
    }
    Ok(match template {
        Template::Box { .. } => (0..c.len())
            .map(|j| (y[j] - c[j]).abs() / r[j])
            .fold(0.0, f64::max),
        Template::Ellipsoid { .. } => (0..c.len())
            .map(|j| {
                let t = (y[j] - c[j]) / r[j];
                t * t
            })
            .sum::<f64>()
            .sqrt(),
    })
}

/// Distribution of the initial state: a componentwise box sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialStateBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// Input class for scenario sampling; both are unity-bounded by design so
/// certificates remain applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScenarioInputClass {
    /// Independent uniform draws in [-1, 1] per channel per step.
    Uniform,
    /// Multilevel excitation in normalized units.
    Multilevel { level_count: usize, min_hold: usize, max_hold: usize },
}

impl Default for ScenarioInputClass {
    fn default() -> Self {
        ScenarioInputClass::Uniform
    }
}

/// Scenario program configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Violation probability ε ∈ (0,1).
    pub epsilon: f64,
    /// Confidence complement β ∈ (0,1): guarantees hold with confidence 1−β.
    pub beta: f64,
    /// Simulation horizon K; outputs at k = 0..=K enter the program.
    pub horizon: usize,
    /// Initial-state box; when absent the architecture's admissible box is
    /// used (data-window box for NNARX, (−0.5, 0.5) hypercube for gated
    /// states).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_states: Option<InitialStateBox>,
    #[serde(default)]
    pub input_class: ScenarioInputClass,
    pub template: Template,
}

/// Outcome of the scenario reachable-set program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    /// Number of sampled scenarios (always ≥ the sample bound).
    pub samples: usize,
    /// Optimal template scaling: the max gauge over all sampled outputs.
    pub rho_star: f64,
    /// Per-sample max gauge values.
    pub per_sample_max: Vec<f64>,
    /// Index of the sample attaining `rho_star`.
    pub tight_sample: usize,
    pub epsilon: f64,
    pub beta: f64,
    pub horizon: usize,
    /// False when the model failed its stability certificate and the run
    /// was forced with `advisory`; the probabilistic claim then has no
    /// boundedness foundation.
    pub certified: bool,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum VerificationError {
    #[error("probability {name} = {value} must lie in (0, 1)")]
    BadProbability { name: &'static str, value: f64 },
    #[error("invalid template: {0}")]
    BadTemplate(String),
    #[error("model is not certified stable; pass advisory=true to sample anyway")]
    NotCertified,
    #[error("trajectory diverged to non-finite output at step {step} (certificate pass: {certified})")]
    NonFiniteOutput { step: usize, certified: bool },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Certificate(#[from] certificates::CertificateError),
}

/// Smallest integer S with S ≥ (2/ε)(ln(1/β) + 1).
pub fn required_samples(epsilon: f64, beta: f64) -> Result<usize, VerificationError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(VerificationError::BadProbability { name: "epsilon", value: epsilon });
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(VerificationError::BadProbability { name: "beta", value: beta });
    }
    let bound = (2.0 / epsilon) * ((1.0 / beta).ln() + 1.0);
    Ok(bound.ceil() as usize)
}

fn default_x0_box(model: &Model) -> InitialStateBox {
    let n = model.state_len();
    match model.architecture() {
        // NNARX states are stacked past data windows; normalized data live
        // in [-1, 1].
        "nnarx" => InitialStateBox { low: vec![-1.0; n], high: vec![1.0; n] },
        "esn" => {
            let (lo, hi) = model.admissible_state_box();
            InitialStateBox { low: lo.to_vec(), high: hi.to_vec() }
        }
        // Gated models default to the (−0.5, 0.5) hypercube.
        _ => InitialStateBox { low: vec![-0.5; n], high: vec![0.5; n] },
    }
}

/// Runs the scenario program: S = `required_samples` independent draws of
/// (initial state, input sequence), each simulated for K steps; ρ* is the
/// max gauge over samples and time instants k ∈ {0, …, K}.
pub fn scenario_reachable(
    model: &Model,
    cfg: &ScenarioConfig,
    seed: u64,
    advisory: bool,
) -> Result<ScenarioResult, VerificationError> {
    cfg.template.validate()?;
    if cfg.template.center().len() != model.dims.n_y {
        return Err(VerificationError::BadTemplate(format!(
            "template width {} vs model output width {}",
            cfg.template.center().len(),
            model.dims.n_y
        )));
    }
    let certified = certificates::certify(model)?.pass;
    if !certified && !advisory {
        return Err(VerificationError::NotCertified);
    }
    let samples = required_samples(cfg.epsilon, cfg.beta)?;
    let x0_box = cfg.initial_states.clone().unwrap_or_else(|| default_x0_box(model));
    if x0_box.low.len() != model.state_len() || x0_box.high.len() != model.state_len() {
        return Err(VerificationError::BadTemplate(format!(
            "initial-state box width {} vs state length {}",
            x0_box.low.len(),
            model.state_len()
        )));
    }
    let n_u = model.dims.n_u;

    let mut per_sample_max = Vec::with_capacity(samples);
    let mut rho_star = 0.0_f64;
    let mut tight_sample = 0usize;
    for i in 0..samples {
        let mut rng = substream(seed, Stream::Scenario, i as u64);
        // Unit draws mapped affinely into the box, so nested boxes under a
        // common seed yield coupled samples.
        let x0 = StateVec(Array1::from_shape_fn(x0_box.low.len(), |j| {
            let t: f64 = rng.random_range(0.0..=1.0);
            x0_box.low[j] + t * (x0_box.high[j] - x0_box.low[j])
        }));
        let u_seq = draw_inputs(&cfg.input_class, n_u, cfg.horizon, &mut rng);

        // Outputs at k = 0..K−1 from simulate, plus y_K from the final state.
        let mut max_gauge = gauge(&cfg.template, &model.output(&x0)?)
            .map_err(|e| attach_certification(e, certified))?;
        if cfg.horizon > 0 {
            let (ys, xs) = model.simulate(&x0, &u_seq)?;
            for (k, y) in ys.iter().enumerate().skip(1) {
                let g = gauge(&cfg.template, y).map_err(|e| attach_step(e, k, certified))?;
                max_gauge = max_gauge.max(g);
            }
            let y_final = model.output(xs.last().unwrap())?;
            let g = gauge(&cfg.template, &y_final)
                .map_err(|e| attach_step(e, cfg.horizon, certified))?;
            max_gauge = max_gauge.max(g);
        }
        if max_gauge >= rho_star {
            rho_star = max_gauge;
            tight_sample = i;
        }
        per_sample_max.push(max_gauge);
    }
    Ok(ScenarioResult {
        samples,
        rho_star,
        per_sample_max,
        tight_sample,
        epsilon: cfg.epsilon,
        beta: cfg.beta,
        horizon: cfg.horizon,
        certified,
        seed,
    })
}

fn attach_certification(e: VerificationError, certified: bool) -> VerificationError {
    attach_step(e, 0, certified)
}

fn attach_step(e: VerificationError, step: usize, certified: bool) -> VerificationError {
    match e {
        VerificationError::NonFiniteOutput { .. } => {
            VerificationError::NonFiniteOutput { step, certified }
        }
        other => other,
    }
}

fn draw_inputs<R: Rng>(
    class: &ScenarioInputClass,
    n_u: usize,
    horizon: usize,
    rng: &mut R,
) -> Vec<Array1<f64>> {
    match class {
        ScenarioInputClass::Uniform => (0..horizon)
            .map(|_| Array1::from_shape_fn(n_u, |_| rng.random_range(-1.0..=1.0)))
            .collect(),
        ScenarioInputClass::Multilevel { level_count, min_hold, max_hold } => {
            let ch = MultilevelChannel {
                level_count: *level_count,
                low: -1.0,
                high: 1.0,
                min_hold: *min_hold,
                max_hold: *max_hold,
            };
            let per_channel: Vec<Vec<f64>> =
                (0..n_u).map(|_| multilevel_signal(&ch, horizon, rng)).collect();
            (0..horizon)
                .map(|k| Array1::from_shape_fn(n_u, |j| per_channel[j][k]))
                .collect()
        }
    }
}

/// Safety verdict: is the scaled template contained in the safe output box?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub safe: bool,
    /// Smallest slack over the safe set's faces (negative when violated).
    pub margin: f64,
}

/// Axis-aligned safe output set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSet {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// Containment of ρ*·template (around its center) in the safe box; closed
/// containment, so touching a face is still safe with margin 0.
pub fn safety_verdict(
    result: &ScenarioResult,
    template: &Template,
    safe: &SafeSet,
) -> Result<SafetyVerdict, VerificationError> {
    template.validate()?;
    let c = template.center();
    let r = template.radii();
    if safe.low.len() != c.len() || safe.high.len() != c.len() {
        return Err(VerificationError::BadTemplate("safe-set width mismatch".into()));
    }
    // For both template shapes the axis extent of the scaled set is ρ*·r_j.
    let mut margin = f64::INFINITY;
    for j in 0..c.len() {
        let extent = result.rho_star * r[j];
        margin = margin.min(safe.high[j] - (c[j] + extent));
        margin = margin.min((c[j] - extent) - safe.low[j]);
    }
    Ok(SafetyVerdict { safe: margin >= 0.0, margin })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_bound_values() {
        // ceil(40·(ln(1e6)+1)) and its ε-halved double.
        assert_eq!(required_samples(0.05, 1e-6).unwrap(), 593);
        assert_eq!(required_samples(0.025, 1e-6).unwrap(), 1186);
        // Boundary-ish case: (2/0.5)(ln e + 1) = 8 exactly.
        assert_eq!(required_samples(0.5, 1.0 / std::f64::consts::E).unwrap(), 8);
        assert!(required_samples(0.0, 0.5).is_err());
        assert!(required_samples(0.5, 1.0).is_err());
    }

    #[test]
    fn gauge_box_and_homogeneity() {
        let t = Template::Box { center: vec![1.0, -1.0], radii: vec![1.0, 1.0] };
        let y = Array1::from(vec![1.5, -1.8]);
        let g = gauge(&t, &y).unwrap();
        assert!((g - 0.8).abs() < 1e-15);
        // Center maps to zero.
        assert_eq!(gauge(&t, &Array1::from(vec![1.0, -1.0])).unwrap(), 0.0);
        // Positive homogeneity: gauge(ρ(y−c)+c) = ρ·gauge(y).
        for rho in [0.0, 0.5, 2.0, 7.25] {
            let scaled = Array1::from(vec![1.0 + rho * 0.5, -1.0 + rho * (-0.8)]);
            let gs = gauge(&t, &scaled).unwrap();
            assert!((gs - rho * g).abs() < 1e-12, "rho {rho}");
        }
    }

    #[test]
    fn gauge_ellipsoid() {
        let t = Template::Ellipsoid { center: vec![0.0, 0.0], radii: vec![2.0, 1.0] };
        let y = Array1::from(vec![2.0, 0.0]);
        assert!((gauge(&t, &y).unwrap() - 1.0).abs() < 1e-15);
        let y = Array1::from(vec![2.0, 1.0]);
        assert!((gauge(&t, &y).unwrap() - 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_radius_rejected() {
        let t = Template::Box { center: vec![0.0], radii: vec![0.0] };
        assert!(gauge(&t, &Array1::from(vec![0.5])).is_err());
    }

    #[test]
    fn verdict_touching_face_is_safe() {
        let template = Template::Box { center: vec![0.0], radii: vec![1.0] };
        let result = ScenarioResult {
            samples: 1,
            rho_star: 2.0,
            per_sample_max: vec![2.0],
            tight_sample: 0,
            epsilon: 0.1,
            beta: 0.1,
            horizon: 1,
            certified: true,
            seed: 0,
        };
        let safe = SafeSet { low: vec![-2.0], high: vec![2.0] };
        let v = safety_verdict(&result, &template, &safe).unwrap();
        assert!(v.safe);
        assert_eq!(v.margin, 0.0);
    }
}
