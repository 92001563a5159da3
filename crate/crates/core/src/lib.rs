//! System identification with stability-certified recurrent networks.
//!
//! The crate covers the full identification workflow:
//!
//! * [`models`] — four recurrent architectures (NNARX, ESN, LSTM, GRU) as
//!   explicit state-space maps with hand-derived BPTT gradients.
//! * [`certificates`] — weight-norm conditions whose strict negativity
//!   certifies input-to-state stability (ISS) and its incremental variant
//!   (δISS), plus empirical stability probes.
//! * [`training`] — truncated-BPTT training with washout-aware MSE, a hinge
//!   penalty on certificate margins, and ridge least squares for ESN.
//! * [`plant`] — a two-reactor + separator benchmark simulator used as the
//!   ground-truth data source.
//! * [`physics`] — the physics-structured composite of three wired LSTM
//!   blocks and its matched black-box baseline.
//! * [`verification`] — scenario-based probabilistic bounding of the output
//!   reachable set.
//! * [`io`] — model/report/dataset file formats shared with the CLI.

pub mod certificates;
pub mod data;
pub mod io;
pub mod linalg;
pub mod models;
pub mod physics;
pub mod plant;
pub mod predict;
pub mod rng;
pub mod signal;
pub mod training;
pub mod verification;

pub use certificates::{certify, CertificateReport, EmpiricalStabilityProbe};
pub use data::{Dataset, DatasetSplit, Sequence};
pub use models::{Dims, Model, ModelError, ModelParams, StateVec};
pub use physics::{BlackBoxModel, CompositeModel};
pub use plant::{Normalizer, PlantConfig, PlantInput, PlantState};
pub use predict::AnyModel;
pub use training::{TrainConfig, TrainTrace};
pub use verification::{ScenarioConfig, ScenarioResult};
