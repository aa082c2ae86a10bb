//! Identification of noise parameters for an ensemble of atomic clocks that
//! is observed only through phase differences against a pivot clock.
//!
//! Each clock is a two-state (phase, frequency) linear stochastic model driven
//! by white frequency noise (`q1`), random-walk frequency noise (`q2`) and a
//! constant frequency drift (`d`). The measurements `z_k` are the phase of
//! every non-pivot clock minus the pivot phase, corrupted by white phase
//! noise with covariance `R`.
//!
//! Two estimators recover the full parameter vector from a measurement record:
//!
//! * [`ident_acov`]: fits analytic Allan (co)variances to empirical ones by
//!   weighted least squares, then factors the drift products.
//! * [`ident_mdm`]: annihilates the state from stacked measurement windows
//!   and solves linear moment equations for drifts and covariances.
//!
//! [`simulate`] produces synthetic records and [`montecarlo`] aggregates
//! repeated runs of both estimators.

pub mod error;
pub mod ident_acov;
pub mod ident_mdm;
pub mod io;
pub mod model;
pub mod montecarlo;
pub mod numerics;
pub mod report;
pub mod simulate;
pub mod stability;

pub use error::{Error, Result};
pub use ident_acov::{estimate_acov_method, AcovOptions};
pub use ident_mdm::{estimate_mdm, MdmConfig};
pub use model::{ClockParams, EnsembleModel, EnsembleParams, ThetaVector};
pub use report::{EstimateReport, Method};
pub use simulate::{MeasurementRecord, Origin};
pub use stability::{AcovEstimate, TauGrid};
