//! Saliency-driven geometric constraints and uncalibrated visual servoing.
//!
//! - [`geometry`]: homogeneous points and lines, and the four alignment errors.
//! - [`saliency`]: PCA feature extraction from probability maps and pairing policies.
//! - [`controller`]: Jacobian probing, Broyden updates, damped least-squares steps, attempts.
//! - [`simulator`]: a deterministic eye-in-hand camera rig with synthetic masks and scenarios.
//! - [`task`]: multi-stage scenario execution under the three-attempt protocol.
//! - [`trace`]: line-delimited episode traces and run summaries.
//! - [`fusionmath`]: masked token attention and the focal + DICE training objective.
//! - [`metrics`]: IoU, cumulative IoU, MAE and max F-measure.

pub mod controller;
pub mod fusionmath;
pub mod geometry;
pub mod metrics;
pub mod saliency;
pub mod simulator;
pub mod task;
pub mod trace;

pub use controller::{ControllerConfig, EpisodeStatus, JacobianEstimate};
pub use geometry::{Constraint, ConstraintKind, ErrorVector, HomoLine, HomoPoint};
pub use saliency::{ExtractedFeatures, PairingPolicy, SaliencyMap};
