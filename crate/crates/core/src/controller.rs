//! Uncalibrated image-based visual servoing.
//!
//! The visuomotor Jacobian is never derived from a camera or robot model.
//! It is seeded with central-difference probes around the starting
//! configuration and then corrected after every move with Broyden's
//! rank-one secant update, using the error change that was actually
//! measured. Motions come from a damped least-squares step on the current
//! estimate.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{stack_errors, AnnotationError, Constraint, ConstraintKind, ErrorVector, GeometryError, HomoPoint};
use crate::saliency::{bind_constraint, extract_features, ExtractedFeatures, PairingPolicy, PcaConfig, SaliencyError, SaliencyMap};

/// Error raised by a session implementation (simulator, replay, remote rig).
pub type SessionFault = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("probe at {q:?} failed: {reason}")]
    ProbeFailed { q: Vec<f64>, reason: String },
    #[error("damped normal equations are not solvable (non-finite Jacobian or error)")]
    SingularSystem,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("session error: {0}")]
    Session(SessionFault),
}

/// Controller tuning. Every default is an engineering choice exposed for override.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub gain: f64,
    pub damping: f64,
    /// Per-DOF clamp on a single step (meters or radians).
    pub max_step: f64,
    /// Finite-difference probe size for Jacobian initialization.
    pub fd_delta: f64,
    /// Broyden updates with a smaller `‖Δq‖` are skipped.
    pub min_dq_norm: f64,
    /// Convergence threshold on the pixel-valued part of the error (pixels).
    pub converge_eps: f64,
    /// Convergence threshold on each parallel-line error (sine of the angle).
    pub converge_eps_par: f64,
    pub max_iters: usize,
    pub max_attempts: usize,
    /// Divergence: error norm above `divergence_factor ×` initial ...
    pub divergence_factor: f64,
    /// ... for this many consecutive steps.
    pub divergence_patience: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            gain: 0.1,
            damping: 1e-3,
            max_step: 0.02,
            fd_delta: 0.005,
            min_dq_norm: 1e-6,
            converge_eps: 2.0,
            converge_eps_par: 0.01,
            max_iters: 200,
            max_attempts: 3,
            divergence_factor: 4.0,
            divergence_patience: 10,
        }
    }
}

/// `E × N` estimate of the visuomotor Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianEstimate(pub DMatrix<f64>);

impl JacobianEstimate {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Ratio of extreme singular values; infinite when rank deficient.
    pub fn condition_estimate(&self) -> f64 {
        if self.0.is_empty() || !self.is_finite() {
            return f64::INFINITY;
        }
        let sv = self.0.clone().svd(false, false).singular_values;
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > 0.0 { max / min } else { f64::INFINITY }
    }

    pub fn apply(&self, dq: &[f64]) -> Vec<f64> {
        (&self.0 * DVector::from_column_slice(dq)).as_slice().to_vec()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// Central-difference Jacobian: column `j` is `(e(q0 + δu_j) − e(q0 − δu_j)) / 2δ`.
///
/// The probe is called with absolute configurations; callers that move real
/// hardware must return the rig to `q0` afterwards.
pub fn init_jacobian<F>(mut probe: F, q0: &[f64], cfg: &ControllerConfig) -> Result<JacobianEstimate, ControlError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, SessionFault>,
{
    let delta = cfg.fd_delta;
    let mut q = q0.to_vec();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(q0.len());
    let mut rows = None;
    for j in 0..q0.len() {
        let mut eval = |q: &[f64]| {
            probe(q).map_err(|e| ControlError::ProbeFailed { q: q.to_vec(), reason: e.to_string() })
        };
        q[j] = q0[j] + delta;
        let plus = eval(&q)?;
        q[j] = q0[j] - delta;
        let minus = eval(&q)?;
        q[j] = q0[j];
        if plus.len() != minus.len() || rows.is_some_and(|r| r != plus.len()) {
            return Err(ControlError::Dimension("probe returned inconsistent error lengths".into()));
        }
        rows = Some(plus.len());
        columns.push(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * delta)).collect());
    }
    let rows = rows.unwrap_or(0);
    let mut m = DMatrix::zeros(rows, q0.len());
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(JacobianEstimate(m))
}

/// Broyden's rank-one update `J + (Δe − JΔq) Δqᵀ / (Δqᵀ Δq)`.
///
/// Returns `J` unchanged when `‖Δq‖ < cfg.min_dq_norm`.
pub fn broyden_update(j: &JacobianEstimate, dq: &[f64], de: &[f64], cfg: &ControllerConfig) -> JacobianEstimate {
    let dq = DVector::from_column_slice(dq);
    let de = DVector::from_column_slice(de);
    let norm_sq = dq.norm_squared();
    if norm_sq.sqrt() < cfg.min_dq_norm || norm_sq == 0.0 {
        debug!("broyden update skipped, |dq| = {:e}", norm_sq.sqrt());
        return j.clone();
    }
    let residual = de - &j.0 * &dq;
    JacobianEstimate(&j.0 + residual * dq.transpose() / norm_sq)
}

/// Damped least-squares step `−λ (JᵀJ + μI)⁻¹ Jᵀ e`, clamped per DOF.
pub fn control_step(j: &JacobianEstimate, e: &ErrorVector, cfg: &ControllerConfig) -> Result<Vec<f64>, ControlError> {
    let raw = damped_step(j, e.as_slice(), cfg.gain, cfg.damping)?;
    Ok(raw.into_iter().map(|v| v.clamp(-cfg.max_step, cfg.max_step)).collect())
}

/// The unclamped damped least-squares step.
pub fn damped_step(j: &JacobianEstimate, e: &[f64], gain: f64, damping: f64) -> Result<Vec<f64>, ControlError> {
    if j.rows() != e.len() {
        return Err(ControlError::Dimension(format!("jacobian has {} rows, error has {}", j.rows(), e.len())));
    }
    if !j.is_finite() || e.iter().any(|v| !v.is_finite()) {
        return Err(ControlError::SingularSystem);
    }
    let jt = j.0.transpose();
    let normal = &jt * &j.0 + DMatrix::identity(j.cols(), j.cols()) * damping;
    let rhs = &jt * DVector::from_column_slice(e);
    let sol = match normal.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => normal.lu().solve(&rhs).ok_or(ControlError::SingularSystem)?,
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(ControlError::SingularSystem);
    }
    Ok(sol.iter().map(|v| -gain * v).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Converged,
    Diverged,
    IterBudget,
    FeatureLost,
    /// The image-space errors converged but the world-frame goal check failed.
    GoalMissed,
}

impl EpisodeStatus {
    pub fn is_success(self) -> bool {
        self == EpisodeStatus::Converged
    }
}

/// Success percentage under the three-attempt protocol: first-attempt success
/// scores 100, second-attempt success 50, anything else 0.
pub fn score_task(attempts: &[EpisodeStatus]) -> f64 {
    match attempts.iter().position(|s| s.is_success()) {
        Some(0) => 100.0,
        Some(1) => 50.0,
        _ => 0.0,
    }
}

/// True once further attempts cannot change the score.
pub fn score_settled(attempts: &[EpisodeStatus]) -> bool {
    attempts.iter().any(|s| s.is_success()) || attempts.len() >= 2
}

/// Where a constraint's image features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum FeatureBinding {
    /// Mask-derived features paired through the stage's pairing policy.
    Salient,
    /// User-placed points, in the click order of [`Constraint::from_points`].
    Annotated { points: Vec<AnnotatedPoint> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatedPoint {
    /// Fixed in the image (gripper-side features).
    Fixed(HomoPoint),
    /// Followed by the session's point tracker.
    Tracked(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    #[serde(default = "salient")]
    pub binding: FeatureBinding,
}

fn salient() -> FeatureBinding {
    FeatureBinding::Salient
}

impl ConstraintSpec {
    pub fn salient(kind: ConstraintKind) -> Self {
        Self { kind, binding: FeatureBinding::Salient }
    }

    pub fn annotated(kind: ConstraintKind, points: Vec<AnnotatedPoint>) -> Self {
        Self { kind, binding: FeatureBinding::Annotated { points } }
    }
}

/// What a servo loop needs from the world: a movable configuration and observations.
pub trait ServoSession {
    fn dof(&self) -> usize;
    fn q(&self) -> Vec<f64>;
    /// Moves to an absolute configuration, clamping at limits. Returns whether clamping occurred.
    fn move_to(&mut self, q: &[f64]) -> Result<bool, SessionFault>;
    /// Saliency map for a prompt at the current configuration; `None` when nothing is visible.
    fn mask(&mut self, prompt: &str) -> Result<Option<SaliencyMap>, SessionFault>;
    /// Current image position of a tracked point; `None` when it left the view.
    fn tracked_point(&mut self, anchor: usize) -> Result<Option<HomoPoint>, SessionFault>;
}

#[derive(Debug, Error)]
pub enum FeatureFault {
    #[error("feature lost: {0}")]
    Lost(String),
    #[error("session error: {0}")]
    Session(SessionFault),
}

impl From<SaliencyError> for FeatureFault {
    fn from(e: SaliencyError) -> Self {
        FeatureFault::Lost(e.to_string())
    }
}

impl From<GeometryError> for FeatureFault {
    fn from(e: GeometryError) -> Self {
        FeatureFault::Lost(e.to_string())
    }
}

impl From<AnnotationError> for FeatureFault {
    fn from(e: AnnotationError) -> Self {
        FeatureFault::Lost(e.to_string())
    }
}

/// Turns observations into the stacked error vector for a constraint set.
///
/// Holds the per-episode cache of carried-object features: they are
/// extracted on the first observation and reused afterwards, while target
/// features are re-extracted on every call.
#[derive(Debug, Clone)]
pub struct FeatureTracker {
    pub policy: PairingPolicy,
    pub specs: Vec<ConstraintSpec>,
    pub pca: PcaConfig,
    carried: Option<ExtractedFeatures>,
}

impl FeatureTracker {
    pub fn new(policy: PairingPolicy, specs: Vec<ConstraintSpec>, pca: PcaConfig) -> Self {
        Self { policy, specs, pca, carried: None }
    }

    pub fn frozen_carried(&self) -> Option<&ExtractedFeatures> {
        self.carried.as_ref()
    }

    pub fn error_dim(&self) -> usize {
        self.specs.iter().map(|s| s.kind.error_dim()).sum()
    }

    fn features_for<S: ServoSession + ?Sized>(
        &mut self,
        session: &mut S,
        prompt: &str,
    ) -> Result<ExtractedFeatures, FeatureFault> {
        let mask = session
            .mask(prompt)
            .map_err(FeatureFault::Session)?
            .ok_or_else(|| FeatureFault::Lost(format!("`{prompt}` not visible")))?;
        Ok(extract_features(&mask, &self.pca)?)
    }

    /// Observes the session and returns the bound constraints with their stacked error.
    pub fn observe<S: ServoSession + ?Sized>(
        &mut self,
        session: &mut S,
    ) -> Result<(ErrorVector, Vec<Constraint>), FeatureFault> {
        let needs_masks = self.specs.iter().any(|s| s.binding == FeatureBinding::Salient);
        let mut target = None;
        if needs_masks {
            if self.carried.is_none() {
                if let Some(p) = self.policy.carried_prompt().map(str::to_owned) {
                    self.carried = Some(self.features_for(session, &p)?);
                }
            }
            let p = self.policy.target_prompt().to_owned();
            target = Some(self.features_for(session, &p)?);
        }
        let mut constraints = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let c = match &spec.binding {
                FeatureBinding::Salient => bind_constraint(
                    spec.kind,
                    &self.policy,
                    self.carried.as_ref(),
                    target.as_ref().expect("target extracted"),
                )?,
                FeatureBinding::Annotated { points } => {
                    let mut pts = Vec::with_capacity(points.len());
                    for p in points {
                        pts.push(match *p {
                            AnnotatedPoint::Fixed(p) => p,
                            AnnotatedPoint::Tracked(id) => session
                                .tracked_point(id)
                                .map_err(FeatureFault::Session)?
                                .ok_or_else(|| FeatureFault::Lost(format!("tracked point {id} left the view")))?,
                        });
                    }
                    Constraint::from_points(spec.kind, &pts)?
                }
            };
            constraints.push(c);
        }
        let parts = constraints.iter().map(Constraint::evaluate).collect::<Result<Vec<_>, _>>()?;
        Ok((stack_errors(&parts), constraints))
    }
}

/// Convergence test: pixel-valued blocks by joint norm, parallel-line blocks one by one.
pub fn is_converged(kinds: &[ConstraintKind], e: &ErrorVector, cfg: &ControllerConfig) -> bool {
    let mut offset = 0;
    let mut pixel_sq = 0.0;
    for kind in kinds {
        let block = &e.0[offset..offset + kind.error_dim()];
        offset += kind.error_dim();
        if kind.is_pixel_valued() {
            pixel_sq += block.iter().map(|v| v * v).sum::<f64>();
        } else if block.iter().any(|v| v.abs() >= cfg.converge_eps_par) {
            return false;
        }
    }
    pixel_sq.sqrt() < cfg.converge_eps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub q: Vec<f64>,
    pub error: ErrorVector,
    pub error_norm: f64,
    pub features: Vec<Constraint>,
    pub jacobian_condition: Option<f64>,
    /// Motion commanded after this observation (empty on the final record).
    pub dq: Vec<f64>,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptTrace {
    pub attempt: usize,
    pub stage: usize,
    pub steps: Vec<StepRecord>,
    pub status: Option<EpisodeStatus>,
    pub note: Option<String>,
    pub initial_jacobian: Option<Vec<Vec<f64>>>,
}

impl AttemptTrace {
    pub fn new(attempt: usize, stage: usize) -> Self {
        Self { attempt, stage, steps: Vec::new(), status: None, note: None, initial_jacobian: None }
    }

    pub fn final_error_norm(&self) -> Option<f64> {
        self.steps.last().map(|s| s.error_norm)
    }

    fn finish(&mut self, status: EpisodeStatus, note: Option<String>) {
        assert!(self.status.is_none(), "attempt status is set exactly once");
        self.status = Some(status);
        self.note = note;
    }
}

/// Outcome of one servo iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Continue(StepRecord),
    Finished(EpisodeStatus, Option<StepRecord>),
}

/// Step-at-a-time visual servo for one constraint set.
///
/// Each call to [`Servo::step`] observes the session, updates the Jacobian
/// from the measured change since the previous move, checks the stopping
/// rules and commands the next move.
#[derive(Debug)]
pub struct Servo {
    pub cfg: ControllerConfig,
    tracker: FeatureTracker,
    jacobian: Option<JacobianEstimate>,
    previous: Option<(Vec<f64>, ErrorVector)>,
    initial_norm: Option<f64>,
    over_count: usize,
    step: usize,
    trace: AttemptTrace,
    extra_probes: usize,
}

impl Servo {
    pub fn new(cfg: ControllerConfig, tracker: FeatureTracker, attempt: usize, stage: usize) -> Self {
        Self {
            cfg,
            tracker,
            jacobian: None,
            previous: None,
            initial_norm: None,
            over_count: 0,
            step: 0,
            trace: AttemptTrace::new(attempt, stage),
            extra_probes: 2,
        }
    }

    pub fn trace(&self) -> &AttemptTrace {
        &self.trace
    }

    pub fn into_trace(self) -> AttemptTrace {
        self.trace
    }

    pub fn jacobian(&self) -> Option<&JacobianEstimate> {
        self.jacobian.as_ref()
    }

    pub fn tracker(&self) -> &FeatureTracker {
        &self.tracker
    }

    pub fn status(&self) -> Option<EpisodeStatus> {
        self.trace.status
    }

    pub fn kinds(&self) -> Vec<ConstraintKind> {
        self.tracker.specs.iter().map(|s| s.kind).collect()
    }

    fn finish(&mut self, status: EpisodeStatus, note: Option<String>) -> StepOutcome {
        if let Some(n) = &note {
            debug!("attempt {} stage {} ended {:?}: {n}", self.trace.attempt, self.trace.stage, status);
        }
        self.trace.finish(status, note);
        StepOutcome::Finished(status, self.trace.steps.last().cloned())
    }

    /// Central differences with shrinking probes when a feature leaves the view.
    fn initialize<S: ServoSession + ?Sized>(&mut self, session: &mut S, q0: &[f64]) -> Result<JacobianEstimate, FeatureFault> {
        let mut cfg = self.cfg;
        let mut tries = 0;
        loop {
            let tracker = &mut self.tracker;
            let result = init_jacobian(
                |q| {
                    session.move_to(q)?;
                    match tracker.observe(session) {
                        Ok((e, _)) => Ok(e.0),
                        Err(f) => Err(f.to_string().into()),
                    }
                },
                q0,
                &cfg,
            );
            session.move_to(q0).map_err(FeatureFault::Session)?;
            match result {
                Ok(j) => return Ok(j),
                Err(ControlError::ProbeFailed { reason, .. }) if tries < self.extra_probes => {
                    debug!("probe failed ({reason}), halving fd_delta");
                    cfg.fd_delta *= 0.5;
                    tries += 1;
                }
                Err(e) => return Err(FeatureFault::Lost(e.to_string())),
            }
        }
    }

    pub fn step<S: ServoSession + ?Sized>(&mut self, session: &mut S) -> Result<StepOutcome, ControlError> {
        if let Some(s) = self.trace.status {
            return Ok(StepOutcome::Finished(s, None));
        }
        let q = session.q();
        let (e, features) = match self.tracker.observe(session) {
            Ok(v) => v,
            Err(FeatureFault::Lost(why)) => return Ok(self.finish(EpisodeStatus::FeatureLost, Some(why))),
            Err(FeatureFault::Session(s)) => return Err(ControlError::Session(s)),
        };

        if let (Some(j), Some((q_prev, e_prev))) = (&self.jacobian, &self.previous) {
            let dq: Vec<f64> = q.iter().zip(q_prev).map(|(a, b)| a - b).collect();
            let de: Vec<f64> = e.0.iter().zip(&e_prev.0).map(|(a, b)| a - b).collect();
            self.jacobian = Some(broyden_update(j, &dq, &de, &self.cfg));
        }

        let norm = e.norm();
        let initial = *self.initial_norm.get_or_insert(norm);
        let mut record = StepRecord {
            step: self.step,
            q: q.clone(),
            error: e.clone(),
            error_norm: norm,
            features,
            jacobian_condition: self.jacobian.as_ref().map(JacobianEstimate::condition_estimate),
            dq: Vec::new(),
            clamped: false,
        };
        self.step += 1;

        if is_converged(&self.kinds(), &e, &self.cfg) {
            self.trace.steps.push(record);
            return Ok(self.finish(EpisodeStatus::Converged, None));
        }
        if record.step >= self.cfg.max_iters {
            self.trace.steps.push(record);
            return Ok(self.finish(EpisodeStatus::IterBudget, None));
        }
        if norm > self.cfg.divergence_factor * initial {
            self.over_count += 1;
        } else {
            self.over_count = 0;
        }
        if self.over_count >= self.cfg.divergence_patience {
            self.trace.steps.push(record);
            return Ok(self.finish(EpisodeStatus::Diverged, Some(format!("error norm {norm:.2} vs initial {initial:.2}"))));
        }

        if self.jacobian.is_none() {
            match self.initialize(session, &q) {
                Ok(j) => {
                    self.trace.initial_jacobian = Some(j.to_rows());
                    record.jacobian_condition = Some(j.condition_estimate());
                    self.jacobian = Some(j);
                }
                Err(FeatureFault::Lost(why)) => {
                    self.trace.steps.push(record);
                    return Ok(self.finish(EpisodeStatus::FeatureLost, Some(why)));
                }
                Err(FeatureFault::Session(s)) => return Err(ControlError::Session(s)),
            }
        }
        let j = self.jacobian.as_ref().expect("initialized");
        let dq = control_step(j, &e, &self.cfg)?;
        let target: Vec<f64> = q.iter().zip(&dq).map(|(a, b)| a + b).collect();
        record.clamped = session.move_to(&target).map_err(ControlError::Session)?;
        record.dq = dq;
        self.previous = Some((q, e));
        self.trace.steps.push(record.clone());
        Ok(StepOutcome::Continue(record))
    }
}

/// Runs one servo attempt to a terminal status.
pub fn run_attempt<S: ServoSession + ?Sized>(
    session: &mut S,
    tracker: FeatureTracker,
    cfg: &ControllerConfig,
    attempt: usize,
    stage: usize,
) -> Result<(EpisodeStatus, AttemptTrace), ControlError> {
    let mut servo = Servo::new(*cfg, tracker, attempt, stage);
    loop {
        if let StepOutcome::Finished(status, _) = servo.step(session)? {
            return Ok((status, servo.into_trace()));
        }
    }
}

/// A purely numerical session: `e(q) = f(q)`, with no images involved.
///
/// Used to exercise the controller against analytic maps.
pub struct FunctionSession<F> {
    pub q: Vec<f64>,
    pub f: F,
}

impl<F: FnMut(&[f64]) -> Vec<f64>> FunctionSession<F> {
    pub fn new(q0: Vec<f64>, f: F) -> Self {
        Self { q: q0, f }
    }

    /// Errors at the current configuration.
    pub fn errors(&mut self) -> Vec<f64> {
        (self.f)(&self.q)
    }
}

/// Tracker for a [`FunctionSession`]: each output of the map is exposed as a
/// tracked point's distance to the line `x = 0`, so the stacked error equals
/// the map output.
pub fn function_tracker(outputs: usize) -> FeatureTracker {
    let specs = (0..outputs)
        .map(|i| {
            ConstraintSpec::annotated(
                ConstraintKind::PointToLine,
                vec![AnnotatedPoint::Tracked(i), AnnotatedPoint::Fixed(HomoPoint::pixel(0.0, 0.0)), AnnotatedPoint::Fixed(HomoPoint::pixel(0.0, 1.0))],
            )
        })
        .collect();
    FeatureTracker::new(PairingPolicy::object_gripper("", 1, 1), specs, PcaConfig::default())
}

impl<F: FnMut(&[f64]) -> Vec<f64>> ServoSession for FunctionSession<F> {
    fn dof(&self) -> usize {
        self.q.len()
    }

    fn q(&self) -> Vec<f64> {
        self.q.clone()
    }

    fn move_to(&mut self, q: &[f64]) -> Result<bool, SessionFault> {
        self.q.copy_from_slice(q);
        Ok(false)
    }

    fn mask(&mut self, _prompt: &str) -> Result<Option<SaliencyMap>, SessionFault> {
        Ok(None)
    }

    /// Output `i` becomes the point `(e_i, 0)`, whose signed distance to the line `x = 0` is `e_i`.
    fn tracked_point(&mut self, anchor: usize) -> Result<Option<HomoPoint>, SessionFault> {
        let e = (self.f)(&self.q);
        Ok(e.get(anchor).map(|v| HomoPoint::pixel(*v, 0.0)))
    }
}
