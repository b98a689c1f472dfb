//! One interactive servo session over a simulated scene.
//!
//! The session is a synchronous state machine; the HTTP layer wraps it in a
//! mutex and drives [`Session::tick`] from a timer while it is running.
//! Every emitted message gets a sequence number, and every control step
//! produces exactly one [`SessionMessage::StateUpdate`] with a step index that
//! increases by one per control step over the whole life of the session,
//! resets included.

use serde::{Deserialize, Serialize};

use vsalient_core::controller::{
    ConstraintSpec, ControlError, ControllerConfig, EpisodeStatus, FeatureTracker, Servo, StepOutcome, StepRecord,
};
use vsalient_core::geometry::{Constraint, ConstraintKind, ErrorVector, HomoLine, HomoPoint};
use vsalient_core::saliency::PcaConfig;
use vsalient_core::simulator::{Scenario, SimSession, StageGoal};
use vsalient_core::task::stage_tracker;

use crate::annotation::Annotation;
use crate::error::ServiceError;

/// Where a session's constraints come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSource {
    /// The scenario's own stages, with mask-derived features.
    Plan,
    /// Constraints submitted as annotations.
    #[default]
    Interactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    /// No constraints yet.
    Idle,
    Ready,
    Running,
    Paused,
    Finished,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Start,
    Pause,
    StepOnce,
    Reset,
    Abort,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Start => "start",
            Command::Pause => "pause",
            Command::StepOnce => "step_once",
            Command::Reset => "reset",
            Command::Abort => "abort",
        }
    }
}

/// Servo status attached to a state update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateStatus {
    InProgress,
    Converged,
    Diverged,
    IterBudget,
    FeatureLost,
    GoalMissed,
}

impl From<EpisodeStatus> for UpdateStatus {
    fn from(s: EpisodeStatus) -> Self {
        match s {
            EpisodeStatus::Converged => UpdateStatus::Converged,
            EpisodeStatus::Diverged => UpdateStatus::Diverged,
            EpisodeStatus::IterBudget => UpdateStatus::IterBudget,
            EpisodeStatus::FeatureLost => UpdateStatus::FeatureLost,
            EpisodeStatus::GoalMissed => UpdateStatus::GoalMissed,
        }
    }
}

/// Messages pushed to subscribers, in `seq` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionMessage {
    FrameAvailable {
        seq: u64,
        /// Number of control steps taken so far.
        step: u64,
        mask_ids: Vec<String>,
        /// Relative URL of the frame resource.
        image: String,
    },
    StateUpdate {
        seq: u64,
        step: u64,
        stage: usize,
        q: Vec<f64>,
        error: ErrorVector,
        error_norm: f64,
        status: UpdateStatus,
    },
    AnnotationSubmitted {
        seq: u64,
        step: u64,
        kind: ConstraintKind,
        features: Constraint,
        error: ErrorVector,
    },
    Command {
        seq: u64,
        step: u64,
        command: Command,
        lifecycle: Lifecycle,
    },
    /// A stage or the whole session ended without a final control step to report it.
    Finished {
        seq: u64,
        step: u64,
        status: UpdateStatus,
        note: Option<String>,
    },
}

impl SessionMessage {
    pub fn seq(&self) -> u64 {
        match self {
            SessionMessage::FrameAvailable { seq, .. }
            | SessionMessage::StateUpdate { seq, .. }
            | SessionMessage::AnnotationSubmitted { seq, .. }
            | SessionMessage::Command { seq, .. }
            | SessionMessage::Finished { seq, .. } => *seq,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SessionMessage::FrameAvailable { .. } => "frame_available",
            SessionMessage::StateUpdate { .. } => "state_update",
            SessionMessage::AnnotationSubmitted { .. } => "annotation_submitted",
            SessionMessage::Command { .. } => "command",
            SessionMessage::Finished { .. } => "finished",
        }
    }
}

/// Drawable description of the current features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub static_point: HomoPoint,
    pub static_line: HomoLine,
    pub constraints: Vec<Constraint>,
    pub error: Option<ErrorVector>,
    /// Why features could not be extracted, if they could not.
    pub problem: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameView {
    pub step: u64,
    pub stage: usize,
    pub q: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub mask_ids: Vec<String>,
    /// Grayscale PNG of every object's mask, base64 encoded.
    pub image_png_base64: String,
    pub overlay: Overlay,
    pub lifecycle: Lifecycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub scenario: String,
    pub source: ConstraintSource,
    pub lifecycle: Lifecycle,
    pub outcome: Option<EpisodeStatus>,
    pub dof: usize,
    pub width: usize,
    pub height: usize,
    pub stage: usize,
    pub stages: usize,
    pub steps: u64,
    pub annotations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationAccepted {
    pub index: usize,
    pub features: Constraint,
    pub error: ErrorVector,
}

pub struct Session {
    pub id: String,
    scenario: Scenario,
    source: ConstraintSource,
    cfg: ControllerConfig,
    attempt: usize,
    sim: SimSession,
    stage: usize,
    servo: Option<Servo>,
    annotations: Vec<ConstraintSpec>,
    lifecycle: Lifecycle,
    outcome: Option<EpisodeStatus>,
    steps: u64,
    seq: u64,
    history: Vec<SessionMessage>,
}

impl Session {
    pub fn new(id: String, scenario: Scenario, source: ConstraintSource, attempt: usize) -> Self {
        let cfg = scenario.controller_config();
        let sim = SimSession::for_scenario(&scenario, attempt);
        let mut s = Self {
            id,
            scenario,
            source,
            cfg,
            attempt,
            sim,
            stage: 0,
            servo: None,
            annotations: Vec::new(),
            lifecycle: Lifecycle::Idle,
            outcome: None,
            steps: 0,
            seq: 0,
            history: Vec::new(),
        };
        s.restart();
        s
    }

    fn restart(&mut self) {
        self.sim = SimSession::for_scenario(&self.scenario, self.attempt);
        self.stage = 0;
        self.servo = None;
        self.annotations.clear();
        self.outcome = None;
        self.sim.set_active_prompts(self.scenario.stages[0].prompts.clone());
        self.lifecycle = match self.source {
            ConstraintSource::Plan => Lifecycle::Ready,
            ConstraintSource::Interactive => Lifecycle::Idle,
        };
    }

    pub fn set_controller(&mut self, cfg: ControllerConfig) {
        self.cfg = cfg;
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.lifecycle
    }

    pub fn outcome(&self) -> Option<EpisodeStatus> {
        self.outcome
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn sim(&self) -> &SimSession {
        &self.sim
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            id: self.id.clone(),
            scenario: self.scenario.name.clone(),
            source: self.source,
            lifecycle: self.lifecycle,
            outcome: self.outcome,
            dof: self.sim.rig.dof(),
            width: self.sim.camera.width,
            height: self.sim.camera.height,
            stage: self.stage,
            stages: self.scenario.stages.len(),
            steps: self.steps,
            annotations: self.annotations.len(),
        }
    }

    /// Messages with `seq >= from`, oldest first.
    pub fn history_from(&self, from: u64) -> &[SessionMessage] {
        let start = self.history.partition_point(|m| m.seq() < from);
        &self.history[start..]
    }

    pub fn next_seq(&self) -> u64 {
        self.seq
    }

    fn emit(&mut self, build: impl FnOnce(u64, u64) -> SessionMessage) -> SessionMessage {
        let m = build(self.seq, self.steps);
        self.seq += 1;
        self.history.push(m.clone());
        m
    }

    fn tracker(&self) -> FeatureTracker {
        let stage = &self.scenario.stages[self.stage];
        match self.source {
            ConstraintSource::Plan => stage_tracker(&self.scenario, stage),
            ConstraintSource::Interactive => {
                FeatureTracker::new(stage.policy(&self.scenario.camera), self.annotations.clone(), PcaConfig::default())
            }
        }
    }

    pub fn overlay(&self) -> Overlay {
        let policy = self.scenario.stages[self.stage].policy(&self.scenario.camera);
        let mut base = Overlay {
            static_point: policy.static_point,
            static_line: policy.static_line,
            constraints: Vec::new(),
            error: None,
            problem: None,
        };
        let mut tracker = match &self.servo {
            Some(servo) => servo.tracker().clone(),
            None => self.tracker(),
        };
        if tracker.specs.is_empty() {
            return base;
        }
        let mut sim = self.sim.clone();
        match tracker.observe(&mut sim) {
            Ok((e, constraints)) => {
                base.constraints = constraints;
                base.error = Some(e);
            }
            Err(f) => base.problem = Some(f.to_string()),
        }
        base
    }

    pub fn frame(&self) -> FrameView {
        use base64::Engine as _;
        let png = self.sim.render_scene().to_png();
        FrameView {
            step: self.steps,
            stage: self.stage,
            q: self.sim.configuration().to_vec(),
            width: self.sim.camera.width,
            height: self.sim.camera.height,
            mask_ids: self.sim.active_prompts().to_vec(),
            image_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
            overlay: self.overlay(),
            lifecycle: self.lifecycle,
        }
    }

    pub fn annotate(&mut self, annotation: &Annotation) -> Result<(AnnotationAccepted, Vec<SessionMessage>), ServiceError> {
        if self.source != ConstraintSource::Interactive {
            return Err(ServiceError::IllegalCommand {
                command: "annotate".into(),
                lifecycle: self.lifecycle,
                reason: "session constraints come from the scenario plan".into(),
            });
        }
        if !matches!(self.lifecycle, Lifecycle::Idle | Lifecycle::Ready) {
            return Err(ServiceError::IllegalCommand {
                command: "annotate".into(),
                lifecycle: self.lifecycle,
                reason: "annotations are accepted before the servo starts".into(),
            });
        }
        let mut scratch = self.sim.clone();
        let spec = annotation.bind(&mut scratch).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let mut probe = FeatureTracker::new(
            self.scenario.stages[self.stage].policy(&self.scenario.camera),
            vec![spec.clone()],
            PcaConfig::default(),
        );
        let (error, mut constraints) =
            probe.observe(&mut scratch).map_err(|e| ServiceError::BadRequest(format!("annotation unusable: {e}")))?;
        self.sim = scratch;
        self.annotations.push(spec);
        self.lifecycle = Lifecycle::Ready;
        let features = constraints.remove(0);
        let msg = self.emit(|seq, step| SessionMessage::AnnotationSubmitted {
            seq,
            step,
            kind: annotation.kind,
            features,
            error: error.clone(),
        });
        Ok((AnnotationAccepted { index: self.annotations.len() - 1, features, error }, vec![msg]))
    }

    /// Applies a command. Returns the messages it produced.
    pub fn command(&mut self, command: Command) -> Result<Vec<SessionMessage>, ServiceError> {
        use Lifecycle::*;
        let illegal = |lifecycle: Lifecycle, reason: &str| ServiceError::IllegalCommand {
            command: command.name().into(),
            lifecycle,
            reason: reason.into(),
        };
        let mut out = Vec::new();
        match (command, self.lifecycle) {
            (Command::Start, Idle) => return Err(illegal(Idle, "no constraints have been submitted")),
            (Command::Start, Ready | Paused) => self.lifecycle = Running,
            (Command::Pause, Running) => self.lifecycle = Paused,
            (Command::StepOnce, Idle) => return Err(illegal(Idle, "no constraints have been submitted")),
            (Command::StepOnce, Ready | Paused) => {
                self.lifecycle = Paused;
                out.extend(self.advance()?);
            }
            (Command::Reset, _) => self.restart(),
            (Command::Abort, Idle | Ready | Running | Paused) => {
                self.lifecycle = Aborted;
                self.servo = None;
            }
            (_, state) => return Err(illegal(state, "not allowed in this state")),
        }
        let lifecycle = self.lifecycle;
        let ack = self.emit(|seq, step| SessionMessage::Command { seq, step, command, lifecycle });
        out.insert(0, ack);
        Ok(out)
    }

    /// One control step if the session is running.
    pub fn tick(&mut self) -> Result<Vec<SessionMessage>, ServiceError> {
        if self.lifecycle != Lifecycle::Running {
            return Ok(Vec::new());
        }
        self.advance()
    }

    fn finish(&mut self, status: EpisodeStatus) {
        self.outcome = Some(status);
        self.lifecycle = Lifecycle::Finished;
        self.servo = None;
    }

    fn state_update(&mut self, record: &StepRecord, status: UpdateStatus) -> SessionMessage {
        let stage = self.stage;
        let m = self.emit(|seq, step| SessionMessage::StateUpdate {
            seq,
            step,
            stage,
            q: record.q.clone(),
            error: record.error.clone(),
            error_norm: record.error_norm,
            status,
        });
        self.steps += 1;
        m
    }

    fn advance(&mut self) -> Result<Vec<SessionMessage>, ServiceError> {
        let mut servo = match self.servo.take() {
            Some(s) => s,
            None => Servo::new(self.cfg, self.tracker(), self.attempt, self.stage),
        };
        let before = servo.trace().steps.len();
        let outcome = servo.step(&mut self.sim).map_err(|e: ControlError| ServiceError::Internal(e.to_string()))?;
        let new: Vec<StepRecord> = servo.trace().steps[before..].to_vec();
        let mut out = Vec::new();
        match outcome {
            StepOutcome::Continue(_) => {
                for r in &new {
                    out.push(self.state_update(r, UpdateStatus::InProgress));
                }
                self.servo = Some(servo);
            }
            StepOutcome::Finished(mut status, _) => {
                let stage = &self.scenario.stages[self.stage];
                let mut next_stage = false;
                if self.source == ConstraintSource::Plan && status == EpisodeStatus::Converged {
                    if !self.sim.evaluate_stage_success(stage) {
                        status = EpisodeStatus::GoalMissed;
                    } else {
                        if let StageGoal::Reach { object, attach: true, lift, .. } = &stage.goal {
                            self.sim.attach(object, *lift).map_err(|e| ServiceError::Internal(e.to_string()))?;
                        }
                        next_stage = self.stage + 1 < self.scenario.stages.len();
                    }
                }
                let reported = if next_stage { UpdateStatus::InProgress } else { status.into() };
                match new.split_last() {
                    Some((last, rest)) => {
                        for r in rest {
                            out.push(self.state_update(r, UpdateStatus::InProgress));
                        }
                        out.push(self.state_update(last, reported));
                    }
                    None => {
                        let note = servo.trace().note.clone();
                        out.push(self.emit(|seq, step| SessionMessage::Finished { seq, step, status: status.into(), note }));
                    }
                }
                if next_stage {
                    self.stage += 1;
                    self.sim.set_active_prompts(self.scenario.stages[self.stage].prompts.clone());
                } else {
                    self.finish(status);
                }
            }
        }
        let mask_ids = self.sim.active_prompts().to_vec();
        let image = format!("/sessions/{}/frame", self.id);
        out.push(self.emit(|seq, step| SessionMessage::FrameAvailable { seq, step, mask_ids, image }));
        Ok(out)
    }
}
