//! Multi-stage scenario execution under the three-attempt protocol.
//!
//! An attempt resets the scene to a freshly sampled start and runs every
//! stage in order. A stage succeeds when the servo converges and the
//! stage's world-frame goal holds; reach stages may then attach the object
//! to the gripper for the following stages. Attempts stop as soon as the
//! score can no longer change.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    run_attempt, score_settled, score_task, AttemptTrace, ConstraintSpec, ControlError, ControllerConfig,
    EpisodeStatus, FeatureTracker,
};
use crate::geometry::ErrorVector;
use crate::saliency::PcaConfig;
use crate::controller::ServoSession;
use crate::simulator::{Scenario, SimSession, Stage, StageGoal};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("simulation error: {0}")]
    Sim(#[from] crate::simulator::SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: usize,
    pub name: String,
    pub status: EpisodeStatus,
    pub iterations: usize,
    pub final_error_norm: Option<f64>,
    pub goal_met: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptResult {
    pub attempt: usize,
    pub status: EpisodeStatus,
    pub initial_q: Vec<f64>,
    pub stages: Vec<StageResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRun {
    pub scenario: String,
    pub seed: u64,
    pub config: ControllerConfig,
    pub attempts: Vec<AttemptResult>,
    pub traces: Vec<AttemptTrace>,
}

impl TaskRun {
    pub fn statuses(&self) -> Vec<EpisodeStatus> {
        self.attempts.iter().map(|a| a.status).collect()
    }

    pub fn score(&self) -> f64 {
        score_task(&self.statuses())
    }
}

pub fn stage_tracker(scenario: &Scenario, stage: &Stage) -> FeatureTracker {
    let specs = stage.constraints.iter().map(|k| ConstraintSpec::salient(*k)).collect();
    FeatureTracker::new(stage.policy(&scenario.camera), specs, PcaConfig::default())
}

/// Runs one full attempt on a fresh session.
pub fn run_scenario_attempt(
    scenario: &Scenario,
    cfg: &ControllerConfig,
    attempt: usize,
) -> Result<(AttemptResult, Vec<AttemptTrace>), TaskError> {
    let mut session = SimSession::for_scenario(scenario, attempt);
    let initial_q = session.q();
    let mut stages = Vec::new();
    let mut traces = Vec::new();
    let mut status = EpisodeStatus::Converged;
    for (index, stage) in scenario.stages.iter().enumerate() {
        session.set_active_prompts(stage.prompts.clone());
        let (mut stage_status, trace) = run_attempt(&mut session, stage_tracker(scenario, stage), cfg, attempt, index)?;
        let goal_met = stage_status == EpisodeStatus::Converged && session.evaluate_stage_success(stage);
        if stage_status == EpisodeStatus::Converged && !goal_met {
            stage_status = EpisodeStatus::GoalMissed;
        }
        stages.push(StageResult {
            stage: index,
            name: stage.name.clone(),
            status: stage_status,
            iterations: trace.steps.len().saturating_sub(1),
            final_error_norm: trace.final_error_norm(),
            goal_met,
        });
        traces.push(trace);
        if stage_status != EpisodeStatus::Converged {
            status = stage_status;
            break;
        }
        if let StageGoal::Reach { object, attach: true, lift, .. } = &stage.goal {
            session.attach(object, *lift)?;
        }
    }
    Ok((AttemptResult { attempt, status, initial_q, stages }, traces))
}

/// Runs attempts until the score is settled or `cfg.max_attempts` is reached.
pub fn run_task(scenario: &Scenario, cfg: &ControllerConfig) -> Result<TaskRun, TaskError> {
    let mut attempts = Vec::new();
    let mut traces = Vec::new();
    for attempt in 0..cfg.max_attempts {
        let (result, t) = run_scenario_attempt(scenario, cfg, attempt)?;
        attempts.push(result);
        traces.extend(t);
        let statuses: Vec<_> = attempts.iter().map(|a| a.status).collect();
        if score_settled(&statuses) {
            break;
        }
    }
    Ok(TaskRun { scenario: scenario.name.clone(), seed: scenario.seed, config: *cfg, attempts, traces })
}

/// Walks a finished run on fresh sessions: for every recorded step the
/// session is moved to the recorded configuration and handed to `visit`.
/// Attachments are re-applied after stages that met a grasp goal.
pub fn replay_with<E: From<TaskError>>(
    scenario: &Scenario,
    run: &TaskRun,
    mut visit: impl FnMut(&AttemptTrace, usize, &mut SimSession) -> Result<(), E>,
) -> Result<(), E> {
    let mut session: Option<SimSession> = None;
    for trace in &run.traces {
        if trace.stage == 0 {
            session = Some(SimSession::for_scenario(scenario, trace.attempt));
        }
        let session = session.as_mut().expect("stage 0 opens every attempt");
        let stage = &scenario.stages[trace.stage];
        session.set_active_prompts(stage.prompts.clone());
        for (i, step) in trace.steps.iter().enumerate() {
            session.move_to(&step.q).map_err(|e| TaskError::from(ControlError::Session(e)))?;
            visit(trace, i, session)?;
        }
        if trace.status == Some(EpisodeStatus::Converged) && session.evaluate_stage_success(stage) {
            if let StageGoal::Reach { object, attach: true, lift, .. } = &stage.goal {
                session.attach(object, *lift).map_err(TaskError::from)?;
            }
        }
    }
    Ok(())
}

/// Recomputes the stacked error of every recorded step by replaying the run.
pub fn replay_errors(scenario: &Scenario, run: &TaskRun) -> Result<Vec<Vec<ErrorVector>>, TaskError> {
    let mut out: Vec<Vec<ErrorVector>> = Vec::with_capacity(run.traces.len());
    let mut tracker = None;
    replay_with::<TaskError>(scenario, run, |trace, i, session| {
        if i == 0 {
            out.push(Vec::new());
            tracker = Some(stage_tracker(scenario, &scenario.stages[trace.stage]));
        }
        if let Ok((e, _)) = tracker.as_mut().expect("set on first step").observe(session) {
            out.last_mut().expect("pushed on first step").push(e);
        }
        Ok(())
    })?;
    Ok(out)
}
