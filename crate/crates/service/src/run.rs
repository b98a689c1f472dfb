//! Batch runs: resolve a scenario, apply overrides, run the attempt protocol
//! and write the trace, summary and optional mask dumps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use vsalient_core::controller::{run_attempt, score_settled, ControllerConfig, EpisodeStatus, FeatureTracker};
use vsalient_core::saliency::PcaConfig;
use vsalient_core::simulator::{library_names, library_scenario, load_scenario, Scenario, SimSession};
use vsalient_core::task::{replay_with, run_task, AttemptResult, StageResult, TaskError, TaskRun};
use vsalient_core::trace::{write_jsonl, records, RunSummary};

use crate::annotation::{Annotation, AnnotationRejected};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario not found: `{0}` is neither a bundled scenario ({1}) nor a readable file")]
    ScenarioNotFound(String, String),
    #[error("{0}")]
    Schema(#[from] vsalient_core::simulator::SchemaError),
    #[error("interactive constraints need the session service; use `serve`")]
    InteractiveNeedsService,
    #[error("constraint file {path}: {message}")]
    ConstraintFile { path: PathBuf, message: String },
    #[error(transparent)]
    Annotation(#[from] AnnotationRejected),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_owned(), source }
}

/// A bundled scenario name or a path to a scenario document.
pub fn resolve_scenario(reference: &str) -> Result<Scenario, RunError> {
    if let Some(s) = library_scenario(reference) {
        return Ok(s);
    }
    let path = Path::new(reference);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        return Ok(load_scenario(&text)?);
    }
    Err(RunError::ScenarioNotFound(reference.to_owned(), library_names().join(", ")))
}

/// Command-line adjustments to the scenario's controller settings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllerOverrides {
    pub gain: Option<f64>,
    pub damping: Option<f64>,
    pub max_step: Option<f64>,
    pub max_iters: Option<usize>,
    pub max_attempts: Option<usize>,
    pub converge_eps: Option<f64>,
}

impl ControllerOverrides {
    pub fn apply(&self, mut cfg: ControllerConfig) -> ControllerConfig {
        if let Some(v) = self.gain {
            cfg.gain = v;
        }
        if let Some(v) = self.damping {
            cfg.damping = v;
        }
        if let Some(v) = self.max_step {
            cfg.max_step = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.max_attempts {
            cfg.max_attempts = v;
        }
        if let Some(v) = self.converge_eps {
            cfg.converge_eps = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunSource {
    /// The scenario's stages with mask-derived features.
    Plan,
    /// Clicked constraints from a JSON file, applied to every attempt's first view.
    File(PathBuf),
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: String,
    pub source: RunSource,
    pub overrides: ControllerOverrides,
    /// Replaces the scenario's seed when given.
    pub seed: Option<u64>,
    pub output: PathBuf,
    pub save_masks: bool,
}

#[derive(Debug)]
pub struct RunOutput {
    pub run: TaskRun,
    pub summary: RunSummary,
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
    pub mask_paths: Vec<PathBuf>,
}

/// Constraint file: a JSON array of annotations.
pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let list: Vec<Annotation> = serde_json::from_str(&text)
        .map_err(|e| RunError::ConstraintFile { path: path.to_owned(), message: e.to_string() })?;
    if list.is_empty() {
        return Err(RunError::ConstraintFile { path: path.to_owned(), message: "no constraints".into() });
    }
    Ok(list)
}

/// Attempt protocol with annotated constraints on the first stage's view.
/// Success means convergence; the scenario's world-frame goals are not used.
pub fn run_annotated(scenario: &Scenario, cfg: &ControllerConfig, annotations: &[Annotation]) -> Result<TaskRun, RunError> {
    let stage = &scenario.stages[0];
    let mut attempts = Vec::new();
    let mut traces = Vec::new();
    for attempt in 0..cfg.max_attempts {
        let mut sim = SimSession::for_scenario(scenario, attempt);
        sim.set_active_prompts(stage.prompts.clone());
        let initial_q = sim.configuration().to_vec();
        let specs = annotations.iter().map(|a| a.bind(&mut sim)).collect::<Result<Vec<_>, _>>()?;
        let tracker = FeatureTracker::new(stage.policy(&scenario.camera), specs, PcaConfig::default());
        let (status, trace) = run_attempt(&mut sim, tracker, cfg, attempt, 0).map_err(TaskError::from)?;
        attempts.push(AttemptResult {
            attempt,
            status,
            initial_q,
            stages: vec![StageResult {
                stage: 0,
                name: "annotated".into(),
                status,
                iterations: trace.steps.len().saturating_sub(1),
                final_error_norm: trace.final_error_norm(),
                goal_met: status == EpisodeStatus::Converged,
            }],
        });
        traces.push(trace);
        if score_settled(&attempts.iter().map(|a| a.status).collect::<Vec<_>>()) {
            break;
        }
    }
    Ok(TaskRun { scenario: scenario.name.clone(), seed: scenario.seed, config: *cfg, attempts, traces })
}

fn write_masks(scenario: &Scenario, run: &TaskRun, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    replay_with::<RunError>(scenario, run, |trace, i, session| {
        let last = trace.steps.len() - 1;
        if i != 0 && i != last {
            return Ok(());
        }
        let when = if i == 0 { "first" } else { "last" };
        for prompt in session.active_prompts().to_vec() {
            if let Ok(mask) = session.render_prompt(&prompt) {
                let name = format!("a{}_s{}_{when}_{}.pgm", trace.attempt, trace.stage, prompt.replace(' ', "_"));
                let path = dir.join(name);
                fs::write(&path, mask.to_pgm()).map_err(io_err(&path))?;
                written.push(path);
            }
        }
        Ok(())
    })?;
    Ok(written)
}

pub fn execute(cfg: &RunConfig) -> Result<RunOutput, RunError> {
    let mut scenario = resolve_scenario(&cfg.scenario)?;
    if let Some(seed) = cfg.seed {
        scenario.seed = seed;
    }
    let controller = cfg.overrides.apply(scenario.controller_config());
    let run = match &cfg.source {
        RunSource::Plan => run_task(&scenario, &controller)?,
        RunSource::File(path) => run_annotated(&scenario, &controller, &load_annotations(path)?)?,
        RunSource::Interactive => return Err(RunError::InteractiveNeedsService),
    };
    fs::create_dir_all(&cfg.output).map_err(io_err(&cfg.output))?;
    let trace_path = cfg.output.join("trace.jsonl");
    let file = fs::File::create(&trace_path).map_err(io_err(&trace_path))?;
    let mut writer = std::io::BufWriter::new(file);
    write_jsonl(&mut writer, &records(&run)).map_err(io_err(&trace_path))?;
    std::io::Write::flush(&mut writer).map_err(io_err(&trace_path))?;

    let summary = RunSummary::from_run(&run);
    let summary_path = cfg.output.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, text + "\n").map_err(io_err(&summary_path))?;

    let mask_paths = if cfg.save_masks && cfg.source == RunSource::Plan {
        write_masks(&scenario, &run, &cfg.output.join("masks"))?
    } else {
        Vec::new()
    };
    Ok(RunOutput { run, summary, trace_path, summary_path, mask_paths })
}
