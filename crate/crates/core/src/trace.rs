//! Episode trace persistence.
//!
//! A trace is line-delimited JSON: one header record, then one record per
//! control step, with a `stage_end` record closing each attempt stage. The
//! summary is a single JSON document. Both carry `format_version`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, EpisodeStatus, StepRecord};
use crate::task::{AttemptResult, TaskRun};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Header {
        format_version: u32,
        scenario: String,
        seed: u64,
        config: ControllerConfig,
    },
    Step {
        attempt: usize,
        stage: usize,
        #[serde(flatten)]
        step: StepRecord,
    },
    StageEnd {
        attempt: usize,
        stage: usize,
        status: EpisodeStatus,
        note: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub success_rate: f64,
    pub attempts: Vec<AttemptResult>,
}

impl RunSummary {
    pub fn from_run(run: &TaskRun) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            scenario: run.scenario.clone(),
            seed: run.seed,
            success_rate: run.score(),
            attempts: run.attempts.clone(),
        }
    }
}

pub fn records(run: &TaskRun) -> Vec<TraceRecord> {
    let mut out = vec![TraceRecord::Header {
        format_version: FORMAT_VERSION,
        scenario: run.scenario.clone(),
        seed: run.seed,
        config: run.config,
    }];
    for t in &run.traces {
        out.extend(t.steps.iter().map(|s| TraceRecord::Step { attempt: t.attempt, stage: t.stage, step: s.clone() }));
        if let Some(status) = t.status {
            out.push(TraceRecord::StageEnd { attempt: t.attempt, stage: t.stage, status, note: t.note.clone() });
        }
    }
    out
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl(run: &TaskRun) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &records(run)).expect("writing to memory");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceRecord>, serde_json::Error> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l.map_err(serde_json::Error::io)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{function_tracker, run_attempt, FunctionSession};

    #[test]
    fn records_round_trip_exactly() {
        let mut s = FunctionSession::new(vec![0.031, -0.017], |q: &[f64]| vec![410.0 * q[0] - 3.0 * q[1], 7.0 * q[0] + 380.0 * q[1]]);
        let cfg = ControllerConfig::default();
        let (status, trace) = run_attempt(&mut s, function_tracker(2), &cfg, 0, 0).unwrap();
        let run = TaskRun {
            scenario: "linear".into(),
            seed: 3,
            config: cfg,
            attempts: vec![AttemptResult { attempt: 0, status, initial_q: vec![0.031, -0.017], stages: vec![] }],
            traces: vec![trace],
        };
        let text = to_jsonl(&run);
        let back = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, records(&run));
        assert!(text.lines().next().unwrap().contains("\"format_version\":1"));
        let steps = back.iter().filter(|r| matches!(r, TraceRecord::Step { .. })).count();
        assert_eq!(steps, run.traces[0].steps.len());
    }
}
