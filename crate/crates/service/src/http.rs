//! HTTP transport for the session service.
//!
//! Request/response endpoints use JSON bodies; live updates are a
//! server-sent event stream whose event ids are message sequence numbers, so
//! a client reconnecting with `Last-Event-ID` (or `?from=`) resumes exactly
//! after the last message it saw.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex, Weak};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::HeaderMap;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use vsalient_core::controller::ControllerConfig;
use vsalient_core::simulator::{library_names, library_scenario, Scenario};

use crate::annotation::Annotation;
use crate::error::ServiceError;
use crate::session::{
    AnnotationAccepted, Command, ConstraintSource, FrameView, Lifecycle, Session, SessionInfo, SessionMessage,
};

/// Machine-readable description of the endpoints and message schemas.
pub const PROTOCOL: &str = include_str!("../protocol/session-protocol.json");

#[derive(Debug, Clone, Copy)]
pub struct ServiceConfig {
    /// Delay between control steps of a running session.
    pub tick: Duration,
    /// Broadcast buffer per session; slow subscribers catch up from history.
    pub channel_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { tick: Duration::from_millis(20), channel_capacity: 1024 }
    }
}

struct Entry {
    session: Mutex<Session>,
    events: broadcast::Sender<SessionMessage>,
}

impl Entry {
    /// Callers hold the session lock, so broadcast order equals `seq` order.
    fn publish(&self, messages: Vec<SessionMessage>) {
        for m in messages {
            // No receivers is fine: history keeps everything for later subscribers.
            let _ = self.events.send(m);
        }
    }
}

/// Shared service state: the scenario catalogue and live sessions.
pub struct Service {
    cfg: ServiceConfig,
    scenarios: BTreeMap<String, Scenario>,
    sessions: Mutex<BTreeMap<String, Arc<Entry>>>,
    next_id: Mutex<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub scenario: String,
    #[serde(default)]
    pub source: ConstraintSource,
    #[serde(default)]
    pub attempt: usize,
    #[serde(default)]
    pub controller: Option<ControllerConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandRequest {
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandResponse {
    pub lifecycle: Lifecycle,
    pub messages: Vec<SessionMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub name: String,
    pub context: String,
    pub description: String,
    pub stages: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
pub struct EventsQuery {
    pub from: Option<u64>,
}

impl Service {
    /// A service over the bundled scenario library.
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        let scenarios = library_names()
            .into_iter()
            .map(|n| (n.to_owned(), library_scenario(n).expect("bundled scenario")))
            .collect();
        Self::with_scenarios(cfg, scenarios)
    }

    pub fn with_scenarios(cfg: ServiceConfig, scenarios: BTreeMap<String, Scenario>) -> Arc<Self> {
        Arc::new(Self { cfg, scenarios, sessions: Mutex::new(BTreeMap::new()), next_id: Mutex::new(1) })
    }

    pub fn scenarios(&self) -> Vec<ScenarioEntry> {
        self.scenarios
            .values()
            .map(|s| ScenarioEntry {
                name: s.name.clone(),
                context: serde_json::to_value(s.context)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default(),
                description: s.description.clone(),
                stages: s.stages.iter().map(|st| st.name.clone()).collect(),
            })
            .collect()
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>, ServiceError> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ServiceError::UnknownSession(id.to_owned()))
    }

    /// Creates a session without starting its timer; see [`Service::spawn_ticker`].
    pub fn create(&self, req: &CreateSession) -> Result<SessionInfo, ServiceError> {
        let scenario =
            self.scenarios.get(&req.scenario).cloned().ok_or_else(|| ServiceError::UnknownScenario(req.scenario.clone()))?;
        let id = {
            let mut n = self.next_id.lock().unwrap();
            let id = format!("s{}", *n);
            *n += 1;
            id
        };
        let mut session = Session::new(id.clone(), scenario, req.source, req.attempt);
        if let Some(c) = req.controller {
            session.set_controller(c);
        }
        let info = session.info();
        let (tx, _) = broadcast::channel(self.cfg.channel_capacity);
        self.sessions.lock().unwrap().insert(id, Arc::new(Entry { session: Mutex::new(session), events: tx }));
        Ok(info)
    }

    pub fn info(&self, id: &str) -> Result<SessionInfo, ServiceError> {
        Ok(self.entry(id)?.session.lock().unwrap().info())
    }

    pub fn remove(&self, id: &str) -> Result<(), ServiceError> {
        self.sessions.lock().unwrap().remove(id).map(|_| ()).ok_or_else(|| ServiceError::UnknownSession(id.to_owned()))
    }

    pub fn frame(&self, id: &str) -> Result<FrameView, ServiceError> {
        Ok(self.entry(id)?.session.lock().unwrap().frame())
    }

    pub fn annotate(&self, id: &str, annotation: &Annotation) -> Result<AnnotationAccepted, ServiceError> {
        let entry = self.entry(id)?;
        let mut s = entry.session.lock().unwrap();
        let (accepted, messages) = s.annotate(annotation)?;
        entry.publish(messages);
        Ok(accepted)
    }

    pub fn command(&self, id: &str, command: Command) -> Result<CommandResponse, ServiceError> {
        let entry = self.entry(id)?;
        let mut s = entry.session.lock().unwrap();
        let messages = s.command(command)?;
        entry.publish(messages.clone());
        Ok(CommandResponse { lifecycle: s.lifecycle(), messages })
    }

    /// Advances a running session by one control step.
    pub fn tick(&self, id: &str) -> Result<Lifecycle, ServiceError> {
        let entry = self.entry(id)?;
        tick_entry(&entry)
    }

    /// Messages already emitted from `from` on, plus a receiver for later
    /// ones. Taken under the session lock, so nothing falls in between.
    pub fn subscribe(
        &self,
        id: &str,
        from: u64,
    ) -> Result<(Vec<SessionMessage>, broadcast::Receiver<SessionMessage>), ServiceError> {
        let entry = self.entry(id)?;
        let s = entry.session.lock().unwrap();
        Ok((s.history_from(from).to_vec(), entry.events.subscribe()))
    }

    fn history(&self, id: &str, from: u64) -> Option<Vec<SessionMessage>> {
        let entry = self.entry(id).ok()?;
        let s = entry.session.lock().unwrap();
        Some(s.history_from(from).to_vec())
    }

    /// Background timer stepping the session while it runs. Stops when the
    /// session is removed or the service is dropped.
    pub fn spawn_ticker(self: &Arc<Self>, id: &str) {
        let Ok(entry) = self.entry(id) else { return };
        let weak: Weak<Entry> = Arc::downgrade(&entry);
        drop(entry);
        let service = Arc::downgrade(self);
        let id = id.to_owned();
        let tick = self.cfg.tick;
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(tick);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                interval.tick().await;
                let Some(service) = service.upgrade() else { break };
                if service.entry(&id).is_err() {
                    break;
                }
                let Some(entry) = weak.upgrade() else { break };
                if let Err(e) = tick_entry(&entry) {
                    log::warn!("session {id}: {e}");
                }
            }
        });
    }
}

fn tick_entry(entry: &Entry) -> Result<Lifecycle, ServiceError> {
    let mut s = entry.session.lock().unwrap();
    if s.lifecycle() != Lifecycle::Running {
        return Ok(s.lifecycle());
    }
    let messages = s.tick()?;
    entry.publish(messages);
    Ok(s.lifecycle())
}

/// Ordered message stream from `from` on: the stored history, then live
/// messages. A lagging receiver falls back to history, so the stream never
/// skips or repeats a sequence number.
pub fn message_stream(service: Arc<Service>, id: String, from: u64) -> Result<impl Stream<Item = SessionMessage>, ServiceError> {
    let (backlog, rx) = service.subscribe(&id, from)?;
    struct St {
        service: Arc<Service>,
        id: String,
        next: u64,
        pending: std::collections::VecDeque<SessionMessage>,
        rx: broadcast::Receiver<SessionMessage>,
    }
    let st = St { service, id, next: from, pending: backlog.into(), rx };
    Ok(stream::unfold(st, |mut st| async move {
        loop {
            if let Some(m) = st.pending.pop_front() {
                if m.seq() < st.next {
                    continue;
                }
                st.next = m.seq() + 1;
                return Some((m, st));
            }
            match st.rx.recv().await {
                Ok(m) => st.pending.push_back(m),
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    st.pending = st.service.history(&st.id, st.next)?.into();
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }))
}

async fn list_scenarios(State(svc): State<Arc<Service>>) -> Json<Vec<ScenarioEntry>> {
    Json(svc.scenarios())
}

async fn create_session(
    State(svc): State<Arc<Service>>,
    Json(req): Json<CreateSession>,
) -> Result<Json<SessionInfo>, ServiceError> {
    let info = svc.create(&req)?;
    svc.spawn_ticker(&info.id);
    Ok(Json(info))
}

async fn get_session(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Json<SessionInfo>, ServiceError> {
    svc.info(&id).map(Json)
}

async fn delete_session(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ServiceError> {
    svc.remove(&id)?;
    Ok(Json(serde_json::json!({ "deleted": id })))
}

async fn get_frame(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Json<FrameView>, ServiceError> {
    let svc2 = svc.clone();
    tokio::task::spawn_blocking(move || svc2.frame(&id))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
        .map(Json)
}

async fn post_annotation(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Json(annotation): Json<Annotation>,
) -> Result<Json<AnnotationAccepted>, ServiceError> {
    svc.annotate(&id, &annotation).map(Json)
}

async fn post_command(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Json(req): Json<CommandRequest>,
) -> Result<Json<CommandResponse>, ServiceError> {
    svc.command(&id, req.command).map(Json)
}

async fn get_events(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ServiceError> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
        .map(|last| last + 1);
    let from = q.from.or(resume).unwrap_or(0);
    let messages = message_stream(svc, id, from)?;
    let events = futures::StreamExt::map(messages, |m| {
        let data = serde_json::to_string(&m).expect("messages serialize");
        Ok(Event::default().id(m.seq().to_string()).event(m.kind()).data(data))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn get_protocol() -> ([(axum::http::header::HeaderName, &'static str); 1], &'static str) {
    ([(axum::http::header::CONTENT_TYPE, "application/json")], PROTOCOL)
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/protocol", get(get_protocol))
        .route("/scenarios", get(list_scenarios))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/frame", get(get_frame))
        .route("/sessions/{id}/annotations", post(post_annotation))
        .route("/sessions/{id}/commands", post(post_command))
        .route("/sessions/{id}/events", get(get_events))
        .with_state(service)
}

/// Binds and serves until the process is stopped.
pub async fn serve(addr: std::net::SocketAddr, cfg: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Service::new(cfg))).await
}
