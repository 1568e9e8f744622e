//! The central controller: guard registry with heartbeats, cross-function
//! checks, rate limiting, policy distribution and the event log.
//!
//! All methods take the current time so that the simulator can drive the
//! controller on a virtual clock. State is split per application; each
//! application's ledger sits behind its own lock.

mod config;
mod ledger;
mod ratelimit;
mod server;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, Write};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    ApplicationConfig, ControllerConfig, HeartbeatConfig, RateLimitEntry, TenantApplication, TenantConfig,
};
pub use ledger::{ExecRecord, ExecutionLedger};
pub use ratelimit::{RateEvent, RateLimiter};
pub use server::{serve, InProcessLink};

use crate::builder::{classify_source, SourceKind};
use crate::enforcer::{DenyReason, Verdict};
use crate::model::{Direction, EdgeKind, FlowEvent, GlobalNodeKind};
use crate::protocol::{
    function_type, DecisionReply, DecisionRequest, EventEnvelope, EventType, FlowEventBody, GuardId,
    HeartbeatBody, PolicyAckBody, PolicyPushBody, RateSignal, RegisterGrant, RegisterRejection, RegisterReply,
    RegisterRequest, RequestId, Tag,
};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown guard {0}")]
    UnknownGuard(GuardId),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmKind {
    /// A service-triggered execution has no execution it could stem from.
    NoPredecessorAvailable,
    /// An execution started from a source the global graph does not allow.
    UnexpectedSource,
    /// A tagged call between functions not linked in the global graph.
    UnexpectedEdge,
    /// An event from a guard that is not (or no longer) registered.
    UnknownGuard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alarm {
    pub kind: AlarmKind,
    pub application: Option<String>,
    pub function: String,
    pub guard: GuardId,
    pub at_ns: u64,
    pub detail: String,
}

/// One logged event with the guard's verdict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub guard: GuardId,
    pub event: FlowEvent,
    pub decision: Verdict,
    pub reason: Option<DenyReason>,
    pub request_id: Option<RequestId>,
}

impl LogRecord {
    /// Trace-log line extended with `decision`, `reason` and `request`.
    pub fn to_json_line(&self) -> String {
        let mut v = serde_json::to_value(&self.event).expect("events serialize");
        let obj = v.as_object_mut().expect("events are objects");
        obj.insert("decision".into(), serde_json::to_value(self.decision).expect("verdict serializes"));
        obj.insert("reason".into(), serde_json::to_value(self.reason).expect("reason serializes"));
        if let Some(r) = self.request_id {
            obj.insert("request".into(), r.to_hex().into());
        }
        v.to_string()
    }
}

struct GuardEntry {
    instance: String,
    function: String,
    app: usize,
    /// Registration or latest heartbeat answer.
    last_seen_ns: u64,
    outbox: Vec<EventEnvelope>,
}

#[derive(Default)]
struct Registry {
    guards: BTreeMap<GuardId, GuardEntry>,
    live: BTreeMap<String, usize>,
    heartbeat_seq: u64,
    policy_version: u64,
}

#[derive(Default)]
struct AppState {
    ledger: ExecutionLedger,
    log: Vec<LogRecord>,
    next_request: u64,
    policy_acks: Vec<(GuardId, PolicyAckBody)>,
}

pub struct Controller {
    config: ControllerConfig,
    app_of: HashMap<String, usize>,
    registry: Mutex<Registry>,
    apps: Vec<Mutex<AppState>>,
    limiter: Mutex<RateLimiter>,
    alarms: Mutex<Vec<Alarm>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self, ControllerError> {
        config.validate()?;
        let app_of = config
            .applications
            .iter()
            .enumerate()
            .flat_map(|(i, a)| a.functions.iter().map(move |f| (f.clone(), i)))
            .collect();
        let apps = config.applications.iter().map(|_| Mutex::new(AppState::default())).collect();
        let limiter = Mutex::new(RateLimiter::new(config.rate_limits.clone()));
        Ok(Controller {
            config,
            app_of,
            registry: Mutex::new(Registry::default()),
            apps,
            limiter,
            alarms: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// Dispatches one envelope and returns the reply, if the event type
    /// has one.
    pub fn handle(&self, env: &EventEnvelope, now_ns: u64) -> Option<EventEnvelope> {
        let guard = env.guard_id;
        match env.kind() {
            Some(EventType::Register) => {
                let reply = match env.parse::<RegisterRequest>(EventType::Register) {
                    Ok(req) => match self.handle_register(&req.instance_id, &req.function, now_ns) {
                        Ok(grant) => RegisterReply::Ok(grant),
                        Err(rej) => RegisterReply::Rejected(rej),
                    },
                    Err(e) => {
                        log::warn!("bad REGISTER body: {e}");
                        RegisterReply::Rejected(RegisterRejection::UnknownFunction { function: String::new() })
                    }
                };
                let id = match &reply {
                    RegisterReply::Ok(g) => g.guard_id,
                    RegisterReply::Rejected(_) => GuardId::default(),
                };
                Some(EventEnvelope::json(id, function_type::CORE, EventType::RegisterAck, &reply))
            }
            Some(EventType::DecisionReq) => {
                let reply = match env.parse::<DecisionRequest>(EventType::DecisionReq) {
                    Ok(req) => self.decide(guard, &req, now_ns),
                    Err(e) => {
                        log::warn!("bad DECISION_REQ body: {e}");
                        DecisionReply { verdict: Verdict::Deny, tag: None, reason: Some(DenyReason::BadTag) }
                    }
                };
                Some(EventEnvelope::json(guard, function_type::FLOW_TRACKING, EventType::DecisionResp, &reply))
            }
            Some(EventType::FlowEvent) => {
                match env.parse::<FlowEventBody>(EventType::FlowEvent) {
                    Ok(body) => {
                        if let Err(e) = self.record_event(guard, body, now_ns) {
                            log::debug!("{e}");
                        }
                    }
                    Err(e) => log::warn!("bad FLOW_EVENT body from {guard}: {e}"),
                }
                None
            }
            Some(EventType::HeartbeatAck) => {
                if let Ok(b) = env.parse::<HeartbeatBody>(EventType::HeartbeatAck) {
                    self.heartbeat_ack(guard, b.seq, now_ns);
                }
                None
            }
            Some(EventType::PolicyAck) => {
                if let Ok(b) = env.parse::<PolicyAckBody>(EventType::PolicyAck) {
                    self.record_policy_ack(guard, b);
                }
                None
            }
            other => {
                log::warn!("unexpected event type {:?} ({}) from {guard}", other, env.event_type);
                None
            }
        }
    }

    /// Registers a guard. A known `(instance, function)` pair gets its
    /// existing id back without counting against the fan-out limit.
    pub fn handle_register(&self, instance_id: &str, function: &str, now_ns: u64) -> Result<RegisterGrant, RegisterRejection> {
        let app = *self
            .app_of
            .get(function)
            .ok_or_else(|| RegisterRejection::UnknownFunction { function: function.to_string() })?;
        let id = crate::protocol::derive_guard_id(instance_id, function);
        let mut reg = lock(&self.registry);
        if !reg.guards.contains_key(&id) {
            let live = reg.live.get(function).copied().unwrap_or(0);
            if let Some(&limit) = self.config.fan_out.get(function) {
                if live >= limit {
                    return Err(RegisterRejection::FanOutExceeded { function: function.to_string(), limit });
                }
            }
            reg.guards.insert(
                id,
                GuardEntry {
                    instance: instance_id.to_string(),
                    function: function.to_string(),
                    app,
                    last_seen_ns: now_ns,
                    outbox: Vec::new(),
                },
            );
            *reg.live.entry(function.to_string()).or_default() += 1;
        }
        drop(reg);
        let cfg = &self.config.applications[app];
        Ok(RegisterGrant {
            guard_id: id,
            application: cfg.name.clone(),
            fail_mode: cfg.fail_mode,
            policy: cfg.policies.as_ref().and_then(|p| p.local.get(function).cloned()),
            credential: cfg.credentials.get(function).cloned(),
        })
    }

    fn guard_info(&self, guard: GuardId) -> Option<(String, usize)> {
        lock(&self.registry).guards.get(&guard).map(|g| (g.function.clone(), g.app))
    }

    fn alarm(&self, kind: AlarmKind, app: Option<usize>, function: &str, guard: GuardId, now_ns: u64, detail: String) {
        log::warn!("alarm {kind:?} for {function}: {detail}");
        lock(&self.alarms).push(Alarm {
            kind,
            application: app.map(|a| self.config.applications[a].name.clone()),
            function: function.to_string(),
            guard,
            at_ns: now_ns,
            detail,
        });
    }

    fn new_request_id(&self, app: usize, state: &mut AppState) -> RequestId {
        let mut h = Sha256::new();
        h.update(self.config.applications[app].name.as_bytes());
        h.update([0u8]);
        h.update(state.next_request.to_be_bytes());
        state.next_request += 1;
        let mut id = [0u8; 16];
        id.copy_from_slice(&h.finalize()[..16]);
        RequestId(id)
    }

    /// Decides whether an execution that arrived without a valid tag may
    /// run, pairing service-triggered executions with their predecessor.
    pub fn decide(&self, guard: GuardId, req: &DecisionRequest, now_ns: u64) -> DecisionReply {
        let deny = |reason| DecisionReply { verdict: Verdict::Deny, tag: None, reason: Some(reason) };
        let Some((function, app)) = self.guard_info(guard) else {
            self.alarm(AlarmKind::UnknownGuard, None, &req.function, guard, now_ns, "decision request".into());
            return deny(DenyReason::NotLive);
        };
        let cfg = &self.config.applications[app];
        let mut state = lock(&self.apps[app]);
        let fresh = |state: &mut AppState| DecisionReply {
            verdict: Verdict::Allow,
            tag: Some(Tag { function: function.clone(), guard_id: guard, request_id: self.new_request_id(app, state) }),
            reason: None,
        };
        let Some(policies) = &cfg.policies else {
            return fresh(&mut state);
        };
        let global = &policies.global;
        let functions: BTreeSet<&str> = global
            .nodes
            .iter()
            .filter(|n| n.kind == GlobalNodeKind::Function)
            .map(|n| n.target.as_str())
            .collect();
        let source = req.source.as_str();
        let (alarm, reason, detail) = match classify_source(source, &functions, &cfg.topology) {
            SourceKind::Service => {
                let preds: Vec<&str> = global
                    .predecessors(&function, EdgeKind::Implicit)
                    .into_iter()
                    .filter(|(_, via)| *via == Some(source))
                    .map(|(p, _)| p)
                    .collect();
                for p in &preds {
                    if let Some(rec) = state.ledger.pair(&function, p, source) {
                        let request_id = match &rec.tag {
                            Some(t) => t.request_id,
                            None => self.new_request_id(app, &mut state),
                        };
                        return DecisionReply {
                            verdict: Verdict::Allow,
                            tag: Some(Tag { function: p.to_string(), guard_id: rec.guard, request_id }),
                            reason: None,
                        };
                    }
                }
                if global.is_entry_function(&function) {
                    return fresh(&mut state);
                }
                if preds.is_empty() {
                    (AlarmKind::UnexpectedSource, DenyReason::SourceMismatch, format!("{function} is never triggered by {source}"))
                } else {
                    (
                        AlarmKind::NoPredecessorAvailable,
                        DenyReason::NoPredecessorAvailable,
                        format!("no execution of {} sent to {source} before {function} started", preds.join("|")),
                    )
                }
            }
            SourceKind::External if global.is_entry_function(&function) => return fresh(&mut state),
            SourceKind::External => (
                AlarmKind::UnexpectedSource,
                DenyReason::SourceMismatch,
                format!("{function} is not an entry function but was started by {source}"),
            ),
            SourceKind::Function => (
                AlarmKind::UnexpectedSource,
                DenyReason::BadTag,
                format!("untagged message to {function} claims to come from {source}"),
            ),
        };
        drop(state);
        self.alarm(alarm, Some(app), &function, guard, now_ns, detail);
        deny(reason)
    }

    /// Appends a guard event to its application's log and updates the
    /// ledger and rate counters.
    pub fn record_event(&self, guard: GuardId, body: FlowEventBody, now_ns: u64) -> Result<(), ControllerError> {
        let Some((function, app)) = self.guard_info(guard) else {
            self.alarm(AlarmKind::UnknownGuard, None, &body.event.function, guard, now_ns, "flow event".into());
            return Err(ControllerError::UnknownGuard(guard));
        };
        let cfg = &self.config.applications[app];
        let allowed = body.decision == Verdict::Allow;
        let ev = &body.event;
        let mut edge_alarm = None;
        {
            let mut state = lock(&self.apps[app]);
            state.log.push(LogRecord {
                guard,
                event: ev.clone(),
                decision: body.decision,
                reason: body.reason,
                request_id: body.tag.as_ref().map(|t| t.request_id),
            });
            match ev.direction {
                Direction::In if allowed => {
                    state.ledger.start(&function, guard, body.tag.clone(), now_ns);
                    if let Some(p) = &cfg.policies {
                        let is_fn = p.global.has_function(&ev.url);
                        let linked = p
                            .global
                            .predecessors(&function, EdgeKind::Explicit)
                            .iter()
                            .any(|(from, _)| *from == ev.url);
                        if is_fn && !linked {
                            edge_alarm = Some(format!("{} called {function}", ev.url));
                        }
                    }
                }
                Direction::Send if allowed => {
                    if let Some(service) = cfg.topology.resolve(&ev.url) {
                        state.ledger.record_send(guard, service);
                    }
                }
                Direction::Out => state.ledger.complete(guard),
                _ => {}
            }
        }
        if let Some(detail) = edge_alarm {
            self.alarm(AlarmKind::UnexpectedEdge, Some(app), &function, guard, now_ns, detail);
        }
        if allowed && ev.direction == Direction::Send {
            let events = lock(&self.limiter).observe(&function, &ev.url, ev.op, now_ns);
            self.broadcast(&events);
        }
        Ok(())
    }

    fn broadcast(&self, events: &[RateEvent]) {
        if events.is_empty() {
            return;
        }
        let signals: Vec<(EventType, RateSignal)> = {
            let limiter = lock(&self.limiter);
            events
                .iter()
                .map(|ev| {
                    let (kind, i) = match *ev {
                        RateEvent::Stop(i) => (EventType::Stop, i),
                        RateEvent::Resume(i) => (EventType::Resume, i),
                    };
                    let e = limiter.entry(i);
                    (kind, RateSignal { entry: i, function: e.function.clone(), pattern: e.pattern.clone(), op: e.op })
                })
                .collect()
        };
        let mut reg = lock(&self.registry);
        for (kind, sig) in signals {
            log::info!("{kind:?} {} {} {}", sig.function, sig.op, sig.pattern);
            for (id, g) in reg.guards.iter_mut().filter(|(_, g)| g.function == sig.function) {
                g.outbox.push(EventEnvelope::json(*id, function_type::RATE_LIMIT, kind, &sig));
            }
        }
    }

    /// Sends RESUME for entries that have been quiet for a full window.
    pub fn tick(&self, now_ns: u64) {
        let events = lock(&self.limiter).tick(now_ns);
        self.broadcast(&events);
    }

    pub fn heartbeat_ack(&self, guard: GuardId, _seq: u64, now_ns: u64) {
        if let Some(g) = lock(&self.registry).guards.get_mut(&guard) {
            g.last_seen_ns = g.last_seen_ns.max(now_ns);
        }
    }

    /// One heartbeat round. Guards silent for `miss_threshold` periods
    /// are expired and free their fan-out slot; the rest get a heartbeat.
    pub fn heartbeat_sweep(&self, now_ns: u64) -> Vec<GuardId> {
        let hb = self.config.heartbeat;
        let deadline = u64::from(hb.miss_threshold) * hb.period_ms * 1_000_000;
        let mut reg = lock(&self.registry);
        reg.heartbeat_seq += 1;
        let seq = reg.heartbeat_seq;
        let mut expired = Vec::new();
        for (id, g) in reg.guards.iter_mut() {
            if now_ns.saturating_sub(g.last_seen_ns) >= deadline {
                expired.push(*id);
            } else {
                g.outbox.push(EventEnvelope::json(*id, function_type::CORE, EventType::Heartbeat, &HeartbeatBody { seq }));
            }
        }
        for id in &expired {
            if let Some(g) = reg.guards.remove(id) {
                log::info!("guard {id} ({} on {}) expired", g.function, g.instance);
                if let Some(n) = reg.live.get_mut(&g.function) {
                    *n = n.saturating_sub(1);
                }
            }
        }
        expired
    }

    /// Queues a new local policy for a guard. Returns the push version.
    pub fn push_policy(&self, guard: GuardId, policy: serde_json::Value) -> Result<u64, ControllerError> {
        let mut reg = lock(&self.registry);
        reg.policy_version += 1;
        let version = reg.policy_version;
        let g = reg.guards.get_mut(&guard).ok_or(ControllerError::UnknownGuard(guard))?;
        g.outbox.push(EventEnvelope::json(
            guard,
            function_type::FLOW_TRACKING,
            EventType::PolicyPush,
            &PolicyPushBody { version, policy },
        ));
        Ok(version)
    }

    fn record_policy_ack(&self, guard: GuardId, ack: PolicyAckBody) {
        if let Some((_, app)) = self.guard_info(guard) {
            lock(&self.apps[app]).policy_acks.push((guard, ack));
        }
    }

    /// Events queued for `guard` on its async channel.
    pub fn take_outbox(&self, guard: GuardId) -> Vec<EventEnvelope> {
        lock(&self.registry)
            .guards
            .get_mut(&guard)
            .map(|g| std::mem::take(&mut g.outbox))
            .unwrap_or_default()
    }

    pub fn is_registered(&self, guard: GuardId) -> bool {
        lock(&self.registry).guards.contains_key(&guard)
    }

    pub fn live_count(&self, function: &str) -> usize {
        lock(&self.registry).live.get(function).copied().unwrap_or(0)
    }

    pub fn alarms(&self) -> Vec<Alarm> {
        lock(&self.alarms).clone()
    }

    fn app_index(&self, application: &str) -> Option<usize> {
        self.config.applications.iter().position(|a| a.name == application)
    }

    pub fn log(&self, application: &str) -> Vec<LogRecord> {
        self.app_index(application).map(|i| lock(&self.apps[i]).log.clone()).unwrap_or_default()
    }

    pub fn policy_acks(&self, application: &str) -> Vec<(GuardId, PolicyAckBody)> {
        self.app_index(application)
            .map(|i| lock(&self.apps[i]).policy_acks.clone())
            .unwrap_or_default()
    }

    /// Runs `f` against an application's execution ledger.
    pub fn with_ledger<R>(&self, application: &str, f: impl FnOnce(&ExecutionLedger) -> R) -> Option<R> {
        self.app_index(application).map(|i| f(&lock(&self.apps[i]).ledger))
    }

    /// Writes every application's log as JSON lines.
    pub fn write_log(&self, w: &mut impl Write) -> io::Result<()> {
        for app in &self.apps {
            for rec in &lock(app).log {
                writeln!(w, "{}", rec.to_json_line())?;
            }
        }
        Ok(())
    }
}
