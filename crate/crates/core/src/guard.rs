//! The per-instance guard: intercepts every message of a function, runs
//! the local policy engine and the credential function, tags outgoing
//! messages, and reports to the controller.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::credential::{CredentialFunction, CredentialPolicy};
use crate::enforcer::{Action, Decision, DenyReason, EnforcementMode, EnforcementState, PolicyEngine, Verdict};
use crate::model::{normalize_url, pattern_matches, Direction, FlowEvent, HttpOp, LocalFlowGraph};
use crate::protocol::{
    function_type, insert_tag, register, strip_tag, ControllerLink, DecisionReply, DecisionRequest,
    EventEnvelope, EventType, FlowEventBody, GuardId, HeartbeatBody, PolicyAckBody, PolicyPushBody,
    ProtocolError, RateSignal, RegistrationRecord, Tag,
};

struct Execution {
    state: Option<EnforcementState>,
    tag: Option<Tag>,
    credential: Option<CredentialFunction>,
    live: bool,
}

pub struct Guard {
    record: RegistrationRecord,
    link: Box<dyn ControllerLink>,
    clock: Arc<dyn Clock>,
    mode: EnforcementMode,
    engine: Option<PolicyEngine>,
    /// Pushed policy, installed when the next execution starts.
    staged: Option<LocalFlowGraph>,
    credential: Option<CredentialPolicy>,
    exec: Option<Execution>,
    stopped: Vec<RateSignal>,
    executions: u64,
}

fn digest(payload: &[u8]) -> String {
    hex::encode(&Sha256::digest(payload)[..16])
}

impl Guard {
    /// Registers with the controller and loads the startup configuration.
    pub fn start(
        mut link: Box<dyn ControllerLink>,
        clock: Arc<dyn Clock>,
        instance_id: &str,
        function: &str,
    ) -> Result<Guard, ProtocolError> {
        let (record, grant) = register(link.as_mut(), instance_id, function)?;
        let engine = match &grant.policy {
            Some(g) => Some(PolicyEngine::new(g).map_err(|e| ProtocolError::Body(e.to_string()))?),
            None => None,
        };
        Ok(Guard {
            record,
            link,
            clock,
            mode: grant.fail_mode,
            engine,
            staged: None,
            credential: grant.credential,
            exec: None,
            stopped: Vec::new(),
            executions: 0,
        })
    }

    pub fn guard_id(&self) -> GuardId {
        self.record.guard_id
    }

    pub fn function(&self) -> &str {
        &self.record.function
    }

    pub fn record(&self) -> &RegistrationRecord {
        &self.record
    }

    pub fn mode(&self) -> EnforcementMode {
        self.mode
    }

    pub fn has_policy(&self) -> bool {
        self.engine.is_some()
    }

    pub fn current_tag(&self) -> Option<&Tag> {
        self.exec.as_ref().and_then(|e| e.tag.as_ref())
    }

    pub fn is_stopped(&self, url: &str, op: HttpOp) -> bool {
        self.stopped.iter().any(|s| s.op == op && pattern_matches(&s.pattern, url))
    }

    fn verdict(&self, reason: DenyReason) -> Decision {
        match self.mode {
            EnforcementMode::Closed => Decision::deny(reason),
            EnforcementMode::Open => Decision { verdict: Verdict::Allow, action: None, reason: Some(reason) },
        }
    }

    fn event(&self, direction: Direction, url: &str, op: HttpOp, session: &str, payload: &[u8]) -> FlowEvent {
        FlowEvent {
            timestamp: self.clock.now_ns(),
            function: self.record.function.clone(),
            instance: self.record.instance_id.clone(),
            direction,
            url: url.to_string(),
            op,
            session: session.to_string(),
            payload_digest: Some(digest(payload)),
        }
    }

    fn report(&mut self, event: FlowEvent, decision: &Decision) {
        let body = FlowEventBody {
            event,
            tag: self.current_tag().cloned(),
            decision: decision.verdict,
            reason: decision.reason,
        };
        let env = EventEnvelope::json(self.guard_id(), function_type::FLOW_TRACKING, EventType::FlowEvent, &body);
        if let Err(e) = self.link.notify(env) {
            log::warn!("guard {}: event not delivered: {e}", self.guard_id());
        }
    }

    /// Handles pushed controller events. Returns how many were processed.
    pub fn poll(&mut self) -> usize {
        let pushed = match self.link.poll() {
            Ok(p) => p,
            Err(e) => {
                log::warn!("guard {}: poll failed: {e}", self.guard_id());
                return 0;
            }
        };
        let n = pushed.len();
        for env in pushed {
            match env.kind() {
                Some(EventType::Heartbeat) => {
                    if let Ok(hb) = env.parse::<HeartbeatBody>(EventType::Heartbeat) {
                        let ack = EventEnvelope::json(self.guard_id(), function_type::CORE, EventType::HeartbeatAck, &hb);
                        let _ = self.link.notify(ack);
                    }
                }
                Some(EventType::Stop) => {
                    if let Ok(sig) = env.parse::<RateSignal>(EventType::Stop) {
                        if !self.stopped.iter().any(|s| s.entry == sig.entry) {
                            self.stopped.push(sig);
                        }
                    }
                }
                Some(EventType::Resume) => {
                    if let Ok(sig) = env.parse::<RateSignal>(EventType::Resume) {
                        self.stopped.retain(|s| s.entry != sig.entry);
                    }
                }
                Some(EventType::PolicyPush) => {
                    if let Ok(push) = env.parse::<PolicyPushBody>(EventType::PolicyPush) {
                        let ack = self.stage_policy(push);
                        let env = EventEnvelope::json(self.guard_id(), function_type::FLOW_TRACKING, EventType::PolicyAck, &ack);
                        let _ = self.link.notify(env);
                    }
                }
                other => log::warn!("guard {}: ignoring pushed event {other:?}", self.guard_id()),
            }
        }
        n
    }

    fn stage_policy(&mut self, push: PolicyPushBody) -> PolicyAckBody {
        let checked = serde_json::from_value::<LocalFlowGraph>(push.policy)
            .map_err(|e| e.to_string())
            .and_then(|g| {
                g.validate().map_err(|e| e.to_string())?;
                if g.function != self.record.function {
                    return Err(format!("policy is for {}, not {}", g.function, self.record.function));
                }
                Ok(g)
            });
        match checked {
            Ok(g) => {
                self.staged = Some(g);
                PolicyAckBody { version: push.version, ok: true, error: None }
            }
            Err(error) => PolicyAckBody { version: push.version, ok: false, error: Some(error) },
        }
    }

    fn install_staged(&mut self) {
        if let Some(g) = self.staged.take() {
            match PolicyEngine::new(&g) {
                Ok(e) => self.engine = Some(e),
                Err(e) => log::warn!("guard {}: staged policy rejected: {e}", self.guard_id()),
            }
        }
    }

    fn ask_controller(&mut self, source: &str, event: &FlowEvent) -> Result<DecisionReply, ProtocolError> {
        let req = DecisionRequest { function: self.record.function.clone(), source: source.to_string(), event: event.clone() };
        let env = EventEnvelope::json(self.guard_id(), function_type::FLOW_TRACKING, EventType::DecisionReq, &req);
        self.link.request(env)?.parse(EventType::DecisionResp)
    }

    /// The message that starts an execution (`m_in`). `source` is the
    /// declared sender; a valid tag in the message overrides it.
    pub fn on_invoke(&mut self, source: &str, op: HttpOp, session: &str, message: &[u8]) -> Decision {
        self.poll();
        self.install_staged();
        self.executions += 1;
        let (tag, plain, bad_tag) = match strip_tag(message) {
            Ok((tag, plain)) => (tag, plain, false),
            Err(_) => (None, message.to_vec(), true),
        };
        let source = tag.as_ref().map(|t| t.function.clone()).unwrap_or_else(|| source.to_string());
        let event = self.event(Direction::In, &source, op, session, &plain);

        let mut decision = Decision::allow();
        let mut state = None;
        match &self.engine {
            _ if bad_tag => decision = self.verdict(DenyReason::BadTag),
            None => decision = self.verdict(DenyReason::NoPolicy),
            Some(engine) => match engine.begin(&source, self.mode) {
                Ok(s) => state = Some(s),
                Err(_) => {
                    decision = self.verdict(DenyReason::SourceMismatch);
                    state = Some(engine.begin_escalated(self.mode));
                }
            },
        }

        let mut own_tag = None;
        if decision.is_allow() {
            let needs_check = state.as_ref().is_some_and(|s| s.needs_controller_check);
            match tag {
                Some(t) if !needs_check => own_tag = Some(t.request_id),
                _ => match self.ask_controller(&source, &event) {
                    Ok(reply) => {
                        own_tag = reply.tag.map(|t| t.request_id);
                        if reply.verdict == Verdict::Deny {
                            decision = self.verdict(reply.reason.unwrap_or(DenyReason::NoPredecessorAvailable));
                        }
                    }
                    Err(e) => {
                        log::warn!("guard {}: {e}", self.guard_id());
                        decision = self.verdict(DenyReason::ControllerUnavailable);
                    }
                },
            }
        }

        let credential = self.credential.clone().and_then(|p| {
            let seed = u64::from_be_bytes(self.record.guard_id.0[..8].try_into().expect("8 bytes")) ^ self.executions;
            CredentialFunction::new(p, seed).ok()
        });
        self.exec = Some(Execution {
            state,
            tag: own_tag.map(|request_id| Tag {
                function: self.record.function.clone(),
                guard_id: self.record.guard_id,
                request_id,
            }),
            credential,
            live: decision.is_allow(),
        });
        self.report(event, &decision);
        if plain.len() != message.len() {
            decision = decision.with_action(Action::UpdateMessage(plain));
        }
        decision
    }

    /// An outgoing request. On allow the action carries the bytes to put
    /// on the wire: credentials filled in and the tag header added.
    pub fn on_send(&mut self, url: &str, op: HttpOp, session: &str, message: &[u8]) -> Decision {
        self.poll();
        let url = normalize_url(url).unwrap_or_else(|_| url.to_string());
        let mut out = message.to_vec();
        let mut decision = if self.is_stopped(&url, op) {
            Decision::deny(DenyReason::RateLimited)
        } else {
            let mode = self.mode;
            match self.exec.as_mut() {
                Some(ex) if ex.live => match (&self.engine, ex.state.as_mut()) {
                    (Some(engine), Some(state)) => engine.step(state, &url, op),
                    _ => match mode {
                        EnforcementMode::Closed => Decision::deny(DenyReason::NoPolicy),
                        EnforcementMode::Open => {
                            Decision { verdict: Verdict::Allow, action: None, reason: Some(DenyReason::NoPolicy) }
                        }
                    },
                },
                _ => self.verdict(DenyReason::NotLive),
            }
        };
        if decision.is_allow() {
            if let Some(cf) = self.exec.as_mut().and_then(|e| e.credential.as_mut()) {
                match cf.on_send(session, &url, &out) {
                    Ok(Decision { action: Some(Action::UpdateMessage(m)), .. }) => out = m,
                    Ok(_) => {}
                    Err(e) => {
                        log::warn!("guard {}: {e}", self.record.guard_id);
                        decision = Decision::deny(DenyReason::CredentialFailure);
                    }
                }
            }
        }
        if decision.is_allow() {
            if let Some(tag) = self.current_tag() {
                if let Ok(tagged) = insert_tag(&out, tag) {
                    out = tagged;
                }
            }
        }
        let event = self.event(Direction::Send, &url, op, session, message);
        self.report(event, &decision);
        if decision.is_allow() && out != message {
            decision = decision.with_action(Action::UpdateMessage(out));
        }
        decision
    }

    /// A response to one of this execution's requests.
    pub fn on_recv(&mut self, url: &str, op: HttpOp, session: &str, message: &[u8]) -> Decision {
        let url = normalize_url(url).unwrap_or_else(|_| url.to_string());
        let mut decision = Decision::allow();
        let mut out = message.to_vec();
        if let Some(cf) = self.exec.as_mut().and_then(|e| e.credential.as_mut()) {
            match cf.on_recv(session, message) {
                Ok(Decision { action: Some(Action::UpdateMessage(m)), .. }) => out = m,
                Ok(_) => {}
                Err(e) => {
                    log::warn!("guard {}: {e}", self.record.guard_id);
                    decision = Decision::deny(DenyReason::CredentialFailure);
                }
            }
        }
        let event = self.event(Direction::Recv, &url, op, session, &out);
        self.report(event, &decision);
        if decision.is_allow() && out != message {
            decision = decision.with_action(Action::UpdateMessage(out));
        }
        decision
    }

    /// The execution returns its result to `destination`.
    pub fn on_return(&mut self, destination: &str, op: HttpOp, session: &str, message: &[u8]) -> Decision {
        self.poll();
        let decision = match self.exec.as_mut() {
            Some(ex) if ex.live => match (&self.engine, ex.state.as_mut()) {
                (Some(engine), Some(state)) => engine.end(state),
                _ => Decision::allow(),
            },
            _ => self.verdict(DenyReason::NotLive),
        };
        let event = self.event(Direction::Out, destination, op, session, message);
        self.report(event, &decision);
        // The vault dies with the execution.
        self.exec = None;
        decision
    }
}
