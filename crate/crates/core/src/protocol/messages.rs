use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::envelope::{EventEnvelope, EventType, GuardId};
use super::tag::Tag;
use super::ProtocolError;
use crate::credential::CredentialPolicy;
use crate::enforcer::{DenyReason, EnforcementMode, Verdict};
use crate::model::{FlowEvent, HttpOp, LocalFlowGraph};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub instance_id: String,
    pub function: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegisterRejection {
    FanOutExceeded { function: String, limit: usize },
    UnknownFunction { function: String },
}

/// Configuration handed to a guard at startup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterGrant {
    pub guard_id: GuardId,
    pub application: String,
    pub fail_mode: EnforcementMode,
    #[serde(default)]
    pub policy: Option<LocalFlowGraph>,
    #[serde(default)]
    pub credential: Option<CredentialPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RegisterReply {
    Ok(RegisterGrant),
    Rejected(RegisterRejection),
}

/// Body of FLOW_EVENT: one intercepted event and what the guard did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEventBody {
    pub event: FlowEvent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<Tag>,
    pub decision: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<DenyReason>,
}

/// Asks whether an execution started without a valid tag may proceed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub function: String,
    pub source: String,
    pub event: FlowEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionReply {
    pub verdict: Verdict,
    /// Tag the execution continues under.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<Tag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<DenyReason>,
}

/// STOP and RESUME body: the rate-limit entry concerned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateSignal {
    pub entry: usize,
    pub function: String,
    pub pattern: String,
    pub op: HttpOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatBody {
    pub seq: u64,
}

/// New local policy. Kept as raw JSON so the guard decides validity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPushBody {
    pub version: u64,
    pub policy: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyAckBody {
    pub version: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EventEnvelope {
    /// Envelope with a JSON body.
    pub fn json<T: Serialize>(guard_id: GuardId, function_type: u16, kind: EventType, body: &T) -> Self {
        let body = serde_json::to_vec(body).expect("message bodies serialize");
        EventEnvelope::new(guard_id, function_type, kind, body)
    }

    /// Parses the body after checking the event type.
    pub fn parse<T: DeserializeOwned>(&self, expected: EventType) -> Result<T, ProtocolError> {
        if self.event_type != expected.code() {
            return Err(ProtocolError::UnexpectedEvent { expected: expected.code(), got: self.event_type });
        }
        serde_json::from_slice(&self.body).map_err(|e| ProtocolError::Body(e.to_string()))
    }
}
