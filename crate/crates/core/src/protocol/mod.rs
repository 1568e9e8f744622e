//! Guard/controller wire format and the registration handshake.

mod envelope;
mod messages;
mod tag;
mod transport;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use envelope::{
    derive_guard_id, function_type, CodecError, EventEnvelope, EventType, GuardId, LocalEnvelope,
    RequestId, HEADER_LEN, LOCAL_HEADER_LEN, MAX_BODY_LEN,
};
pub use messages::{
    DecisionReply, DecisionRequest, FlowEventBody, HeartbeatBody, PolicyAckBody, PolicyPushBody,
    RateSignal, RegisterGrant, RegisterRejection, RegisterReply, RegisterRequest,
};
pub use tag::{insert_tag, strip_tag, BadTagFormat, Tag, TAG_HEADER};
pub use transport::{controller_addr, TcpLink, CONTROLLER_ENV};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("malformed body: {0}")]
    Body(String),
    #[error("expected event type {expected}, got {got}")]
    UnexpectedEvent { expected: u16, got: u16 },
    #[error("controller unreachable: {0}")]
    ControllerUnreachable(String),
    #[error("fan-out limit {limit} reached for {function}")]
    FanOutExceeded { function: String, limit: usize },
    #[error("function {0:?} is not part of any application")]
    UnknownFunction(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Guard side of the two controller channels.
pub trait ControllerLink: Send {
    /// Synchronous request/reply (decision path).
    fn request(&mut self, env: EventEnvelope) -> Result<EventEnvelope, ProtocolError>;
    /// One-way event (log path).
    fn notify(&mut self, env: EventEnvelope) -> Result<(), ProtocolError>;
    /// Events the controller pushed since the last poll.
    fn poll(&mut self) -> Result<Vec<EventEnvelope>, ProtocolError>;
    /// Called once registration assigned `guard`.
    fn attach(&mut self, _guard: GuardId) -> Result<(), ProtocolError> {
        Ok(())
    }
}

/// What a guard keeps after registering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub guard_id: GuardId,
    pub instance_id: String,
    pub function: String,
    pub application: String,
}

/// Announces a new guard and returns its identity and startup configuration.
pub fn register(
    link: &mut dyn ControllerLink,
    instance_id: &str,
    function: &str,
) -> Result<(RegistrationRecord, RegisterGrant), ProtocolError> {
    let req = RegisterRequest { instance_id: instance_id.to_string(), function: function.to_string() };
    let env = EventEnvelope::json(GuardId::default(), function_type::CORE, EventType::Register, &req);
    let reply: RegisterReply = link.request(env)?.parse(EventType::RegisterAck)?;
    match reply {
        RegisterReply::Ok(grant) => {
            link.attach(grant.guard_id)?;
            let record = RegistrationRecord {
                guard_id: grant.guard_id,
                instance_id: instance_id.to_string(),
                function: function.to_string(),
                application: grant.application.clone(),
            };
            Ok((record, grant))
        }
        RegisterReply::Rejected(RegisterRejection::FanOutExceeded { function, limit }) => {
            Err(ProtocolError::FanOutExceeded { function, limit })
        }
        RegisterReply::Rejected(RegisterRejection::UnknownFunction { function }) => {
            Err(ProtocolError::UnknownFunction(function))
        }
    }
}
