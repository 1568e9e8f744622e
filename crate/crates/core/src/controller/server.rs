use std::io;
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::Controller;
use crate::clock::Clock;
use crate::protocol::{ControllerLink, EventEnvelope, EventType, GuardId, ProtocolError};

/// Guard link that calls a controller in the same process.
pub struct InProcessLink {
    controller: Arc<Controller>,
    clock: Arc<dyn Clock>,
    guard: Option<GuardId>,
}

impl InProcessLink {
    pub fn new(controller: Arc<Controller>, clock: Arc<dyn Clock>) -> Self {
        InProcessLink { controller, clock, guard: None }
    }
}

impl ControllerLink for InProcessLink {
    fn request(&mut self, env: EventEnvelope) -> Result<EventEnvelope, ProtocolError> {
        // Round-trip through the codec so both sides only ever see bytes.
        let env = EventEnvelope::decode(&env.encode())?;
        let reply = self
            .controller
            .handle(&env, self.clock.now_ns())
            .ok_or_else(|| ProtocolError::ControllerUnreachable(format!("no reply to event type {}", env.event_type)))?;
        Ok(EventEnvelope::decode(&reply.encode())?)
    }

    fn notify(&mut self, env: EventEnvelope) -> Result<(), ProtocolError> {
        let env = EventEnvelope::decode(&env.encode())?;
        self.controller.handle(&env, self.clock.now_ns());
        Ok(())
    }

    fn poll(&mut self) -> Result<Vec<EventEnvelope>, ProtocolError> {
        Ok(self.guard.map(|g| self.controller.take_outbox(g)).unwrap_or_default())
    }

    fn attach(&mut self, guard: GuardId) -> Result<(), ProtocolError> {
        self.guard = Some(guard);
        Ok(())
    }
}

fn is_async(kind: Option<EventType>) -> bool {
    matches!(kind, Some(EventType::FlowEvent | EventType::HeartbeatAck | EventType::PolicyAck))
}

fn handle_connection(controller: Arc<Controller>, clock: Arc<dyn Clock>, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let mut writer = stream;
    let mut pusher_started = false;
    while let Some(env) = EventEnvelope::read_from(&mut reader)? {
        if let Some(reply) = controller.handle(&env, clock.now_ns()) {
            reply.write_to(&mut writer)?;
        }
        // The first one-way event of a guard marks its log connection,
        // which also carries controller pushes back.
        if !pusher_started && is_async(env.kind()) && env.guard_id != GuardId::default() {
            pusher_started = true;
            let guard = env.guard_id;
            let controller = Arc::clone(&controller);
            let mut out = writer.try_clone()?;
            thread::spawn(move || loop {
                for env in controller.take_outbox(guard) {
                    if env.write_to(&mut out).is_err() {
                        return;
                    }
                }
                if !controller.is_registered(guard) {
                    return;
                }
                thread::sleep(Duration::from_millis(20));
            });
        }
    }
    Ok(())
}

/// Serves guards on `listener` until the process exits. A background
/// thread runs heartbeats and rate-limit ticks every heartbeat period.
pub fn serve(controller: Arc<Controller>, listener: TcpListener, clock: Arc<dyn Clock>) -> io::Result<()> {
    let period = Duration::from_millis(controller.config().heartbeat.period_ms);
    {
        let controller = Arc::clone(&controller);
        let clock = Arc::clone(&clock);
        thread::spawn(move || loop {
            thread::sleep(period);
            let now = clock.now_ns();
            for g in controller.heartbeat_sweep(now) {
                log::info!("expired guard {g}");
            }
            controller.tick(now);
        });
    }
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let controller = Arc::clone(&controller);
        let clock = Arc::clone(&clock);
        thread::spawn(move || {
            if let Err(e) = handle_connection(controller, clock, stream) {
                log::debug!("connection closed: {e}");
            }
        });
    }
    Ok(())
}
