use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Mutex};
use std::thread;

use super::envelope::{function_type, EventEnvelope, EventType, GuardId};
use super::messages::HeartbeatBody;
use super::{ControllerLink, ProtocolError};

/// Environment variable naming the controller address.
pub const CONTROLLER_ENV: &str = "SECLAMBDA_CONTROLLER";

/// Controller address from an explicit flag or the environment.
pub fn controller_addr(flag: Option<&str>) -> Option<String> {
    flag.map(str::to_string).or_else(|| std::env::var(CONTROLLER_ENV).ok())
}

/// Two long-lived TCP connections to the controller. Each message is one
/// envelope, delimited by its own body length.
pub struct TcpLink {
    sync: TcpStream,
    log: Arc<Mutex<TcpStream>>,
    inbox: Receiver<EventEnvelope>,
}

fn write_locked(stream: &Mutex<TcpStream>, env: &EventEnvelope) -> std::io::Result<()> {
    let mut s = stream.lock().unwrap_or_else(|p| p.into_inner());
    env.write_to(&mut *s)
}

impl TcpLink {
    pub fn connect(addr: impl ToSocketAddrs + Clone) -> Result<Self, ProtocolError> {
        let unreachable = |e: std::io::Error| ProtocolError::ControllerUnreachable(e.to_string());
        let sync = TcpStream::connect(addr.clone()).map_err(unreachable)?;
        let log = TcpStream::connect(addr).map_err(unreachable)?;
        sync.set_nodelay(true)?;
        log.set_nodelay(true)?;
        let mut reader = log.try_clone()?;
        let log = Arc::new(Mutex::new(log));
        let writer = Arc::clone(&log);
        let (tx, inbox) = mpsc::channel();
        // Heartbeats are answered here so that an idle guard stays alive.
        thread::spawn(move || {
            while let Ok(Some(env)) = EventEnvelope::read_from(&mut reader) {
                if env.kind() == Some(EventType::Heartbeat) {
                    let ack = EventEnvelope { event_type: EventType::HeartbeatAck.code(), ..env };
                    if write_locked(&writer, &ack).is_err() {
                        break;
                    }
                    continue;
                }
                if tx.send(env).is_err() {
                    break;
                }
            }
        });
        Ok(TcpLink { sync, log, inbox })
    }
}

// The reader thread holds a clone of the log socket, so closing it takes an
// explicit shutdown.
impl Drop for TcpLink {
    fn drop(&mut self) {
        let _ = self.sync.shutdown(Shutdown::Both);
        let log = self.log.lock().unwrap_or_else(|p| p.into_inner());
        let _ = log.shutdown(Shutdown::Both);
    }
}

impl ControllerLink for TcpLink {
    fn request(&mut self, env: EventEnvelope) -> Result<EventEnvelope, ProtocolError> {
        env.write_to(&mut self.sync)?;
        EventEnvelope::read_from(&mut self.sync)?
            .ok_or_else(|| ProtocolError::ControllerUnreachable("connection closed".into()))
    }

    fn notify(&mut self, env: EventEnvelope) -> Result<(), ProtocolError> {
        write_locked(&self.log, &env)?;
        Ok(())
    }

    fn poll(&mut self) -> Result<Vec<EventEnvelope>, ProtocolError> {
        Ok(self.inbox.try_iter().collect())
    }

    /// Binds the log connection to the guard so pushes can flow back on it.
    fn attach(&mut self, guard: GuardId) -> Result<(), ProtocolError> {
        let hello = EventEnvelope::json(guard, function_type::CORE, EventType::HeartbeatAck, &HeartbeatBody { seq: 0 });
        self.notify(hello)
    }
}
