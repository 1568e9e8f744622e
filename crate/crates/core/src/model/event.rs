use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Request sent by the function to another endpoint.
    Send,
    /// Response to an earlier `Send`, same session.
    Recv,
    /// The message that started the execution.
    In,
    /// The message returned by the execution.
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HttpOp {
    #[serde(rename = "GET")]
    Get,
    #[serde(rename = "POST")]
    Post,
    #[serde(rename = "PUT")]
    Put,
    #[serde(rename = "DELETE")]
    Delete,
    #[serde(rename = "OTHER")]
    Other,
}

impl HttpOp {
    pub fn as_str(self) -> &'static str {
        match self {
            HttpOp::Get => "GET",
            HttpOp::Post => "POST",
            HttpOp::Put => "PUT",
            HttpOp::Delete => "DELETE",
            HttpOp::Other => "OTHER",
        }
    }

    /// Maps an HTTP method token; anything unrecognised becomes `Other`.
    pub fn from_method(method: &str) -> Self {
        match method.to_ascii_uppercase().as_str() {
            "GET" => HttpOp::Get,
            "POST" => HttpOp::Post,
            "PUT" => HttpOp::Put,
            "DELETE" => HttpOp::Delete,
            _ => HttpOp::Other,
        }
    }
}

impl fmt::Display for HttpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HttpOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "GET" => Ok(HttpOp::Get),
            "POST" => Ok(HttpOp::Post),
            "PUT" => Ok(HttpOp::Put),
            "DELETE" => Ok(HttpOp::Delete),
            "OTHER" => Ok(HttpOp::Other),
            _ => Err(format!("unknown http op {s:?}")),
        }
    }
}

/// One observed operation of a function instance.
///
/// For `In` events `url` holds the declared source of the message (a
/// function name, a service name, `user`, or `?` when unknown). For `Out`
/// events it holds the destination the result is returned to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowEvent {
    #[serde(rename = "ts")]
    pub timestamp: u64,
    #[serde(rename = "fn")]
    pub function: String,
    #[serde(rename = "inst")]
    pub instance: String,
    #[serde(rename = "dir")]
    pub direction: Direction,
    pub url: String,
    pub op: HttpOp,
    #[serde(rename = "sess")]
    pub session: String,
    #[serde(rename = "digest", default, skip_serializing_if = "Option::is_none")]
    pub payload_digest: Option<String>,
}

impl FlowEvent {
    pub fn validate(&self) -> Result<(), String> {
        if let Some(d) = &self.payload_digest {
            if d.len() != 32 || !d.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(format!("digest must be 32 hex chars, got {d:?}"));
            }
        }
        if self.function.is_empty() {
            return Err("empty function name".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TraceLogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Reads a newline-delimited JSON trace log. Blank lines are skipped.
pub fn read_trace_log(path: impl AsRef<Path>) -> Result<Vec<FlowEvent>, TraceLogError> {
    let file = File::open(path)?;
    parse_trace_log(BufReader::new(file))
}

pub fn parse_trace_log(reader: impl BufRead) -> Result<Vec<FlowEvent>, TraceLogError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let event: FlowEvent = serde_json::from_str(&line).map_err(|e| TraceLogError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        event
            .validate()
            .map_err(|message| TraceLogError::Parse { line: lineno, message })?;
        events.push(event);
    }
    Ok(events)
}

pub fn write_trace_log(mut out: impl Write, events: &[FlowEvent]) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
