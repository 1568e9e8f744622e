use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::envelope::{GuardId, RequestId};

pub const TAG_HEADER: &str = "x-seclambda-tag";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad tag format: {0}")]
pub struct BadTagFormat(pub String);

/// Identity carried by every outgoing message of a tracked execution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub function: String,
    pub guard_id: GuardId,
    pub request_id: RequestId,
}

impl Tag {
    pub fn encode(&self) -> String {
        format!("{};{};{}", self.function, self.guard_id, self.request_id)
    }

    pub fn decode(value: &str) -> Result<Tag, BadTagFormat> {
        let mut parts = value.trim().split(';');
        let (Some(function), Some(g), Some(r), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(BadTagFormat(format!("expected 3 fields in {value:?}")));
        };
        if function.is_empty() || function.contains(['\r', '\n']) {
            return Err(BadTagFormat("empty or multi-line function name".into()));
        }
        let hex32 = |s: &str| s.len() == 32 && s.bytes().all(|b| b.is_ascii_hexdigit());
        if !hex32(g) || !hex32(r) {
            return Err(BadTagFormat("ids must be 32 hex characters".into()));
        }
        Ok(Tag {
            function: function.to_string(),
            guard_id: g.parse().map_err(BadTagFormat)?,
            request_id: r.parse().map_err(BadTagFormat)?,
        })
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

fn first_line_end(msg: &[u8]) -> Option<usize> {
    msg.windows(2).position(|w| w == b"\r\n").map(|p| p + 2)
}

/// Adds the tag header directly after the start line of an HTTP message.
pub fn insert_tag(msg: &[u8], tag: &Tag) -> Result<Vec<u8>, BadTagFormat> {
    let at = first_line_end(msg).ok_or_else(|| BadTagFormat("message has no start line".into()))?;
    let line = format!("{TAG_HEADER}: {}\r\n", tag.encode());
    let mut out = Vec::with_capacity(msg.len() + line.len());
    out.extend_from_slice(&msg[..at]);
    out.extend_from_slice(line.as_bytes());
    out.extend_from_slice(&msg[at..]);
    Ok(out)
}

/// Removes the first tag header line, returning the parsed tag and the
/// message without it. Messages with no tag come back unchanged.
pub fn strip_tag(msg: &[u8]) -> Result<(Option<Tag>, Vec<u8>), BadTagFormat> {
    let Some(mut pos) = first_line_end(msg) else {
        return Ok((None, msg.to_vec()));
    };
    loop {
        let rest = &msg[pos..];
        let Some(len) = first_line_end(rest) else {
            break;
        };
        let line = &rest[..len - 2];
        if line.is_empty() {
            break;
        }
        if let Some(value) = header_value(line, TAG_HEADER) {
            let tag = Tag::decode(value)?;
            let mut out = Vec::with_capacity(msg.len() - len);
            out.extend_from_slice(&msg[..pos]);
            out.extend_from_slice(&msg[pos + len..]);
            return Ok((Some(tag), out));
        }
        pos += len;
    }
    Ok((None, msg.to_vec()))
}

fn header_value<'a>(line: &'a [u8], name: &str) -> Option<&'a str> {
    let line = std::str::from_utf8(line).ok()?;
    let (k, v) = line.split_once(':')?;
    k.trim().eq_ignore_ascii_case(name).then(|| v.trim())
}
