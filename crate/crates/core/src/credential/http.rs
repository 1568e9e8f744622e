//! Just enough HTTP/1.1 to find headers and the body without touching
//! bytes that are not rewritten.

use super::CredentialError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpMessage {
    /// Request or status line without the trailing CRLF.
    pub start_line: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpMessage {
    pub fn parse(bytes: &[u8]) -> Result<Self, CredentialError> {
        let head_end = bytes
            .windows(4)
            .position(|w| w == b"\r\n\r\n")
            .ok_or_else(|| CredentialError::Http("missing header terminator".into()))?;
        let head = std::str::from_utf8(&bytes[..head_end])
            .map_err(|_| CredentialError::Http("header is not utf-8".into()))?;
        let mut lines = head.split("\r\n");
        let start_line = lines.next().unwrap_or_default().to_string();
        if start_line.is_empty() {
            return Err(CredentialError::Http("empty start line".into()));
        }
        let mut headers = Vec::new();
        for line in lines {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| CredentialError::Http(format!("bad header line {line:?}")))?;
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(HttpMessage { start_line, headers, body: bytes[head_end + 4..].to_vec() })
    }

    pub fn request(method: &str, target: &str, headers: &[(&str, &str)], body: &[u8]) -> Self {
        let mut m = HttpMessage {
            start_line: format!("{method} {target} HTTP/1.1"),
            headers: headers.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            body: body.to_vec(),
        };
        m.set_header("Content-Length", &body.len().to_string());
        m
    }

    pub fn response(status: u16, headers: &[(&str, &str)], body: &[u8]) -> Self {
        let mut m = HttpMessage {
            start_line: format!("HTTP/1.1 {status} {}", if status < 400 { "OK" } else { "Error" }),
            headers: headers.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            body: body.to_vec(),
        };
        m.set_header("Content-Length", &body.len().to_string());
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.body.len() + 128);
        out.extend_from_slice(self.start_line.as_bytes());
        out.extend_from_slice(b"\r\n");
        for (k, v) in &self.headers {
            out.extend_from_slice(format!("{k}: {v}\r\n").as_bytes());
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&self.body);
        out
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn set_header(&mut self, name: &str, value: &str) {
        match self.headers.iter_mut().find(|(k, _)| k.eq_ignore_ascii_case(name)) {
            Some(h) => h.1 = value.to_string(),
            None => self.headers.push((name.to_string(), value.to_string())),
        }
    }

    /// Replaces the body and keeps Content-Length consistent.
    pub fn set_body(&mut self, body: Vec<u8>) {
        self.body = body;
        let len = self.body.len().to_string();
        self.set_header("Content-Length", &len);
    }

    pub fn method(&self) -> Option<&str> {
        let first = self.start_line.split(' ').next()?;
        (!first.starts_with("HTTP/")).then_some(first)
    }

    /// Operation names the message can be matched by: the method and, for
    /// AWS-style APIs, the action named in `X-Amz-Target`.
    pub fn operations(&self) -> Vec<&str> {
        let mut ops = Vec::new();
        if let Some(m) = self.method() {
            ops.push(m);
        }
        if let Some(t) = self.header("X-Amz-Target") {
            ops.push(t.rsplit('.').next().unwrap_or(t));
        }
        ops
    }
}
