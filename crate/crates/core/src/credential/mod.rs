//! Credential management: functions only ever see placeholder credentials
//! and obfuscated tokens; the guard swaps in real values on the way out
//! and swaps them back on the way in.

mod http;
mod template;

use std::collections::{BTreeMap, HashMap};

use rand::distributions::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::bytes::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpMessage;
pub use template::{credential_slots, template_from_api_spec, ApiDescription, ApiOperation, FieldSpec, RequestBody};

use crate::enforcer::{Action, Decision};
use crate::model::{normalize_url, pattern_matches};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CredentialError {
    #[error("template: {0}")]
    Template(String),
    #[error("token extractor found no token in the awaited response")]
    TokenNotFound,
    #[error("unknown operation {0:?}")]
    UnknownOperation(String),
    #[error("unsupported schema: {0}")]
    UnsupportedSchema(String),
    #[error("invalid policy: {0}")]
    BadPolicy(String),
    #[error("malformed http message: {0}")]
    Http(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestPattern {
    pub url: String,
    pub op: String,
}

/// Tenant policy for one credential-using API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialPolicy {
    pub auth_url: String,
    /// HTTP method or `X-Amz-Target` action of the auth request.
    pub auth_op: String,
    /// Slot name to real secret.
    pub credentials: BTreeMap<String, String>,
    /// Auth body template, or the `Authorization` value in header mode.
    pub template: String,
    /// Regular expression whose first group is the access token.
    pub token_extractor: String,
    #[serde(default)]
    pub other_reqs: Vec<RequestPattern>,
    #[serde(default)]
    pub header_mode: bool,
}

impl CredentialPolicy {
    pub fn validate(&self) -> Result<(), CredentialError> {
        normalize_url(&self.auth_url).map_err(|e| CredentialError::BadPolicy(e.to_string()))?;
        let re = Regex::new(&self.token_extractor).map_err(|e| CredentialError::BadPolicy(e.to_string()))?;
        if re.captures_len() < 2 {
            return Err(CredentialError::BadPolicy("token extractor needs a capture group".into()));
        }
        template::fill_template(&self.template, &self.credentials, b"")
            .map(|_| ())
            .or_else(|e| match e {
                // Original-message slots can only be checked against a message.
                CredentialError::Template(m) if m.starts_with("original message") => Ok(()),
                other => Err(other),
            })
    }

    fn is_auth(&self, url: &str, msg: &HttpMessage) -> bool {
        same_url(&self.auth_url, url) && msg.operations().iter().any(|o| o.eq_ignore_ascii_case(&self.auth_op))
    }

    fn is_other(&self, url: &str, msg: &HttpMessage) -> bool {
        self.other_reqs.iter().any(|r| {
            (same_url(&r.url, url) || pattern_matches(&r.url, url))
                && msg.operations().iter().any(|o| o.eq_ignore_ascii_case(&r.op))
        })
    }
}

fn same_url(a: &str, b: &str) -> bool {
    match (normalize_url(a), normalize_url(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

/// Obfuscated-to-real token map, one per execution.
#[derive(Debug)]
pub struct TokenVault {
    to_real: BTreeMap<String, String>,
    to_fake: BTreeMap<String, String>,
    rng: ChaCha8Rng,
}

impl TokenVault {
    pub fn new(seed: u64) -> Self {
        TokenVault { to_real: BTreeMap::new(), to_fake: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Random alphanumeric stand-in of the same length, stable per token.
    pub fn obfuscate(&mut self, real: &str) -> String {
        if let Some(fake) = self.to_fake.get(real) {
            return fake.clone();
        }
        let len = real.chars().count();
        let fake = loop {
            let candidate: String = (&mut self.rng).sample_iter(&Alphanumeric).take(len).map(char::from).collect();
            if candidate != real && !self.to_real.contains_key(&candidate) && !self.to_fake.contains_key(&candidate) {
                break candidate;
            }
        };
        self.to_real.insert(fake.clone(), real.to_string());
        self.to_fake.insert(real.to_string(), fake.clone());
        fake
    }

    pub fn real(&self, fake: &str) -> Option<&str> {
        self.to_real.get(fake).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.to_real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_real.is_empty()
    }

    pub fn real_tokens(&self) -> impl Iterator<Item = &str> {
        self.to_fake.keys().map(String::as_str)
    }

    /// Replaces every obfuscated token in `msg` with its real token.
    pub fn deobfuscate(&self, msg: &[u8]) -> Vec<u8> {
        self.to_real.iter().fold(msg.to_vec(), |m, (fake, real)| replace_all(&m, fake.as_bytes(), real.as_bytes()))
    }

    /// Replaces every real token in `msg` with its obfuscated token.
    pub fn obfuscate_known(&self, msg: &[u8]) -> Vec<u8> {
        self.to_fake.iter().fold(msg.to_vec(), |m, (real, fake)| replace_all(&m, real.as_bytes(), fake.as_bytes()))
    }
}

pub fn replace_all(haystack: &[u8], needle: &[u8], with: &[u8]) -> Vec<u8> {
    if needle.is_empty() {
        return haystack.to_vec();
    }
    let mut out = Vec::with_capacity(haystack.len());
    let mut i = 0;
    while i < haystack.len() {
        if haystack[i..].starts_with(needle) {
            out.extend_from_slice(with);
            i += needle.len();
        } else {
            out.push(haystack[i]);
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pending {
    Auth,
    Other,
}

/// Credential security function state for one execution.
#[derive(Debug)]
pub struct CredentialFunction {
    policy: CredentialPolicy,
    extractor: Regex,
    vault: TokenVault,
    /// Outstanding request kind per session.
    pending: HashMap<String, Pending>,
}

impl CredentialFunction {
    pub fn new(policy: CredentialPolicy, seed: u64) -> Result<Self, CredentialError> {
        policy.validate()?;
        let extractor = Regex::new(&policy.token_extractor).map_err(|e| CredentialError::BadPolicy(e.to_string()))?;
        Ok(CredentialFunction { policy, extractor, vault: TokenVault::new(seed), pending: HashMap::new() })
    }

    pub fn policy(&self) -> &CredentialPolicy {
        &self.policy
    }

    pub fn vault(&self) -> &TokenVault {
        &self.vault
    }

    /// Outgoing request from the function.
    pub fn on_send(&mut self, session: &str, url: &str, raw: &[u8]) -> Result<Decision, CredentialError> {
        let Ok(mut msg) = HttpMessage::parse(raw) else {
            return Ok(Decision::allow());
        };
        if self.policy.is_auth(url, &msg) {
            let filled = template::fill_template(&self.policy.template, &self.policy.credentials, &msg.body)?;
            if self.policy.header_mode {
                msg.set_header("Authorization", &filled);
            } else {
                msg.set_body(filled.into_bytes());
            }
            self.pending.insert(session.to_string(), Pending::Auth);
            return Ok(Decision::allow().with_action(Action::UpdateMessage(msg.to_bytes())));
        }
        if self.policy.is_other(url, &msg) {
            self.pending.insert(session.to_string(), Pending::Other);
            return Ok(rewritten(raw, self.vault.deobfuscate(raw)));
        }
        self.pending.remove(session);
        Ok(Decision::allow())
    }

    /// Response on its way back to the function.
    pub fn on_recv(&mut self, session: &str, raw: &[u8]) -> Result<Decision, CredentialError> {
        match self.pending.remove(session) {
            Some(Pending::Auth) => {
                let msg = HttpMessage::parse(raw)?;
                let real = self
                    .extractor
                    .captures(&msg.body)
                    .and_then(|c| c.get(1))
                    .map(|m| String::from_utf8_lossy(m.as_bytes()).into_owned())
                    .filter(|t| !t.is_empty())
                    .ok_or(CredentialError::TokenNotFound)?;
                self.vault.obfuscate(&real);
                Ok(rewritten(raw, self.vault.obfuscate_known(raw)))
            }
            Some(Pending::Other) => Ok(rewritten(raw, self.vault.obfuscate_known(raw))),
            None => Ok(Decision::allow()),
        }
    }
}

fn rewritten(original: &[u8], new: Vec<u8>) -> Decision {
    if new == original {
        Decision::allow()
    } else {
        Decision::allow().with_action(Action::UpdateMessage(new))
    }
}
