use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::Alphanumeric;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::controller::RateLimitEntry;
use crate::credential::CredentialPolicy;
use crate::model::{HttpOp, Topology};

/// Host the simulated runtime uses for direct function invocations.
pub const LAMBDA_HOST: &str = "lambda.local";

pub fn invocation_url(function: &str) -> String {
    format!("https://{LAMBDA_HOST}/functions/{function}/invocations")
}

/// Function named by a direct-invocation URL.
pub fn invoked_function(url: &str) -> Option<&str> {
    url.strip_prefix("https://lambda.local/functions/")?
        .strip_suffix("/invocations")
        .filter(|f| !f.is_empty() && !f.contains('/'))
}

/// A simulated serverless application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub name: String,
    pub functions: Vec<FunctionSpec>,
    #[serde(default)]
    pub services: Vec<ServiceSpec>,
    pub entry_functions: Vec<String>,
    /// Per-request user input, sampled from a seeded generator.
    #[serde(default)]
    pub inputs: BTreeMap<String, InputSpec>,
    #[serde(default)]
    pub credentials: BTreeMap<String, CredentialPolicy>,
    #[serde(default)]
    pub fan_out: BTreeMap<String, usize>,
    #[serde(default)]
    pub rate_limits: Vec<RateLimitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub name: String,
    pub script: Vec<Directive>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    Send(SendSpec),
    /// Direct invocation of another function, once per repetition.
    Invoke {
        function: String,
        #[serde(default)]
        repeat: Repeat,
    },
    Return,
    /// Aborts the execution without returning, with this probability.
    Fail {
        #[serde(default)]
        probability: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SendSpec {
    pub url: String,
    pub op: HttpOp,
    #[serde(default)]
    pub repeat: Repeat,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default)]
    pub body: String,
    /// Saves a regex group of the response body as `{var.NAME}`.
    #[serde(default)]
    pub capture: Option<Capture>,
}

impl SendSpec {
    pub fn new(url: impl Into<String>, op: HttpOp) -> Self {
        SendSpec {
            url: url.into(),
            op,
            repeat: Repeat::default(),
            headers: BTreeMap::new(),
            body: String::new(),
            capture: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capture {
    pub name: String,
    pub regex: String,
}

/// Repetition count: a constant or the name of an integer input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Repeat {
    Count(u32),
    Input(String),
}

impl Default for Repeat {
    fn default() -> Self {
        Repeat::Count(1)
    }
}

impl Repeat {
    pub fn eval(&self, input: &BTreeMap<String, String>) -> Result<u32, HarnessError> {
        match self {
            Repeat::Count(n) => Ok(*n),
            Repeat::Input(name) => {
                let key = name.strip_prefix("input.").unwrap_or(name);
                let raw = input
                    .get(key)
                    .ok_or_else(|| HarnessError::Script(format!("repeat refers to unknown input {key:?}")))?;
                raw.parse()
                    .map_err(|_| HarnessError::Script(format!("input {key:?} = {raw:?} is not a count")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSpec {
    /// Integer drawn uniformly from the inclusive range.
    Range([i64; 2]),
    Choice(Vec<String>),
    Const(String),
}

impl InputSpec {
    pub fn sample(&self, rng: &mut impl Rng) -> String {
        match self {
            InputSpec::Range([lo, hi]) => rng.gen_range(*lo..=*hi).to_string(),
            InputSpec::Choice(items) => items[rng.gen_range(0..items.len())].clone(),
            InputSpec::Const(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub base_url: String,
    #[serde(default)]
    pub triggers: Vec<TriggerRule>,
    #[serde(default)]
    pub responses: Vec<ResponseRule>,
}

/// A message to `prefix…` with `op` starts `function`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerRule {
    pub prefix: String,
    pub op: HttpOp,
    pub function: String,
    /// Only messages sent by this function trigger.
    #[serde(default)]
    pub from: Option<String>,
}

/// Canned response. `op` is matched against the method or the
/// `X-Amz-Target` action. Requests lacking any `require` string get 403.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRule {
    pub prefix: String,
    pub op: String,
    #[serde(default)]
    pub require: Vec<String>,
    pub body: String,
}

impl AppSpec {
    pub fn function(&self, name: &str) -> Option<&FunctionSpec> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut FunctionSpec> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self.services.iter().map(|s| (s.name.clone(), s.base_url.clone())))
    }

    pub fn function_names(&self) -> Vec<String> {
        self.functions.iter().map(|f| f.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let names: BTreeSet<&str> = self.functions.iter().map(|f| f.name.as_str()).collect();
        if names.len() != self.functions.len() {
            return Err(HarnessError::Spec("duplicate function name".into()));
        }
        if self.entry_functions.is_empty() {
            return Err(HarnessError::Spec("no entry functions".into()));
        }
        for e in &self.entry_functions {
            if !names.contains(e.as_str()) {
                return Err(HarnessError::Spec(format!("entry function {e} does not exist")));
            }
        }
        for s in &self.services {
            for t in &s.triggers {
                if !names.contains(t.function.as_str()) {
                    return Err(HarnessError::Spec(format!("service {} triggers unknown function {}", s.name, t.function)));
                }
            }
        }
        for f in &self.functions {
            for d in &f.script {
                let repeat = match d {
                    Directive::Send(s) => &s.repeat,
                    Directive::Invoke { function, repeat } => {
                        if !names.contains(function.as_str()) {
                            return Err(HarnessError::Spec(format!("{} invokes unknown function {function}", f.name)));
                        }
                        repeat
                    }
                    Directive::Fail { probability } if !(0.0..=1.0).contains(probability) => {
                        return Err(HarnessError::Spec(format!("{}: fail probability out of range", f.name)));
                    }
                    _ => continue,
                };
                if let Repeat::Input(name) = repeat {
                    let key = name.strip_prefix("input.").unwrap_or(name);
                    match self.inputs.get(key) {
                        Some(InputSpec::Range([lo, _])) if *lo >= 0 => {}
                        Some(InputSpec::Const(v)) if v.parse::<u32>().is_ok() => {}
                        _ => {
                            return Err(HarnessError::Spec(format!(
                                "{}: repeat input {key:?} is not a non-negative integer input",
                                f.name
                            )))
                        }
                    }
                }
            }
        }
        for (f, p) in &self.credentials {
            if !names.contains(f.as_str()) {
                return Err(HarnessError::Spec(format!("credential policy for unknown function {f}")));
            }
            p.validate().map_err(|e| HarnessError::Spec(format!("credential policy of {f}: {e}")))?;
        }
        Ok(())
    }
}

/// Values available to a template.
pub struct TemplateScope<'a> {
    pub input: &'a BTreeMap<String, String>,
    pub vars: &'a BTreeMap<String, String>,
    /// Repetition index of the current directive.
    pub i: u32,
    /// Index this execution was invoked with.
    pub idx: u32,
    pub request: usize,
}

/// Expands `{input.x}`, `{var.x}`, `{i}`, `{idx}`, `{req}` and
/// `{rand:N}`. Other braces are kept verbatim.
pub fn render(template: &str, scope: &TemplateScope<'_>, rng: &mut impl Rng) -> Result<String, HarnessError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            out.push_str(&rest[open..]);
            return Ok(out);
        };
        let key = &after[..close];
        let value = if let Some(name) = key.strip_prefix("input.") {
            Some(
                scope
                    .input
                    .get(name)
                    .cloned()
                    .ok_or_else(|| HarnessError::Script(format!("unknown input {name:?}")))?,
            )
        } else if let Some(name) = key.strip_prefix("var.") {
            Some(
                scope
                    .vars
                    .get(name)
                    .cloned()
                    .ok_or_else(|| HarnessError::Script(format!("variable {name:?} was never captured")))?,
            )
        } else if let Some(n) = key.strip_prefix("rand:").and_then(|n| n.parse::<usize>().ok()) {
            Some(rng.sample_iter(&Alphanumeric).take(n).map(|c| char::from(c).to_ascii_lowercase()).collect())
        } else {
            match key {
                "i" => Some(scope.i.to_string()),
                "idx" => Some(scope.idx.to_string()),
                "req" => Some(scope.request.to_string()),
                _ => None,
            }
        };
        match value {
            Some(v) => {
                out.push_str(&v);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn renders_placeholders_and_keeps_json() {
        let input: BTreeMap<String, String> = [("user".to_string(), "bob".to_string())].into();
        let vars: BTreeMap<String, String> = [("token".to_string(), "abc".to_string())].into();
        let scope = TemplateScope { input: &input, vars: &vars, i: 3, idx: 1, request: 7 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = render(r#"{"u":"{input.user}","t":"{var.token}","i":{i},"x":"{idx}-{req}"}"#, &scope, &mut rng).unwrap();
        assert_eq!(s, r#"{"u":"bob","t":"abc","i":3,"x":"1-7"}"#);
        let r = render("f-{rand:6}", &scope, &mut rng).unwrap();
        assert_eq!(r.len(), 8);
        assert!(render("{input.nope}", &scope, &mut rng).is_err());
        assert!(render("{var.nope}", &scope, &mut rng).is_err());
    }

    #[test]
    fn invocation_urls() {
        assert_eq!(invoked_function(&invocation_url("Mapper")), Some("Mapper"));
        assert_eq!(invoked_function("https://lambda.local/functions//invocations"), None);
        assert_eq!(invoked_function("https://s3.amazonaws.com/x"), None);
    }

    #[test]
    fn repeat_from_input() {
        let input: BTreeMap<String, String> = [("files".to_string(), "4".to_string())].into();
        assert_eq!(Repeat::Input("input.files".into()).eval(&input).unwrap(), 4);
        assert_eq!(Repeat::Input("files".into()).eval(&input).unwrap(), 4);
        assert!(Repeat::Input("nope".into()).eval(&input).is_err());
        let parsed: Repeat = serde_json::from_str("3").unwrap();
        assert_eq!(parsed, Repeat::Count(3));
    }
}
