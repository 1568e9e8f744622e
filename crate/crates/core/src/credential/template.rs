//! Auth message templates.
//!
//! A template is text with `{{cred:NAME}}` slots, filled from the
//! credential map, and `{{orig:FIELD}}` slots, filled from the message the
//! function actually sent. A slot written between double quotes is filled
//! JSON-escaped.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::CredentialError;

pub(crate) fn fill_template(
    template: &str,
    credentials: &BTreeMap<String, String>,
    original_body: &[u8],
) -> Result<String, CredentialError> {
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        let close = rest[open..]
            .find("}}")
            .map(|c| open + c)
            .ok_or_else(|| CredentialError::Template("unterminated slot".into()))?;
        out.push_str(&rest[..open]);
        let slot = &rest[open + 2..close];
        let quoted = out.ends_with('"') && rest[close + 2..].starts_with('"');
        let value = match slot.split_once(':') {
            Some(("cred", name)) => credentials
                .get(name)
                .cloned()
                .ok_or_else(|| CredentialError::Template(format!("no credential for slot {name:?}")))?,
            Some(("orig", field)) => original_field(original_body, field, quoted)
                .ok_or_else(|| CredentialError::Template(format!("original message lacks {field:?}")))?,
            _ => return Err(CredentialError::Template(format!("unknown slot {slot:?}"))),
        };
        if quoted {
            let json = serde_json::to_string(&value).expect("strings serialize");
            out.push_str(&json[1..json.len() - 1]);
        } else {
            out.push_str(&value);
        }
        rest = &rest[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Value of `field` in a JSON or form-encoded body. Strings come back
/// unquoted when `as_string` is set, other JSON values as JSON text.
fn original_field(body: &[u8], field: &str, as_string: bool) -> Option<String> {
    if let Ok(v) = serde_json::from_slice::<serde_json::Value>(body) {
        let found = find_key(&v, field)?;
        return Some(match found {
            serde_json::Value::String(s) if as_string => s.clone(),
            other => other.to_string(),
        });
    }
    let text = std::str::from_utf8(body).ok()?;
    text.split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == field)
        .map(|(_, v)| v.to_string())
}

fn find_key<'a>(v: &'a serde_json::Value, key: &str) -> Option<&'a serde_json::Value> {
    match v {
        serde_json::Value::Object(map) => map
            .get(key)
            .or_else(|| map.values().find_map(|inner| find_key(inner, key))),
        serde_json::Value::Array(items) => items.iter().find_map(|inner| find_key(inner, key)),
        _ => None,
    }
}

/// Simplified API description: operations with flat request-body fields.
#[derive(Debug, Clone, Deserialize)]
pub struct ApiDescription {
    pub operations: Vec<ApiOperation>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ApiOperation {
    pub id: String,
    #[serde(default)]
    pub request_body: Option<RequestBody>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RequestBody {
    pub fields: Vec<FieldSpec>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: String,
    #[serde(default)]
    pub required: bool,
}

/// Generates a JSON body template for `operation`. Required string fields
/// named in `credentials` become credential slots; every other field is
/// copied from the original message.
pub fn template_from_api_spec(
    doc: &ApiDescription,
    operation: &str,
    credentials: &BTreeMap<String, String>,
) -> Result<String, CredentialError> {
    let op = doc
        .operations
        .iter()
        .find(|o| o.id == operation)
        .ok_or_else(|| CredentialError::UnknownOperation(operation.to_string()))?;
    let body = op
        .request_body
        .as_ref()
        .ok_or_else(|| CredentialError::UnsupportedSchema(format!("{operation} has no request body")))?;
    let mut parts = Vec::with_capacity(body.fields.len());
    for f in &body.fields {
        let key = serde_json::to_string(&f.name).expect("strings serialize");
        let slot = match f.ty.as_str() {
            "string" if f.required && credentials.contains_key(&f.name) => {
                format!("\"{{{{cred:{}}}}}\"", f.name)
            }
            "string" => format!("\"{{{{orig:{}}}}}\"", f.name),
            "integer" | "number" | "boolean" | "object" | "array" => format!("{{{{orig:{}}}}}", f.name),
            other => {
                return Err(CredentialError::UnsupportedSchema(format!(
                    "field {} has unsupported type {other:?}",
                    f.name
                )))
            }
        };
        parts.push(format!("{key}:{slot}"));
    }
    Ok(format!("{{{}}}", parts.join(",")))
}

/// Number of credential slots in a template.
pub fn credential_slots(template: &str) -> usize {
    template.matches("{{cred:").count()
}
