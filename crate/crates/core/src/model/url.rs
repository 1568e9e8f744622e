use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed url: {0:?}")]
pub struct MalformedUrl(pub String);

/// Canonical form used everywhere URLs are compared.
///
/// Scheme and host are lowercased, the query and fragment are dropped and
/// trailing slashes are removed. The path is kept byte-for-byte, including
/// any percent escapes.
pub fn normalize_url(raw: &str) -> Result<String, MalformedUrl> {
    let bad = || MalformedUrl(raw.to_string());
    let (scheme, rest) = raw.split_once("://").ok_or_else(bad)?;
    let scheme_ok = scheme
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic())
        && scheme
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'));
    if !scheme_ok {
        return Err(bad());
    }
    let rest = match rest.find(['?', '#']) {
        Some(i) => &rest[..i],
        None => rest,
    };
    let (host, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, ""),
    };
    if host.is_empty() || host.chars().any(|c| c.is_whitespace()) {
        return Err(bad());
    }
    if path.chars().any(|c| c.is_whitespace()) {
        return Err(bad());
    }
    let mut out = String::with_capacity(raw.len());
    out.push_str(&scheme.to_ascii_lowercase());
    out.push_str("://");
    out.push_str(&host.to_ascii_lowercase());
    out.push_str(path.trim_end_matches('/'));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_strips_query() {
        assert_eq!(normalize_url("https://A.com/Test?x=1").unwrap(), "https://a.com/Test");
    }

    #[test]
    fn trailing_slash() {
        assert_eq!(normalize_url("https://a.com/").unwrap(), "https://a.com");
        assert_eq!(normalize_url("https://a.com/x//").unwrap(), "https://a.com/x");
    }

    #[test]
    fn identity() {
        assert_eq!(normalize_url("https://a.com/test/x").unwrap(), "https://a.com/test/x");
    }

    #[test]
    fn keeps_percent_escapes_and_drops_fragment() {
        assert_eq!(
            normalize_url("S3://Bucket/a%2Fb#frag").unwrap(),
            "s3://bucket/a%2Fb"
        );
    }

    #[test]
    fn rejects_garbage() {
        for raw in ["", "a.com/x", "://a.com", "1x://a", "https://", "https:///path", "http://a b"] {
            assert!(normalize_url(raw).is_err(), "{raw}");
        }
    }
}
