use serde::{Deserialize, Serialize};

use super::graph::pattern_matches;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEndpoint {
    pub name: String,
    pub base_url: String,
}

/// Declared service endpoints of an application.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub services: Vec<ServiceEndpoint>,
}

impl Topology {
    pub fn new(services: impl IntoIterator<Item = (String, String)>) -> Self {
        Topology {
            services: services
                .into_iter()
                .map(|(name, base_url)| ServiceEndpoint { name, base_url })
                .collect(),
        }
    }

    pub fn is_service(&self, name: &str) -> bool {
        self.services.iter().any(|s| s.name == name)
    }

    /// Service whose base URL is the longest prefix of `url`.
    pub fn resolve(&self, url: &str) -> Option<&str> {
        self.services
            .iter()
            .filter(|s| url.starts_with(&s.base_url) || pattern_matches(&s.base_url, url))
            .max_by_key(|s| s.base_url.len())
            .map(|s| s.name.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longest_prefix_wins() {
        let t = Topology::new([
            ("s3".to_string(), "https://s3.amazonaws.com".to_string()),
            ("photos".to_string(), "https://s3.amazonaws.com/photos".to_string()),
        ]);
        assert_eq!(t.resolve("https://s3.amazonaws.com/photos/a.jpg"), Some("photos"));
        assert_eq!(t.resolve("https://s3.amazonaws.com/other"), Some("s3"));
        assert_eq!(t.resolve("https://evil.com"), None);
    }
}
