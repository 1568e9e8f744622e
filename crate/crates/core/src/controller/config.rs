use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ControllerError;
use crate::builder::PolicySet;
use crate::credential::CredentialPolicy;
use crate::enforcer::EnforcementMode;
use crate::model::{is_generalized, normalize_url, HttpOp, ServiceEndpoint, Topology};

/// ⟨function, target URL pattern, operation, rate per second⟩.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateLimitEntry {
    pub function: String,
    pub pattern: String,
    pub op: HttpOp,
    pub rate: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatConfig {
    pub period_ms: u64,
    pub miss_threshold: u32,
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        HeartbeatConfig { period_ms: 1000, miss_threshold: 3 }
    }
}

/// One application as the controller sees it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ApplicationConfig {
    pub name: String,
    pub functions: Vec<String>,
    pub topology: Topology,
    /// Learned graphs. Without them every execution is allowed.
    pub policies: Option<PolicySet>,
    pub fail_mode: EnforcementMode,
    pub credentials: BTreeMap<String, CredentialPolicy>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControllerConfig {
    pub applications: Vec<ApplicationConfig>,
    /// Maximum live instances per function.
    pub fan_out: BTreeMap<String, usize>,
    pub rate_limits: Vec<RateLimitEntry>,
    pub heartbeat: HeartbeatConfig,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for app in &self.applications {
            for f in &app.functions {
                if let Some(prev) = owner.insert(f, &app.name) {
                    return Err(ControllerError::Config(format!(
                        "function {f} belongs to both {prev} and {}",
                        app.name
                    )));
                }
            }
            for (f, p) in &app.credentials {
                p.validate().map_err(|e| ControllerError::Config(format!("credential policy of {f}: {e}")))?;
            }
            if let Some(p) = &app.policies {
                p.global.validate().map_err(|e| ControllerError::Config(e.to_string()))?;
                for g in p.local.values() {
                    g.validate().map_err(|e| ControllerError::Config(e.to_string()))?;
                }
            }
        }
        for e in &self.rate_limits {
            if e.rate == 0 {
                return Err(ControllerError::Config(format!("rate for {} must be positive", e.function)));
            }
            let base = e.pattern.strip_suffix('*').unwrap_or(&e.pattern);
            if !is_generalized(&e.pattern) && normalize_url(base).ok().as_deref() != Some(base) {
                return Err(ControllerError::Config(format!("pattern {:?} is not normalized", e.pattern)));
            }
        }
        if self.heartbeat.miss_threshold == 0 || self.heartbeat.period_ms == 0 {
            return Err(ControllerError::Config("heartbeat period and threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Tenant configuration file. Graph and credential paths are relative to
/// the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantConfig {
    pub applications: Vec<TenantApplication>,
    #[serde(default)]
    pub fan_out: BTreeMap<String, usize>,
    #[serde(default)]
    pub rate_limits: Vec<RateLimitEntry>,
    #[serde(default)]
    pub heartbeat: HeartbeatConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantApplication {
    pub name: String,
    pub functions: Vec<String>,
    #[serde(default)]
    pub services: Vec<ServiceEndpoint>,
    /// Policy file written by `graph build`.
    #[serde(default)]
    pub policy: Option<PathBuf>,
    #[serde(default)]
    pub fail_mode: EnforcementMode,
    #[serde(default)]
    pub credentials: BTreeMap<String, PathBuf>,
}

impl TenantConfig {
    pub fn load(path: &Path) -> Result<ControllerConfig, ControllerError> {
        let text = fs::read_to_string(path).map_err(|e| ControllerError::Config(format!("{}: {e}", path.display())))?;
        let tenant: TenantConfig =
            serde_json::from_str(&text).map_err(|e| ControllerError::Config(format!("{}: {e}", path.display())))?;
        tenant.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(self, base: &Path) -> Result<ControllerConfig, ControllerError> {
        let read = |p: &Path| {
            let full = base.join(p);
            fs::read_to_string(&full).map_err(|e| ControllerError::Config(format!("{}: {e}", full.display())))
        };
        let mut applications = Vec::new();
        for app in self.applications {
            let policies = match &app.policy {
                Some(p) => Some(
                    serde_json::from_str::<PolicySet>(&read(p)?)
                        .map_err(|e| ControllerError::Config(format!("{}: {e}", p.display())))?,
                ),
                None => None,
            };
            let mut credentials = BTreeMap::new();
            for (f, p) in &app.credentials {
                let policy: CredentialPolicy = serde_json::from_str(&read(p)?)
                    .map_err(|e| ControllerError::Config(format!("{}: {e}", p.display())))?;
                credentials.insert(f.clone(), policy);
            }
            applications.push(ApplicationConfig {
                name: app.name,
                functions: app.functions,
                topology: Topology { services: app.services },
                policies,
                fail_mode: app.fail_mode,
                credentials,
            });
        }
        let config = ControllerConfig {
            applications,
            fan_out: self.fan_out,
            rate_limits: self.rate_limits,
            heartbeat: self.heartbeat,
        };
        config.validate()?;
        Ok(config)
    }
}
