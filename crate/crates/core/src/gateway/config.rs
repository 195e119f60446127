//! Gateway configuration file.
//!
//! Plain `key = value` lines, `#` comments. Relative paths are resolved
//! against the directory holding the file.
//!
//! | key                     | default            | meaning                                   |
//! |-------------------------|--------------------|-------------------------------------------|
//! | `listen`                | `127.0.0.1:8080`   | HTTP listen address                       |
//! | `data_dir`              | (required)         | store directory                           |
//! | `inventory`             | none               | inventory file; else `demo_nodes` is used |
//! | `demo_nodes`            | `10`               | size of the built-in demo inventory       |
//! | `admin_secret`          | (required)         | value expected in `X-Admin-Secret`        |
//! | `gateway_identity`      | `gateway`          | key identity on the node channel          |
//! | `min_nodes`             | `2`                | policy                                    |
//! | `max_nodes`             | `4`                | policy                                    |
//! | `max_period_hours`      | `72`               | policy                                    |
//! | `temp_threshold_c`      | `60`               | policy                                    |
//! | `sentinel_tick_seconds` | `5`                | policy                                    |
//! | `max_upload_bytes`      | `67108864`         | largest accepted job archive              |
//! | `action_log`            | `<data_dir>/actions.ndjson` | sentinel action log              |

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use crate::domain::Policy;
use crate::keyvalue::{KvError, KvMap};

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Syntax(#[from] KvError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub inventory: Option<PathBuf>,
    pub demo_nodes: usize,
    pub admin_secret: String,
    pub gateway_identity: String,
    pub policy: Policy,
    pub max_upload_bytes: usize,
    pub action_log: PathBuf,
}

const KEYS: &[&str] = &[
    "listen",
    "data_dir",
    "inventory",
    "demo_nodes",
    "admin_secret",
    "gateway_identity",
    "min_nodes",
    "max_nodes",
    "max_period_hours",
    "temp_threshold_c",
    "sentinel_tick_seconds",
    "max_upload_bytes",
    "action_log",
];

impl GatewayConfig {
    /// A config with defaults for everything but the two required keys.
    pub fn new(data_dir: impl Into<PathBuf>, admin_secret: impl Into<String>) -> Self {
        let data_dir = data_dir.into();
        GatewayConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            action_log: data_dir.join("actions.ndjson"),
            data_dir,
            inventory: None,
            demo_nodes: 10,
            admin_secret: admin_secret.into(),
            gateway_identity: "gateway".into(),
            policy: Policy::default(),
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
        }
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let kv = KvMap::parse(text)?;
        kv.reject_unknown(KEYS)?;
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let data_dir = resolve(kv.require("data_dir")?);
        let secret = kv.require("admin_secret")?;
        if secret.is_empty() {
            return Err(ConfigError::Invalid(
                "admin_secret must not be empty".into(),
            ));
        }
        let mut cfg = GatewayConfig::new(data_dir, secret);
        if let Some(l) = kv.get("listen") {
            cfg.listen = l
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("bad listen address {l:?}")))?;
        }
        cfg.inventory = kv.get("inventory").map(resolve);
        if let Some(n) = kv.parse_opt("demo_nodes")? {
            cfg.demo_nodes = n;
        }
        if let Some(id) = kv.get("gateway_identity") {
            cfg.gateway_identity = id.to_owned();
        }
        let p = &mut cfg.policy;
        if let Some(v) = kv.parse_opt("min_nodes")? {
            p.min_nodes = v;
        }
        if let Some(v) = kv.parse_opt("max_nodes")? {
            p.max_nodes = v;
        }
        if let Some(v) = kv.parse_opt("max_period_hours")? {
            p.max_period_hours = v;
        }
        if let Some(v) = kv.parse_opt("temp_threshold_c")? {
            p.temp_threshold_c = v;
        }
        if let Some(v) = kv.parse_opt("sentinel_tick_seconds")? {
            p.sentinel_tick_seconds = v;
        }
        p.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(v) = kv.parse_opt("max_upload_bytes")? {
            cfg.max_upload_bytes = v;
        }
        if let Some(a) = kv.get("action_log") {
            cfg.action_log = resolve(a);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        GatewayConfig::parse(&text, base)
    }
}
