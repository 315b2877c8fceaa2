use rwre_core::Error;
use serde::Serialize;
use std::path::Path;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RESOURCE: u8 = 3;
pub const EXIT_CONVERGENCE: u8 = 4;

#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub message: String,
}

impl Fail {
    pub fn config(msg: impl Into<String>) -> Self {
        Fail { code: EXIT_CONFIG, message: msg.into() }
    }

    pub fn io(e: std::io::Error, path: &Path) -> Self {
        Fail { code: 1, message: format!("{}: {e}", path.display()) }
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Domain(_) | Error::Config(_) => EXIT_CONFIG,
            Error::Resource(_) | Error::Efficiency(_) => EXIT_RESOURCE,
            Error::Convergence(_) | Error::Calibration { .. } => EXIT_CONVERGENCE,
            Error::Internal(_) => 1,
        };
        Fail { code, message: e.to_string() }
    }
}

impl From<crate::config::ConfigError> for Fail {
    fn from(e: crate::config::ConfigError) -> Self {
        Fail::config(format!("config {}", e.0))
    }
}

/// Provenance stamped into every output.
#[derive(Clone, Debug, Serialize)]
pub struct Meta {
    pub artifact: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

impl Meta {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Meta { artifact: "rwre", version: rwre_core::VERSION, config_hash, seed }
    }

    fn csv_comment(&self) -> String {
        format!("# {} {} config={} seed={}\n", self.artifact, self.version, self.config_hash, self.seed)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), Fail> {
    std::fs::create_dir_all(dir).map_err(|e| Fail::io(e, dir))
}

pub fn write(path: &Path, text: &str) -> Result<(), Fail> {
    std::fs::write(path, text).map_err(|e| Fail::io(e, path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Fail> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Fail { code: 1, message: e.to_string() })?;
    s.push('\n');
    write(path, &s)
}

/// CSV with a leading `#` provenance line.
pub fn write_csv(path: &Path, meta: &Meta, body: &str) -> Result<(), Fail> {
    write(path, &(meta.csv_comment() + body))
}

pub fn json_line<T: Serialize>(value: &T) -> Result<String, Fail> {
    serde_json::to_string(value).map_err(|e| Fail { code: 1, message: e.to_string() })
}
