//! Run manifest: every invocation writes one `manifest.json` next to its
//! outputs so each artifact traces back to the exact configuration and
//! seed that produced it. The manifest carries the timestamp; the report
//! files themselves stay byte-identical across reruns.

use serde::Serialize;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub master_seed: u64,
    pub config: toml::Value,
    pub versions: Versions,
    pub timestamp: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub library: &'static str,
    pub cli: &'static str,
}

impl RunManifest {
    pub fn new(command: &str, master_seed: u64, config: toml::Value, outputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            master_seed,
            config,
            versions: Versions {
                library: bayes_portfolio_version(),
                cli: env!("CARGO_PKG_VERSION"),
            },
            timestamp: chrono::Utc::now().to_rfc3339(),
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)
    }
}

fn bayes_portfolio_version() -> &'static str {
    // workspace crates share one version
    env!("CARGO_PKG_VERSION")
}
