use std::path::Path;
use std::process::Command;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use treegraph_core::pipeline::write_atomic;
use treegraph_core::Result;

pub const RUN_FILE: &str = "run.json";

/// What was run, with which settings, on which build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub git_describe: String,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seed,
            git_describe: git_describe(),
            threads: treegraph_core::par::current_threads(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_at = now();
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(&dir.join(RUN_FILE), json.as_bytes())
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("unknown (v{})", env!("CARGO_PKG_VERSION")))
}
