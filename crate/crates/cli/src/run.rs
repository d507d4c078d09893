//! Run directories: every command that writes results records what it did
//! in `manifest.json` next to its outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: &'static str,
    seed: u64,
    started_unix: u64,
    elapsed_secs: f64,
    config: Option<&'a str>,
    outputs: &'a [String],
    summary: &'a serde_json::Value,
}

pub struct RunDir {
    pub dir: PathBuf,
    command: String,
    seed: u64,
    config: Option<String>,
    started: u64,
    clock: Instant,
    outputs: Vec<String>,
    log: Option<fs::File>,
}

impl RunDir {
    pub fn create(dir: &Path, command: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        let log = fs::OpenOptions::new().create(true).append(true).open(dir.join("run.log"))?;
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            seed,
            config: None,
            started,
            clock: Instant::now(),
            outputs: Vec::new(),
            log: Some(log),
        })
    }

    /// Logs and stores the resolved configuration.
    pub fn record_config(&mut self, text: &str) -> Result<()> {
        self.log(&format!("{} seed={}\n--- resolved config ---\n{}---", self.command, self.seed, text));
        fs::write(self.dir.join("config.resolved.toml"), text)?;
        self.outputs.push("config.resolved.toml".into());
        self.config = Some(text.to_string());
        Ok(())
    }

    /// Prints to stderr and appends to `run.log`.
    pub fn log(&mut self, line: &str) {
        eprintln!("{line}");
        if let Some(f) = self.log.as_mut() {
            let _ = writeln!(f, "{line}");
        }
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn finish(mut self, summary: serde_json::Value) -> Result<()> {
        self.outputs.push("run.log".into());
        let m = Manifest {
            command: &self.command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            started_unix: self.started,
            elapsed_secs: self.clock.elapsed().as_secs_f64(),
            config: self.config.as_deref(),
            outputs: &self.outputs,
            summary: &summary,
        };
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        self.log = None;
        Ok(())
    }
}
