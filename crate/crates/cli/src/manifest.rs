//! Run manifest: what ran, with which configuration, what it produced and
//! how long each phase took. Written last, atomically, even on failure.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use proton::checkpoint::write_atomic;
use proton::config::RunConfig;

#[derive(Serialize)]
struct Phase {
    name: String,
    status: &'static str,
    seconds: f64,
}

#[derive(Serialize)]
pub struct Manifest {
    command: String,
    revision: String,
    seed: u64,
    config: String,
    pub outputs: Vec<String>,
    phases: Vec<Phase>,
    wall_clock_seconds: f64,
    status: String,
    #[serde(skip)]
    started: Instant,
}

fn revision() -> String {
    let git = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string());
    match git {
        Some(rev) => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            revision: revision(),
            seed: cfg.seed,
            config: cfg.to_toml().unwrap_or_default(),
            outputs: Vec::new(),
            phases: Vec::new(),
            wall_clock_seconds: 0.0,
            status: "running".into(),
            started: Instant::now(),
        }
    }

    /// Runs `f`, recording its duration and outcome.
    pub fn phase<T>(&mut self, name: &str, f: impl FnOnce() -> proton::Result<T>) -> proton::Result<T> {
        let t = Instant::now();
        let r = f();
        self.phases.push(Phase {
            name: name.to_string(),
            status: if r.is_ok() { "ok" } else { "failed" },
            seconds: t.elapsed().as_secs_f64(),
        });
        r
    }

    pub fn finish(mut self, out_dir: &Path, error: Option<&proton::Error>) -> proton::Result<()> {
        self.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        self.status = match error {
            None => "ok".into(),
            Some(e) => format!("failed: {e}"),
        };
        write_atomic(
            &out_dir.join("manifest.json"),
            serde_json::to_string_pretty(&self)?.as_bytes(),
        )
    }
}
