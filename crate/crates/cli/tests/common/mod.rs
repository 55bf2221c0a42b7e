#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use verifarm::fabric::http::{serve, ServeOptions, ServerHandle};
use verifarm::fabric::{Fabric, FabricConfig, FabricService};
use verifarm::model::{ClientId, ResourceLimits, TaskId, TaskSpec, ToolVersionId};
use verifarm::queue::QueueConfig;
use verifarm::store::{build_zip, ENTRY_POINT};

pub const BIN: &str = env!("CARGO_BIN_EXE_verifarm");

pub fn verifarm() -> Command {
    let mut cmd = Command::new(BIN);
    cmd.env_remove("VERIFARM_FABRIC").env("RUST_LOG", "warn");
    cmd
}

/// Polls `probe` every 20 ms until it yields a value or `limit` passes.
pub fn wait_for<T>(limit: Duration, mut probe: impl FnMut() -> Option<T>) -> Option<T> {
    let deadline = Instant::now() + limit;
    loop {
        if let Some(v) = probe() {
            return Some(v);
        }
        if Instant::now() >= deadline {
            return None;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

pub fn tool_zip(script: &str) -> Vec<u8> {
    build_zip([(ENTRY_POINT, script.as_bytes(), true)])
}

/// Tool that passes unless the rule ends in 3 (defect) or 4 (crash).
pub const TOY_TOOL: &str = r#"#!/bin/sh
rule=$(cat rule 2>/dev/null || echo "$VERIFARM_RULE")
case "$rule" in
  *3) echo '{"kind":"defect","detail":"double release"}' > outcome.json ;;
  *4) exit 9 ;;
  *)  echo '{"kind":"pass"}' > outcome.json ;;
esac
"#;

pub fn task(client: ClientId, rule: &str, version: &str, command: &str, timeout: u64) -> TaskSpec {
    TaskSpec {
        id: TaskId::new(),
        client,
        module_name: "drivers/toy.ko".into(),
        rule_name: rule.into(),
        version: ToolVersionId::new(version),
        command: command.into(),
        payload: Vec::new(),
        limits: ResourceLimits { timeout, spaceout: 512 },
        submitted_at: 0,
    }
}

/// A fabric served in-process over HTTP.
pub struct LocalFabric {
    pub service: Arc<FabricService>,
    pub server: ServerHandle,
    pub root: PathBuf,
}

impl LocalFabric {
    pub fn start(root: &Path, queue: QueueConfig) -> Self {
        let config = FabricConfig {
            root: root.to_owned(),
            queue,
            ..FabricConfig::default()
        };
        let service = Arc::new(FabricService::open(&config).unwrap());
        let server = serve(service.clone(), "127.0.0.1:0", ServeOptions::default()).unwrap();
        Self {
            service,
            server,
            root: root.to_owned(),
        }
    }

    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn upload_tool(&self, version: &str, script: &str) {
        self.service
            .upload_version(&ToolVersionId::new(version), &tool_zip(script))
            .unwrap();
    }
}

/// A `verifarm worker` child process.
pub struct WorkerProc {
    pub child: Child,
}

impl WorkerProc {
    pub fn spawn(url: &str, id: &str, cache_dir: &Path, poll: f64) -> Self {
        let child = verifarm()
            .args(["worker", "--fabric", url, "--id", id, "--poll-interval", &poll.to_string()])
            .arg("--cache-dir")
            .arg(cache_dir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        Self { child }
    }

    pub fn signal(&self, sig: i32) {
        // SAFETY: signal delivery to our own child.
        unsafe {
            libc::kill(self.child.id() as i32, sig);
        }
    }

    pub fn exited(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(Some(_)))
    }
}

impl Drop for WorkerProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A `verifarm fabric serve` child process on an ephemeral port.
pub struct FabricProc {
    pub child: Child,
    pub url: String,
}

impl FabricProc {
    pub fn spawn(root: &Path, extra: &[&str]) -> Self {
        let mut child = verifarm()
            .args(["fabric", "serve", "--listen", "127.0.0.1:0", "--root"])
            .arg(root)
            .args(extra)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut first = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut first).unwrap();
        let url = first
            .split_whitespace()
            .find(|w| w.starts_with("http://"))
            .unwrap_or_else(|| panic!("no URL in {first:?}"))
            .to_owned();
        Self { child, url }
    }

    pub fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for FabricProc {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn enqueue_all(fabric: &dyn Fabric, tasks: &[TaskSpec]) {
    for t in tasks {
        fabric.enqueue(t).unwrap();
    }
}
