//! Runs one task command as its own process group under wall-clock and resident-memory limits.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{Outcome, OutcomeKind, ResourceLimits};

/// Delay between limit checks; also the memory sampling period.
pub const SAMPLE_PERIOD: Duration = Duration::from_millis(50);
/// Captured output is truncated to its last this-many bytes.
pub const CAPTURE_LIMIT: u64 = 64 * 1024;
/// File the analysis command writes its verdict into.
pub const OUTCOME_FILE: &str = "outcome.json";

const STDOUT_FILE: &str = ".verifarm.stdout";
const STDERR_FILE: &str = ".verifarm.stderr";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExitKind {
    /// Exit status; signal deaths are reported shell-style as 128 + signal.
    Completed { code: i32 },
    KilledTimeout,
    KilledSpaceout,
    SpawnFailure { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub exit: ExitKind,
    /// Seconds from spawn to reap.
    pub wall_time: f64,
    /// Largest sampled resident set of the process tree, MB.
    pub peak_memory: f64,
    pub stdout: String,
    pub stderr: String,
}

/// Runs `sh -c command` in `workdir` with the extra environment `env`.
///
/// The shell leads a fresh process group. Every descendant in that group is killed when a
/// limit trips and again after the shell exits, so nothing outlives the call.
pub fn execute_with_limits(
    command: &str,
    workdir: &Path,
    limits: &ResourceLimits,
    env: &[(&str, String)],
) -> ExecutionReport {
    let started = Instant::now();
    let failed = |message: String| ExecutionReport {
        exit: ExitKind::SpawnFailure { message },
        wall_time: started.elapsed().as_secs_f64(),
        peak_memory: 0.0,
        stdout: String::new(),
        stderr: String::new(),
    };
    let (stdout, stderr) = match (
        File::create(workdir.join(STDOUT_FILE)),
        File::create(workdir.join(STDERR_FILE)),
    ) {
        (Ok(o), Ok(e)) => (o, e),
        (Err(e), _) | (_, Err(e)) => return failed(format!("capture files: {e}")),
    };

    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c")
        .arg(command)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .envs(env.iter().map(|(k, v)| (k, v)));
    // SAFETY: only async-signal-safe calls between fork and exec.
    unsafe {
        cmd.pre_exec(|| {
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            // Take the task down with us if the worker itself dies.
            libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
            Ok(())
        });
    }
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return failed(e.to_string()),
    };
    let pgid = child.id() as i32;
    let timeout = Duration::from_secs(limits.timeout);
    let spaceout_bytes = limits.spaceout.saturating_mul(1024 * 1024);
    let mut peak = 0u64;
    let mut killed = None;

    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) => {}
            Err(e) => {
                log::error!("waiting on task process {pgid}: {e}");
                break None;
            }
        }
        let rss = group_rss_bytes(pgid);
        peak = peak.max(rss);
        if killed.is_none() {
            if rss > spaceout_bytes {
                killed = Some(ExitKind::KilledSpaceout);
            } else if started.elapsed() >= timeout {
                killed = Some(ExitKind::KilledTimeout);
            }
            if killed.is_some() {
                kill_group(pgid);
            }
        }
        std::thread::sleep(SAMPLE_PERIOD);
    };
    // Descendants that outlived the shell go too.
    kill_group(pgid);
    if status.is_none() {
        let _ = child.kill();
        let _ = child.wait();
    }
    let wall_time = started.elapsed().as_secs_f64();

    let exit = killed.unwrap_or_else(|| match status {
        Some(s) => {
            use std::os::unix::process::ExitStatusExt;
            let code = s.code().or_else(|| s.signal().map(|sig| 128 + sig)).unwrap_or(-1);
            ExitKind::Completed { code }
        }
        None => ExitKind::Completed { code: -1 },
    });
    ExecutionReport {
        exit,
        wall_time,
        peak_memory: peak as f64 / (1024.0 * 1024.0),
        stdout: read_tail(&workdir.join(STDOUT_FILE)),
        stderr: read_tail(&workdir.join(STDERR_FILE)),
    }
}

fn kill_group(pgid: i32) {
    // SAFETY: signal delivery only; a vanished group yields ESRCH.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

fn read_tail(path: &Path) -> String {
    let Ok(mut f) = File::open(path) else {
        return String::new();
    };
    let len = f.metadata().map(|m| m.len()).unwrap_or(0);
    if len > CAPTURE_LIMIT {
        let _ = f.seek(SeekFrom::Start(len - CAPTURE_LIMIT));
    }
    let mut buf = Vec::new();
    let _ = f.read_to_end(&mut buf);
    String::from_utf8_lossy(&buf).into_owned()
}

/// Pids of live (non-zombie) processes in process group `pgid`.
pub fn group_members(pgid: i32) -> Vec<i32> {
    proc_stats()
        .filter(|s| s.pgrp == pgid && s.state != 'Z')
        .map(|s| s.pid)
        .collect()
}

fn group_rss_bytes(pgid: i32) -> u64 {
    // SAFETY: sysconf has no preconditions.
    let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) }.max(1) as u64;
    proc_stats()
        .filter(|s| s.pgrp == pgid)
        .map(|s| s.rss_pages * page)
        .sum()
}

struct ProcStat {
    pid: i32,
    state: char,
    pgrp: i32,
    rss_pages: u64,
}

fn proc_stats() -> impl Iterator<Item = ProcStat> {
    fs::read_dir("/proc")
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| e.file_name().to_str()?.parse::<i32>().ok())
        .filter_map(|pid| {
            let text = fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
            parse_stat(pid, &text)
        })
}

fn parse_stat(pid: i32, text: &str) -> Option<ProcStat> {
    // The command name may contain spaces and parentheses; fields resume after the last ')'.
    let rest = &text[text.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    Some(ProcStat {
        pid,
        state: fields.first()?.chars().next()?,
        pgrp: fields.get(2)?.parse().ok()?,
        rss_pages: fields.get(21)?.parse().ok()?,
    })
}

/// Verdict file written by the analysis command.
#[derive(Clone, Debug, Deserialize)]
pub struct OutcomeFile {
    pub kind: String,
    #[serde(default)]
    pub detail: Option<String>,
    /// Path of an error trace, relative to the working directory.
    #[serde(default)]
    pub trace: Option<String>,
}

/// Maps an execution to its outcome. `outcome_file` is the raw content of the verdict file, if
/// one was written.
pub fn classify(exit: &ExitKind, outcome_file: Option<&str>) -> Outcome {
    match exit {
        ExitKind::KilledTimeout => Outcome::new(OutcomeKind::TimeOut),
        ExitKind::KilledSpaceout => Outcome::new(OutcomeKind::SpaceOut),
        ExitKind::SpawnFailure { message } => {
            Outcome::with_detail(OutcomeKind::ToolError, format!("spawn failed: {message}"))
        }
        ExitKind::Completed { code } if *code != 0 => {
            Outcome::with_detail(OutcomeKind::ToolError, format!("exit code {code}"))
        }
        ExitKind::Completed { .. } => {
            let Some(text) = outcome_file else {
                return Outcome::new(OutcomeKind::Pass);
            };
            match serde_json::from_str::<OutcomeFile>(text) {
                Ok(f) => {
                    let kind = match f.kind.to_ascii_lowercase().as_str() {
                        "pass" => OutcomeKind::Pass,
                        "defect" => OutcomeKind::Defect,
                        other => {
                            return Outcome::with_detail(
                                OutcomeKind::ToolError,
                                format!("unrecognized verdict {other:?}"),
                            )
                        }
                    };
                    Outcome {
                        kind,
                        detail: f.detail,
                        trace_ref: None,
                    }
                }
                Err(e) => Outcome::with_detail(OutcomeKind::ToolError, format!("malformed {OUTCOME_FILE}: {e}")),
            }
        }
    }
}

/// Reads the verdict file from `workdir` and classifies.
pub fn classify_in(exit: &ExitKind, workdir: &Path) -> Outcome {
    let text = fs::read_to_string(workdir.join(OUTCOME_FILE)).ok();
    classify(exit, text.as_deref())
}
