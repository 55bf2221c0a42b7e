//! Per-module build pipeline: hooks, a plain build, then an intercepted rebuild in which named
//! binaries are replaced by recording wrappers that emit analysis artifacts.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::manifest::{ModuleSpec, PipelineHooks};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Station {
    PreBuild,
    PostBuild,
    PreAnalysis,
    PostAnalysis,
}

impl Station {
    pub fn as_str(self) -> &'static str {
        match self {
            Station::PreBuild => "pre_build",
            Station::PostBuild => "post_build",
            Station::PreAnalysis => "pre_analysis",
            Station::PostAnalysis => "post_analysis",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PipelineError {
    #[error("source directory {path} does not exist")]
    MissingSource { path: String },
    #[error("{station} hook failed: {detail}")]
    HookFailed { station: String, detail: String },
    #[error("build failed: {detail}")]
    BuildFailed { detail: String },
    #[error("intercepted build failed: {detail}")]
    InterceptFailed { detail: String },
    #[error("pipeline I/O: {detail}")]
    Io { detail: String },
}

fn io_err(e: std::io::Error) -> PipelineError {
    PipelineError::Io {
        detail: e.to_string(),
    }
}

/// One call the intercepted build made to a substituted binary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invocation {
    pub tool: String,
    pub argv: Vec<String>,
    pub cwd: String,
    /// Unix milliseconds.
    pub timestamp: u64,
}

/// Outputs of a module's intercepted build.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactSet {
    pub module: String,
    /// Relative path → contents.
    pub files: Vec<(String, Vec<u8>)>,
    pub journal: Vec<Invocation>,
    pub warnings: Vec<String>,
}

impl ArtifactSet {
    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }
}

struct Shell<'a> {
    cwd: &'a Path,
    env: Vec<(String, String)>,
}

impl Shell<'_> {
    fn run(&self, command: &str) -> Result<(), String> {
        let out = Command::new("/bin/sh")
            .arg("-c")
            .arg(command)
            .current_dir(self.cwd)
            .envs(self.env.iter().map(|(k, v)| (k, v)))
            .stdin(Stdio::null())
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            return Ok(());
        }
        let stderr = String::from_utf8_lossy(&out.stderr);
        let tail: String = stderr.lines().rev().take(5).collect::<Vec<_>>().into_iter().rev().collect::<Vec<_>>().join("\n");
        Err(format!("{} ({})", out.status, tail.trim()))
    }
}

fn run_hook(shell: &Shell, hooks: &PipelineHooks, station: Station) -> Result<(), PipelineError> {
    let command = match station {
        Station::PreBuild => &hooks.pre_build,
        Station::PostBuild => &hooks.post_build,
        Station::PreAnalysis => &hooks.pre_analysis,
        Station::PostAnalysis => &hooks.post_analysis,
    };
    let Some(command) = command else {
        return Ok(());
    };
    let mut env = shell.env.clone();
    env.push(("VERIFARM_STATION".into(), station.as_str().into()));
    Shell { cwd: shell.cwd, env }
        .run(command)
        .map_err(|detail| PipelineError::HookFailed {
            station: station.as_str().into(),
            detail,
        })
}

/// Runs the post-analysis hook for a module once its results are known.
pub fn run_post_analysis(module: &ModuleSpec, hooks: &PipelineHooks, results_file: &Path) -> Result<(), PipelineError> {
    let shell = Shell {
        cwd: &module.source_dir,
        env: vec![
            ("VERIFARM_MODULE".into(), module.name.clone()),
            ("VERIFARM_RESULTS".into(), results_file.to_string_lossy().into_owned()),
        ],
    };
    run_hook(&shell, hooks, Station::PostAnalysis)
}

/// Builds `module` twice, the second time with its intercepted binaries substituted, and
/// collects what the substitutes wrote to `$VERIFARM_ARTIFACT_DIR`.
pub fn run_pipeline(module: &ModuleSpec, hooks: &PipelineHooks) -> Result<ArtifactSet, PipelineError> {
    if !module.source_dir.is_dir() {
        return Err(PipelineError::MissingSource {
            path: module.source_dir.display().to_string(),
        });
    }
    let scratch = tempfile::Builder::new()
        .prefix("verifarm-pipeline-")
        .tempdir()
        .map_err(io_err)?;
    let wrappers = scratch.path().join("bin");
    let journal_dir = scratch.path().join("journal");
    let artifact_dir = scratch.path().join("artifacts");
    for d in [&wrappers, &journal_dir, &artifact_dir] {
        fs::create_dir_all(d).map_err(io_err)?;
    }

    let base_env = vec![
        ("VERIFARM_MODULE".to_owned(), module.name.clone()),
        ("VERIFARM_SOURCE_DIR".to_owned(), module.source_dir.to_string_lossy().into_owned()),
        ("VERIFARM_ARTIFACT_DIR".to_owned(), artifact_dir.to_string_lossy().into_owned()),
    ];
    let shell = Shell {
        cwd: &module.source_dir,
        env: base_env.clone(),
    };

    run_hook(&shell, hooks, Station::PreBuild)?;
    shell
        .run(&module.build)
        .map_err(|detail| PipelineError::BuildFailed { detail })?;
    run_hook(&shell, hooks, Station::PostBuild)?;

    for (tool, action) in &module.intercept {
        write_wrapper(&wrappers, tool, action).map_err(io_err)?;
    }
    let path = format!(
        "{}:{}",
        wrappers.display(),
        std::env::var("PATH").unwrap_or_else(|_| "/usr/bin:/bin".into())
    );
    let mut env = base_env.clone();
    env.push(("PATH".into(), path));
    env.push(("VERIFARM_JOURNAL_DIR".into(), journal_dir.to_string_lossy().into_owned()));
    Shell {
        cwd: &module.source_dir,
        env,
    }
    .run(&module.build)
    .map_err(|detail| PipelineError::InterceptFailed { detail })?;

    let mut set = ArtifactSet {
        module: module.name.clone(),
        files: collect_files(&artifact_dir).map_err(io_err)?,
        journal: read_journal(&journal_dir).map_err(io_err)?,
        warnings: Vec::new(),
    };
    if set.journal.is_empty() && !module.intercept.is_empty() {
        set.warnings.push(format!(
            "interception journal is empty: no call to {} was observed",
            module.intercept.keys().cloned().collect::<Vec<_>>().join(", ")
        ));
    }
    run_hook(&shell, hooks, Station::PreAnalysis)?;
    Ok(set)
}

fn write_wrapper(dir: &Path, tool: &str, action: &str) -> std::io::Result<()> {
    let action_file = dir.join(format!(".{tool}.action"));
    fs::write(&action_file, action)?;
    // Journal record: NUL-separated timestamp, cwd, tool, then the arguments.
    let script = format!(
        "#!/bin/sh\n\
         rec=$(mktemp \"$VERIFARM_JOURNAL_DIR/call.XXXXXXXX\")\n\
         printf '%s\\0' \"$(date +%s%3N)\" \"$PWD\" '{tool}' \"$@\" > \"$rec\"\n\
         exec /bin/sh '{action}' \"$@\"\n",
        tool = tool.replace('\'', ""),
        action = action_file.display(),
    );
    let path = dir.join(tool);
    fs::write(&path, script)?;
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755))
}

fn read_journal(dir: &Path) -> std::io::Result<Vec<Invocation>> {
    let mut calls = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for path in entries {
        let bytes = fs::read(&path)?;
        let mut fields = bytes
            .split(|&b| b == 0)
            .map(|f| String::from_utf8_lossy(f).into_owned());
        let timestamp = fields.next().and_then(|t| t.parse().ok()).unwrap_or(0);
        let cwd = fields.next().unwrap_or_default();
        let tool = fields.next().unwrap_or_default();
        let mut argv: Vec<String> = fields.collect();
        // printf leaves a trailing separator.
        if argv.last().is_some_and(|a| a.is_empty()) {
            argv.pop();
        }
        calls.push(Invocation {
            tool,
            argv,
            cwd,
            timestamp,
        });
    }
    calls.sort_by_key(|c| c.timestamp);
    Ok(calls)
}

fn collect_files(root: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
                out.push((rel, fs::read(&path)?));
            }
        }
    }
    out.sort();
    Ok(out)
}
