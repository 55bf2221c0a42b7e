use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{ResourceLimits, ToolVersionId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub name: String,
    /// Relative paths resolve against the manifest's directory.
    pub source_dir: PathBuf,
    pub build: String,
    /// Binary name → substitute command run in its place during the intercepted build.
    #[serde(default)]
    pub intercept: BTreeMap<String, String>,
    /// Overrides the manifest-wide template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyze_template: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineHooks {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_build: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_build: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_analysis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_analysis: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Local,
    Cloud { fabric: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalOptions {
    /// Concurrent checks; defaults to the machine's logical cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cores: Option<usize>,
    /// Installed tool version used by the local backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_dir: Option<PathBuf>,
}

fn default_parallelism() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub modules: Vec<ModuleSpec>,
    pub rules: Vec<String>,
    pub version: ToolVersionId,
    #[serde(default)]
    pub limits: ResourceLimits,
    /// Default analysis command; `{rule}`, `{module}` and `{version}` expand per task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyze_template: Option<String>,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    #[serde(default = "default_parallelism")]
    pub compile_parallelism: usize,
    #[serde(default)]
    pub hooks: PipelineHooks,
    #[serde(default)]
    pub local: LocalOptions,
}

fn default_backend() -> Backend {
    Backend::Local
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("reading manifest {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid manifest: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

impl Manifest {
    /// Loads and validates a manifest file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        // Tasks run in their own directories, so relative paths must not survive loading.
        let base = std::path::absolute(base).map_err(|source| ManifestError::Io {
            path: path.to_owned(),
            source,
        })?;
        manifest.resolve_paths(&base);
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for m in &mut self.modules {
            if m.source_dir.is_relative() {
                m.source_dir = base.join(&m.source_dir);
            }
        }
        if let Some(dir) = &mut self.local.tool_dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
    }

    pub fn template_for<'a>(&'a self, module: &'a ModuleSpec) -> Option<&'a str> {
        module
            .analyze_template
            .as_deref()
            .or(self.analyze_template.as_deref())
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut problems = Vec::new();
        if self.modules.is_empty() {
            problems.push("modules must be non-empty".to_owned());
        }
        if self.rules.is_empty() {
            problems.push("rules must be non-empty".to_owned());
        }
        if !self.version.is_valid() {
            problems.push(format!("version {:?} is not a valid id", self.version.as_str()));
        }
        if self.limits.timeout < 1 || self.limits.spaceout < 1 {
            problems.push("limits must be ≥ 1".to_owned());
        }
        if self.compile_parallelism < 1 {
            problems.push("compile_parallelism must be ≥ 1".to_owned());
        }
        let mut names = BTreeSet::new();
        for m in &self.modules {
            if !names.insert(&m.name) {
                problems.push(format!("duplicate module {:?}", m.name));
            }
            match self.template_for(m) {
                None => problems.push(format!("module {:?} has no analyze_template", m.name)),
                Some(t) if !t.contains("{rule}") => {
                    problems.push(format!("analyze_template for {:?} lacks {{rule}}", m.name))
                }
                Some(_) => {}
            }
        }
        let mut rules = BTreeSet::new();
        for r in &self.rules {
            if r.is_empty() || !rules.insert(r) {
                problems.push(format!("rule {r:?} is empty or duplicated"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ManifestError::Invalid(problems))
        }
    }

    pub fn check_count(&self) -> usize {
        self.modules.len() * self.rules.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> Manifest {
        serde_json::from_str(json).unwrap()
    }

    const MINIMAL: &str = r#"{
        "modules": [{"name": "m", "source_dir": "src", "build": "true"}],
        "rules": ["r1"],
        "version": "v1",
        "analyze_template": "{tool_dir}/run-analysis {rule}"
    }"#;

    #[test]
    fn defaults() {
        let m = parse(MINIMAL);
        assert_eq!(m.backend, Backend::Local);
        assert_eq!(m.compile_parallelism, 1);
        assert_eq!(m.limits, ResourceLimits::default());
        m.validate().unwrap();
    }

    #[test]
    fn backend_forms() {
        let m = parse(&MINIMAL.replace(
            r#""version""#,
            r#""backend": {"cloud": {"fabric": "http://h:1"}}, "version""#,
        ));
        assert_eq!(
            m.backend,
            Backend::Cloud {
                fabric: "http://h:1".into()
            }
        );
    }

    #[test]
    fn rejects_degenerate() {
        let mut m = parse(MINIMAL);
        m.rules.clear();
        assert!(matches!(m.validate(), Err(ManifestError::Invalid(_))));

        let mut m = parse(MINIMAL);
        m.analyze_template = Some("run".into());
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("{rule}"), "{err}");

        let mut m = parse(MINIMAL);
        m.modules.push(m.modules[0].clone());
        assert!(m.validate().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_manifest() {
        let mut m = parse(MINIMAL);
        m.resolve_paths(Path::new("/work/suite"));
        assert_eq!(m.modules[0].source_dir, Path::new("/work/suite/src"));
    }
}
