use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::fabric::{Fabric, FabricError};
use crate::model::ToolVersionId;
use crate::store::{extract_zip, ENTRY_POINT};

/// Marker written once an install is fully unpacked.
const COMPLETE_MARKER: &str = ".verifarm-installed";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provisioned {
    Installed(PathBuf),
    Missing(String),
}

/// Local tool installs, one directory per version, filled lazily from the fabric.
#[derive(Debug)]
pub struct VersionCache {
    dir: PathBuf,
    installed: BTreeMap<ToolVersionId, PathBuf>,
}

impl VersionCache {
    /// Opens `dir`, keeping any complete installs from an earlier run.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut installed = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let id = ToolVersionId::new(name);
            if id.is_valid() && path.join(COMPLETE_MARKER).is_file() {
                installed.insert(id, path);
            } else if name.starts_with(".tmp-") {
                let _ = fs::remove_dir_all(&path);
            }
        }
        Ok(Self {
            dir: dir.to_owned(),
            installed,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn contains(&self, id: &ToolVersionId) -> bool {
        self.installed.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.installed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.installed.is_empty()
    }

    /// Returns the install directory, downloading on a miss. A missing or unusable package is
    /// `Missing`; only fabric transport errors are `Err`.
    pub fn ensure(&mut self, fabric: &dyn Fabric, id: &ToolVersionId) -> Result<Provisioned, FabricError> {
        if let Some(path) = self.installed.get(id) {
            return Ok(Provisioned::Installed(path.clone()));
        }
        if !id.is_valid() {
            return Ok(Provisioned::Missing(format!("invalid version id {id:?}")));
        }
        let Some(archive) = fabric.download_version(id)? else {
            return Ok(Provisioned::Missing(format!("version {id} is not in the repository")));
        };
        let staging = self.dir.join(format!(".tmp-{id}-{}", uuid::Uuid::new_v4().simple()));
        let result = self.unpack(&archive, &staging);
        match result {
            Ok(()) => {
                let target = self.dir.join(id.as_str());
                let _ = fs::remove_dir_all(&target);
                fs::rename(&staging, &target).map_err(|e| FabricError::Service(format!("installing {id}: {e}")))?;
                log::info!("installed tool version {id}");
                self.installed.insert(id.clone(), target.clone());
                Ok(Provisioned::Installed(target))
            }
            Err(detail) => {
                let _ = fs::remove_dir_all(&staging);
                Ok(Provisioned::Missing(format!("version {id} unusable: {detail}")))
            }
        }
    }

    fn unpack(&self, archive: &[u8], staging: &Path) -> Result<(), String> {
        extract_zip(archive, staging).map_err(|e| e.to_string())?;
        if !staging.join(ENTRY_POINT).is_file() {
            return Err(format!("archive has no {ENTRY_POINT}"));
        }
        fs::write(staging.join(COMPLETE_MARKER), b"").map_err(|e| e.to_string())
    }
}
