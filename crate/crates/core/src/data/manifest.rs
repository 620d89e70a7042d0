//! Declarative dataset manifest (TOML).
//!
//! ```toml
//! name = "abd-ct"
//! modality = "CT"
//!
//! [[classes]]
//! id = 1
//! name = "spleen"
//!
//! [[scans]]
//! patient_id = "img0001"
//! image = "images/img0001.nii.gz"
//! label = "labels/label0001.nii.gz"
//! ```
//!
//! Scan paths are resolved relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::{ClassCatalog, ClassInfo, Modality};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub patient_id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub modality: Modality,
    pub classes: Vec<ClassInfo>,
    pub scans: Vec<ScanEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn catalog(&self) -> ClassCatalog {
        ClassCatalog {
            classes: self.classes.clone(),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut manifest: Manifest = toml::from_str(text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: describe_toml_error(text, &e),
        })?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate(path)?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.classes {
            if c.id.is_background() {
                return Err(err(format!("class `{}` uses reserved id 0", c.name)));
            }
            if !seen.insert(c.id) {
                return Err(err(format!("duplicate class id {}", c.id)));
            }
        }
        let mut patients = std::collections::BTreeSet::new();
        for s in &self.scans {
            if !patients.insert(&s.patient_id) {
                return Err(err(format!("duplicate patient_id `{}`", s.patient_id)));
            }
        }
        Ok(())
    }

    /// Fails with the offending entry if any referenced file is missing.
    pub fn check_files(&self) -> Result<()> {
        for s in &self.scans {
            for p in [&s.image, &s.label] {
                let full = self.base_dir.join(p);
                if !full.exists() {
                    return Err(Error::Manifest {
                        path: self.base_dir.clone(),
                        message: format!(
                            "scan `{}` references missing file {}",
                            s.patient_id,
                            full.display()
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

fn describe_toml_error(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}
