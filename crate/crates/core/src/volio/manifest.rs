use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of a subject within an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortTag {
    /// The cohort the network was originally tuned on.
    Original,
    /// A new cohort with ground-truth labels.
    New,
    /// Paired pre/post-contrast scans of the same subject.
    ContrastPair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    #[serde(rename = "id")]
    pub subject_id: String,
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    #[serde(rename = "labels", default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<PathBuf>,
    #[serde(rename = "paired_image", default, skip_serializing_if = "Option::is_none")]
    pub paired_image_path: Option<PathBuf>,
    #[serde(rename = "cohort")]
    pub cohort_tag: CohortTag,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub subjects: Vec<SubjectRecord>,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate subject id '{}'",
                    s.subject_id
                )));
            }
            if s.cohort_tag == CohortTag::ContrastPair && s.paired_image_path.is_none() {
                return Err(Error::Manifest(format!(
                    "subject '{}' is a contrast pair without paired_image",
                    s.subject_id
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: CohortManifest = serde_json::from_str(text)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Resolve relative paths against `base` (usually the manifest's directory).
    pub fn resolve_paths(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for s in &mut self.subjects {
            fix(&mut s.image_path);
            if let Some(p) = s.label_path.as_mut() {
                fix(p);
            }
            if let Some(p) = s.paired_image_path.as_mut() {
                fix(p);
            }
        }
        self
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }
}

/// Load and validate a manifest; relative paths are resolved against the
/// manifest's own directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CohortManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(CohortManifest::from_json(&text)?.resolve_paths(base))
}

pub fn write_manifest(manifest: &CohortManifest, path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    let path = path.as_ref();
    fs::write(path, manifest.to_json()?).map_err(|e| Error::io(path, e))
}
