//! Cohort manifests: the JSON file tying scan ids to subjects, modalities,
//! seeds, and on-disk volume paths.

use crate::error::{Error, Result};
use crate::training::ScanMeta;
use crate::volume::Modality;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    pub subject_id: String,
    pub modality: Modality,
    pub seed: u64,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
    }

    pub fn scan_meta(&self) -> Vec<ScanMeta> {
        self.entries
            .iter()
            .map(|e| ScanMeta {
                scan_id: e.scan_id.clone(),
                subject_id: e.subject_id.clone(),
                modality: e.modality,
            })
            .collect()
    }

    pub fn split(&self, which: &str) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| match (&e.split, which) {
                (Some(s), _) => s == which,
                // entries with no split tag default to training
                (None, TRAIN_SPLIT) => true,
                (None, _) => false,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_splits() {
        let manifest = Manifest {
            entries: vec![
                ManifestEntry {
                    scan_id: "phantom_000".into(),
                    subject_id: "subject_000".into(),
                    modality: Modality::T1w,
                    seed: 11,
                    image: "phantom_000.nii.gz".into(),
                    label: "phantom_000_label.nii.gz".into(),
                    split: Some(TRAIN_SPLIT.into()),
                },
                ManifestEntry {
                    scan_id: "phantom_001".into(),
                    subject_id: "subject_000".into(),
                    modality: Modality::T2w,
                    seed: 12,
                    image: "phantom_001.nii.gz".into(),
                    label: "phantom_001_label.nii.gz".into(),
                    split: Some(TEST_SPLIT.into()),
                },
            ],
        };
        let dir = std::env::temp_dir().join(format!("ssnet-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.json");
        manifest.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.split(TRAIN_SPLIT).len(), 1);
        assert_eq!(back.split(TEST_SPLIT).len(), 1);
        assert_eq!(back.scan_meta()[0].subject_id, "subject_000");
    }
}
