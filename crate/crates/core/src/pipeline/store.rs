//! Run directories: the pseudolabel store, training manifests and stage
//! reports, plus the provenance audit over them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::StageReport;
use crate::backends::ModelHandle;
use crate::corpus::{DataFormat, Dataset, Side};
use crate::error::{Error, Result};

pub const STORE_FILE: &str = "store.jsonl";
pub const MANIFEST_FILE: &str = "manifests.jsonl";
pub const REPORT_FILE: &str = "reports.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Which examples a model was trained on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub model_id: String,
    pub stage: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    pub ids: BTreeSet<String>,
}

impl ManifestRecord {
    pub fn of(handle: &ModelHandle, stage: u32, side: Option<Side>) -> Self {
        ManifestRecord {
            model_id: handle.model_id.clone(),
            stage,
            side,
            ids: handle.manifest.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn append_record<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(RunDir { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::validation(format!("run directory {} does not exist", root.display())));
        }
        Ok(RunDir { root })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn load_store(&self, format: DataFormat) -> Result<Option<Dataset>> {
        let path = self.file(STORE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let reader = BufReader::new(File::open(&path)?);
        Dataset::read_jsonl("store", reader, format, &path).map(Some)
    }

    /// Replace the store atomically.
    pub fn save_store(&self, store: &Dataset) -> Result<()> {
        let tmp = self.file(&format!("{STORE_FILE}.tmp"));
        store.save(&tmp)?;
        fs::rename(&tmp, self.file(STORE_FILE))?;
        Ok(())
    }

    pub fn append_manifest(&self, record: &ManifestRecord) -> Result<()> {
        append_record(&self.file(MANIFEST_FILE), record)
    }

    pub fn manifests(&self) -> Result<Vec<ManifestRecord>> {
        read_records(&self.file(MANIFEST_FILE))
    }

    pub fn append_report(&self, report: &StageReport) -> Result<()> {
        append_record(&self.file(REPORT_FILE), report)
    }

    pub fn reports(&self) -> Result<Vec<StageReport>> {
        read_records(&self.file(REPORT_FILE))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub labels_checked: usize,
    /// (id, stage, producer) of labels whose producer was trained on the id.
    pub self_labeled: Vec<(String, u32, String)>,
    /// Producers of stage >= 1 labels with no recorded manifest.
    pub unknown_producers: BTreeSet<String>,
    /// Ids whose label history is not ordered by stage.
    pub out_of_order: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.self_labeled.is_empty() && self.unknown_producers.is_empty() && self.out_of_order.is_empty()
    }
}

/// Check every stage >= 1 label against its producer's training manifest.
pub fn audit_store(store: &Dataset, manifests: &[ManifestRecord]) -> AuditReport {
    let by_model: BTreeMap<&str, &ManifestRecord> = manifests.iter().map(|m| (m.model_id.as_str(), m)).collect();
    let mut report = AuditReport::default();
    for id in store.ids() {
        let labels = store.labels(id);
        if labels.windows(2).any(|w| w[1].stage < w[0].stage) {
            report.out_of_order.push(id.to_string());
        }
        for l in labels.iter().filter(|l| l.stage >= 1 && !l.is_failure()) {
            report.labels_checked += 1;
            match by_model.get(l.producer.as_str()) {
                Some(m) if m.ids.contains(id) => {
                    report.self_labeled.push((id.to_string(), l.stage, l.producer.clone()))
                }
                Some(_) => {}
                None => {
                    report.unknown_producers.insert(l.producer.clone());
                }
            }
        }
    }
    report
}

/// Whether `before` is an earlier state of `after`: same examples, and each
/// label history a prefix of the later one.
pub fn is_append_only_extension(before: &Dataset, after: &Dataset) -> bool {
    before.len() == after.len()
        && before.examples() == after.examples()
        && before.ids().all(|id| after.labels(id).starts_with(before.labels(id)))
}
