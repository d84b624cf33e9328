//! Labelled audit samples and the three-message dialogue training format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::label::{UnknownLabel, VulnerabilityLabel};

/// System instruction of every training dialogue. The missing space after the
/// first period is part of the format.
pub const AUDITOR_INSTRUCTION: &str = "You are a smart contract auditor.Review the following smart contract code in detail and identify vulnerabilities type within it.";

/// Marker line separating contract code from its description in the user turn.
pub const DESCRIPTION_DELIMITER: &str = "--- DESCRIPTION ---";

/// Header placed before each file when several files form one sample.
pub const FILE_MARKER_PREFIX: &str = "// ===== File: ";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sample source code is empty")]
    EmptySource,
    #[error("split ratio must be in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("record {index}: {source}")]
    Label {
        index: usize,
        #[source]
        source: UnknownLabel,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSample {
    pub id: String,
    pub source_code: String,
    pub description: String,
    pub label: VulnerabilityLabel,
    pub project: String,
}

/// Content hash over `(source_code, description, label)`.
pub fn sample_id(source_code: &str, description: &str, label: VulnerabilityLabel) -> String {
    let mut h = Sha256::new();
    for part in [source_code, description, label.canonical_name()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

impl AuditSample {
    pub fn new(
        source_code: impl Into<String>,
        description: impl Into<String>,
        label: VulnerabilityLabel,
        project: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let source_code = source_code.into();
        if source_code.is_empty() {
            return Err(DatasetError::EmptySource);
        }
        let description = description.into();
        Ok(AuditSample {
            id: sample_id(&source_code, &description, label),
            source_code,
            description,
            label,
            project: project.into(),
        })
    }

    /// Recovers the sample a dialogue record was built from. The project is
    /// not part of the record and comes back empty.
    pub fn from_record(record: &DialogueRecord) -> Result<Self, DatasetError> {
        let invalid = |reason: String| DatasetError::InvalidRecord { index: 0, reason };
        record.validate().map_err(invalid)?;
        let (code, desc) = record
            .user_parts()
            .ok_or_else(|| invalid(format!("user message lacks the `{DESCRIPTION_DELIMITER}` line")))?;
        let label = record.label().map_err(|source| DatasetError::Label { index: 0, source })?;
        AuditSample::new(code, desc, label, "")
    }
}

/// A JSONL line holding either an [`AuditSample`] or a [`DialogueRecord`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleLine {
    Sample(AuditSample),
    Record(DialogueRecord),
}

/// Reads samples from JSONL in either representation.
pub fn read_sample_lines(bytes: &[u8]) -> Result<Vec<AuditSample>, DatasetError> {
    let lines: Vec<SampleLine> = jsonl::from_jsonl(bytes)?;
    lines
        .into_iter()
        .enumerate()
        .map(|(index, line)| match line {
            SampleLine::Sample(s) => Ok(s),
            SampleLine::Record(r) => AuditSample::from_record(&r).map_err(|e| match e {
                DatasetError::InvalidRecord { reason, .. } => DatasetError::InvalidRecord { index, reason },
                other => other,
            }),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message {
            role,
            content: content.into(),
        }
    }
}

/// One training dialogue: system instruction, user code + description, and
/// the assistant's label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub messages: Vec<Message>,
}

impl DialogueRecord {
    /// Checks role order, the fixed system text, and the assistant label.
    pub fn validate(&self) -> Result<(), String> {
        let roles: Vec<Role> = self.messages.iter().map(|m| m.role).collect();
        if roles != [Role::System, Role::User, Role::Assistant] {
            return Err(format!("expected roles system,user,assistant, got {roles:?}"));
        }
        if self.messages[0].content != AUDITOR_INSTRUCTION {
            return Err("system message is not the auditor instruction".into());
        }
        self.messages[2]
            .content
            .parse::<VulnerabilityLabel>()
            .map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn label(&self) -> Result<VulnerabilityLabel, UnknownLabel> {
        let content = self
            .messages
            .iter()
            .find(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        content.parse()
    }

    /// Splits the user turn back into `(source_code, description)`.
    pub fn user_parts(&self) -> Option<(&str, &str)> {
        let user = self.messages.iter().find(|m| m.role == Role::User)?;
        let sep = format!("\n{DESCRIPTION_DELIMITER}\n");
        user.content.split_once(sep.as_str())
    }

    /// Id of the sample this record was built from.
    pub fn sample_id(&self) -> Option<String> {
        let (code, desc) = self.user_parts()?;
        Some(sample_id(code, desc, self.label().ok()?))
    }
}

pub fn build_record(sample: &AuditSample) -> DialogueRecord {
    DialogueRecord {
        messages: vec![
            Message::new(Role::System, AUDITOR_INSTRUCTION),
            Message::new(
                Role::User,
                format!(
                    "{}\n{DESCRIPTION_DELIMITER}\n{}",
                    sample.source_code, sample.description
                ),
            ),
            Message::new(Role::Assistant, sample.label.canonical_name()),
        ],
    }
}

pub fn serialize(records: &[DialogueRecord]) -> Vec<u8> {
    jsonl::to_jsonl(records)
}

/// Parses and validates newline-delimited dialogue records.
pub fn parse(bytes: &[u8]) -> Result<Vec<DialogueRecord>, DatasetError> {
    let records: Vec<DialogueRecord> = jsonl::from_jsonl(bytes)?;
    for (index, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|reason| DatasetError::InvalidRecord { index, reason })?;
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<DialogueRecord>,
    pub test: Vec<AuditSample>,
    pub seed: u64,
    pub ratio: f64,
    pub warnings: Vec<String>,
}

/// Number of train groups for each stratum. Every stratum of size `n >= 2`
/// gets between 1 and `n - 1`, and within one of `n * ratio`.
fn allocate(sizes: &[usize], ratio: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (total as f64 * ratio).round() as usize;
    let mut alloc: Vec<usize> = sizes
        .iter()
        .map(|&n| match n {
            0 => 0,
            1 => 1,
            n => ((n as f64 * ratio).floor() as usize).clamp(1, n - 1),
        })
        .collect();
    let mut assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    let shortfall: Vec<f64> = (0..sizes.len()).map(|i| sizes[i] as f64 * ratio - alloc[i] as f64).collect();
    // Largest shortfall first; index breaks ties so the result is stable.
    order.sort_by(|&a, &b| shortfall[b].total_cmp(&shortfall[a]).then(a.cmp(&b)));
    for i in order {
        if assigned >= target {
            break;
        }
        let n = sizes[i];
        if n >= 2 && alloc[i] < n - 1 && shortfall[i] > 0.0 {
            alloc[i] += 1;
            assigned += 1;
        }
    }
    alloc
}

/// Stratified, seeded train/test split.
///
/// Samples sharing an id always land on the same side. A label with a single
/// sample goes to train and produces a warning.
pub fn split(samples: &[AuditSample], ratio: f64, seed: u64) -> Result<DatasetSplit, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // label -> id -> members, both in deterministic order
    let mut strata: BTreeMap<VulnerabilityLabel, BTreeMap<&str, Vec<&AuditSample>>> = BTreeMap::new();
    for s in samples {
        strata
            .entry(s.label)
            .or_default()
            .entry(s.id.as_str())
            .or_default()
            .push(s);
    }

    let mut groups_per_stratum: Vec<(VulnerabilityLabel, Vec<Vec<&AuditSample>>)> = strata
        .into_iter()
        .map(|(label, by_id)| (label, by_id.into_values().collect()))
        .collect();
    for (_, groups) in groups_per_stratum.iter_mut() {
        groups.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = groups_per_stratum.iter().map(|(_, g)| g.len()).collect();
    let alloc = allocate(&sizes, ratio);

    let mut warnings = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((label, groups), n_train) in groups_per_stratum.into_iter().zip(alloc) {
        if groups.len() == 1 {
            warnings.push(format!(
                "label `{label}` has a single sample; it goes to train only"
            ));
        }
        for (i, group) in groups.into_iter().enumerate() {
            if i < n_train {
                train.extend(group);
            } else {
                test.extend(group);
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);

    Ok(DatasetSplit {
        train: train.into_iter().map(build_record).collect(),
        test: test.into_iter().cloned().collect(),
        seed,
        ratio,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    /// One sample per manifest entry.
    #[default]
    PerFile,
    /// Entries of one project sharing a label are concatenated into one sample.
    PerProject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelSpec {
    One(VulnerabilityLabel),
    Many(Vec<VulnerabilityLabel>),
}

impl LabelSpec {
    pub fn labels(&self) -> Vec<VulnerabilityLabel> {
        match self {
            LabelSpec::One(l) => vec![*l],
            LabelSpec::Many(ls) => ls.clone(),
        }
    }
}

/// One row of a sample manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_path: Option<String>,
    /// A label or a list of labels; a multi-flaw contract yields one sample
    /// per label.
    pub label: LabelSpec,
    pub project: String,
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

type FileRow = (String, String, String);

/// Loads samples from a manifest file, or from `manifest.json` inside a
/// directory.
pub fn load_samples(input: &Path, granularity: Granularity) -> Result<Vec<AuditSample>, DatasetError> {
    let manifest_path = if input.is_dir() {
        input.join("manifest.json")
    } else {
        input.to_path_buf()
    };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let text = read_text(&manifest_path)?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|source| DatasetError::Manifest {
            path: manifest_path.clone(),
            source,
        })?;

    // (project, label) -> [(path, code, description)]
    let mut rows: Vec<(String, VulnerabilityLabel, String, String, String)> = Vec::new();
    for e in &entries {
        let code = read_text(&base.join(&e.path))?;
        let description = match &e.description_path {
            Some(p) => read_text(&base.join(p))?,
            None => String::new(),
        };
        for label in e.label.labels() {
            rows.push((e.project.clone(), label, e.path.clone(), code.clone(), description.clone()));
        }
    }

    match granularity {
        Granularity::PerFile => rows
            .into_iter()
            .map(|(project, label, _, code, desc)| AuditSample::new(code, desc, label, project))
            .collect(),
        Granularity::PerProject => {
            // (path, code, description) per file of one project and label.
            let mut grouped: BTreeMap<(String, VulnerabilityLabel), Vec<FileRow>> = BTreeMap::new();
            for (project, label, path, code, desc) in rows {
                grouped.entry((project, label)).or_default().push((path, code, desc));
            }
            grouped
                .into_iter()
                .map(|((project, label), mut files)| {
                    files.sort();
                    let code = files
                        .iter()
                        .map(|(p, c, _)| format!("{FILE_MARKER_PREFIX}{p} =====\n{c}"))
                        .collect::<Vec<_>>()
                        .join("\n");
                    let desc = files
                        .iter()
                        .map(|(_, _, d)| d.as_str())
                        .filter(|d| !d.is_empty())
                        .collect::<Vec<_>>()
                        .join("\n");
                    AuditSample::new(code, desc, label, project)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(code: &str, label: VulnerabilityLabel) -> AuditSample {
        AuditSample::new(code, "desc", label, "p").unwrap()
    }

    #[test]
    fn record_carries_canonical_label() {
        let r = build_record(&sample("contract A {}", VulnerabilityLabel::Reentrancy));
        assert_eq!(r.messages.len(), 3);
        assert_eq!(r.messages[2].content, "reentrancy");
        assert_eq!(r.messages[0].content, AUDITOR_INSTRUCTION);
        assert_eq!(
            AUDITOR_INSTRUCTION,
            "You are a smart contract auditor.Review the following smart contract code in detail and identify vulnerabilities type within it."
        );
        r.validate().unwrap();
    }

    #[test]
    fn empty_description_still_three_messages() {
        let s = AuditSample::new("contract A {}", "", VulnerabilityLabel::None, "p").unwrap();
        let r = build_record(&s);
        assert_eq!(r.messages.len(), 3);
        assert_eq!(r.user_parts(), Some(("contract A {}", "")));
        assert_eq!(r.sample_id().as_deref(), Some(s.id.as_str()));
    }

    #[test]
    fn empty_source_rejected() {
        assert!(matches!(
            AuditSample::new("", "d", VulnerabilityLabel::None, "p"),
            Err(DatasetError::EmptySource)
        ));
    }

    #[test]
    fn serialized_key_order() {
        let r = build_record(&sample("c", VulnerabilityLabel::Arithmetic));
        let line = String::from_utf8(serialize(&[r])).unwrap();
        let sys = line.find("\"system\"").unwrap();
        let user = line.find("\"user\"").unwrap();
        let asst = line.find("\"assistant\"").unwrap();
        assert!(sys < user && user < asst);
        assert!(line.starts_with("{\"messages\":["));
        assert!(line.ends_with("}\n"));
    }

    #[test]
    fn parse_rejects_bad_role_order() {
        let bad = br#"{"messages":[{"role":"user","content":"x"},{"role":"system","content":"y"},{"role":"assistant","content":"none"}]}"#;
        assert!(matches!(parse(bad), Err(DatasetError::InvalidRecord { index: 0, .. })));
    }

    #[test]
    fn split_ten_samples_is_deterministic() {
        let mut samples = Vec::new();
        for i in 0..5 {
            samples.push(sample(&format!("a{i}"), VulnerabilityLabel::Reentrancy));
            samples.push(sample(&format!("b{i}"), VulnerabilityLabel::None));
        }
        let a = split(&samples, 0.8, 7).unwrap();
        let b = split(&samples, 0.8, 7).unwrap();
        assert_eq!(a.train.len(), 8);
        assert_eq!(a.test.len(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn single_sample_label_goes_to_train() {
        let samples = vec![
            sample("c1", VulnerabilityLabel::PriceManipulation),
            sample("a1", VulnerabilityLabel::Reentrancy),
            sample("a2", VulnerabilityLabel::Reentrancy),
        ];
        let s = split(&samples, 0.5, 3).unwrap();
        assert!(s.test.iter().all(|t| t.label != VulnerabilityLabel::PriceManipulation));
        assert!(s
            .train
            .iter()
            .any(|r| r.label().unwrap() == VulnerabilityLabel::PriceManipulation));
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn invalid_ratio() {
        assert!(split(&[], 0.0, 1).is_err());
        assert!(split(&[], 1.0, 1).is_err());
    }

    #[test]
    fn duplicate_ids_stay_together() {
        let s = sample("same", VulnerabilityLabel::Reentrancy);
        let samples = vec![s.clone(), s.clone(), sample("x", VulnerabilityLabel::Reentrancy)];
        for seed in 0..20 {
            let sp = split(&samples, 0.5, seed).unwrap();
            let in_test = sp.test.iter().filter(|t| t.id == s.id).count();
            assert!(in_test == 0 || in_test == 2);
        }
    }

    #[test]
    fn allocation_respects_bounds() {
        assert_eq!(allocate(&[10], 0.8), vec![8]);
        assert_eq!(allocate(&[5, 5], 0.8), vec![4, 4]);
        assert_eq!(allocate(&[2, 2, 2], 0.9), vec![1, 1, 1]);
        assert_eq!(allocate(&[1], 0.5), vec![1]);
    }

    #[test]
    fn manifest_per_file_and_per_project() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("A.sol"), "contract A {}").unwrap();
        fs::write(dir.path().join("B.sol"), "contract B {}").unwrap();
        fs::write(dir.path().join("a.md"), "calls out before update").unwrap();
        fs::write(
            dir.path().join("manifest.json"),
            r#"[
  {"path":"A.sol","description_path":"a.md","label":["reentrancy","arithmetic"],"project":"p1"},
  {"path":"B.sol","label":"reentrancy","project":"p1"}
]"#,
        )
        .unwrap();
        let per_file = load_samples(dir.path(), Granularity::PerFile).unwrap();
        assert_eq!(per_file.len(), 3);
        assert_eq!(per_file[0].description, "calls out before update");
        let per_project = load_samples(&dir.path().join("manifest.json"), Granularity::PerProject).unwrap();
        assert_eq!(per_project.len(), 2);
        let re = per_project
            .iter()
            .find(|s| s.label == VulnerabilityLabel::Reentrancy)
            .unwrap();
        assert!(re.source_code.contains("// ===== File: A.sol ====="));
        assert!(re.source_code.contains("// ===== File: B.sol ====="));
    }
}
