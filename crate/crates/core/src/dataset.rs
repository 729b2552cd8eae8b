//! JSON-lines dataset ingestion with line-numbered diagnostics. A malformed
//! line rejects the whole file so a split never half-loads.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One report with either a precomputed-feature file or a raw image file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default)]
    pub report: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

impl DatasetRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        match (&self.feature_path, &self.image_path) {
            (Some(_), Some(_)) => {
                return Err("record has both feature_path and image_path".into())
            }
            (None, None) => {
                return Err("record has neither feature_path nor image_path".into())
            }
            _ => {}
        }
        if self.report.trim().is_empty() && self.split != Split::Test {
            return Err(format!("record {} has an empty report in split {}", self.id, self.split));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != 14 || labels.iter().any(|&b| b > 1) {
                return Err(format!(
                    "record {} labels must be exactly 14 binary digits",
                    self.id
                ));
            }
        }
        Ok(())
    }
}

/// Parse a whole JSONL file; any bad line fails the load with its number.
pub fn load_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data { path: path.into(), line: 0, msg: e.to_string() })?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Data {
            path: path.into(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        record.validate().map_err(|msg| Error::Data {
            path: path.into(),
            line: idx + 1,
            msg,
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Data { path: path.into(), line: 0, msg: "no records".into() });
    }
    Ok(records)
}

pub fn filter_split(records: &[DatasetRecord], split: Split) -> Vec<DatasetRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_well_formed_records() {
        let f = write_file(&[
            r#"{"id":"a","feature_path":"a.r2gf","report":"clear lungs .","split":"train"}"#,
            r#"{"id":"b","image_path":"b.png","report":"stable .","split":"val","labels":[0,1,0,0,0,0,0,0,0,0,0,0,0,1]}"#,
        ]);
        let records = load_jsonl(f.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1].labels.as_ref().unwrap().len(), 14);
    }

    #[test]
    fn malformed_line_is_rejected_with_line_number() {
        let f = write_file(&[
            r#"{"id":"a","feature_path":"a.r2gf","report":"clear .","split":"train"}"#,
            r#"{"id":"b", not json"#,
        ]);
        let err = load_jsonl(f.path()).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn record_without_any_path_is_rejected() {
        let f = write_file(&[r#"{"id":"a","report":"clear .","split":"train"}"#]);
        assert!(load_jsonl(f.path()).is_err());
    }

    #[test]
    fn record_with_both_paths_is_rejected() {
        let f = write_file(&[
            r#"{"id":"a","feature_path":"x","image_path":"y","report":"r .","split":"train"}"#,
        ]);
        assert!(load_jsonl(f.path()).is_err());
    }

    #[test]
    fn empty_train_report_is_rejected_but_test_allowed() {
        let bad = write_file(&[r#"{"id":"a","feature_path":"x","report":"","split":"train"}"#]);
        assert!(load_jsonl(bad.path()).is_err());
        let ok = write_file(&[r#"{"id":"a","feature_path":"x","report":"","split":"test"}"#]);
        assert!(load_jsonl(ok.path()).is_ok());
    }

    #[test]
    fn wrong_label_arity_is_rejected() {
        let f = write_file(&[
            r#"{"id":"a","feature_path":"x","report":"r .","split":"train","labels":[1,0]}"#,
        ]);
        assert!(load_jsonl(f.path()).is_err());
    }
}
