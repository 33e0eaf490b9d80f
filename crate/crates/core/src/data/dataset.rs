//! JSONL caption datasets.
//!
//! One record per line: `{"image": path, "captions": [..], "prompt": optional}`.
//! Image paths are relative to the index file's directory. Two optional
//! fields extend the format: `label` (a style class, needed to train the
//! saliency scorer) and `split` (`"train"` / `"test"`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::stratified_split;
use crate::error::{Error, Result};
use crate::image_ops::load_image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: String,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Skipped {
    pub line: usize,
    pub image: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub index_path: PathBuf,
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub skipped: Vec<Skipped>,
}

/// Reads and validates a dataset. `path` is the JSONL index or a directory
/// holding `captions.jsonl`. Records whose image file is missing are listed
/// in `skipped` instead of failing the load.
pub fn ingest_dataset(path: &Path) -> Result<Dataset> {
    let index_path = if path.is_dir() {
        path.join("captions.jsonl")
    } else {
        path.to_path_buf()
    };
    if !index_path.is_file() {
        return Err(Error::Validation(format!("{}: dataset index not found", index_path.display())));
    }
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let root = index_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let record_err = |line: usize, detail: String| Error::Record {
        path: index_path.clone(),
        line,
        detail,
    };
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| record_err(line_no, e.to_string()))?;
        if record.captions.is_empty() {
            return Err(record_err(line_no, "record has no captions".into()));
        }
        if record.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(record_err(line_no, "empty caption string".into()));
        }
        if !root.join(&record.image).is_file() {
            skipped.push(Skipped {
                line: line_no,
                image: record.image.clone(),
                reason: "image file not found".into(),
            });
            continue;
        }
        records.push(record);
    }
    if records.is_empty() && skipped.is_empty() {
        return Err(Error::Validation(format!("{}: no records", index_path.display())));
    }
    if records.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no records with resolvable images ({} skipped)",
            index_path.display(),
            skipped.len()
        )));
    }
    let name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(Dataset {
        name,
        index_path,
        root,
        records,
        skipped,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].image)
    }

    pub fn load_image(&self, i: usize) -> Result<Tensor> {
        load_image(&self.image_path(i))
    }

    /// Train/test partition as a pure function of the records and `seed`.
    ///
    /// Records that all carry a `split` field keep it. Otherwise a stratified
    /// (by `label`, when every record has one) split holds out `test_ratio`.
    pub fn split(&self, seed: u64, test_ratio: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        let assignment: Vec<Split> = if self.records.iter().all(|r| r.split.is_some()) {
            self.records.iter().map(|r| r.split.unwrap()).collect()
        } else {
            let labels: Vec<usize> = if self.records.iter().all(|r| r.label.is_some()) {
                self.records.iter().map(|r| r.label.unwrap()).collect()
            } else {
                vec![0; self.records.len()]
            };
            let test = ((test_ratio * self.len() as f64).round() as usize).clamp(1, self.len().saturating_sub(1).max(1));
            stratified_split(&labels, test, seed)
        };
        let train: Vec<usize> = (0..self.len()).filter(|&i| assignment[i] == Split::Train).collect();
        let test: Vec<usize> = (0..self.len()).filter(|&i| assignment[i] == Split::Test).collect();
        if train.is_empty() || test.is_empty() {
            return Err(Error::Validation(format!(
                "split has {} train and {} test records; both must be non-empty",
                train.len(),
                test.len()
            )));
        }
        Ok((train, test))
    }

    /// Records per label; unlabeled records are not counted.
    pub fn label_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for l in self.records.iter().filter_map(|r| r.label) {
            *m.entry(l).or_insert(0) += 1;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(lines: &str, images: &[&str]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("captions.jsonl"), lines).unwrap();
        for img in images {
            let p = dir.path().join(img);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, b"P6\n1 1\n255\n\x00\x00\x00").unwrap();
        }
        dir
    }

    #[test]
    fn empty_file_has_no_records() {
        let dir = fixture("", &[]);
        let err = ingest_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no records"));
    }

    #[test]
    fn missing_captions_is_line_numbered() {
        let dir = fixture(
            "{\"image\":\"a.ppm\",\"captions\":[\"ok\"]}\n{\"image\":\"b.ppm\"}\n",
            &["a.ppm", "b.ppm"],
        );
        match ingest_dataset(dir.path()).unwrap_err() {
            Error::Record { line, detail, .. } => {
                assert_eq!(line, 2);
                assert!(detail.contains("captions"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = fixture("{\"image\":\"a.ppm\",\"captions\":[\"x\"]}\nnot json\n", &["a.ppm"]);
        assert!(matches!(ingest_dataset(dir.path()), Err(Error::Record { line: 2, .. })));
    }

    #[test]
    fn three_record_fixture() {
        let dir = fixture(
            concat!(
                "{\"image\":\"i/a.ppm\",\"captions\":[\"nice light\"]}\n",
                "{\"image\":\"i/b.ppm\",\"captions\":[\"good\",\"fine\"],\"prompt\":\"Describe.\"}\n",
                "{\"image\":\"i/c.ppm\",\"captions\":[\"soft focus\"],\"label\":2}\n",
            ),
            &["i/a.ppm", "i/b.ppm", "i/c.ppm"],
        );
        let ds = ingest_dataset(&dir.path().join("captions.jsonl")).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.skipped.is_empty());
        assert_eq!(ds.records[1].prompt.as_deref(), Some("Describe."));
        assert_eq!(ds.load_image(0).unwrap().shape(), &[1, 1, 3]);
    }

    #[test]
    fn missing_image_goes_to_skip_report() {
        let dir = fixture(
            "{\"image\":\"a.ppm\",\"captions\":[\"x\"]}\n{\"image\":\"gone.ppm\",\"captions\":[\"y\"]}\n",
            &["a.ppm"],
        );
        let ds = ingest_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.skipped.len(), 1);
        assert_eq!(ds.skipped[0].line, 2);
    }

    #[test]
    fn split_is_pure_and_disjoint() {
        let lines: String = (0..10)
            .map(|i| format!("{{\"image\":\"a.ppm\",\"captions\":[\"c{i}\"]}}\n"))
            .collect();
        let dir = fixture(&lines, &["a.ppm"]);
        let ds = ingest_dataset(dir.path()).unwrap();
        let a = ds.split(4, 0.2).unwrap();
        assert_eq!(a, ds.split(4, 0.2).unwrap());
        assert_eq!(a.1.len(), 2);
        assert!(a.0.iter().all(|i| !a.1.contains(i)));
    }
}
