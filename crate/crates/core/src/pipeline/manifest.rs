use std::collections::BTreeSet;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Multilabel,
    SingleLabel,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub labels: Vec<String>,
}

/// Rows of `path,labels`. Labels are `;`-separated; relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
    vocabulary: Vec<String>,
    kind: TaskKind,
    base_dir: PathBuf,
}

#[derive(Deserialize)]
struct RawRow {
    path: String,
    #[serde(default)]
    labels: String,
}

impl Manifest {
    /// Vocabulary is the sorted set of labels. The task is multilabel if any row
    /// has more than one label, unlabeled if none has any, else single-label.
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Self {
        let vocabulary: Vec<String> = rows
            .iter()
            .flat_map(|r| r.labels.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let kind = if vocabulary.is_empty() {
            TaskKind::Unlabeled
        } else if rows.iter().any(|r| r.labels.len() > 1) {
            TaskKind::Multilabel
        } else {
            TaskKind::SingleLabel
        };
        Self {
            rows,
            vocabulary,
            kind,
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| EatError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_reader(file, base).map_err(|e| match e {
            EatError::Data(msg) => EatError::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_reader(reader: impl Read, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| EatError::Data(e.to_string()))?;
        if headers.iter().next() != Some("path") {
            return Err(EatError::Data(format!(
                "manifest header must start with `path`, found {headers:?}"
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<RawRow>().enumerate() {
            let raw = rec.map_err(|e| EatError::Data(format!("row {}: {e}", i + 1)))?;
            if raw.path.is_empty() {
                return Err(EatError::Data(format!("row {}: empty path", i + 1)));
            }
            let labels = raw
                .labels
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            rows.push(ManifestRow {
                path: raw.path.into(),
                labels,
            });
        }
        Ok(Self::new(rows, base_dir))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| EatError::Data(e.to_string()))?;
        let fail = |e: csv::Error| EatError::Data(format!("{}: {e}", path.display()));
        w.write_record(["path", "labels"]).map_err(fail)?;
        for r in &self.rows {
            w.write_record([r.path.to_string_lossy().as_ref(), r.labels.join(";").as_str()])
                .map_err(fail)?;
        }
        w.flush().map_err(|e| EatError::io(path, e))
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    /// Checks that every row carries at least one label from `vocabulary`.
    pub fn require_labels(&self, vocabulary: &[String]) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.labels.is_empty() {
                return Err(EatError::Data(format!(
                    "row {} ({}) has no labels; unlabeled rows are only valid for pre-training",
                    i + 1,
                    r.path.display()
                )));
            }
            if let Some(l) = r.labels.iter().find(|l| !vocabulary.contains(l)) {
                return Err(EatError::Data(format!(
                    "row {} ({}): label `{l}` is not in the vocabulary {vocabulary:?}",
                    i + 1,
                    r.path.display()
                )));
            }
        }
        Ok(())
    }

    /// Multi-hot target rows over `vocabulary`.
    pub fn targets(&self, vocabulary: &[String]) -> Result<Vec<Vec<f64>>> {
        self.require_labels(vocabulary)?;
        Ok(self
            .rows
            .iter()
            .map(|r| {
                vocabulary
                    .iter()
                    .map(|v| if r.labels.contains(v) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_labels_and_infers_kind() {
        let text = "path,labels\na.wav,dog\nb.wav,cat\nc.wav,dog\n";
        let m = Manifest::from_reader(text.as_bytes(), "/data").unwrap();
        assert_eq!(m.kind(), TaskKind::SingleLabel);
        assert_eq!(m.vocabulary(), ["cat", "dog"]);
        assert_eq!(m.resolve(&m.rows()[0]), PathBuf::from("/data/a.wav"));
        assert_eq!(m.targets(m.vocabulary()).unwrap()[1], vec![1.0, 0.0]);

        let multi = Manifest::from_reader("path,labels\na.wav,x;y\nb.wav,y\n".as_bytes(), "").unwrap();
        assert_eq!(multi.kind(), TaskKind::Multilabel);

        let unl = Manifest::from_reader("path,labels\na.wav,\nb.wav,\n".as_bytes(), "").unwrap();
        assert_eq!(unl.kind(), TaskKind::Unlabeled);
        assert!(unl.require_labels(&[]).is_err());
    }

    #[test]
    fn unknown_label_is_a_data_error() {
        let m = Manifest::from_reader("path,labels\na.wav,dog\n".as_bytes(), "").unwrap();
        let err = m.targets(&["cat".to_string()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(Manifest::from_reader("file,label\na.wav,x\n".as_bytes(), "").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::from_reader("path,labels\na.wav,x;y\nb.wav,\n".as_bytes(), dir.path()).unwrap();
        let p = dir.path().join("m.csv");
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
    }
}
