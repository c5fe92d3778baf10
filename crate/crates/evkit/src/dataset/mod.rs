//! Labeled image manifests and the raster primitives shared by both feature
//! paths.
//!
//! A dataset is an explicit CSV manifest (`id,path,event,split`) rather than
//! a directory convention, so train/test splits stay auditable. Paths are
//! resolved relative to the manifest's directory; image decodability is
//! checked lazily at load time.

mod raster;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

pub use raster::RasterImage;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One labeled image reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub event: String,
    pub split: Split,
}

/// A validated set of records plus the ordered list of distinct event labels.
///
/// Immutable after construction. Event ordering is lexicographic, so it is
/// stable across runs and across manifest row permutations.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    events: Vec<String>,
}

impl DatasetManifest {
    /// Validates records and derives the event list. Row numbers in errors
    /// are 1-based CSV line numbers (the header is line 1).
    pub fn from_records(records: Vec<ImageRecord>, origin: &Path) -> Result<Self> {
        let err = |detail: String| Error::Manifest {
            path: origin.to_path_buf(),
            detail,
        };
        if records.is_empty() {
            return Err(err("no records".into()));
        }
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            let row = i + 2;
            if rec.event.is_empty() {
                return Err(err(format!("row {row}: empty event label")));
            }
            if rec.id.is_empty() {
                return Err(err(format!("row {row}: empty id")));
            }
            if let Some(&first) = seen.get(rec.id.as_str()) {
                return Err(err(format!(
                    "duplicate id `{}` at rows {} and {}",
                    rec.id, first, row
                )));
            }
            seen.insert(&rec.id, row);
        }

        let mut events: Vec<String> = records.iter().map(|r| r.event.clone()).collect();
        events.sort();
        events.dedup();
        if events.len() < 2 {
            return Err(err(format!("fewer than 2 events (found {})", events.len())));
        }
        for event in &events {
            for split in [Split::Train, Split::Test] {
                if !records
                    .iter()
                    .any(|r| r.event == *event && r.split == split)
                {
                    let first_row = records
                        .iter()
                        .position(|r| r.event == *event)
                        .map(|i| i + 2)
                        .unwrap_or(0);
                    return Err(err(format!(
                        "event `{event}` (first at row {first_row}) has no {split} records"
                    )));
                }
            }
        }
        Ok(Self { records, events })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    /// Distinct event labels, lexicographically ordered.
    pub fn events(&self) -> &[String] {
        &self.events
    }

    pub fn event_index(&self, event: &str) -> Option<usize> {
        self.events.iter().position(|e| e == event)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Two manifests with the same record set compare equal regardless of the
    /// row order they were loaded from.
    pub fn same_content(&self, other: &DatasetManifest) -> bool {
        if self.events != other.events || self.records.len() != other.records.len() {
            return false;
        }
        let mut a: Vec<&ImageRecord> = self.records.iter().collect();
        let mut b: Vec<&ImageRecord> = other.records.iter().collect();
        a.sort_by(|x, y| x.id.cmp(&y.id));
        b.sort_by(|x, y| x.id.cmp(&y.id));
        a == b
    }
}

/// Loads and validates a CSV manifest with header `id,path,event,split`.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let err = |detail: String| Error::Manifest {
        path: path.to_path_buf(),
        detail,
    };
    if !path.exists() {
        return Err(err("file not found".into()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    {
        let headers = reader.headers().map_err(|e| err(e.to_string()))?;
        let expected = ["id", "path", "event", "split"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(err(format!(
                "header must be `id,path,event,split`, got `{}`",
                got.join(",")
            )));
        }
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| err(format!("row {line}: {e}")))?;
        if row.len() != 4 {
            return Err(err(format!("row {line}: expected 4 fields, got {}", row.len())));
        }
        let split = match &row[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(err(format!(
                    "row {line}: split must be `train` or `test`, got `{other}`"
                )))
            }
        };
        records.push(ImageRecord {
            id: row[0].to_string(),
            path: base.join(&row[1]),
            event: row[2].to_string(),
            split,
        });
    }
    DatasetManifest::from_records(records, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_manifest(dir: &Path, rows: &[&str]) -> PathBuf {
        let path = dir.join("manifest.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "id,path,event,split").unwrap();
        for row in rows {
            writeln!(f, "{row}").unwrap();
        }
        path
    }

    #[test]
    fn paper_sized_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for event in ["austin", "baltimore", "boston", "portland"] {
            for i in 0..200 {
                rows.push(format!("{event}_tr{i},imgs/{event}_tr{i}.png,{event},train"));
            }
            for i in 0..100 {
                rows.push(format!("{event}_te{i},imgs/{event}_te{i}.png,{event},test"));
            }
        }
        let refs: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
        let path = write_manifest(dir.path(), &refs);
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.records().len(), 1200);
        assert_eq!(
            manifest.events(),
            &["austin", "baltimore", "boston", "portland"]
        );
    }

    #[test]
    fn single_event_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &["a,x.png,storm,train", "b,y.png,storm,test"],
        );
        let e = load_manifest(&path).unwrap_err().to_string();
        assert!(e.contains("fewer than 2 events"), "{e}");
    }

    #[test]
    fn duplicate_id_names_both_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &[
                "img_007,a.png,storm,train",
                "x1,b.png,storm,test",
                "img_007,c.png,fair,train",
                "x2,d.png,fair,test",
            ],
        );
        let e = load_manifest(&path).unwrap_err().to_string();
        assert!(e.contains("img_007"), "{e}");
        assert!(e.contains("rows 2 and 4"), "{e}");
    }

    #[test]
    fn event_missing_split_reported_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &[
                "a,a.png,storm,train",
                "b,b.png,storm,test",
                "c,c.png,fair,train",
            ],
        );
        let e = load_manifest(&path).unwrap_err().to_string();
        assert!(e.contains("`fair`") && e.contains("no test records"), "{e}");
        assert!(e.contains("row 4"), "{e}");
    }

    #[test]
    fn bad_split_value_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &["a,a.png,storm,train", "b,b.png,storm,validate"],
        );
        let e = load_manifest(&path).unwrap_err().to_string();
        assert!(e.contains("row 3"), "{e}");
    }

    #[test]
    fn order_insensitive() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [
            "a,a.png,storm,train",
            "b,b.png,storm,test",
            "c,c.png,fair,train",
            "d,d.png,fair,test",
        ];
        let m1 = load_manifest(&write_manifest(dir.path(), &rows)).unwrap();
        let reversed: Vec<&str> = rows.iter().rev().copied().collect();
        let dir2 = tempfile::tempdir().unwrap();
        let m2 = load_manifest(&write_manifest(dir2.path(), &reversed)).unwrap();
        // paths resolve against each manifest's own directory, so compare ids/events
        assert_eq!(m1.events(), m2.events());
        let mut ids1: Vec<_> = m1.records().iter().map(|r| (&r.id, &r.event)).collect();
        let mut ids2: Vec<_> = m2.records().iter().map(|r| (&r.id, &r.event)).collect();
        ids1.sort();
        ids2.sort();
        assert_eq!(ids1, ids2);
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            &[
                "a,imgs/a.png,storm,train",
                "b,imgs/b.png,storm,test",
                "c,imgs/c.png,fair,train",
                "d,imgs/d.png,fair,test",
            ],
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records()[0].path, dir.path().join("imgs/a.png"));
    }
}
