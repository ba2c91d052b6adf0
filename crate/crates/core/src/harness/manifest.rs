use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stream::Sample;
use crate::error::{Error, Result};
use crate::imagecore::save_image;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    class_names: Vec<String>,
}

/// Labelled images listed in a JSON-lines file whose first line is
/// `{"class_names": [...]}`. Entry paths are relative to `root`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Checks ids, labels and that every file exists.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::validation("manifest header lists no class names"));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::validation(format!("duplicate id '{}'", e.id)));
            }
            if e.label >= self.num_classes() {
                return Err(Error::validation(format!(
                    "entry '{}': label {} out of range [0, {})",
                    e.id,
                    e.label,
                    self.num_classes()
                )));
            }
            let path = self.resolve(e);
            if !path.is_file() {
                return Err(Error::validation(format!(
                    "entry '{}': missing file {}",
                    e.id,
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&serde_json::json!({ "class_names": self.class_names }))?;
        out.push('\n');
        for e in &self.entries {
            writeln!(out, "{}", serde_json::to_string(e)?).expect("writing to a string");
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// Parses manifest text; `root` anchors relative entry paths. Files are not
/// checked.
pub fn parse_manifest(text: &str, root: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::validation("manifest is empty"))?;
    let header: Header = serde_json::from_str(first)
        .map_err(|e| Error::validation(format!("line 1: bad header, expected {{\"class_names\": [...]}}: {e}")))?;
    let entries = lines
        .map(|(i, l)| {
            serde_json::from_str::<ManifestEntry>(l)
                .map_err(|e| Error::validation(format!("line {}: bad entry: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        class_names: header.class_names,
        entries,
        root: root.into(),
    })
}

/// Reads and validates a manifest; entry paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, root)?;
    manifest.validate()?;
    Ok(manifest)
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Saves each sample as `dir/<id>.png` (characters outside `[A-Za-z0-9._-]`
/// become `_`) and writes `dir/manifest.jsonl`. Returns the new manifest.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    class_names: &[String],
    samples: impl IntoIterator<Item = Sample>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = HashSet::new();
    let mut entries = Vec::new();
    for s in samples {
        if s.label >= class_names.len() {
            return Err(Error::validation(format!(
                "entry '{}': label {} out of range [0, {})",
                s.id,
                s.label,
                class_names.len()
            )));
        }
        let path = PathBuf::from(format!("{}.png", file_stem(&s.id)));
        if !files.insert(path.clone()) {
            return Err(Error::validation(format!(
                "entry '{}': file name {} is already taken",
                s.id,
                path.display()
            )));
        }
        save_image(&s.image, dir.join(&path))?;
        entries.push(ManifestEntry {
            id: s.id,
            path,
            label: s.label,
        });
    }
    let manifest = DatasetManifest {
        class_names: class_names.to_vec(),
        entries,
        root: dir.to_path_buf(),
    };
    manifest.write(dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
