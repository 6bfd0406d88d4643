//! Line-delimited dataset manifests.
//!
//! One JSON record per line, fields in this order:
//! `{"path":"03_ring/0007.png","label":3,"domain":"degraded","kind":"fog","severity":3,"seed":42}`.
//! `kind`, `severity` and `seed` are `null` for undegraded entries. Paths use
//! `/` separators and are relative to the dataset root.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::degrade::{DegradationKind, DegradationSpec};
use super::image::RgbImage;
use crate::error::{Error, Result};

/// Name of the optional label file at a dataset root: one
/// `<relative path> <label>` pair per line.
pub const LABEL_FILE: &str = "labels.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Clear,
    Degraded,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
    pub domain: Domain,
    pub degradation: Option<DegradationSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    path: String,
    label: usize,
    domain: Domain,
    kind: Option<DegradationKind>,
    severity: Option<u8>,
    seed: Option<u64>,
}

impl From<&ManifestEntry> for Record {
    fn from(e: &ManifestEntry) -> Self {
        Self {
            path: e.path.clone(),
            label: e.label,
            domain: e.domain,
            kind: e.degradation.map(|d| d.kind),
            severity: e.degradation.map(|d| d.severity),
            seed: e.degradation.map(|d| d.seed),
        }
    }
}

impl TryFrom<Record> for ManifestEntry {
    type Error = Error;

    fn try_from(r: Record) -> Result<Self> {
        let degradation = match (r.kind, r.severity, r.seed) {
            (None, None, None) => None,
            (Some(kind), Some(severity), Some(seed)) => Some(DegradationSpec::new(kind, severity, seed)?),
            _ => {
                return Err(Error::Dataset(format!(
                    "{}: kind, severity and seed must be set together",
                    r.path
                )))
            }
        };
        Ok(Self {
            path: r.path,
            label: r.label,
            domain: r.domain,
            degradation,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Result of scanning a directory tree.
#[derive(Debug)]
pub struct BuildOutcome {
    pub manifest: DatasetManifest,
    /// Files that looked like images but failed to decode.
    pub skipped: Vec<PathBuf>,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn rel_string(root: &Path, p: &Path) -> String {
    p.strip_prefix(root)
        .unwrap_or(p)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Scans `root` for labelled images.
///
/// Labels come from `labels.txt` when present, otherwise from class
/// subdirectories: the i-th subdirectory in lexicographic order is class i.
/// Entries are sorted by path. Unreadable images are skipped and reported.
pub fn build_manifest(root: &Path, domain: Domain, degradation: Option<DegradationSpec>) -> Result<BuildOutcome> {
    if let Some(d) = &degradation {
        d.validate()?;
    }
    let mut candidates: Vec<(String, usize)> = Vec::new();
    let label_file = root.join(LABEL_FILE);
    if label_file.is_file() {
        let text = fs::read_to_string(&label_file).map_err(|e| Error::io(&label_file, e))?;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, label) = line
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| Error::Dataset(format!("{}:{}: expected `<path> <label>`", label_file.display(), no + 1)))?;
            let label = label
                .parse()
                .map_err(|_| Error::Dataset(format!("{}:{}: bad label `{label}`", label_file.display(), no + 1)))?;
            candidates.push((path.trim().to_string(), label));
        }
    } else {
        let classes: Vec<PathBuf> = sorted_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
        for (label, dir) in classes.iter().enumerate() {
            for file in sorted_dir(dir)? {
                if file.is_file() && is_image(&file) {
                    candidates.push((rel_string(root, &file), label));
                }
            }
        }
    }
    candidates.sort();
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (i, (path, label)) in candidates.into_iter().enumerate() {
        let full = root.join(&path);
        if RgbImage::load(&full).is_err() {
            log::warn!("skipping unreadable image {}", full.display());
            skipped.push(full);
            continue;
        }
        entries.push(ManifestEntry {
            path,
            label,
            domain,
            degradation: degradation.map(|d| d.for_item(i as u64)),
        });
    }
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no readable images under {}", root.display())));
    }
    Ok(BuildOutcome {
        manifest: DatasetManifest {
            root: root.to_path_buf(),
            entries,
        },
        skipped,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&Record::from(e))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest, resolving entries against `root`, and checks that
    /// every entry exists.
    pub fn load(path: &Path, root: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), no + 1)))?;
            entries.push(ManifestEntry::try_from(rec)?);
        }
        let m = Self {
            root: root.to_path_buf(),
            entries,
        };
        m.validate(None)?;
        Ok(m)
    }

    /// Non-empty, files present, labels below `class_count` when given.
    pub fn validate(&self, class_count: Option<usize>) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Dataset("manifest has no entries".into()));
        }
        for e in &self.entries {
            if !self.resolve(e).is_file() {
                return Err(Error::Dataset(format!("missing image {}", self.resolve(e).display())));
            }
            if let Some(k) = class_count {
                if e.label >= k {
                    return Err(Error::Dataset(format!("{}: label {} outside {k} classes", e.path, e.label)));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    pub fn load_image(&self, idx: usize) -> Result<RgbImage> {
        RgbImage::load(&self.resolve(&self.entries[idx]))
    }

    pub fn load_all(&self) -> Result<Vec<RgbImage>> {
        (0..self.len()).map(|i| self.load_image(i)).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// SHA-256 of the serialized manifest, used for provenance records.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(crate::params::hex(&Sha256::digest(self.to_jsonl()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tree(root: &Path, classes: usize, per_class: usize) {
        for c in 0..classes {
            let d = root.join(format!("{c:02}_class"));
            fs::create_dir_all(&d).unwrap();
            for i in 0..per_class {
                RgbImage::filled(4, 4, (c * per_class + i) as f32 / 200.0)
                    .save(&d.join(format!("{i:04}.png")))
                    .unwrap();
            }
        }
    }

    #[test]
    fn counts_orders_and_labels_subdirectories() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 10, 10);
        let out = build_manifest(dir.path(), Domain::Clear, None).unwrap();
        let m = out.manifest;
        assert_eq!(m.len(), 100);
        assert!(out.skipped.is_empty());
        assert!(m.entries.windows(2).all(|w| w[0].path < w[1].path));
        assert_eq!(m.entries[0].label, 0);
        assert_eq!(m.entries[99].label, 9);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_manifest(dir.path(), Domain::Clear, None).is_err());
    }

    #[test]
    fn rebuilding_yields_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 3, 4);
        let spec = DegradationSpec::new(DegradationKind::Fog, 3, 9).unwrap();
        let a = build_manifest(dir.path(), Domain::Degraded, Some(spec)).unwrap().manifest;
        let b = build_manifest(dir.path(), Domain::Degraded, Some(spec)).unwrap().manifest;
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let p = dir.path().join("m.jsonl");
        a.save(&p).unwrap();
        assert_eq!(DatasetManifest::load(&p, dir.path()).unwrap(), a);
    }

    #[test]
    fn unreadable_images_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 2, 2);
        fs::write(dir.path().join("01_class/bogus.png"), b"not a png").unwrap();
        let out = build_manifest(dir.path(), Domain::Clear, None).unwrap();
        assert_eq!(out.manifest.len(), 4);
        assert_eq!(out.skipped.len(), 1);
    }

    #[test]
    fn label_file_overrides_directories() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 1, 3);
        fs::write(
            dir.path().join(LABEL_FILE),
            "00_class/0000.png 7\n00_class/0002.png 2\n",
        )
        .unwrap();
        let m = build_manifest(dir.path(), Domain::Clear, None).unwrap().manifest;
        assert_eq!(m.labels(), vec![7, 2]);
        assert!(m.validate(Some(5)).is_err());
    }

    #[test]
    fn record_layout_is_stable() {
        let m = DatasetManifest {
            root: PathBuf::from("."),
            entries: vec![ManifestEntry {
                path: "a/b.png".into(),
                label: 3,
                domain: Domain::Degraded,
                degradation: Some(DegradationSpec::new(DegradationKind::MotionBlur, 2, 5).unwrap()),
            }],
        };
        assert_eq!(
            m.to_jsonl().unwrap(),
            "{\"path\":\"a/b.png\",\"label\":3,\"domain\":\"degraded\",\"kind\":\"motion_blur\",\"severity\":2,\"seed\":5}\n"
        );
    }
}
