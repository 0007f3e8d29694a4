use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One granule/label pair. Its folder index is its position in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub granule: PathBuf,
    pub labels: PathBuf,
}

/// Ordered list of granule/label pairs; entry `f` is folder `f` of the index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads a manifest, resolving relative paths against its directory and
    /// checking that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for e in &mut manifest.entries {
            e.granule = resolve(base, &e.granule);
            e.labels = resolve(base, &e.labels);
        }
        manifest.validate()?;
        Ok(manifest)
    }

    /// Writes the manifest; paths under the manifest's directory are stored
    /// relative to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let relative = DatasetManifest {
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    granule: relativize(base, &e.granule),
                    labels: relativize(base, &e.labels),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&relative)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io_at(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Manifest("manifest lists no granules".into()));
        }
        for (f, e) in self.entries.iter().enumerate() {
            for p in [&e.granule, &e.labels] {
                if !p.is_file() {
                    return Err(Error::Manifest(format!(
                        "entry {f}: {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Splits into consecutive (train, validation, test) manifests.
    pub fn split(&self, train: usize, val: usize) -> Result<(Self, Self, Self)> {
        if train + val > self.len() {
            return Err(Error::Manifest(format!(
                "cannot take {train} train + {val} validation entries from {}",
                self.len()
            )));
        }
        let take = |r: std::ops::Range<usize>| Self::new(self.entries[r].to_vec());
        Ok((
            take(0..train),
            take(train..train + val),
            take(train + val..self.len()),
        ))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn relativize(base: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}
