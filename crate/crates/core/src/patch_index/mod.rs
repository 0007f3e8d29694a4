//! Patch-center index over a labeled dataset.
//!
//! For folder `f` with label map `L_f` (`H_f x W_f`) and odd patch size `P`,
//! `h = P / 2`. A center `(y, x)` is indexed iff `L_f[y, x]` is finite and
//! `h <= y < H_f - h`, `h <= x < W_f - h`. The index is the concatenation
//! of those centers over folders in manifest order, sorted by `(f, y, x)`,
//! so every indexed center yields a full `P x P` window.

mod sampler;
mod store;

pub use sampler::{
    naive_sample_batches, plan_positions, sample_batches, IndexedBatches, NaiveBatches,
};
pub use store::{AccessMode, PatchBatch, PatchStore};

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::granule_io::{read_labels, DatasetManifest, LabelMap};

pub const INDEX_MAGIC: [u8; 4] = *b"DIX1";
pub const INDEX_HEADER_BYTES: usize = 16;
pub const DEFAULT_PATCH_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub folder: u32,
    pub y: u32,
    pub x: u32,
}

impl Triplet {
    pub fn new(folder: usize, y: usize, x: usize) -> Self {
        Self {
            folder: folder as u32,
            y: y as u32,
            x: x as u32,
        }
    }
}

impl std::fmt::Display for Triplet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.folder, self.y, self.x)
    }
}

pub fn check_patch_size(patch_size: usize) -> Result<usize> {
    if patch_size == 0 || patch_size.is_multiple_of(2) {
        return Err(Error::InvalidPatchSize(patch_size));
    }
    Ok(patch_size / 2)
}

/// Why an index fails to describe its label maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndexViolation {
    UnknownFolder(Triplet),
    NonFiniteLabel(Triplet),
    WindowOutOfBounds(Triplet),
    NotSorted { position: usize },
    Missing(Triplet),
}

impl std::fmt::Display for IndexViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::UnknownFolder(t) => write!(f, "{t}: folder not in dataset"),
            Self::NonFiniteLabel(t) => write!(f, "{t}: label is not finite"),
            Self::WindowOutOfBounds(t) => write!(f, "{t}: patch window leaves the image"),
            Self::NotSorted { position } => {
                write!(f, "entry {position} is not strictly after its predecessor")
            }
            Self::Missing(t) => write!(f, "{t}: valid center absent from index"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchIndex {
    patch_size: usize,
    triplets: Vec<Triplet>,
}

/// Valid centers of one label map, row-major.
fn folder_centers(folder: usize, labels: &LabelMap, half: usize, out: &mut Vec<Triplet>) {
    let (h, w) = (labels.height(), labels.width());
    let (y_end, x_end) = (h.saturating_sub(half), w.saturating_sub(half));
    for y in half..y_end {
        let row = &labels.values()[y * w..(y + 1) * w];
        for x in half..x_end {
            if row[x].is_finite() {
                out.push(Triplet::new(folder, y, x));
            }
        }
    }
}

impl PatchIndex {
    pub fn from_labels(labels: &[LabelMap], patch_size: usize) -> Result<Self> {
        let half = check_patch_size(patch_size)?;
        let mut triplets = Vec::new();
        for (f, l) in labels.iter().enumerate() {
            folder_centers(f, l, half, &mut triplets);
        }
        Ok(Self {
            patch_size,
            triplets,
        })
    }

    /// Wraps an explicit triplet list, which must be strictly increasing.
    pub fn from_parts(patch_size: usize, triplets: Vec<Triplet>) -> Result<Self> {
        check_patch_size(patch_size)?;
        if let Some(p) = triplets.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "index triplets must be strictly increasing (entry {})",
                p + 1
            )));
        }
        Ok(Self {
            patch_size,
            triplets,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn half(&self) -> usize {
        self.patch_size / 2
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    /// Checks that every triplet names a finite label with an in-bounds
    /// window, that entries are sorted and unique, and that no valid center
    /// is missing.
    pub fn validate(&self, labels: &[LabelMap]) -> std::result::Result<(), IndexViolation> {
        let half = self.half();
        for (i, t) in self.triplets.iter().enumerate() {
            if i > 0 && self.triplets[i - 1] >= *t {
                return Err(IndexViolation::NotSorted { position: i });
            }
            let Some(l) = labels.get(t.folder as usize) else {
                return Err(IndexViolation::UnknownFolder(*t));
            };
            let (y, x) = (t.y as usize, t.x as usize);
            if y < half || x < half || y + half >= l.height() || x + half >= l.width() {
                return Err(IndexViolation::WindowOutOfBounds(*t));
            }
            if !l.get(y, x).is_finite() {
                return Err(IndexViolation::NonFiniteLabel(*t));
            }
        }
        let mut expected = Vec::new();
        for (f, l) in labels.iter().enumerate() {
            folder_centers(f, l, half, &mut expected);
        }
        if expected.len() != self.triplets.len() {
            let missing = expected
                .iter()
                .find(|t| self.triplets.binary_search(t).is_err())
                .copied();
            if let Some(t) = missing {
                return Err(IndexViolation::Missing(t));
            }
        }
        Ok(())
    }
}

/// Reads every label map of `manifest` and indexes its valid patch centers.
pub fn build_index(manifest: &DatasetManifest, patch_size: usize) -> Result<PatchIndex> {
    check_patch_size(patch_size)?;
    let labels = manifest
        .entries
        .iter()
        .map(|e| read_labels(&e.labels))
        .collect::<Result<Vec<_>>>()?;
    PatchIndex::from_labels(&labels, patch_size)
}

pub fn write_index(index: &PatchIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io_at(path, e);
    w.write_all(&INDEX_MAGIC).map_err(io)?;
    w.write_all(&(index.patch_size as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(index.len() as u64).to_le_bytes()).map_err(io)?;
    for t in &index.triplets {
        for v in [t.folder, t.y, t.x] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_index(path: impl AsRef<Path>) -> Result<PatchIndex> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io_at(path, e))?;
    let found: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().expect("4 bytes"),
        None => {
            let mut found = [0u8; 4];
            found[..bytes.len()].copy_from_slice(&bytes);
            found
        }
    };
    if found != INDEX_MAGIC {
        return Err(Error::BadMagic {
            expected: INDEX_MAGIC,
            found,
        });
    }
    if bytes.len() < INDEX_HEADER_BYTES {
        return Err(Error::Truncated {
            expected: INDEX_HEADER_BYTES as u64,
            actual: bytes.len() as u64,
        });
    }
    let patch_size = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = count
        .checked_mul(12)
        .and_then(|n| n.checked_add(INDEX_HEADER_BYTES as u64))
        .ok_or_else(|| Error::DimensionOverflow(format!("index count {count}")))?;
    if expected != bytes.len() as u64 {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let triplets = (0..count as usize)
        .map(|i| {
            let o = INDEX_HEADER_BYTES + 12 * i;
            Triplet {
                folder: word(o),
                y: word(o + 4),
                x: word(o + 8),
            }
        })
        .collect();
    PatchIndex::from_parts(patch_size, triplets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_map(h: usize, w: usize) -> LabelMap {
        LabelMap::new(h, w, vec![0.5; h * w]).unwrap()
    }

    #[test]
    fn seven_by_seven_with_p5() {
        let idx = PatchIndex::from_labels(&[finite_map(7, 7)], 5).unwrap();
        assert_eq!(idx.len(), 9);
        let expected: Vec<_> = (2..5)
            .flat_map(|y| (2..5).map(move |x| Triplet::new(0, y, x)))
            .collect();
        assert_eq!(idx.triplets(), expected.as_slice());

        let mut l = finite_map(7, 7);
        l.values_mut()[3 * 7 + 3] = f32::NAN;
        let idx = PatchIndex::from_labels(&[l], 5).unwrap();
        assert_eq!(idx.len(), 8);
        assert!(!idx.triplets().contains(&Triplet::new(0, 3, 3)));
    }

    #[test]
    fn even_patch_rejected_small_map_empty() {
        assert!(matches!(
            PatchIndex::from_labels(&[finite_map(7, 7)], 4),
            Err(Error::InvalidPatchSize(4))
        ));
        assert!(matches!(
            PatchIndex::from_labels(&[finite_map(7, 7)], 0),
            Err(Error::InvalidPatchSize(0))
        ));
        let idx = PatchIndex::from_labels(&[finite_map(4, 9), finite_map(9, 3)], 5).unwrap();
        assert!(idx.is_empty());
    }

    #[test]
    fn folders_concatenate_in_order() {
        let idx = PatchIndex::from_labels(&[finite_map(3, 3), finite_map(3, 4)], 3).unwrap();
        assert_eq!(
            idx.triplets(),
            &[Triplet::new(0, 1, 1), Triplet::new(1, 1, 1), Triplet::new(1, 1, 2)]
        );
    }

    #[test]
    fn index_file_sizes_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.dix");
        let empty = PatchIndex::from_parts(5, vec![]).unwrap();
        write_index(&empty, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16);
        assert_eq!(read_index(&p).unwrap(), empty);

        let idx = PatchIndex::from_labels(&[finite_map(7, 7)], 5).unwrap();
        write_index(&idx, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 124);
        assert_eq!(read_index(&p).unwrap(), idx);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_index(&p), Err(Error::Truncated { .. })));
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_index(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn validator_catches_mutations() {
        let mut l = finite_map(8, 9);
        l.values_mut()[4 * 9 + 4] = f32::NAN;
        let labels = vec![l];
        let idx = PatchIndex::from_labels(&labels, 5).unwrap();
        assert_eq!(idx.validate(&labels), Ok(()));

        let mut t = idx.triplets().to_vec();
        t[0] = Triplet::new(0, 1, 2);
        assert_eq!(
            PatchIndex::from_parts(5, t).unwrap().validate(&labels),
            Err(IndexViolation::WindowOutOfBounds(Triplet::new(0, 1, 2)))
        );

        let mut t = idx.triplets().to_vec();
        let pos = t.binary_search(&Triplet::new(0, 4, 5)).unwrap();
        t[pos - 1] = Triplet::new(0, 4, 4);
        assert_eq!(
            PatchIndex::from_parts(5, t).unwrap().validate(&labels),
            Err(IndexViolation::NonFiniteLabel(Triplet::new(0, 4, 4)))
        );

        let mut t = idx.triplets().to_vec();
        let dropped = t.remove(3);
        assert_eq!(
            PatchIndex::from_parts(5, t).unwrap().validate(&labels),
            Err(IndexViolation::Missing(dropped))
        );
    }
}
