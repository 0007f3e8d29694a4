use crate::error::{Error, Result};
use crate::granule_io::{
    read_granule, read_labels, BandSource, DatasetManifest, Granule, LabelMap, MappedGranule,
};

use super::Triplet;

/// How granule payloads are accessed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccessMode {
    /// Read every granule fully into memory.
    Load,
    /// Memory-map granules; touched pages stay resident.
    #[default]
    Map,
    /// Memory-map granules and drop resident pages after every `n` extracted
    /// patches, bounding resident memory by the recently touched pages.
    MapReleasing(usize),
}

#[derive(Debug)]
enum Source {
    Loaded(Granule),
    Mapped(MappedGranule),
}

impl Source {
    fn band_source(&self) -> &dyn BandSource {
        match self {
            Source::Loaded(g) => g,
            Source::Mapped(m) => m,
        }
    }
}

/// A batch of `C x P x P` patches (band-major, row-major within a band) and
/// their center labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
    pub triplets: Vec<Triplet>,
    pub channels: usize,
    pub patch_size: usize,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.patch_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Bytes held by inputs and targets: `B*C*P*P*4 + B*4`.
    pub fn footprint_bytes(&self) -> usize {
        (self.inputs.len() + self.targets.len()) * 4
    }
}

/// Granules and normalized labels of a dataset, addressed by folder index.
#[derive(Debug)]
pub struct PatchStore {
    sources: Vec<Source>,
    labels: Vec<LabelMap>,
    channels: usize,
    release_every: Option<usize>,
}

impl PatchStore {
    pub fn open(manifest: &DatasetManifest, mode: AccessMode) -> Result<Self> {
        let mut sources = Vec::with_capacity(manifest.len());
        let mut labels = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            sources.push(match mode {
                AccessMode::Load => Source::Loaded(read_granule(&e.granule)?),
                AccessMode::Map | AccessMode::MapReleasing(_) => {
                    Source::Mapped(MappedGranule::open(&e.granule)?)
                }
            });
            labels.push(read_labels(&e.labels)?.normalized());
        }
        let release_every = match mode {
            AccessMode::MapReleasing(n) => Some(n.max(1)),
            _ => None,
        };
        Self::assemble_parts(sources, labels, release_every)
    }

    /// Builds an in-memory store; labels are normalized as on load.
    pub fn from_parts(granules: Vec<Granule>, labels: Vec<LabelMap>) -> Result<Self> {
        let labels = labels.into_iter().map(LabelMap::normalized).collect();
        Self::assemble_parts(granules.into_iter().map(Source::Loaded).collect(), labels, None)
    }

    fn assemble_parts(sources: Vec<Source>, labels: Vec<LabelMap>, release_every: Option<usize>) -> Result<Self> {
        if sources.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} granules but {} label maps",
                sources.len(),
                labels.len()
            )));
        }
        let channels = sources.first().map_or(0, |s| s.band_source().channels());
        for (f, (s, l)) in sources.iter().zip(&labels).enumerate() {
            let g = s.band_source();
            if g.channels() != channels {
                return Err(Error::ShapeMismatch(format!(
                    "folder {f} has {} channels, folder 0 has {channels}",
                    g.channels()
                )));
            }
            if (g.height(), g.width()) != (l.height(), l.width()) {
                return Err(Error::ShapeMismatch(format!(
                    "folder {f}: granule is {}x{}, labels are {}x{}",
                    g.height(),
                    g.width(),
                    l.height(),
                    l.width()
                )));
            }
        }
        Ok(Self {
            sources,
            labels,
            channels,
            release_every,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn folders(&self) -> usize {
        self.sources.len()
    }

    pub fn labels(&self) -> &[LabelMap] {
        &self.labels
    }

    pub fn is_mapped(&self) -> bool {
        matches!(self.sources.first(), Some(Source::Mapped(_)))
    }

    /// Total granule payload bytes.
    pub fn dataset_bytes(&self) -> u64 {
        self.sources
            .iter()
            .map(|s| match s {
                Source::Loaded(g) => g.payload_bytes(),
                Source::Mapped(m) => m.payload_bytes(),
            })
            .sum()
    }

    /// Copies the `C x P x P` window centered on `t` into `out` and returns
    /// the center label.
    pub fn extract_patch(&self, t: Triplet, patch_size: usize, out: &mut [f32]) -> Result<f32> {
        let half = super::check_patch_size(patch_size)?;
        let f = t.folder as usize;
        let (Some(src), Some(labels)) = (self.sources.get(f), self.labels.get(f)) else {
            return Err(Error::OutOfBounds(format!("{t}: dataset has {} folders", self.folders())));
        };
        let g = src.band_source();
        let (y, x) = (t.y as usize, t.x as usize);
        if y < half || x < half || y + half >= g.height() || x + half >= g.width() {
            return Err(Error::OutOfBounds(format!(
                "{t}: {patch_size}x{patch_size} window leaves the {}x{} granule",
                g.height(),
                g.width()
            )));
        }
        let need = self.channels * patch_size * patch_size;
        if out.len() != need {
            return Err(Error::ShapeMismatch(format!("patch buffer holds {}, need {need}", out.len())));
        }
        for (c, band) in out.chunks_exact_mut(patch_size * patch_size).enumerate() {
            for (r, row) in band.chunks_exact_mut(patch_size).enumerate() {
                g.copy_row(c, y - half + r, x - half, row);
            }
        }
        Ok(labels.get(y, x))
    }

    /// Extracts the patches of `triplets`, in order, into one batch.
    pub fn assemble(&self, triplets: &[Triplet], patch_size: usize) -> Result<PatchBatch> {
        let n = self.channels * patch_size * patch_size;
        let mut inputs = vec![0f32; n * triplets.len()];
        let mut targets = Vec::with_capacity(triplets.len());
        let mut touched = vec![false; self.folders()];
        let mut since_release = 0;
        for (t, out) in triplets.iter().zip(inputs.chunks_exact_mut(n.max(1))) {
            let label = self.extract_patch(*t, patch_size, out)?;
            if !label.is_finite() {
                return Err(Error::NonFinite(format!("{t}: center label is NaN")));
            }
            targets.push(label);
            if let Some(every) = self.release_every {
                touched[t.folder as usize] = true;
                since_release += 1;
                if since_release == every {
                    self.release(&mut touched);
                    since_release = 0;
                }
            }
        }
        if self.release_every.is_some() {
            self.release(&mut touched);
        }
        Ok(PatchBatch {
            inputs,
            targets,
            triplets: triplets.to_vec(),
            channels: self.channels,
            patch_size,
        })
    }

    fn release(&self, touched: &mut [bool]) {
        for (f, flag) in touched.iter_mut().enumerate() {
            if std::mem::take(flag) {
                if let Source::Mapped(m) = &self.sources[f] {
                    m.release_pages();
                }
            }
        }
    }

    /// Drops resident pages of every mapped granule.
    pub fn release_pages(&self) {
        for s in &self.sources {
            if let Source::Mapped(m) = s {
                m.release_pages();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Granule {
        let data = (0..h * w * c).map(|i| i as f32).collect();
        Granule::new(h, w, c, data).unwrap()
    }

    #[test]
    fn unit_patch_is_the_pixel_vector() {
        let g = ramp(4, 5, 3);
        let store = PatchStore::from_parts(vec![g.clone()], vec![LabelMap::new(4, 5, vec![0.5; 20]).unwrap()]).unwrap();
        let mut out = [0f32; 3];
        let label = store.extract_patch(Triplet::new(0, 2, 3), 1, &mut out).unwrap();
        assert_eq!(label, 0.5);
        assert_eq!(out, [g.get(0, 2, 3), g.get(1, 2, 3), g.get(2, 2, 3)]);
    }

    #[test]
    fn constant_granule_gives_constant_patch() {
        let g = Granule::filled(6, 6, 4, 0.7).unwrap();
        let store = PatchStore::from_parts(vec![g], vec![LabelMap::new(6, 6, vec![1.0; 36]).unwrap()]).unwrap();
        let b = store.assemble(&[Triplet::new(0, 2, 3)], 5).unwrap();
        assert!(b.inputs.iter().all(|&v| v == 0.7));
        assert_eq!(b.footprint_bytes(), 4 * 25 * 4 + 4);
    }

    #[test]
    fn window_layout_is_band_then_row() {
        let g = ramp(5, 6, 2);
        let store = PatchStore::from_parts(vec![g.clone()], vec![LabelMap::new(5, 6, vec![0.0; 30]).unwrap()]).unwrap();
        let mut out = vec![0f32; 2 * 9];
        store.extract_patch(Triplet::new(0, 2, 3), 3, &mut out).unwrap();
        for c in 0..2 {
            for dy in 0..3 {
                for dx in 0..3 {
                    assert_eq!(out[c * 9 + dy * 3 + dx], g.get(c, 1 + dy, 2 + dx));
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_and_mismatch() {
        let store = PatchStore::from_parts(vec![ramp(5, 5, 1)], vec![LabelMap::new(5, 5, vec![0.0; 25]).unwrap()]).unwrap();
        let mut out = vec![0f32; 25];
        assert!(matches!(
            store.extract_patch(Triplet::new(0, 1, 2), 5, &mut out),
            Err(Error::OutOfBounds(_))
        ));
        assert!(matches!(
            store.extract_patch(Triplet::new(1, 2, 2), 5, &mut out),
            Err(Error::OutOfBounds(_))
        ));
        assert!(PatchStore::from_parts(vec![ramp(5, 5, 1)], vec![LabelMap::new(5, 4, vec![0.0; 20]).unwrap()]).is_err());
    }

    #[test]
    fn nan_center_label_rejected_in_batch() {
        let mut labels = vec![0.0; 25];
        labels[12] = f32::NAN;
        let store = PatchStore::from_parts(vec![ramp(5, 5, 1)], vec![LabelMap::new(5, 5, labels).unwrap()]).unwrap();
        assert!(matches!(store.assemble(&[Triplet::new(0, 2, 2)], 5), Err(Error::NonFinite(_))));
    }
}
