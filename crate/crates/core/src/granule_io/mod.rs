//! Flat little-endian containers for granules and label maps, plus the
//! dataset manifest and a synthetic dataset generator.
//!
//! Granule file (`DGR1`): magic, `u32 H`, `u32 W`, `u32 C`, then `H*W*C`
//! f32 values band-major (C planes, each H x W row-major). The payload
//! starts at byte 16.
//!
//! Label file (`DLB1`): magic, `u32 H`, `u32 W`, then `H*W` f32 values
//! row-major. The payload starts at byte 12. NaN marks an unlabeled pixel.

mod manifest;
mod synth;

pub use manifest::{DatasetManifest, ManifestEntry};
pub use synth::{default_plume_channels, generate_synthetic_dataset, synthesize_granule, PlumeParams, SynthConfig};

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use memmap2::Mmap;

use crate::error::{Error, Result};

pub const GRANULE_MAGIC: [u8; 4] = *b"DGR1";
pub const LABEL_MAGIC: [u8; 4] = *b"DLB1";
pub const GRANULE_HEADER_BYTES: usize = 16;
pub const LABEL_HEADER_BYTES: usize = 12;

/// Default spectral channel count: 36 bands plus the high/low splits of
/// bands 13 and 14.
pub const DEFAULT_CHANNELS: usize = 38;

/// An `H x W x C` radiance volume stored band-major. NaN marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct Granule {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Granule {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Geometry(format!(
                "granule dimensions must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        let expected = checked_volume(&[height, width, channels])?;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "granule {height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        let n = checked_volume(&[height, width, channels])?;
        Self::new(height, width, channels, vec![value; n])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.offset(c, y, x);
        self.data[i] = v;
    }

    pub fn band(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn band_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn nan_count(&self) -> usize {
        self.data.iter().filter(|v| v.is_nan()).count()
    }

    /// Payload size in bytes (excluding the 16-byte header).
    pub fn payload_bytes(&self) -> u64 {
        self.data.len() as u64 * 4
    }
}

/// An `H x W` label map. NaN marks an unlabeled pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Geometry(format!(
                "label map dimensions must be >= 1, got {height}x{width}"
            )));
        }
        let expected = checked_volume(&[height, width])?;
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Brings finite labels into `[0, 1]`.
    ///
    /// Maps whose finite values already lie in `[0, 1]` are returned as-is;
    /// otherwise the finite values are min-max scaled (a constant map becomes
    /// all zeros). NaN entries pass through.
    pub fn normalized(mut self) -> Self {
        let (lo, hi) = finite_range(&self.values);
        let (Some(lo), Some(hi)) = (lo, hi) else {
            return self;
        };
        if lo >= 0.0 && hi <= 1.0 {
            return self;
        }
        let span = hi - lo;
        for v in self.values.iter_mut().filter(|v| v.is_finite()) {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
        self
    }
}

pub(crate) fn finite_range(values: &[f32]) -> (Option<f32>, Option<f32>) {
    let mut lo: Option<f32> = None;
    let mut hi: Option<f32> = None;
    for &v in values.iter().filter(|v| v.is_finite()) {
        lo = Some(lo.map_or(v, |l| l.min(v)));
        hi = Some(hi.map_or(v, |h| h.max(v)));
    }
    (lo, hi)
}

fn checked_volume(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::DimensionOverflow(format!("{dims:?} overflows the address space")))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{what} = {v} exceeds u32")))
}

fn write_container(path: &Path, magic: [u8; 4], dims: &[u32], payload: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 16, file);
    let io = |e| Error::io_at(path, e);
    w.write_all(&magic).map_err(io)?;
    for d in dims {
        w.write_all(&d.to_le_bytes()).map_err(io)?;
    }
    for chunk in payload.chunks(4096) {
        let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Parses the header of an in-memory or mapped container and checks the
/// declared payload size against the actual byte count.
fn parse_header<const N: usize>(bytes: &[u8], magic: [u8; 4]) -> Result<[usize; N]> {
    let header = 4 + 4 * N;
    if bytes.len() < 4 {
        let mut found = [0u8; 4];
        found[..bytes.len()].copy_from_slice(bytes);
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut dims = [0usize; N];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    let values = checked_volume(&dims)? as u64;
    let expected = header as u64 + values * 4;
    if expected != bytes.len() as u64 {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(dims)
}

fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io_at(path, e))?;
    Ok(bytes)
}

pub fn write_granule(g: &Granule, path: impl AsRef<Path>) -> Result<()> {
    let dims = [
        to_u32(g.height, "height")?,
        to_u32(g.width, "width")?,
        to_u32(g.channels, "channels")?,
    ];
    write_container(path.as_ref(), GRANULE_MAGIC, &dims, &g.data)
}

/// Loads a granule fully into memory.
pub fn read_granule(path: impl AsRef<Path>) -> Result<Granule> {
    let bytes = read_all(path.as_ref())?;
    let [h, w, c] = parse_header::<3>(&bytes, GRANULE_MAGIC)?;
    let data = decode_f32s(&bytes[GRANULE_HEADER_BYTES..]);
    drop(bytes);
    Granule::new(h, w, c, data)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let dims = [to_u32(labels.height, "height")?, to_u32(labels.width, "width")?];
    write_container(path.as_ref(), LABEL_MAGIC, &dims, &labels.values)
}

/// Reads a label map as stored; see [`LabelMap::normalized`] for the
/// load-time scaling applied by the dataset store.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let bytes = read_all(path.as_ref())?;
    let [h, w] = parse_header::<2>(&bytes, LABEL_MAGIC)?;
    LabelMap::new(h, w, decode_f32s(&bytes[LABEL_HEADER_BYTES..]))
}

/// Read access to a band-major granule regardless of where the bytes live.
pub trait BandSource: Sync {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn channels(&self) -> usize;
    /// Copies `out.len()` consecutive values of band `c`, row `y`, starting at column `x`.
    fn copy_row(&self, c: usize, y: usize, x: usize, out: &mut [f32]);
}

impl BandSource for Granule {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    fn copy_row(&self, c: usize, y: usize, x: usize, out: &mut [f32]) {
        let start = self.offset(c, y, x);
        out.copy_from_slice(&self.data[start..start + out.len()]);
    }
}

/// A granule file mapped into the address space; pages are brought in on
/// first touch.
#[derive(Debug)]
pub struct MappedGranule {
    mmap: Mmap,
    height: usize,
    width: usize,
    channels: usize,
}

impl MappedGranule {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
        // SAFETY: the mapping is read-only; containers are never modified while
        // a pipeline holds them open.
        let mmap = unsafe { Mmap::map(&file) }.map_err(|e| Error::io_at(path, e))?;
        let [height, width, channels] = parse_header::<3>(&mmap, GRANULE_MAGIC)?;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Geometry(format!(
                "{}: granule dimensions must be >= 1",
                path.display()
            )));
        }
        Ok(Self {
            mmap,
            height,
            width,
            channels,
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        let o = GRANULE_HEADER_BYTES + 4 * ((c * self.height + y) * self.width + x);
        f32::from_le_bytes(self.mmap[o..o + 4].try_into().expect("4 bytes"))
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.mmap.len() - GRANULE_HEADER_BYTES) as u64
    }

    /// Copies the mapped payload into an owned granule.
    pub fn to_granule(&self) -> Granule {
        let data = decode_f32s(&self.mmap[GRANULE_HEADER_BYTES..]);
        Granule {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    /// Drops this process's resident pages of the mapping. The file stays in
    /// the page cache, so later reads fault the pages back in cheaply.
    pub fn release_pages(&self) {
        #[cfg(unix)]
        {
            // SAFETY: the mapping is private and read-only, so discarding the
            // pages only forces them to be re-read from the backing file.
            let _ = unsafe { self.mmap.unchecked_advise(memmap2::UncheckedAdvice::DontNeed) };
        }
    }
}

impl BandSource for MappedGranule {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    fn copy_row(&self, c: usize, y: usize, x: usize, out: &mut [f32]) {
        let start = GRANULE_HEADER_BYTES + 4 * ((c * self.height + y) * self.width + x);
        let bytes = &self.mmap[start..start + 4 * out.len()];
        for (o, b) in out.iter_mut().zip(bytes.chunks_exact(4)) {
            *o = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn single_value_granule_file_layout() {
        let dir = tmp();
        let p = dir.path().join("g.dgr");
        let g = Granule::new(1, 1, 1, vec![0.5]).unwrap();
        write_granule(&g, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // 4 magic + 12 header + 4 payload
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"DGR1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(read_granule(&p).unwrap(), g);
    }

    #[test]
    fn full_scene_payload_arithmetic() {
        let payload: u64 = 2030 * 1354 * 38 * 4;
        assert_eq!(payload, 417_790_240);
        assert_eq!(checked_volume(&[2030, 1354, 38]).unwrap() as u64 * 4, payload);
    }

    #[test]
    fn nan_payload_bits_survive() {
        let dir = tmp();
        let p = dir.path().join("g.dgr");
        let odd_nan = f32::from_bits(0x7fc0_1234);
        let g = Granule::new(1, 2, 2, vec![odd_nan, 1.0, f32::NAN, -0.0]).unwrap();
        write_granule(&g, &p).unwrap();
        let back = read_granule(&p).unwrap();
        let bits = |g: &Granule| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&g));
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tmp();
        let p = dir.path().join("g.dgr");
        let mut bytes = b"XXXX".to_vec();
        bytes.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_granule(&p), Err(Error::BadMagic { found, .. }) if &found == b"XXXX"));
        assert!(matches!(MappedGranule::open(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn short_payload_is_truncation() {
        let dir = tmp();
        let p = dir.path().join("g.dgr");
        let mut bytes = b"DGR1".to_vec();
        for d in [2u32, 2, 1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        match read_granule(&p) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, 32);
                assert_eq!(actual, 28);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn label_maps_round_trip_with_nan() {
        let dir = tmp();
        let p = dir.path().join("l.dlb");
        let mut v = vec![0.1f32; 9];
        v[4] = f32::NAN;
        let l = LabelMap::new(3, 3, v).unwrap();
        write_labels(&l, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 12 + 36);
        let back = read_labels(&p).unwrap();
        assert!(back.get(1, 1).is_nan());
        assert_eq!(back.get(0, 0), 0.1);

        let l = LabelMap::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        write_labels(&l, &p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), l);
    }

    #[test]
    fn label_header_mismatch_is_truncation() {
        let dir = tmp();
        let p = dir.path().join("l.dlb");
        let mut bytes = b"DLB1".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 32]);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn mapped_and_loaded_agree() {
        let dir = tmp();
        let p = dir.path().join("g.dgr");
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| i as f32 * 0.25).collect();
        let g = Granule::new(3, 4, 5, data).unwrap();
        write_granule(&g, &p).unwrap();
        let m = MappedGranule::open(&p).unwrap();
        assert_eq!(m.to_granule(), g);
        let mut row = [0f32; 3];
        m.copy_row(2, 1, 1, &mut row);
        assert_eq!(row, [g.get(2, 1, 1), g.get(2, 1, 2), g.get(2, 1, 3)]);
        m.release_pages();
        assert_eq!(m.get(4, 2, 3), g.get(4, 2, 3));
    }

    #[test]
    fn label_normalization_rules() {
        let l = LabelMap::new(1, 3, vec![0.0, 0.5, f32::NAN]).unwrap().normalized();
        assert_eq!(&l.values()[..2], &[0.0, 0.5]);
        let l = LabelMap::new(1, 3, vec![2.0, 4.0, f32::NAN]).unwrap().normalized();
        assert_eq!(&l.values()[..2], &[0.0, 1.0]);
        assert!(l.values()[2].is_nan());
        let l = LabelMap::new(1, 2, vec![3.0, 3.0]).unwrap().normalized();
        assert_eq!(l.values(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(matches!(Granule::new(0, 1, 1, vec![]), Err(Error::Geometry(_))));
        assert!(matches!(Granule::new(1, 1, 2, vec![0.0]), Err(Error::ShapeMismatch(_))));
    }
}
