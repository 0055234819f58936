//! Gather data model, binary gather/mask files, dataset manifests and splits.
//!
//! A gather is stored time-major: `samples[[t, x]]` is time sample `t` of
//! trace `x`. Missing traces inside a corrupted gather are zero-filled and
//! flagged in a [`SampleMask`] (1 = missing).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GATHER_MAGIC: [u8; 4] = *b"SGTH";
pub const MASK_MAGIC: [u8; 4] = *b"SMSK";
pub const FORMAT_VERSION: u16 = 1;

const GATHER_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 8 * 3;
const MASK_HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// Acquisition parameters carried alongside the samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionMeta {
    /// Time sampling interval in seconds.
    pub dt: f64,
    /// Group spacing in meters.
    pub dx: f64,
    /// Dominant frequency in Hz.
    pub f0: f64,
}

impl AcquisitionMeta {
    pub fn new(dt: f64, dx: f64, f0: f64) -> Result<Self> {
        let meta = AcquisitionMeta { dt, dx, f0 };
        meta.validate()?;
        Ok(meta)
    }

    pub fn nyquist(&self) -> f64 {
        0.5 / self.dt
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Param(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(Error::Param(format!("dx must be positive, got {}", self.dx)));
        }
        if !(self.f0 > 0.0 && self.f0 < self.nyquist()) {
            return Err(Error::Param(format!(
                "f0 = {} Hz must lie in (0, {}) Hz",
                self.f0,
                self.nyquist()
            )));
        }
        Ok(())
    }
}

impl Default for AcquisitionMeta {
    fn default() -> Self {
        AcquisitionMeta {
            dt: 0.006,
            dx: 12.5,
            f0: 27.0,
        }
    }
}

/// A 2D seismic record: `n_t` time samples by `n_x` traces.
#[derive(Debug, Clone, PartialEq)]
pub struct Gather {
    samples: Array2<f32>,
    pub meta: AcquisitionMeta,
}

impl Gather {
    /// Builds a gather, rejecting empty arrays and non-finite samples.
    pub fn new(samples: Array2<f32>, meta: AcquisitionMeta) -> Result<Self> {
        let (n_t, n_x) = samples.dim();
        if n_t == 0 || n_x == 0 {
            return Err(Error::Shape(format!("empty gather {n_t}x{n_x}")));
        }
        if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Gather { samples, meta })
    }

    pub fn zeros(n_t: usize, n_x: usize, meta: AcquisitionMeta) -> Self {
        Gather {
            samples: Array2::zeros((n_t.max(1), n_x.max(1))),
            meta,
        }
    }

    /// Wraps samples produced by internal code that already guarantees
    /// finiteness; callers outside the crate go through [`Gather::new`].
    pub(crate) fn from_parts(samples: Array2<f32>, meta: AcquisitionMeta) -> Self {
        debug_assert!(samples.iter().all(|v| v.is_finite()));
        Gather { samples, meta }
    }

    pub fn samples(&self) -> &Array2<f32> {
        &self.samples
    }

    pub fn into_samples(self) -> Array2<f32> {
        self.samples
    }

    pub fn n_t(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.samples.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.samples.dim()
    }

    /// Returns a copy with `f` applied to every sample. Fails if `f`
    /// produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Gather> {
        Gather::new(self.samples.mapv(f), self.meta)
    }

    pub fn max_abs(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Per-trace missing flags (`true` = trace deleted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceMask {
    missing: Vec<bool>,
}

impl TraceMask {
    pub fn none(n_x: usize) -> Self {
        TraceMask {
            missing: vec![false; n_x],
        }
    }

    pub fn from_flags(missing: Vec<bool>) -> Self {
        TraceMask { missing }
    }

    pub fn flags(&self) -> &[bool] {
        &self.missing
    }

    pub fn len(&self) -> usize {
        self.missing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn is_missing(&self, x: usize) -> bool {
        self.missing[x]
    }

    pub fn count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        self.missing
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn union(&self, other: &TraceMask) -> TraceMask {
        TraceMask {
            missing: self
                .missing
                .iter()
                .zip(&other.missing)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }

    pub fn to_sample_mask(&self, n_t: usize) -> SampleMask {
        let n_x = self.missing.len();
        let values = Array2::from_shape_fn((n_t, n_x), |(_, x)| self.missing[x] as u8);
        SampleMask { values }
    }
}

/// Per-sample binary mask; 1 marks a missing sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMask {
    values: Array2<u8>,
}

impl SampleMask {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Param("mask values must be 0 or 1".into()));
        }
        Ok(SampleMask { values })
    }

    pub fn empty(n_t: usize, n_x: usize) -> Self {
        SampleMask {
            values: Array2::zeros((n_t, n_x)),
        }
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn is_missing(&self, t: usize, x: usize) -> bool {
        self.values[[t, x]] == 1
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }
}

/// Assignment of a gather to one of the three data subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Evaluation,
}

/// Ordered gathers plus their split assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub gathers: Vec<Gather>,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn new(gathers: Vec<Gather>, split: Vec<Split>) -> Result<Self> {
        if gathers.len() != split.len() {
            return Err(Error::Shape(format!(
                "{} gathers but {} split labels",
                gathers.len(),
                split.len()
            )));
        }
        Ok(Dataset { gathers, split })
    }

    pub fn len(&self) -> usize {
        self.gathers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gathers.is_empty()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter_map(|(i, s)| (*s == which).then_some(i))
            .collect()
    }
}

/// Assigns `n` gather indices to train/validation/evaluation.
///
/// A seeded permutation is drawn; its first `n_trainval` entries form the
/// train+validation pool, of which `round_half_up(ratio * n_trainval)` go to
/// training. Everything else is evaluation.
pub fn split_dataset(n: usize, n_trainval: usize, trainval_ratio: f64, seed: u64) -> Result<Vec<Split>> {
    if n_trainval > n {
        return Err(Error::Param(format!(
            "n_trainval ({n_trainval}) exceeds dataset size ({n})"
        )));
    }
    if !(trainval_ratio > 0.0 && trainval_ratio < 1.0) {
        return Err(Error::Param(format!(
            "trainval_ratio must be in (0, 1), got {trainval_ratio}"
        )));
    }
    let n_train = (trainval_ratio * n_trainval as f64 + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut split = vec![Split::Evaluation; n];
    for (rank, &idx) in order.iter().enumerate().take(n_trainval) {
        split[idx] = if rank < n_train {
            Split::Train
        } else {
            Split::Validation
        };
    }
    Ok(split)
}

fn check_gain(gain: f32) -> Result<()> {
    if gain == 0.0 || !gain.is_finite() {
        return Err(Error::Param(format!("gain must be finite and non-zero, got {gain}")));
    }
    Ok(())
}

/// Multiplies every sample by `gain`.
pub fn apply_gain(g: &Gather, gain: f32) -> Result<Gather> {
    check_gain(gain)?;
    g.map(|v| v * gain)
}

/// Divides every sample by `gain`.
pub fn remove_gain(g: &Gather, gain: f32) -> Result<Gather> {
    check_gain(gain)?;
    g.map(|v| v / gain)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().unwrap())
    }
}

fn check_header(bytes: &[u8], magic: [u8; 4], header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: header_len,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            expected: header_len,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    Ok(())
}

/// Serializes a gather to the `SGTH` binary layout.
pub fn encode_gather(g: &Gather) -> Vec<u8> {
    let (n_t, n_x) = g.shape();
    let mut out = Vec::with_capacity(GATHER_HEADER_LEN + 4 * n_t * n_x);
    out.extend_from_slice(&GATHER_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n_t as u32).to_le_bytes());
    out.extend_from_slice(&(n_x as u32).to_le_bytes());
    out.extend_from_slice(&g.meta.dt.to_le_bytes());
    out.extend_from_slice(&g.meta.dx.to_le_bytes());
    out.extend_from_slice(&g.meta.f0.to_le_bytes());
    // Standard layout iteration is row-major over (time, trace).
    for v in g.samples.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_gather(bytes: &[u8]) -> Result<Gather> {
    check_header(bytes, GATHER_MAGIC, GATHER_HEADER_LEN)?;
    let mut r = Reader { buf: bytes, pos: 6 };
    let n_t = r.u32() as usize;
    let n_x = r.u32() as usize;
    let meta = AcquisitionMeta {
        dt: r.f64(),
        dx: r.f64(),
        f0: r.f64(),
    };
    let expected = GATHER_HEADER_LEN + 4 * n_t * n_x;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[GATHER_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let samples = Array2::from_shape_vec((n_t, n_x), data).map_err(|e| Error::Shape(e.to_string()))?;
    Gather::new(samples, meta)
}

pub fn save_gather(g: &Gather, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_gather(g))
}

pub fn load_gather(path: impl AsRef<Path>) -> Result<Gather> {
    decode_gather(&read_file(path.as_ref())?)
}

pub fn encode_mask(m: &SampleMask) -> Vec<u8> {
    let (n_t, n_x) = m.shape();
    let mut out = Vec::with_capacity(MASK_HEADER_LEN + n_t * n_x);
    out.extend_from_slice(&MASK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n_t as u32).to_le_bytes());
    out.extend_from_slice(&(n_x as u32).to_le_bytes());
    out.extend(m.values.iter().copied());
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<SampleMask> {
    check_header(bytes, MASK_MAGIC, MASK_HEADER_LEN)?;
    let mut r = Reader { buf: bytes, pos: 6 };
    let n_t = r.u32() as usize;
    let n_x = r.u32() as usize;
    let expected = MASK_HEADER_LEN + n_t * n_x;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values = Array2::from_shape_vec((n_t, n_x), bytes[MASK_HEADER_LEN..].to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    SampleMask::new(values)
}

pub fn save_mask(m: &SampleMask, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(m))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<SampleMask> {
    decode_mask(&read_file(path.as_ref())?)
}

/// One gather entry of a dataset manifest. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// JSON manifest describing a dataset on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub gathers: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path.as_ref(), text.as_bytes())
    }

    pub fn splits(&self) -> Vec<Split> {
        self.gathers.iter().map(|e| e.split).collect()
    }
}

/// Resolves a manifest-relative path against the manifest's directory.
pub fn resolve(manifest_path: &Path, entry: &Path) -> PathBuf {
    if entry.is_absolute() {
        entry.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(entry)
    }
}

/// Loads every gather listed by a manifest.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<(DatasetManifest, Dataset)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::load(manifest_path)?;
    let gathers = manifest
        .gathers
        .iter()
        .map(|e| load_gather(resolve(manifest_path, &e.path)))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::new(gathers, manifest.splits())?;
    Ok((manifest, dataset))
}

/// Loads the masks of a manifest, `None` where an entry has no mask.
pub fn load_masks(manifest_path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Vec<Option<SampleMask>>> {
    let manifest_path = manifest_path.as_ref();
    manifest
        .gathers
        .iter()
        .map(|e| {
            e.mask
                .as_ref()
                .map(|m| load_mask(resolve(manifest_path, m)))
                .transpose()
        })
        .collect()
}

/// Writes `dataset` as `gather_NNNN.sgth` files plus `dataset.json` in `dir`.
/// Returns the manifest path.
pub fn save_dataset(
    dataset: &Dataset,
    masks: Option<&[SampleMask]>,
    seed: u64,
    provenance: Option<serde_json::Value>,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, (g, split)) in dataset.gathers.iter().zip(&dataset.split).enumerate() {
        let name = PathBuf::from(format!("gather_{i:04}.sgth"));
        save_gather(g, dir.join(&name))?;
        let mask = match masks {
            Some(ms) => {
                let mname = PathBuf::from(format!("gather_{i:04}.smsk"));
                save_mask(&ms[i], dir.join(&mname))?;
                Some(mname)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            path: name,
            split: *split,
            mask,
        });
    }
    let manifest = DatasetManifest {
        seed,
        gathers: entries,
        provenance,
    };
    let path = dir.join("dataset.json");
    manifest.save(&path)?;
    Ok(path)
}
