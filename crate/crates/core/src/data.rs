//! Feature tensors, trial records, the on-disk tensor container, and the
//! dataset manifest.
//!
//! Container layout (version 1, all integers/floats little-endian):
//!
//! ```text
//! magic "EEGT" | version u8 | endian u8 (0 = LE) | elem width u8 (4)
//! | S u32 | C u32 | F u32 | window_seconds f64 | freq_bin_hz f64 * F
//! | crc32 u32 over all preceding bytes
//! | payload f32 * (S*C*F), row-major (s, c, f)
//! ```
//!
//! Payload elements are stored as 4-byte floats and widened to f64 in
//! memory, so saving a tensor whose values exceed f32 precision rounds them.
//! The header checksum makes any single-byte header corruption detectable.

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"EEGT";
pub const FORMAT_VERSION: u8 = 1;

/// Minimum frequency bins: one per EEG band.
pub const MIN_BINS: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported layout: {0}")]
    UnsupportedLayout(String),
    #[error("header checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    HeaderChecksum { stored: u32, computed: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0} extra")]
    TrailingBytes(usize),
    #[error("invalid dimensions S={s}, C={c}, F={f}: {why}")]
    InvalidDims { s: usize, c: usize, f: usize, why: String },
    #[error("tensor invariant violated: {0}")]
    Invariant(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// rPSD features of one trial: S windows x C channels x F frequency bins.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub data: Array3<f64>,
    pub window_seconds: f64,
    /// Center frequency (Hz) of each retained bin, strictly increasing.
    pub freq_bin_hz: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(
        data: Array3<f64>,
        window_seconds: f64,
        freq_bin_hz: Vec<f64>,
    ) -> Result<Self, DataError> {
        let t = Self { data, window_seconds, freq_bin_hz };
        t.validate()?;
        Ok(t)
    }

    pub fn n_windows(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_bins(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (s, c, f) = self.data.dim();
        check_dims(s, c, f)?;
        if self.freq_bin_hz.len() != f {
            return Err(DataError::Invariant(format!(
                "freq_bin_hz has {} entries for {} bins",
                self.freq_bin_hz.len(),
                f
            )));
        }
        if !self.freq_bin_hz.windows(2).all(|w| w[0] < w[1]) {
            return Err(DataError::Invariant("freq_bin_hz must be strictly increasing".into()));
        }
        if !self.window_seconds.is_finite() || self.window_seconds <= 0.0 {
            return Err(DataError::Invariant(format!(
                "window_seconds must be finite and positive, got {}",
                self.window_seconds
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invariant("tensor contains non-finite entries".into()));
        }
        Ok(())
    }

    /// Serialize into the container format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (s, c, f) = self.data.dim();
        let mut buf = Vec::with_capacity(header_len(f) + s * c * f * 4);
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.push(FORMAT_VERSION);
        buf.push(0); // little-endian
        buf.push(4); // element width
        buf.extend_from_slice(&(s as u32).to_le_bytes());
        buf.extend_from_slice(&(c as u32).to_le_bytes());
        buf.extend_from_slice(&(f as u32).to_le_bytes());
        buf.extend_from_slice(&self.window_seconds.to_le_bytes());
        for hz in &self.freq_bin_hz {
            buf.extend_from_slice(&hz.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        for v in self.data.as_standard_layout().iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != TENSOR_MAGIC {
            return Err(DataError::BadMagic { expected: *TENSOR_MAGIC, found: magic });
        }
        // Version/layout bytes are read after the checksum so corruption in
        // them is reported as a checksum failure, not a misleading variant.
        let version = r.take(1)?[0];
        let endian = r.take(1)?[0];
        let elem_width = r.take(1)?[0];
        let s = r.u32()? as usize;
        let c = r.u32()? as usize;
        let f = r.u32()? as usize;
        let window_seconds = r.f64()?;
        // bound allocations by the actual byte count before trusting f
        let avail = bytes.len() - r.pos;
        if f.saturating_mul(8) > avail {
            return Err(DataError::Truncated { expected: f * 8, found: avail });
        }
        let mut freq_bin_hz = Vec::with_capacity(f);
        for _ in 0..f {
            freq_bin_hz.push(r.f64()?);
        }
        let computed = crc32fast::hash(&bytes[..r.pos]);
        let stored = r.u32()?;
        if stored != computed {
            return Err(DataError::HeaderChecksum { stored, computed });
        }
        if version != FORMAT_VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        if endian != 0 {
            return Err(DataError::UnsupportedLayout(format!("endianness flag {endian}")));
        }
        if elem_width != 4 {
            return Err(DataError::UnsupportedLayout(format!("element width {elem_width}")));
        }
        check_dims(s, c, f)?;
        let n = s
            .checked_mul(c)
            .and_then(|x| x.checked_mul(f))
            .filter(|&n| n.checked_mul(4).is_some())
            .ok_or(DataError::InvalidDims {
                s,
                c,
                f,
                why: "element count overflows".to_string(),
            })?;
        let expected = n * 4;
        let found = bytes.len() - r.pos;
        if found < expected {
            return Err(DataError::Truncated { expected, found });
        }
        if found > expected {
            return Err(DataError::TrailingBytes(found - expected));
        }
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f32()? as f64);
        }
        let data = Array3::from_shape_vec((s, c, f), values).expect("sized above");
        Self::new(data, window_seconds, freq_bin_hz)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        self.validate()?;
        std::fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }
}

fn check_dims(s: usize, c: usize, f: usize) -> Result<(), DataError> {
    let why = if s < 1 {
        "need at least one window"
    } else if c < 2 {
        "need at least two channels to form a graph"
    } else if f < MIN_BINS {
        "need at least five bins to cover the five bands"
    } else {
        return Ok(());
    };
    Err(DataError::InvalidDims { s, c, f, why: why.to_string() })
}

/// Header length in bytes for a tensor with `f` frequency bins.
pub const fn header_len(f: usize) -> usize {
    // magic + version + endian + width + 3 dims + window_seconds + bins + crc
    4 + 1 + 1 + 1 + 3 * 4 + 8 + 8 * f + 4
}

/// Strict little-endian cursor; every read past the end is a Truncated error.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// One labeled trial: features plus identity metadata.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub features: FeatureTensor,
    pub emotion_label: usize,
    pub subject_id: usize,
    pub trial_id: String,
}

/// One manifest line; `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub emotion_label: usize,
    pub subject_id: usize,
    pub trial_id: String,
}

/// Trial listing of a dataset directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory all row paths are resolved against.
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl Manifest {
    pub fn new(root: PathBuf, rows: Vec<ManifestRow>) -> Self {
        Self { rows, root }
    }

    /// Load `manifest.csv` from a dataset directory.
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let mut reader = csv::Reader::from_path(&path).map_err(|e| {
            DataError::Manifest(format!("cannot open {}: {e}", path.display()))
        })?;
        let mut rows = Vec::new();
        for rec in reader.deserialize() {
            let row: ManifestRow =
                rec.map_err(|e| DataError::Manifest(format!("bad row: {e}")))?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(DataError::Manifest(format!("{} lists no trials", path.display())));
        }
        Ok(Self { rows, root: dir.to_path_buf() })
    }

    pub fn save(&self) -> Result<(), DataError> {
        let path = self.root.join(MANIFEST_FILE);
        let mut writer = csv::Writer::from_path(&path).map_err(|e| {
            DataError::Manifest(format!("cannot write {}: {e}", path.display()))
        })?;
        for row in &self.rows {
            writer
                .serialize(row)
                .map_err(|e| DataError::Manifest(format!("bad row: {e}")))?;
        }
        writer.flush().map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// Distinct subject ids, ascending.
    pub fn subjects(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.rows.iter().map(|r| r.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Distinct emotion labels, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.rows.iter().map(|r| r.emotion_label).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }

    /// Load the feature tensor behind one row.
    pub fn load_trial(&self, row: &ManifestRow) -> Result<TrialRecord, DataError> {
        let features = FeatureTensor::load(&self.resolve(row))?;
        Ok(TrialRecord {
            features,
            emotion_label: row.emotion_label,
            subject_id: row.subject_id,
            trial_id: row.trial_id.clone(),
        })
    }
}
