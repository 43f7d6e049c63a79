//! Raw multichannel recordings and their conversion to relative power
//! spectral density feature tensors, plus frequency band masks.
//!
//! The recording container mirrors the tensor container (`data`):
//!
//! ```text
//! magic "EEGR" | version u8 | endian u8 (0 = LE) | elem width u8 (4)
//! | C u32 | T u32 | sample_rate_hz f64 | subject_id u32 | emotion_label u32
//! | crc32 u32 over all preceding bytes
//! | payload f32 * (C*T), row-major (c, t)
//! ```

use crate::data::{DataError, FeatureTensor, Manifest, ManifestRow, Reader};
use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const RECORDING_MAGIC: &[u8; 4] = b"EEGR";

/// Canonical band order used everywhere masks appear.
pub const BAND_NAMES: [&str; 5] = ["delta", "theta", "alpha", "beta", "gamma"];

/// Conventional EEG band edges in Hz, half-open [lo, hi).
pub const DEFAULT_BAND_EDGES_HZ: [(f64, f64); 5] =
    [(1.0, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 50.0)];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("window of {window} samples exceeds recording length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("invalid windowing: {0}")]
    InvalidWindow(String),
    #[error("band edges invalid: {0}")]
    BadBandEdges(String),
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("output directory {0} is not empty (pass force to overwrite)")]
    OutputNotEmpty(PathBuf),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Raw multichannel signal of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    /// C x T samples.
    pub samples: Array2<f64>,
    pub sample_rate_hz: f64,
    pub subject_id: usize,
    pub emotion_label: usize,
}

impl RawRecording {
    pub fn n_channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(FeatureError::InvalidRecording(format!(
                "sample rate must be finite and positive, got {}",
                self.sample_rate_hz
            )));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::InvalidRecording("non-finite sample".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, t) = self.samples.dim();
        let mut buf = Vec::with_capacity(35 + c * t * 4);
        buf.extend_from_slice(RECORDING_MAGIC);
        buf.push(1); // version
        buf.push(0); // little-endian
        buf.push(4); // element width
        buf.extend_from_slice(&(c as u32).to_le_bytes());
        buf.extend_from_slice(&(t as u32).to_le_bytes());
        buf.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        buf.extend_from_slice(&(self.subject_id as u32).to_le_bytes());
        buf.extend_from_slice(&(self.emotion_label as u32).to_le_bytes());
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        for v in self.samples.as_standard_layout().iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != RECORDING_MAGIC {
            return Err(DataError::BadMagic { expected: *RECORDING_MAGIC, found: magic });
        }
        let version = r.take(1)?[0];
        let endian = r.take(1)?[0];
        let elem_width = r.take(1)?[0];
        let c = r.u32()? as usize;
        let t = r.u32()? as usize;
        let sample_rate_hz = r.f64()?;
        let subject_id = r.u32()? as usize;
        let emotion_label = r.u32()? as usize;
        let computed = crc32fast::hash(&bytes[..r.pos]);
        let stored = r.u32()?;
        if stored != computed {
            return Err(DataError::HeaderChecksum { stored, computed });
        }
        if version != 1 {
            return Err(DataError::UnsupportedVersion(version));
        }
        if endian != 0 || elem_width != 4 {
            return Err(DataError::UnsupportedLayout(format!(
                "endian {endian}, element width {elem_width}"
            )));
        }
        let n = c.checked_mul(t).filter(|&n| n.checked_mul(4).is_some()).ok_or(
            DataError::InvalidDims { s: 1, c, f: t, why: "element count overflows".to_string() },
        )?;
        let found = bytes.len() - r.pos;
        if found < n * 4 {
            return Err(DataError::Truncated { expected: n * 4, found });
        }
        if found > n * 4 {
            return Err(DataError::TrailingBytes(found - n * 4));
        }
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f32()? as f64);
        }
        let samples = Array2::from_shape_vec((c, t), values).expect("sized above");
        Ok(Self { samples, sample_rate_hz, subject_id, emotion_label })
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        self.validate()?;
        std::fs::write(path, self.to_bytes()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Windowing and spectrum options for feature extraction.
#[derive(Debug, Clone, Copy)]
pub struct FeatureOptions {
    pub window_s: f64,
    pub stride_s: f64,
    /// Retained bin range [f_min, f_max) in Hz.
    pub f_min_hz: f64,
    pub f_max_hz: f64,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self { window_s: 1.0, stride_s: 1.0, f_min_hz: 1.0, f_max_hz: 50.0 }
    }
}

/// Cut a recording into S = floor((T - W)/stride) + 1 windows of exactly
/// W = round(window_s * rate) samples, no padding.
pub fn sliding_windows(
    rec: &RawRecording,
    window_s: f64,
    stride_s: f64,
) -> Result<Vec<ArrayView2<'_, f64>>, FeatureError> {
    rec.validate()?;
    let w = (window_s * rec.sample_rate_hz).round() as usize;
    let stride = (stride_s * rec.sample_rate_hz).round() as usize;
    if w < 2 {
        return Err(FeatureError::InvalidWindow(format!("window of {w} samples is too short")));
    }
    if stride == 0 {
        return Err(FeatureError::InvalidWindow("stride must cover at least one sample".into()));
    }
    let t = rec.n_samples();
    if w > t {
        return Err(FeatureError::WindowTooLong { window: w, len: t });
    }
    let s = (t - w) / stride + 1;
    Ok((0..s)
        .map(|i| rec.samples.slice(ndarray::s![.., i * stride..i * stride + w]))
        .collect())
}

/// Relative power spectral density of one window.
///
/// Per channel: Hann-tapered periodogram (periodic taper, plain |X[k]|^2
/// without one-sided doubling since only relative power matters), restricted
/// to bins with center in [f_min, f_max), normalized so the channel row sums
/// to 1. An all-zero channel falls back to the uniform row 1/F and is
/// reported in the warnings list.
///
/// Returns (C x F relative power, F bin centers in Hz, warnings).
pub fn rpsd(
    segment: &ArrayView2<'_, f64>,
    sample_rate_hz: f64,
    f_min_hz: f64,
    f_max_hz: f64,
) -> Result<(Array2<f64>, Vec<f64>, Vec<String>), FeatureError> {
    let (c, w) = segment.dim();
    if w < 2 {
        return Err(FeatureError::InvalidWindow(format!("segment of {w} samples is too short")));
    }
    let bin_hz = sample_rate_hz / w as f64;
    // bins 0..=W/2 of the real spectrum; retain those inside [f_min, f_max)
    let retained: Vec<usize> = (0..=w / 2)
        .filter(|&k| {
            let f = k as f64 * bin_hz;
            f >= f_min_hz && f < f_max_hz
        })
        .collect();
    if retained.is_empty() {
        return Err(FeatureError::InvalidWindow(format!(
            "no spectral bins fall in [{f_min_hz}, {f_max_hz}) Hz at {sample_rate_hz} Hz / {w} samples"
        )));
    }
    let freq_bin_hz: Vec<f64> = retained.iter().map(|&k| k as f64 * bin_hz).collect();

    let taper: Vec<f64> = (0..w)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / w as f64).cos()))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(w);

    let f_count = retained.len();
    let mut out = Array2::<f64>::zeros((c, f_count));
    let mut warnings = Vec::new();
    let mut buffer: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); w];
    for ch in 0..c {
        for n in 0..w {
            buffer[n] = Complex::new(segment[[ch, n]] * taper[n], 0.0);
        }
        fft.process(&mut buffer);
        let mut total = 0.0;
        for (j, &k) in retained.iter().enumerate() {
            let p = buffer[k].norm_sqr();
            out[[ch, j]] = p;
            total += p;
        }
        if total > 0.0 {
            for j in 0..f_count {
                out[[ch, j]] /= total;
            }
        } else {
            let uniform = 1.0 / f_count as f64;
            for j in 0..f_count {
                out[[ch, j]] = uniform;
            }
            warnings.push(format!("channel {ch}: zero retained power, using uniform spectrum"));
        }
    }
    Ok((out, freq_bin_hz, warnings))
}

/// Binary frequency masks for the five bands, in (delta..gamma) order.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMaskSet {
    /// Five 0/1-valued vectors of length F.
    pub masks: [Array1<f64>; 5],
    pub band_edges_hz: [(f64, f64); 5],
}

impl BandMaskSet {
    pub fn n_bins(&self) -> usize {
        self.masks[0].len()
    }

    /// Indices of bins selected by band `b`.
    pub fn bins_of(&self, b: usize) -> Vec<usize> {
        self.masks[b]
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Build the band masks: mask_b[f] = 1 iff lo_b <= freq_bin_hz[f] < hi_b.
///
/// Edges must be increasing and non-overlapping, and every bin inside the
/// overall [lowest lo, highest hi) range must land in exactly one band, so
/// the masks partition the covered bins.
pub fn band_masks(
    freq_bin_hz: &[f64],
    band_edges_hz: [(f64, f64); 5],
) -> Result<BandMaskSet, FeatureError> {
    for (i, (lo, hi)) in band_edges_hz.iter().enumerate() {
        if !(lo < hi) {
            return Err(FeatureError::BadBandEdges(format!(
                "band {} has lo {lo} >= hi {hi}",
                BAND_NAMES[i]
            )));
        }
        if i + 1 < 5 && band_edges_hz[i + 1].0 < *hi {
            return Err(FeatureError::BadBandEdges(format!(
                "band {} [{}, {}) overlaps band {} starting at {}",
                BAND_NAMES[i],
                lo,
                hi,
                BAND_NAMES[i + 1],
                band_edges_hz[i + 1].0
            )));
        }
    }
    let f = freq_bin_hz.len();
    let lo_all = band_edges_hz[0].0;
    let hi_all = band_edges_hz[4].1;
    let mut masks: [Array1<f64>; 5] = std::array::from_fn(|_| Array1::zeros(f));
    for (j, &hz) in freq_bin_hz.iter().enumerate() {
        let mut hit = false;
        for (b, (lo, hi)) in band_edges_hz.iter().enumerate() {
            if hz >= *lo && hz < *hi {
                masks[b][j] = 1.0;
                hit = true;
                break;
            }
        }
        if !hit && hz >= lo_all && hz < hi_all {
            return Err(FeatureError::BadBandEdges(format!(
                "bin at {hz} Hz lies inside [{lo_all}, {hi_all}) but in no band (gap between edges)"
            )));
        }
    }
    Ok(BandMaskSet { masks, band_edges_hz })
}

/// Stack per-window rPSD into an S x C x F feature tensor.
pub fn extract_features(
    rec: &RawRecording,
    opts: &FeatureOptions,
) -> Result<(FeatureTensor, Vec<String>), FeatureError> {
    let windows = sliding_windows(rec, opts.window_s, opts.stride_s)?;
    let s = windows.len();
    let mut warnings = Vec::new();
    let mut slices: Vec<Array2<f64>> = Vec::with_capacity(s);
    let mut bins: Option<Vec<f64>> = None;
    for (i, seg) in windows.iter().enumerate() {
        let (spec, freq, mut warns) =
            rpsd(seg, rec.sample_rate_hz, opts.f_min_hz, opts.f_max_hz)?;
        for w in warns.drain(..) {
            warnings.push(format!("window {i}: {w}"));
        }
        if bins.is_none() {
            bins = Some(freq);
        }
        slices.push(spec);
    }
    let freq_bin_hz = bins.expect("at least one window");
    let c = rec.n_channels();
    let f = freq_bin_hz.len();
    let mut data = Array3::<f64>::zeros((s, c, f));
    for (i, spec) in slices.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), i).assign(&spec);
    }
    let tensor = FeatureTensor::new(data, opts.window_s, freq_bin_hz)?;
    Ok((tensor, warnings))
}

/// Extract features for every trial of a raw-recording manifest, writing one
/// tensor file per trial plus a new manifest into `out_dir`. Refuses a
/// nonempty directory unless `force` is set. Returns the feature manifest and
/// any per-trial extraction warnings.
pub fn extract_cohort(
    raw: &Manifest,
    out_dir: &Path,
    opts: &FeatureOptions,
    force: bool,
) -> Result<(Manifest, Vec<String>), FeatureError> {
    let io_err = |source| FeatureError::Io { path: out_dir.to_path_buf(), source };
    if out_dir.exists() {
        if out_dir.read_dir().map_err(io_err)?.next().is_some() && !force {
            return Err(FeatureError::OutputNotEmpty(out_dir.to_path_buf()));
        }
    } else {
        std::fs::create_dir_all(out_dir).map_err(io_err)?;
    }
    let mut rows = Vec::with_capacity(raw.rows.len());
    let mut warnings = Vec::new();
    for row in &raw.rows {
        let rec = RawRecording::load(&raw.resolve(row))?;
        let (feats, warns) = extract_features(&rec, opts)?;
        warnings.extend(warns.into_iter().map(|w| format!("{}: {w}", row.trial_id)));
        let name = format!("{}.eegt", row.trial_id);
        feats.save(&out_dir.join(&name))?;
        rows.push(ManifestRow { path: name, ..row.clone() });
    }
    let manifest = Manifest::new(out_dir.to_path_buf(), rows);
    manifest.save()?;
    Ok((manifest, warnings))
}

/// Recording container header length in bytes (fixed; no variable fields).
pub const fn recording_header_len() -> usize {
    4 + 1 + 1 + 1 + 4 + 4 + 8 + 4 + 4 + 4
}
