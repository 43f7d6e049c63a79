//! Synthetic multi-subject cohort generator.
//!
//! Each trial is a sum of band-limited oscillations whose amplitudes encode
//! the emotion class (spectral signal, shared by all subjects), spatially
//! mixed through a per-subject matrix (the subject nuisance), plus white
//! noise. The two factors are deliberately orthogonal in mechanism, so a
//! model can in principle keep the class signal while discarding subject
//! identity. Every random draw is keyed by purpose-specific stream tags,
//! which makes datasets byte-identical across runs and generation orders.

use crate::data::DataError;
use crate::features::{FeatureError, RawRecording};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Center frequency of each band, where the class-dependent energy is placed.
pub const BAND_CENTER_HZ: [f64; 5] = [2.5, 6.0, 10.5, 21.5, 40.0];

/// Deterministic per-channel, per-band source amplitude. Identical for every
/// subject (so zero mixing means zero subject effect), but anisotropic across
/// channels: without it the source covariance would be a multiple of the
/// identity, orthonormal mixing would leave it untouched, and the subject
/// nuisance would be invisible to any observer.
pub fn source_profile(channel: usize, band: usize, n_channels: usize) -> f64 {
    1.0 + 0.8 * (std::f64::consts::TAU * channel as f64 / n_channels as f64 + band as f64).sin()
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Invalid(String),
    #[error("output directory {0} is not empty (pass force to overwrite)")]
    OutputNotEmpty(PathBuf),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials_per_subject_per_class: usize,
    pub n_classes: usize,
    pub n_channels: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    /// Per-class multiplier on each band's oscillation amplitude.
    pub emotion_band_gain: Vec<[f64; 5]>,
    /// 0 = every subject shares the identity mixing; 1 = fully random rotation.
    pub subject_mixing_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            trials_per_subject_per_class: 20,
            n_classes: 2,
            n_channels: 16,
            sample_rate_hz: 250.0,
            duration_s: 8.0,
            emotion_band_gain: vec![[1.0, 0.5, 2.0, 1.0, 1.0], [1.0, 2.0, 0.5, 1.0, 1.0]],
            subject_mixing_strength: 0.85,
            noise_sigma: 0.25,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |msg: String| Err(SynthError::Invalid(msg));
        if self.n_subjects < 3 {
            return err(format!(
                "n_subjects {} < 3; leave-one-subject-out needs at least 2 training subjects",
                self.n_subjects
            ));
        }
        if self.n_classes < 2 {
            return err(format!("n_classes {} < 2", self.n_classes));
        }
        if self.trials_per_subject_per_class == 0 {
            return err("trials_per_subject_per_class is 0".into());
        }
        if self.n_channels < 2 {
            return err(format!("n_channels {} < 2", self.n_channels));
        }
        if !(self.sample_rate_hz > 0.0) || !(self.duration_s > 0.0) {
            return err("sample_rate_hz and duration_s must be positive".into());
        }
        if self.emotion_band_gain.len() != self.n_classes {
            return err(format!(
                "emotion_band_gain has {} rows for {} classes",
                self.emotion_band_gain.len(),
                self.n_classes
            ));
        }
        if self.emotion_band_gain.iter().flatten().any(|&g| !(g > 0.0)) {
            return err("every band gain must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.subject_mixing_strength) {
            return err(format!(
                "subject_mixing_strength {} outside [0, 1]",
                self.subject_mixing_strength
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return err(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.sample_rate_hz * self.duration_s).round() as usize
    }

    pub fn total_trials(&self) -> usize {
        self.n_subjects * self.n_classes * self.trials_per_subject_per_class
    }
}

// stream tags keep the independent noise sources on disjoint RNG streams
const STREAM_PHASE: u32 = 1;
const STREAM_MIXING: u32 = 2;
const STREAM_NOISE: u32 = 3;

/// Deterministic RNG for (seed, tags): the seed fills the first 8 key bytes,
/// up to six tags fill the rest.
pub fn rng_stream(seed: u64, tags: &[u32]) -> ChaCha8Rng {
    assert!(tags.len() <= 6, "at most 6 stream tags fit in the key");
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    for (i, &t) in tags.iter().enumerate() {
        key[8 + 4 * i..8 + 4 * (i + 1)].copy_from_slice(&t.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Per-subject mixing matrix M = (1 - a) I + a R with R orthonormal,
/// keyed by (seed, subject) only.
pub fn mixing_matrix(cfg: &SynthConfig, subject_id: usize) -> Array2<f64> {
    let c = cfg.n_channels;
    let a = cfg.subject_mixing_strength;
    let mut rng = rng_stream(cfg.seed, &[STREAM_MIXING, subject_id as u32]);
    let gauss = Array2::from_shape_fn((c, c), |_| StandardNormal.sample(&mut rng));
    let r = orthonormal_rows(&gauss);
    Array2::from_shape_fn((c, c), |(i, j)| {
        let eye = if i == j { 1.0 } else { 0.0 };
        (1.0 - a) * eye + a * r[[i, j]]
    })
}

/// Gram-Schmidt on rows; a (vanishingly unlikely) degenerate row falls back
/// to a basis vector so the result is always orthonormal.
fn orthonormal_rows(m: &Array2<f64>) -> Array2<f64> {
    let c = m.shape()[0];
    let mut out = m.to_owned();
    for i in 0..c {
        for j in 0..i {
            let dot: f64 = (0..c).map(|k| out[[i, k]] * out[[j, k]]).sum();
            for k in 0..c {
                out[[i, k]] -= dot * out[[j, k]];
            }
        }
        let norm: f64 = (0..c).map(|k| out[[i, k]] * out[[i, k]]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            for k in 0..c {
                out[[i, k]] = if k == i { 1.0 } else { 0.0 };
            }
        } else {
            for k in 0..c {
                out[[i, k]] /= norm;
            }
        }
    }
    out
}

/// One trial: class-gained oscillations with (class, trial)-keyed phases,
/// independent of subject so the subject effect comes only from mixing and
/// noise.
pub fn generate_trial(
    cfg: &SynthConfig,
    subject_id: usize,
    class: usize,
    trial: usize,
) -> RawRecording {
    let (c, t_len) = (cfg.n_channels, cfg.n_samples());
    let gains = &cfg.emotion_band_gain[class];
    let dt = 1.0 / cfg.sample_rate_hz;

    // one oscillator per band, shared by all channels; channels differ only
    // through the deterministic amplitude profile, so the source covariance
    // is trial-stable and the subject effect is purely the mixing matrix
    let mut phase_rng = rng_stream(cfg.seed, &[STREAM_PHASE, class as u32, trial as u32]);
    let mut sources = Array2::<f64>::zeros((c, t_len));
    for (b, &f_hz) in BAND_CENTER_HZ.iter().enumerate() {
        let phase = phase_rng.random::<f64>() * std::f64::consts::TAU;
        let w = std::f64::consts::TAU * f_hz;
        for t in 0..t_len {
            let osc = (w * (t as f64) * dt + phase).sin();
            for ch in 0..c {
                sources[[ch, t]] += gains[b] * source_profile(ch, b, c) * osc;
            }
        }
    }

    let mixed = mixing_matrix(cfg, subject_id).dot(&sources);

    let mut samples = mixed;
    if cfg.noise_sigma > 0.0 {
        let mut noise_rng = rng_stream(
            cfg.seed,
            &[STREAM_NOISE, subject_id as u32, class as u32, trial as u32],
        );
        for v in samples.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut noise_rng);
            *v += cfg.noise_sigma * n;
        }
    }

    RawRecording {
        samples,
        sample_rate_hz: cfg.sample_rate_hz,
        subject_id,
        emotion_label: class,
    }
}

/// All trials of one subject, class-major then trial order.
pub fn generate_subject(cfg: &SynthConfig, subject_id: usize) -> Vec<RawRecording> {
    let mut out = Vec::with_capacity(cfg.n_classes * cfg.trials_per_subject_per_class);
    for class in 0..cfg.n_classes {
        for trial in 0..cfg.trials_per_subject_per_class {
            out.push(generate_trial(cfg, subject_id, class, trial));
        }
    }
    out
}

/// File name of one trial inside a cohort directory.
pub fn trial_file_name(subject_id: usize, class: usize, trial: usize) -> String {
    format!("s{subject_id:02}_c{class}_t{trial:02}.eegr")
}

/// Config echo written next to the data for provenance.
pub const SYNTH_CONFIG_FILE: &str = "synth_config.toml";

/// Generate the full cohort on disk: one recording file per trial, a
/// manifest, and the config echo. Refuses a nonempty directory unless
/// `force` is set.
pub fn generate_cohort(
    cfg: &SynthConfig,
    out_dir: &Path,
    force: bool,
) -> Result<crate::data::Manifest, SynthError> {
    cfg.validate()?;
    if out_dir.exists() {
        let nonempty = out_dir
            .read_dir()
            .map_err(|source| SynthError::Io { path: out_dir.to_path_buf(), source })?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(SynthError::OutputNotEmpty(out_dir.to_path_buf()));
        }
    } else {
        std::fs::create_dir_all(out_dir)
            .map_err(|source| SynthError::Io { path: out_dir.to_path_buf(), source })?;
    }

    let mut rows = Vec::with_capacity(cfg.total_trials());
    for subject in 0..cfg.n_subjects {
        for class in 0..cfg.n_classes {
            for trial in 0..cfg.trials_per_subject_per_class {
                let rec = generate_trial(cfg, subject, class, trial);
                let name = trial_file_name(subject, class, trial);
                rec.save(&out_dir.join(&name))?;
                rows.push(crate::data::ManifestRow {
                    path: name.clone(),
                    emotion_label: class,
                    subject_id: subject,
                    trial_id: name.trim_end_matches(".eegr").to_string(),
                });
            }
        }
    }
    let manifest = crate::data::Manifest::new(out_dir.to_path_buf(), rows);
    manifest.save()?;

    let echo = toml::to_string_pretty(cfg)
        .expect("synth config always serializes");
    let echo_path = out_dir.join(SYNTH_CONFIG_FILE);
    std::fs::write(&echo_path, echo)
        .map_err(|source| SynthError::Io { path: echo_path, source })?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_features, FeatureOptions};

    /// Small, fast cohort for unit tests.
    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            n_subjects: 3,
            trials_per_subject_per_class: 2,
            n_classes: 2,
            n_channels: 4,
            sample_rate_hz: 125.0,
            duration_s: 2.0,
            noise_sigma: 0.1,
            subject_mixing_strength: 0.5,
            seed: 99,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn no_subject_effect_without_mixing_and_noise() {
        let cfg = SynthConfig {
            subject_mixing_strength: 0.0,
            noise_sigma: 0.0,
            ..tiny_cfg()
        };
        let a = generate_trial(&cfg, 0, 1, 0);
        let b = generate_trial(&cfg, 2, 1, 0);
        // the container header records the subject id, so compare the signals
        assert_eq!(a.samples, b.samples, "subjects must coincide with no nuisance factors");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_cfg();
        let a = generate_trial(&cfg, 1, 0, 1);
        let b = generate_trial(&cfg, 1, 0, 1);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn mixing_matrix_interpolates_identity_and_rotation() {
        let cfg = tiny_cfg();
        let m0 = mixing_matrix(&SynthConfig { subject_mixing_strength: 0.0, ..cfg.clone() }, 1);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m0[[i, j]], if i == j { 1.0 } else { 0.0 });
            }
        }
        // full strength: rows orthonormal
        let m1 = mixing_matrix(&SynthConfig { subject_mixing_strength: 1.0, ..cfg }, 1);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4).map(|k| m1[[i, k]] * m1[[j, k]]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "rows {i},{j} dot {dot}");
            }
        }
    }

    #[test]
    fn alpha_gain_raises_alpha_band_mass() {
        let base = SynthConfig {
            noise_sigma: 0.0,
            n_classes: 2,
            emotion_band_gain: vec![[1.0; 5], [1.0, 1.0, 2.0, 1.0, 1.0]],
            ..tiny_cfg()
        };
        let rec_flat = generate_trial(&base, 0, 0, 0);
        let rec_alpha = generate_trial(&base, 0, 1, 0);
        let opts = FeatureOptions::default();
        let alpha_mass = |rec: &RawRecording| {
            let (feats, _) = extract_features(rec, &opts).unwrap();
            let masks = crate::features::band_masks(
                &feats.freq_bin_hz,
                crate::features::DEFAULT_BAND_EDGES_HZ,
            )
            .unwrap();
            let alpha_bins = masks.bins_of(2);
            let mut mass = 0.0;
            for s in 0..feats.data.shape()[0] {
                for c in 0..feats.data.shape()[1] {
                    for &f in &alpha_bins {
                        mass += feats.data[[s, c, f]];
                    }
                }
            }
            mass
        };
        assert!(
            alpha_mass(&rec_alpha) > alpha_mass(&rec_flat),
            "doubling the alpha gain must raise relative alpha mass"
        );
    }

    #[test]
    fn cohort_counts_and_balance() {
        let cfg = SynthConfig {
            n_subjects: 5,
            trials_per_subject_per_class: 10,
            n_channels: 3,
            sample_rate_hz: 50.0,
            duration_s: 1.0,
            ..tiny_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_cohort(&cfg, dir.path(), false).unwrap();
        assert_eq!(manifest.rows.len(), 100);
        for class in 0..2 {
            assert_eq!(manifest.rows.iter().filter(|r| r.emotion_label == class).count(), 50);
        }
        for subject in 0..5 {
            let per_subject: Vec<_> =
                manifest.rows.iter().filter(|r| r.subject_id == subject).collect();
            assert_eq!(per_subject.len(), 20);
            for class in 0..2 {
                assert_eq!(
                    per_subject.iter().filter(|r| r.emotion_label == class).count(),
                    10,
                    "class balance must be exact per subject"
                );
            }
        }
        assert_eq!(manifest.subjects(), vec![0, 1, 2, 3, 4]);
        assert!(dir.path().join(SYNTH_CONFIG_FILE).exists());
    }

    #[test]
    fn nonempty_output_requires_force() {
        let cfg = SynthConfig {
            n_channels: 2,
            sample_rate_hz: 50.0,
            duration_s: 1.0,
            ..tiny_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("stale.txt"), b"x").unwrap();
        assert!(matches!(
            generate_cohort(&cfg, dir.path(), false),
            Err(SynthError::OutputNotEmpty(_))
        ));
        generate_cohort(&cfg, dir.path(), true).unwrap();
    }

    #[test]
    fn datasets_are_byte_identical_across_runs() {
        let cfg = SynthConfig {
            sample_rate_hz: 50.0,
            duration_s: 1.0,
            ..tiny_cfg()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_cohort(&cfg, d1.path(), false).unwrap();
        generate_cohort(&cfg, d2.path(), false).unwrap();
        for row in &m1.rows {
            let b1 = std::fs::read(d1.path().join(&row.path)).unwrap();
            let b2 = std::fs::read(d2.path().join(&row.path)).unwrap();
            assert_eq!(b1, b2, "trial {} differs between runs", row.trial_id);
        }
        let c1 = std::fs::read(d1.path().join(crate::data::MANIFEST_FILE)).unwrap();
        let c2 = std::fs::read(d2.path().join(crate::data::MANIFEST_FILE)).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn covariance_centroids_recover_subjects_under_mixing() {
        // nuisance-existence check: channel covariance identifies the subject
        let cfg = SynthConfig {
            n_subjects: 3,
            trials_per_subject_per_class: 6,
            n_channels: 6,
            sample_rate_hz: 125.0,
            duration_s: 2.0,
            subject_mixing_strength: 0.9,
            noise_sigma: 0.05,
            ..tiny_cfg()
        };
        let cov_vec = |rec: &RawRecording| -> Vec<f64> {
            let c = rec.n_channels();
            let t = rec.samples.shape()[1] as f64;
            let mut v = Vec::with_capacity(c * c);
            for i in 0..c {
                for j in 0..c {
                    let dot: f64 = rec.samples.row(i).dot(&rec.samples.row(j));
                    v.push(dot / t);
                }
            }
            v
        };
        // centroids from class-0 trials, evaluation on class-1 trials: the
        // covariance signature must transfer across emotion classes
        let mut centroids = Vec::new();
        for s in 0..3 {
            let mut acc = vec![0.0; 36];
            for trial in 0..6 {
                let v = cov_vec(&generate_trial(&cfg, s, 0, trial));
                for (a, b) in acc.iter_mut().zip(v) {
                    *a += b / 6.0;
                }
            }
            centroids.push(acc);
        }
        let mut correct = 0;
        let mut total = 0;
        for s in 0..3 {
            for trial in 0..6 {
                let v = cov_vec(&generate_trial(&cfg, s, 1, trial));
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let da: f64 =
                            centroids[a].iter().zip(&v).map(|(c, x)| (c - x).powi(2)).sum();
                        let db: f64 =
                            centroids[b].iter().zip(&v).map(|(c, x)| (c - x).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                correct += usize::from(best == s);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 1.0 / 3.0 + 0.2, "covariance probe only reached {acc}");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(SynthConfig { n_subjects: 2, ..tiny_cfg() }.validate().is_err());
        assert!(SynthConfig { subject_mixing_strength: 1.5, ..tiny_cfg() }.validate().is_err());
        assert!(
            SynthConfig { emotion_band_gain: vec![[1.0; 5]], ..tiny_cfg() }.validate().is_err()
        );
        assert!(SynthConfig {
            emotion_band_gain: vec![[1.0; 5], [0.0, 1.0, 1.0, 1.0, 1.0]],
            ..tiny_cfg()
        }
        .validate()
        .is_err());
        assert!(tiny_cfg().validate().is_ok());
    }
}
