//! Shared test fixture: a tiny synthetic cohort, extracted and loaded, plus
//! a micro model configuration that trains in well under a second per epoch.

use crate::config::RunConfig;
use crate::features::{extract_cohort, FeatureOptions};
use crate::synth::{generate_cohort, SynthConfig};

use super::dataset::{load_feature_set, FeatureSet};
use super::folds::{loso_folds, FoldSpec};

pub(crate) fn micro_setup() -> (FeatureSet, Vec<FoldSpec>, RunConfig) {
    let synth = SynthConfig {
        n_subjects: 3,
        trials_per_subject_per_class: 4,
        n_channels: 4,
        sample_rate_hz: 128.0,
        duration_s: 2.0,
        subject_mixing_strength: 0.4,
        noise_sigma: 0.1,
        seed: 11,
        ..SynthConfig::default()
    };
    let raw_dir = tempfile::tempdir().unwrap();
    let raw = generate_cohort(&synth, raw_dir.path(), false).unwrap();

    let feat_dir = tempfile::tempdir().unwrap();
    let (manifest, _) =
        extract_cohort(&raw, feat_dir.path(), &FeatureOptions::default(), false).unwrap();
    let data = load_feature_set(&manifest).unwrap();

    let cfg = RunConfig {
        d_r: 4,
        d_g: 4,
        d_h: 8,
        d_e: 4,
        d_s: 4,
        fap_hidden: 4,
        cheb_order: 2,
        n_heads: 2,
        scales: vec![1, 2],
        epochs: 3,
        patience: 5,
        batch_size: 8,
        seed: 3,
        ..RunConfig::default()
    };
    let folds = loso_folds(&manifest, cfg.val_fraction, cfg.seed).unwrap();
    (data, folds, cfg)
}
