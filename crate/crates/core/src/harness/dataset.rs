//! In-memory feature dataset assembled from a manifest of feature tensors.

use crate::data::Manifest;
use crate::features::{band_masks, BandMaskSet, DEFAULT_BAND_EDGES_HZ};
use ndarray::ArrayD;

use super::HarnessError;

/// All trials of a cohort loaded into memory, with dense class labels.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    /// One (S, C, F) tensor per manifest row, in row order, scaled by the
    /// bin count so entries average 1 instead of 1/F.
    pub inputs: Vec<ArrayD<f64>>,
    /// Dense labels: position of the original label in `class_ids`.
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
    /// Original emotion labels, ascending; index = dense label.
    pub class_ids: Vec<usize>,
    pub masks: BandMaskSet,
    pub n_channels: usize,
    pub n_steps: usize,
}

impl FeatureSet {
    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Clone out the tensors at `rows`.
    pub fn gather(&self, rows: &[usize]) -> (Vec<ArrayD<f64>>, Vec<usize>, Vec<usize>) {
        let xs = rows.iter().map(|&r| self.inputs[r].clone()).collect();
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        let subjects = rows.iter().map(|&r| self.subjects[r]).collect();
        (xs, labels, subjects)
    }
}

/// Load every trial behind a feature manifest; all tensors must agree on
/// window count, channel count, and frequency grid.
pub fn load_feature_set(manifest: &Manifest) -> Result<FeatureSet, HarnessError> {
    let class_ids = manifest.classes();
    if class_ids.len() < 2 {
        return Err(HarnessError::Dataset(format!(
            "need at least 2 classes, manifest has {}",
            class_ids.len()
        )));
    }

    let mut inputs = Vec::with_capacity(manifest.rows.len());
    let mut labels = Vec::with_capacity(manifest.rows.len());
    let mut subjects = Vec::with_capacity(manifest.rows.len());
    let mut grid: Option<(usize, usize, Vec<f64>)> = None;
    for row in &manifest.rows {
        let trial = manifest.load_trial(row)?;
        let shape = trial.features.data.shape().to_vec();
        match &grid {
            None => grid = Some((shape[0], shape[1], trial.features.freq_bin_hz.clone())),
            Some((s, c, bins)) => {
                if shape[0] != *s || shape[1] != *c || trial.features.freq_bin_hz != *bins {
                    return Err(HarnessError::Dataset(format!(
                        "trial {} has shape {:?}, expected ({s}, {c}, {})",
                        row.trial_id,
                        shape,
                        bins.len()
                    )));
                }
            }
        }
        // files hold true relative densities (rows sum to 1, so entries are
        // ~1/F); scale by F so the network sees mean-one inputs
        let n_bins = trial.features.freq_bin_hz.len() as f64;
        inputs.push(trial.features.data.mapv(|v| v * n_bins).into_dyn());
        labels.push(
            class_ids
                .iter()
                .position(|&c| c == trial.emotion_label)
                .expect("label came from this manifest"),
        );
        subjects.push(trial.subject_id);
    }
    let (n_steps, n_channels, bins) = grid.expect("manifest is never empty");
    let masks = band_masks(&bins, DEFAULT_BAND_EDGES_HZ)?;
    Ok(FeatureSet { inputs, labels, subjects, class_ids, masks, n_channels, n_steps })
}
