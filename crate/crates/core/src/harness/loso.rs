//! Leave-one-subject-out cross-validation: per-fold training and testing,
//! aggregated summary, and a deterministic results writer.

use crate::config::RunConfig;
use crate::data::Manifest;
use crate::model::{predict, predict_subject, FreqDgt, ModelError};
use crate::nn::ParamStore;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use super::dataset::{load_feature_set, FeatureSet};
use super::folds::{loso_folds, FoldSpec};
use super::metrics::{confusion_matrix, mean_std, metrics_from_confusion, Metrics};
use super::train::{train_fold, StepLog, TrainedFold};
use super::HarnessError;

pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_TABLE: &str = "results.txt";
pub const RESULTS_CHECKSUM: &str = "results.sha256";

/// One held-out subject's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub held_out_subject: usize,
    /// Emotion classification on the held-out subject's trials.
    pub metrics: Metrics,
    /// Discriminator's subject-identification accuracy on the validation
    /// split (trials of training subjects the optimizer never saw).
    pub disc_val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Aggregate of a full cross-validation run. Contains no timestamps or
/// host-dependent fields, so identical runs serialize byte-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LosoSummary {
    pub version: u32,
    pub config: RunConfig,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_disc_val_accuracy: f64,
    /// 1 / number of training subjects: chance level for the discriminator.
    pub disc_chance_level: f64,
}

/// Classify `inputs` with a trained model and score against `labels`.
pub fn evaluate(
    store: &ParamStore<f64>,
    model: &FreqDgt,
    cfg: &RunConfig,
    inputs: &[ArrayD<f64>],
    labels: &[usize],
    n_classes: usize,
) -> Result<Metrics, HarnessError> {
    if inputs.is_empty() {
        return Err(HarnessError::Dataset("evaluation split is empty".into()));
    }
    let preds = predict(store, model, cfg, inputs)?;
    Ok(metrics_from_confusion(confusion_matrix(&preds, labels, n_classes)))
}

fn discriminator_accuracy(
    trained: &TrainedFold,
    cfg: &RunConfig,
    xs: &[ArrayD<f64>],
    subjects: &[usize],
) -> Result<f64, HarnessError> {
    let preds = predict_subject(&trained.store, &trained.model, cfg, xs)?;
    let mut hits = 0usize;
    for (&p, &s) in preds.iter().zip(subjects) {
        let target =
            trained.model.head.bank.index_of(s as u32).map_err(ModelError::Head)?;
        hits += usize::from(p == target);
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Run every fold on an already-loaded dataset. `on_step` observes each
/// optimizer step with the fold's held-out subject id.
pub fn run_loso_with(
    data: &FeatureSet,
    folds: &[FoldSpec],
    cfg: &RunConfig,
    mut on_step: impl FnMut(usize, &StepLog),
) -> Result<LosoSummary, HarnessError> {
    if folds.is_empty() {
        return Err(HarnessError::Fold("no folds to run".into()));
    }
    let n_classes = data.n_classes();
    let mut results = Vec::with_capacity(folds.len());
    for fold in folds {
        let trained =
            train_fold(data, fold, cfg, |s| on_step(fold.held_out_subject, s))?;
        let (test_xs, test_labels, _) = data.gather(&fold.test_rows);
        let metrics =
            evaluate(&trained.store, &trained.model, cfg, &test_xs, &test_labels, n_classes)?;
        let (val_xs, _, val_subjects) = data.gather(&fold.val_rows);
        let disc_val_accuracy = discriminator_accuracy(&trained, cfg, &val_xs, &val_subjects)?;
        results.push(FoldResult {
            held_out_subject: fold.held_out_subject,
            metrics,
            disc_val_accuracy,
            best_epoch: trained.history.best_epoch,
            epochs_run: trained.history.epochs.len(),
        });
    }
    let collect = |f: fn(&FoldResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
    let (mean_accuracy, std_accuracy) = mean_std(&collect(|r| r.metrics.accuracy));
    let (mean_f1, std_f1) = mean_std(&collect(|r| r.metrics.f1));
    let (mean_disc_val_accuracy, _) = mean_std(&collect(|r| r.disc_val_accuracy));
    let disc_chance_level = 1.0 / folds[0].train_subjects.len() as f64;
    Ok(LosoSummary {
        version: 1,
        config: cfg.clone(),
        folds: results,
        mean_accuracy,
        std_accuracy,
        mean_f1,
        std_f1,
        mean_disc_val_accuracy,
        disc_chance_level,
    })
}

/// Load the dataset behind `manifest`, build the folds, run them all.
pub fn run_loso(
    manifest: &Manifest,
    cfg: &RunConfig,
    on_step: impl FnMut(usize, &StepLog),
) -> Result<LosoSummary, HarnessError> {
    let data = load_feature_set(manifest)?;
    let folds = loso_folds(manifest, cfg.val_fraction, cfg.seed)?;
    run_loso_with(&data, &folds, cfg, on_step)
}

fn render_table(s: &LosoSummary) -> String {
    let mut out = String::new();
    out.push_str("held_out  accuracy  macro_f1  disc_acc  best_epoch  epochs\n");
    for f in &s.folds {
        out.push_str(&format!(
            "{:>8}  {:>8.4}  {:>8.4}  {:>8.4}  {:>10}  {:>6}\n",
            f.held_out_subject,
            f.metrics.accuracy,
            f.metrics.f1,
            f.disc_val_accuracy,
            f.best_epoch,
            f.epochs_run,
        ));
    }
    out.push_str(&format!(
        "\nmean accuracy {:.4} (std {:.4})\nmean macro-f1 {:.4} (std {:.4})\n\
         mean discriminator accuracy {:.4} (chance {:.4})\n",
        s.mean_accuracy,
        s.std_accuracy,
        s.mean_f1,
        s.std_f1,
        s.mean_disc_val_accuracy,
        s.disc_chance_level,
    ));
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `results.json`, a human-readable table, and a sha256 checksum of
/// the JSON file into `dir`. Returns the JSON path.
pub fn write_results(dir: &Path, summary: &LosoSummary) -> Result<PathBuf, HarnessError> {
    let io_err = |path: PathBuf| move |source| HarnessError::Io { path, source };
    std::fs::create_dir_all(dir).map_err(io_err(dir.to_path_buf()))?;

    let json = serde_json::to_string_pretty(summary).expect("summary serializes") + "\n";
    let json_path = dir.join(RESULTS_JSON);
    std::fs::write(&json_path, &json).map_err(io_err(json_path.clone()))?;

    let sum_path = dir.join(RESULTS_CHECKSUM);
    std::fs::write(&sum_path, format!("{}  {RESULTS_JSON}\n", sha256_hex(json.as_bytes())))
        .map_err(io_err(sum_path))?;

    let table_path = dir.join(RESULTS_TABLE);
    std::fs::write(&table_path, render_table(summary)).map_err(io_err(table_path))?;
    Ok(json_path)
}
