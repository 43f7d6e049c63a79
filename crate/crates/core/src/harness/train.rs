//! Single-fold training: alternating adversarial AdamW steps, seeded
//! batching, early stopping on validation accuracy, best-epoch checkpointing.

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::disentangle::{LossBreakdown, LossMode};
use crate::model::{batch_loss, predict, FreqDgt};
use crate::nn::{AdamW, Binder, FreezePolicy, ParamGroup, ParamStore};
use crate::synth::rng_stream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::FeatureSet;
use super::folds::FoldSpec;
use super::metrics::plain_accuracy;
use super::HarnessError;

const TRAIN_STREAM: u32 = 21;
const BATCH_STREAM: u32 = 22;

/// Which half of the alternating schedule a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPhase {
    Discriminator,
    Main,
}

/// One optimizer step's loss record, for the line-oriented step log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub phase: StepPhase,
    pub breakdown: LossBreakdown,
}

/// Per-epoch aggregate written into the history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean main-step breakdown over the epoch's batches.
    pub train: LossBreakdown,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

/// A trained fold: parameters restored to the best validation epoch.
pub struct TrainedFold {
    pub store: ParamStore<f64>,
    pub model: FreqDgt,
    pub history: TrainHistory,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    assert!(!items.is_empty());
    let n = items.len() as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_cls: sum(|b| b.l_cls),
        l_adv: sum(|b| b.l_adv),
        l_disc: sum(|b| b.l_disc),
        total: sum(|b| b.total),
        lambda_adv: items[0].lambda_adv,
        lambda_disc: items[0].lambda_disc,
    }
}

/// Train one fold. `on_step` observes every optimizer step in order.
pub fn train_fold(
    data: &FeatureSet,
    fold: &FoldSpec,
    cfg: &RunConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainedFold, HarnessError> {
    if fold.train_rows.is_empty() || fold.val_rows.is_empty() {
        return Err(HarnessError::Dataset("fold has an empty train or validation split".into()));
    }
    let subjects: Vec<u32> = fold.train_subjects.iter().map(|&s| s as u32).collect();

    let mut init_rng = rng_stream(cfg.seed, &[TRAIN_STREAM, fold.held_out_subject as u32]);
    let mut store = ParamStore::<f64>::new();
    let model = FreqDgt::new(
        &mut store,
        &mut init_rng,
        cfg,
        data.masks.clone(),
        data.n_channels,
        &subjects,
    );
    let n_params = store.ids().count();
    let mut opt_main = AdamW::new(cfg.lr, cfg.weight_decay, n_params);
    // two-time-scale updates: the adversary reads a representation that the
    // main step keeps moving, so it gets a faster clock of its own
    let mut opt_disc = AdamW::new(cfg.lr * cfg.disc_lr_mult, cfg.weight_decay, n_params);

    let (val_xs, val_labels, _) = data.gather(&fold.val_rows);
    let adversarial = cfg.lambda_disc > 0.0 || cfg.lambda_adv > 0.0;

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best_snapshot = store.snapshot();
    let mut step_counter = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = fold.train_rows.clone();
        let mut batch_rng =
            rng_stream(cfg.seed, &[BATCH_STREAM, fold.held_out_subject as u32, epoch as u32]);
        order.shuffle(&mut batch_rng);

        let batch = cfg.batch_size.clamp(1, order.len());
        let mut main_breakdowns = Vec::new();
        for chunk in order.chunks(batch) {
            let (xs, labels, subj) = data.gather(chunk);
            let subj_u32: Vec<u32> = subj.iter().map(|&s| s as u32).collect();
            let subj_arg = adversarial.then_some(subj_u32.as_slice());

            // discriminator half-step: main weights frozen, inputs detached
            if cfg.lambda_disc > 0.0 {
                let mut g = Graph::new();
                let binder = Binder::new(&store, FreezePolicy::Group(ParamGroup::Main));
                let (lv, _) = batch_loss(
                    &mut g,
                    &binder,
                    &model,
                    cfg,
                    &xs,
                    &labels,
                    subj_arg,
                    LossMode::DiscStep,
                )?;
                let breakdown = lv.breakdown(&g, cfg);
                if !breakdown.total.is_finite() {
                    return Err(HarnessError::Divergence {
                        held_out_subject: fold.held_out_subject,
                        epoch,
                        detail: format!("discriminator loss {}", breakdown.l_disc),
                    });
                }
                let grads = g.backward(lv.objective);
                opt_disc.step(&mut store, &grads, |g| g == ParamGroup::Discriminator);
                on_step(&StepLog {
                    epoch,
                    step: step_counter,
                    phase: StepPhase::Discriminator,
                    breakdown,
                });
                step_counter += 1;
            }

            // main half-step: discriminator frozen, confusion term live
            let mut g = Graph::new();
            let binder = Binder::new(&store, FreezePolicy::Group(ParamGroup::Discriminator));
            let (lv, _) = batch_loss(
                &mut g,
                &binder,
                &model,
                cfg,
                &xs,
                &labels,
                subj_arg,
                LossMode::MainStep,
            )?;
            let breakdown = lv.breakdown(&g, cfg);
            if !breakdown.total.is_finite() {
                return Err(HarnessError::Divergence {
                    held_out_subject: fold.held_out_subject,
                    epoch,
                    detail: format!("main loss {}", breakdown.total),
                });
            }
            let grads = g.backward(lv.objective);
            opt_main.step(&mut store, &grads, |g| g == ParamGroup::Main);
            on_step(&StepLog { epoch, step: step_counter, phase: StepPhase::Main, breakdown });
            step_counter += 1;
            main_breakdowns.push(breakdown);
        }

        let preds = predict(&store, &model, cfg, &val_xs)?;
        let val_accuracy = plain_accuracy(&preds, &val_labels);
        history.epochs.push(EpochRecord {
            epoch,
            train: mean_breakdown(&main_breakdowns),
            val_accuracy,
        });

        // ties go to the later epoch: among equally accurate snapshots,
        // keep the one whose auxiliary heads have trained longest
        if val_accuracy >= history.best_val_accuracy {
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = epoch;
            best_snapshot = store.snapshot();
        } else if epoch - history.best_epoch >= cfg.patience {
            history.stopped_early = true;
            break;
        }
    }

    store.restore(&best_snapshot);
    Ok(TrainedFold { store, model, history })
}
