//! Leave-one-subject-out fold construction with a stratified, seeded
//! train/validation split.

use crate::data::Manifest;
use crate::synth::rng_stream;
use rand::seq::SliceRandom;

use super::HarnessError;

/// One cross-validation fold, holding out every trial of one subject. Row
/// numbers index into the manifest that built the fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub held_out_subject: usize,
    pub train_subjects: Vec<usize>,
    pub val_fraction_permille: u32,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

const FOLD_STREAM: u32 = 11;

/// Build one fold per subject. The validation split is drawn only from
/// training subjects, stratified by class, and keyed by (seed, held-out
/// subject, train subject, class) so fold construction order is irrelevant.
pub fn loso_folds(
    manifest: &Manifest,
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<FoldSpec>, HarnessError> {
    let subjects = manifest.subjects();
    if subjects.len() < 3 {
        return Err(HarnessError::Fold(format!(
            "{} subjects; leave-one-subject-out needs at least 3",
            subjects.len()
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(HarnessError::Fold(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let classes = manifest.classes();

    let mut folds = Vec::with_capacity(subjects.len());
    for &held_out in &subjects {
        let test_rows: Vec<usize> = manifest
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.subject_id == held_out)
            .map(|(i, _)| i)
            .collect();
        let train_subjects: Vec<usize> =
            subjects.iter().copied().filter(|&s| s != held_out).collect();

        let mut train_rows = Vec::new();
        let mut val_rows = Vec::new();
        for &subject in &train_subjects {
            for &class in &classes {
                let mut rows: Vec<usize> = manifest
                    .rows
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.subject_id == subject && r.emotion_label == class)
                    .map(|(i, _)| i)
                    .collect();
                let mut rng = rng_stream(
                    seed,
                    &[FOLD_STREAM, held_out as u32, subject as u32, class as u32],
                );
                rows.shuffle(&mut rng);
                // at least one validation row per stratum, never all of them
                let n_val = ((rows.len() as f64 * val_fraction).round() as usize)
                    .clamp(1, rows.len().saturating_sub(1).max(1));
                val_rows.extend_from_slice(&rows[..n_val]);
                train_rows.extend_from_slice(&rows[n_val..]);
            }
        }
        train_rows.sort_unstable();
        val_rows.sort_unstable();

        // partition sanity: every row lands in exactly one of the three sets
        let mut all: Vec<usize> = Vec::with_capacity(manifest.rows.len());
        all.extend_from_slice(&test_rows);
        all.extend_from_slice(&train_rows);
        all.extend_from_slice(&val_rows);
        all.sort_unstable();
        let complete = all.len() == manifest.rows.len()
            && all.iter().enumerate().all(|(i, &r)| i == r);
        if !complete {
            return Err(HarnessError::Fold(format!(
                "fold for subject {held_out} does not partition the manifest"
            )));
        }

        folds.push(FoldSpec {
            held_out_subject: held_out,
            train_subjects,
            val_fraction_permille: (val_fraction * 1000.0).round() as u32,
            train_rows,
            val_rows,
            test_rows,
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestRow;
    use std::collections::BTreeSet;
    use std::path::PathBuf;

    fn manifest(n_subjects: usize, n_classes: usize, trials: usize) -> Manifest {
        let mut rows = Vec::new();
        for s in 0..n_subjects {
            for c in 0..n_classes {
                for t in 0..trials {
                    rows.push(ManifestRow {
                        path: format!("s{s}_c{c}_t{t}.eegt"),
                        emotion_label: c,
                        subject_id: s,
                        trial_id: format!("s{s}_c{c}_t{t}"),
                    });
                }
            }
        }
        Manifest::new(PathBuf::from("/nonexistent"), rows)
    }

    #[test]
    fn one_fold_per_subject_each_training_on_the_rest() {
        let m = manifest(15, 2, 4);
        let folds = loso_folds(&m, 0.2, 1).unwrap();
        assert_eq!(folds.len(), 15);
        for f in &folds {
            assert_eq!(f.train_subjects.len(), 14);
            assert!(!f.train_subjects.contains(&f.held_out_subject));
        }
    }

    #[test]
    fn test_sets_partition_the_manifest() {
        let m = manifest(5, 3, 5);
        let folds = loso_folds(&m, 0.2, 9).unwrap();
        let mut seen = BTreeSet::new();
        for f in &folds {
            for &r in &f.test_rows {
                assert!(seen.insert(r), "row {r} tested in two folds");
                assert_eq!(m.rows[r].subject_id, f.held_out_subject);
            }
        }
        assert_eq!(seen.len(), m.rows.len());
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let m = manifest(4, 2, 10);
        let folds = loso_folds(&m, 0.2, 7).unwrap();
        let f = &folds[0];
        // per train subject and class: 10 trials -> 2 val, 8 train
        for &s in &f.train_subjects {
            for c in 0..2 {
                let n_val = f
                    .val_rows
                    .iter()
                    .filter(|&&r| m.rows[r].subject_id == s && m.rows[r].emotion_label == c)
                    .count();
                assert_eq!(n_val, 2);
            }
        }
        let again = loso_folds(&m, 0.2, 7).unwrap();
        assert_eq!(folds, again, "same seed must reproduce the same folds");
        let other = loso_folds(&m, 0.2, 8).unwrap();
        assert_ne!(folds, other, "different seed should move the split");
    }

    #[test]
    fn too_few_subjects_is_an_error() {
        let m = manifest(2, 2, 3);
        assert!(matches!(loso_folds(&m, 0.2, 1), Err(HarnessError::Fold(_))));
    }
}
