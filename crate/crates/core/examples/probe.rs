use freqdgt::autodiff::Graph;
use freqdgt::config::RunConfig;
use freqdgt::features::{extract_cohort, FeatureOptions};
use freqdgt::harness::dataset::{load_feature_set, FeatureSet};
use freqdgt::harness::folds::{loso_folds, FoldSpec};
use freqdgt::harness::train::{train_fold, TrainedFold};
use freqdgt::model::{forward_batch, FreqDgt};
use freqdgt::nn::{
    cross_entropy_batch, AdamW, Binder, FreezePolicy, Init, Linear, ParamGroup, ParamStore,
};
use freqdgt::synth::{generate_cohort, rng_stream, SynthConfig};
use ndarray::{Array2, ArrayD, Axis};
use std::time::Instant;

/// Center and scale columns to unit variance using train statistics.
fn standardize(train: &Array2<f64>, eval: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mean = train.mean_axis(Axis(0)).unwrap();
    let var = train.map_axis(Axis(0), |col| {
        let m = col.mean().unwrap();
        col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64
    });
    let std = var.mapv(|v| (v + 1e-12).sqrt());
    let norm = |x: &Array2<f64>| {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) / std[j];
            }
        }
        out
    };
    (norm(train), norm(eval))
}

/// Train a fresh softmax regression on fixed representations; returns
/// (train_acc, probe_acc on eval set). Measures linear decodability.
fn linear_probe(
    train: &Array2<f64>,
    train_y: &[usize],
    eval: &Array2<f64>,
    eval_y: &[usize],
    n_classes: usize,
) -> (f64, f64) {
    let (train, eval) = standardize(train, eval);
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_stream(99, &[77]);
    let lin = Linear::new(&mut store, &mut rng, "probe", ParamGroup::Main, train.ncols(), n_classes, true, Init::FanIn);
    let mut opt = AdamW::new(3e-2, 0.0, store.len());
    for _ in 0..800 {
        let mut g = Graph::<f64>::new();
        let b = Binder::new(&store, FreezePolicy::None);
        let x = g.constant(train.clone().into_dyn());
        let logits = lin.forward(&mut g, &b, x);
        let loss = cross_entropy_batch(&mut g, logits, train_y);
        let grads = g.backward(loss);
        opt.step(&mut store, &grads, |_| true);
    }
    let acc = |xs: &Array2<f64>, ys: &[usize]| {
        let mut g = Graph::<f64>::new();
        let b = Binder::new(&store, FreezePolicy::All);
        let x = g.constant(xs.clone().into_dyn());
        let logits = lin.forward(&mut g, &b, x);
        let preds = freqdgt::model::argmax_rows(&g.value(logits).to_owned());
        preds.iter().zip(ys).filter(|(a, b)| a == b).count() as f64 / ys.len() as f64
    };
    (acc(&train, train_y), acc(&eval, eval_y))
}

/// Representations of given rows under a model.
fn reps(
    store: &ParamStore<f64>,
    model: &FreqDgt,
    cfg: &RunConfig,
    xs: &[ArrayD<f64>],
) -> (Array2<f64>, Array2<f64>) {
    let mut g = Graph::<f64>::new();
    let b = Binder::new(store, FreezePolicy::All);
    let out = forward_batch(&mut g, &b, model, cfg, xs).unwrap();
    let z = freqdgt::disentangle::emotion_encode(&mut g, &b, &model.head, out.h_agg);
    let to2 = |v: freqdgt::autodiff::Var, g: &Graph<f64>| {
        let val = g.value(v).to_owned();
        let shape = (val.shape()[0], val.shape()[1]);
        Array2::from_shape_vec(shape, val.iter().copied().collect()).unwrap()
    };
    (to2(out.h_agg, &g), to2(z, &g))
}

/// Flatten (S, C, F) inputs to time-mean (C*F) rows.
fn flat_inputs(xs: &[ArrayD<f64>]) -> Array2<f64> {
    let s = xs[0].shape()[0];
    let d = xs[0].len() / s;
    let mut out = Array2::zeros((xs.len(), d));
    for (i, x) in xs.iter().enumerate() {
        for (step, chunk) in x.as_slice().unwrap().chunks(d).enumerate() {
            let _ = step;
            for (j, &v) in chunk.iter().enumerate() {
                out[[i, j]] += v / s as f64;
            }
        }
    }
    out
}

fn dense_subjects(model: &FreqDgt, subjects: &[usize]) -> Vec<usize> {
    subjects.iter().map(|&s| model.head.bank.index_of(s as u32).unwrap()).collect()
}

fn probe_report(
    tag: &str,
    store: &ParamStore<f64>,
    model: &FreqDgt,
    cfg: &RunConfig,
    data: &FeatureSet,
    fold: &FoldSpec,
) {
    let (train_xs, _, train_subj) = data.gather(&fold.train_rows);
    let (val_xs, _, val_subj) = data.gather(&fold.val_rows);
    let (h_tr, z_tr) = reps(store, model, cfg, &train_xs);
    let (h_va, z_va) = reps(store, model, cfg, &val_xs);
    let y_tr = dense_subjects(model, &train_subj);
    let y_va = dense_subjects(model, &val_subj);
    let n = fold.train_subjects.len();
    let (h_fit, h_acc) = linear_probe(&h_tr, &y_tr, &h_va, &y_va, n);
    let (z_fit, z_acc) = linear_probe(&z_tr, &y_tr, &z_va, &y_va, n);
    eprintln!(
        "[{tag}] subject probes: h_agg fit {h_fit:.3} val {h_acc:.3} | z_emo fit {z_fit:.3} val {z_acc:.3}"
    );
}

/// Train a fresh discriminator-shaped MLP on frozen raw features and print
/// the learning trajectory; isolates optimizer speed from the moving trunk.
fn disc_isolation(
    z_tr: &Array2<f64>,
    y_tr: &[usize],
    z_va: &Array2<f64>,
    y_va: &[usize],
    n_subjects: usize,
) {
    use freqdgt::nn::{Activation, Mlp};
    let row_norm = |x: &Array2<f64>| {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let m = row.mean().unwrap();
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / row.len() as f64;
            let s = (var + 1e-6).sqrt();
            row.mapv_inplace(|v| (v - m) / s);
        }
        out
    };
    for (norm, lr) in [("col", 5e-3), ("col", 1e-2), ("col", 2e-2), ("col", 4e-2)] {
        let (z_tr, z_va) = match norm {
            "col" => standardize(z_tr, z_va),
            "row" => (row_norm(z_tr), row_norm(z_va)),
            _ => (z_tr.clone(), z_va.clone()),
        };
        let (z_tr, z_va) = (&z_tr, &z_va);
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_stream(5, &[55]);
        let d_e = z_tr.ncols();
        let disc = Mlp::new(
            &mut store,
            &mut rng,
            "iso.disc",
            ParamGroup::Main,
            &[d_e, d_e, n_subjects],
            Activation::Gelu,
            true,
            Init::FanIn,
        );
        let mut opt = AdamW::new(lr, 0.0, store.len());
        let acc = |store: &ParamStore<f64>, xs: &Array2<f64>, ys: &[usize]| {
            let mut g = Graph::<f64>::new();
            let b = Binder::new(store, FreezePolicy::All);
            let x = g.constant(xs.clone().into_dyn());
            let logits = disc.forward(&mut g, &b, x);
            let preds = freqdgt::model::argmax_rows(&g.value(logits).to_owned());
            preds.iter().zip(ys).filter(|(a, b)| a == b).count() as f64 / ys.len() as f64
        };
        let mut marks = Vec::new();
        for step in 1..=1200usize {
            let mut g = Graph::<f64>::new();
            let b = Binder::new(&store, FreezePolicy::None);
            let x = g.constant(z_tr.clone().into_dyn());
            let logits = disc.forward(&mut g, &b, x);
            let loss = cross_entropy_batch(&mut g, logits, y_tr);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads, |_| true);
            if [25, 50, 100, 160, 240, 400, 800, 1200].contains(&step) {
                marks.push(format!("{step}:{:.2}", acc(&store, z_tr, y_tr)));
            }
        }
        eprintln!(
            "  disc-iso norm={norm} lr {lr:.0e}: train acc {} | val {:.3}",
            marks.join(" "),
            acc(&store, z_va, y_va)
        );
    }
}

fn main() {
    let t0 = Instant::now();
    let synth = SynthConfig {
        emotion_band_gain: vec![[1.0, 0.8, 1.25, 1.0, 1.0], [1.0, 1.25, 0.8, 1.0, 1.0]],
        ..SynthConfig::default()
    };
    let raw_dir = tempfile::tempdir().unwrap();
    let raw = generate_cohort(&synth, raw_dir.path(), false).unwrap();
    let feat_dir = tempfile::tempdir().unwrap();
    let (manifest, _) =
        extract_cohort(&raw, feat_dir.path(), &FeatureOptions::default(), false).unwrap();
    let data = load_feature_set(&manifest).unwrap();
    eprintln!("data ready: {:.2?}", t0.elapsed());

    let base = RunConfig {
        lr: 5e-4,
        weight_decay: 1e-4,
        batch_size: 128,
        epochs: 300,
        patience: 1000,
        ..RunConfig::default()
    };
    let folds = loso_folds(&manifest, base.val_fraction, base.seed).unwrap();

    for (tag, lambda_adv, disc_lr_mult) in
        [("lambda_adv=0 mult20", 0.0, 20.0), ("adversarial mult20", 0.1, 20.0)]
    {
        let cfg = RunConfig { lambda_adv, disc_lr_mult, ..base.clone() };
        let t3 = Instant::now();
        let trained: TrainedFold = train_fold(&data, &folds[0], &cfg, |_| {}).unwrap();
        let dt = t3.elapsed();
        eprintln!("\n[{tag}] {} epochs: {:.2?} ({:.2?}/epoch)", cfg.epochs, dt, dt / cfg.epochs as u32);
        for e in trained.history.epochs.iter().step_by(30) {
            eprintln!(
                "epoch {}: train total {:.4} cls {:.4} adv {:.4} disc {:.4} | val acc {:.3}",
                e.epoch, e.train.total, e.train.l_cls, e.train.l_adv, e.train.l_disc, e.val_accuracy
            );
        }
        let (fold_val_xs, _, fold_val_subjects) = data.gather(&folds[0].val_rows);
        let preds =
            freqdgt::model::predict_subject(&trained.store, &trained.model, &cfg, &fold_val_xs)
                .unwrap();
        let hits = preds
            .iter()
            .zip(&fold_val_subjects)
            .filter(|&(&p, &s)| p == trained.model.head.bank.index_of(s as u32).unwrap())
            .count();
        let (test_xs, test_labels, _) = data.gather(&folds[0].test_rows);
        let test_preds =
            freqdgt::model::predict(&trained.store, &trained.model, &cfg, &test_xs).unwrap();
        let test_hits = test_preds.iter().zip(&test_labels).filter(|(a, b)| a == b).count();
        eprintln!(
            "disc val acc {:.3} (chance {:.3}) | test acc {:.3} | best epoch {}",
            hits as f64 / preds.len() as f64,
            1.0 / folds[0].train_subjects.len() as f64,
            test_hits as f64 / test_preds.len() as f64,
            trained.history.best_epoch,
        );
        probe_report(tag, &trained.store, &trained.model, &cfg, &data, &folds[0]);

    }
}
