//! Adversarial subject/emotion disentanglement head.
//!
//! The aggregated trunk feature is split into two views: a subject-specific
//! embedding through a per-subject transformation bank, and a
//! subject-agnostic emotion embedding through a shared encoder. A subject
//! discriminator on the emotion embedding is trained to identify the
//! subject, while the encoder is trained to drive that discriminator toward
//! the uniform distribution (confusion loss). Inference uses only the
//! emotion path, so unseen subjects need no bank entry.

use crate::autodiff::{Graph, ParamId, Real, Var};
use crate::config::RunConfig;
use crate::nn::{
    cross_entropy_batch, cross_entropy_uniform, Activation, Binder, Init, Linear, Mlp, ParamGroup,
    ParamStore,
};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DisentangleError {
    #[error("subject {subject_id} has no entry in the subject bank")]
    UnknownSubject { subject_id: u32 },
    #[error("subject labels are required when lambda_adv or lambda_disc is nonzero")]
    MissingSubjectLabels,
}

/// One transformation matrix per training subject, stored (d_h, d_s) so a
/// row-vector feature maps by right-multiplication. Lookups are counted so
/// tests can assert the inference path never consults the bank.
#[derive(Debug, Clone)]
pub struct SubjectBank {
    mats: BTreeMap<u32, ParamId>,
    accesses: std::sync::Arc<std::sync::atomic::AtomicU64>,
    pub d_h: usize,
    pub d_s: usize,
}

impl SubjectBank {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        subjects: &[u32],
        d_h: usize,
        d_s: usize,
    ) -> Self {
        let mut mats = BTreeMap::new();
        for &s in subjects {
            let value = Init::FanIn.sample(rng, d_h, d_s, d_h).into_dyn();
            mats.insert(s, store.add(format!("bank.s{s}"), ParamGroup::Discriminator, value));
        }
        Self { mats, accesses: Default::default(), d_h, d_s }
    }

    pub fn matrix(&self, subject_id: u32) -> Result<ParamId, DisentangleError> {
        self.accesses.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.mats.get(&subject_id).copied().ok_or(DisentangleError::UnknownSubject { subject_id })
    }

    /// How many times a subject matrix has been looked up.
    pub fn access_count(&self) -> u64 {
        self.accesses.load(std::sync::atomic::Ordering::Relaxed)
    }

    /// Dense index of a subject in sorted-id order; the discriminator and
    /// probe emit logits in this order.
    pub fn index_of(&self, subject_id: u32) -> Result<usize, DisentangleError> {
        self.mats
            .keys()
            .position(|&s| s == subject_id)
            .ok_or(DisentangleError::UnknownSubject { subject_id })
    }

    pub fn n_subjects(&self) -> usize {
        self.mats.len()
    }

    pub fn subjects(&self) -> impl Iterator<Item = u32> + '_ {
        self.mats.keys().copied()
    }
}

/// All learned tensors of the disentanglement head.
#[derive(Debug, Clone)]
pub struct DisentangleParams {
    pub bank: SubjectBank,
    /// d_h -> d_e, two layers with GELU between.
    pub emotion_encoder: Mlp,
    /// d_e -> n_classes.
    pub classifier: Linear,
    /// d_e -> n_subjects, two layers with GELU between.
    pub discriminator: Mlp,
    /// d_s -> n_subjects.
    pub probe: Linear,
}

impl DisentangleParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &RunConfig,
        subjects: &[u32],
    ) -> Self {
        assert!(!subjects.is_empty(), "need at least one training subject");
        let bank = SubjectBank::new(store, rng, subjects, cfg.d_h, cfg.d_s);
        let n_subjects = bank.n_subjects();
        let emotion_encoder = Mlp::new(
            store,
            rng,
            "emo.encoder",
            ParamGroup::Main,
            &[cfg.d_h, cfg.d_e, cfg.d_e],
            Activation::Gelu,
            true,
            Init::FanIn,
        );
        let classifier = Linear::new(
            store,
            rng,
            "emo.classifier",
            ParamGroup::Main,
            cfg.d_e,
            cfg.n_classes,
            true,
            Init::FanIn,
        );
        let discriminator = Mlp::new(
            store,
            rng,
            "adv.discriminator",
            ParamGroup::Discriminator,
            &[cfg.d_e, cfg.d_e, n_subjects],
            Activation::Gelu,
            true,
            Init::FanIn,
        );
        let probe = Linear::new(
            store,
            rng,
            "adv.probe",
            ParamGroup::Discriminator,
            cfg.d_s,
            n_subjects,
            true,
            Init::FanIn,
        );
        Self { bank, emotion_encoder, classifier, discriminator, probe }
    }
}

/// Temporal aggregation: (S, d_h) -> (1, d_h) mean over time.
pub fn aggregate<T: Real>(g: &mut Graph<T>, h_mstt: Var) -> Var {
    g.mean_axis(h_mstt, 0, true)
}

/// Subject-specific embedding z_sub = h_agg M_s for one sample.
pub fn subject_encode<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    bank: &SubjectBank,
    h_agg: Var,
    subject_id: u32,
) -> Result<Var, DisentangleError> {
    let pid = bank.matrix(subject_id)?;
    let m = b.bind(g, pid);
    Ok(g.matmul(h_agg, m))
}

/// Subject-agnostic emotion embedding; accepts a (B, d_h) batch.
pub fn emotion_encode<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    params: &DisentangleParams,
    h_agg: Var,
) -> Var {
    params.emotion_encoder.forward(g, b, h_agg)
}

/// Center and scale each feature column to zero mean, unit variance over the
/// batch. Statistics are part of the graph, so gradients flow through them.
/// A single-row batch standardizes to all zeros.
pub fn standardize_features<T: Real>(g: &mut Graph<T>, z: Var) -> Var {
    let m = g.mean_axis(z, 0, true);
    let centered = g.sub(z, m);
    let sq = g.square(centered);
    let var = g.mean_axis(sq, 0, true);
    let eps = g.scalar_const(T::from_f(1e-6));
    let safe = g.add(var, eps);
    let std = g.sqrt(safe);
    g.div(centered, std)
}

/// Subject logits from the adversary. Features are batch-standardized before
/// the MLP: the emotion embedding develops a large shared offset and a scale
/// that grows with the classification margin, and an adversary reading the
/// raw activations stalls inside its optimizer long before it can decode
/// anything, which would make the minimax game vacuous in both directions.
/// Per-feature statistics remove the shared offset; per-row normalization
/// would not, since every row carries nearly the same pattern.
pub fn discriminate<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    params: &DisentangleParams,
    z_emo: Var,
) -> Var {
    let zn = standardize_features(g, z_emo);
    params.discriminator.forward(g, b, zn)
}

/// Which objective a loss graph is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Discriminator update: objective = l_disc on detached features.
    DiscStep,
    /// Encoder/classifier update: objective = l_cls + lambda_adv * l_adv.
    MainStep,
    /// All three terms, nothing detached; for finite-difference checks only,
    /// where detached subgraphs would make analytic and numeric derivatives
    /// legitimately disagree.
    FullTotalLive,
}

/// Loss graph handles. Terms that a configuration switches off are absent.
pub struct LossVars {
    /// The term the optimizer should minimize in this mode.
    pub objective: Var,
    pub l_cls: Var,
    pub l_adv: Option<Var>,
    pub l_disc: Option<Var>,
}

/// Scalar record of one loss evaluation.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_adv: f64,
    pub l_disc: f64,
    pub total: f64,
    pub lambda_adv: f64,
    pub lambda_disc: f64,
}

impl LossVars {
    /// Evaluate the scalar breakdown; `total` is always the full weighted sum
    /// regardless of which objective this graph optimizes.
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, cfg: &RunConfig) -> LossBreakdown {
        let l_cls = g.scalar(self.l_cls).to_f();
        let l_adv = self.l_adv.map_or(0.0, |v| g.scalar(v).to_f());
        let l_disc = self.l_disc.map_or(0.0, |v| g.scalar(v).to_f());
        LossBreakdown {
            l_cls,
            l_adv,
            l_disc,
            total: l_cls + cfg.lambda_adv * l_adv + cfg.lambda_disc * l_disc,
            lambda_adv: cfg.lambda_adv,
            lambda_disc: cfg.lambda_disc,
        }
    }
}

/// Build the three-term objective over a (B, d_h) batch of aggregated
/// features. `subjects` carries raw subject ids, resolved through the bank;
/// it may be omitted only when both lambdas are zero.
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    params: &DisentangleParams,
    cfg: &RunConfig,
    h_agg: Var,
    labels: &[usize],
    subjects: Option<&[u32]>,
    mode: LossMode,
) -> Result<LossVars, DisentangleError> {
    let batch = g.shape(h_agg)[0];
    assert_eq!(labels.len(), batch, "one emotion label per row");
    let adversarial = cfg.lambda_adv > 0.0 || cfg.lambda_disc > 0.0;
    if adversarial && subjects.is_none() {
        return Err(DisentangleError::MissingSubjectLabels);
    }

    let z_emo = emotion_encode(g, b, params, h_agg);
    let cls_logits = params.classifier.forward(g, b, z_emo);
    let l_cls = cross_entropy_batch(g, cls_logits, labels);

    let mut l_adv = None;
    let mut l_disc = None;
    if adversarial {
        let subjects = subjects.unwrap();
        assert_eq!(subjects.len(), batch, "one subject id per row");
        let subj_idx: Vec<usize> =
            subjects.iter().map(|&s| params.bank.index_of(s)).collect::<Result<_, _>>()?;

        if cfg.lambda_adv > 0.0 || mode == LossMode::FullTotalLive {
            // confusion loss: gradient flows through the (frozen) discriminator
            // back into the encoder, pushing its output toward uniformity
            let adv_logits = discriminate(g, b, params, z_emo);
            l_adv = Some(cross_entropy_uniform(g, adv_logits));
        }
        if cfg.lambda_disc > 0.0 || mode == LossMode::FullTotalLive {
            let (z_emo_d, h_agg_d) = match mode {
                LossMode::FullTotalLive => (z_emo, h_agg),
                _ => (g.detach(z_emo), g.detach(h_agg)),
            };
            let disc_logits = discriminate(g, b, params, z_emo_d);
            let mut disc = cross_entropy_batch(g, disc_logits, &subj_idx);
            if cfg.subject_probe {
                let mut rows = Vec::with_capacity(batch);
                for (i, &s) in subjects.iter().enumerate() {
                    let row = g.narrow(h_agg_d, 0, i, 1);
                    rows.push(subject_encode(g, b, &params.bank, row, s)?);
                }
                let z_sub = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0) };
                let probe_logits = params.probe.forward(g, b, z_sub);
                let probe_ce = cross_entropy_batch(g, probe_logits, &subj_idx);
                disc = g.add(disc, probe_ce);
            }
            l_disc = Some(disc);
        }
    }

    let objective = match mode {
        LossMode::DiscStep => {
            l_disc.expect("discriminator step requires lambda_disc > 0")
        }
        LossMode::MainStep => match l_adv {
            Some(adv) => {
                let scaled = g.scale(adv, T::from_f(cfg.lambda_adv));
                g.add(l_cls, scaled)
            }
            None => l_cls,
        },
        LossMode::FullTotalLive => {
            let mut total = l_cls;
            if let Some(adv) = l_adv {
                let scaled = g.scale(adv, T::from_f(cfg.lambda_adv));
                total = g.add(total, scaled);
            }
            if let Some(disc) = l_disc {
                let scaled = g.scale(disc, T::from_f(cfg.lambda_disc));
                total = g.add(total, scaled);
            }
            total
        }
    };
    Ok(LossVars { objective, l_cls, l_adv, l_disc })
}

/// Emotion-path class logits for evaluation; never consults the bank.
pub fn infer_logits<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    params: &DisentangleParams,
    h_agg: Var,
) -> Var {
    let z_emo = emotion_encode(g, b, params, h_agg);
    params.classifier.forward(g, b, z_emo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::FreezePolicy;
    use ndarray::{Array1, Array2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(23)
    }

    fn micro_cfg() -> RunConfig {
        RunConfig { d_h: 6, d_e: 5, d_s: 4, n_classes: 3, ..RunConfig::default() }
    }

    fn setup(cfg: &RunConfig, subjects: &[u32]) -> (ParamStore<f64>, DisentangleParams) {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let params = DisentangleParams::new(&mut store, &mut r, cfg, subjects);
        (store, params)
    }

    #[test]
    fn aggregate_means_over_time() {
        let mut g = Graph::<f64>::new();
        // single step: identity
        let one = g.constant(Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap().into_dyn());
        let agg1 = aggregate(&mut g, one);
        assert_eq!(g.value(agg1).as_slice().unwrap(), &[1.0, 2.0, 3.0]);

        // v and -v cancel
        let pm = g.constant(Array2::from_shape_vec((2, 2), vec![4.0, -1.0, -4.0, 1.0]).unwrap().into_dyn());
        let agg2 = aggregate(&mut g, pm);
        assert!(g.value(agg2).iter().all(|&v| v == 0.0));

        // random vs loop mean
        let mut r = rng();
        let data = Array2::from_shape_fn((7, 4), |_| r.random::<f64>());
        let x = g.constant(data.clone().into_dyn());
        let agg3 = aggregate(&mut g, x);
        let got = g.value(agg3);
        for j in 0..4 {
            let mean: f64 = (0..7).map(|i| data[[i, j]]).sum::<f64>() / 7.0;
            assert!((got[[0, j]] - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn subject_encode_identity_zero_and_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let bank = SubjectBank::new(&mut store, &mut r, &[3, 7, 9], 4, 4);

        let eye = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
        store.set_value(bank.matrix(3).unwrap(), eye);
        store.set_value(bank.matrix(7).unwrap(), ArrayD::zeros(IxDyn(&[4, 4])));

        let h = Array2::from_shape_fn((1, 4), |_| r.random::<f64>());
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let hv = g.constant(h.clone().into_dyn());

        let z3 = subject_encode(&mut g, &binder, &bank, hv, 3).unwrap();
        for j in 0..4 {
            assert!((g.value(z3)[[0, j]] - h[[0, j]]).abs() < 1e-15);
        }
        let z7 = subject_encode(&mut g, &binder, &bank, hv, 7).unwrap();
        assert!(g.value(z7).iter().all(|&v| v == 0.0));

        let z9 = subject_encode(&mut g, &binder, &bank, hv, 9).unwrap();
        let m9 = store.value(bank.matrix(9).unwrap()).to_owned();
        for j in 0..4 {
            let expect: f64 = (0..4).map(|i| h[[0, i]] * m9[[i, j]]).sum();
            assert!((g.value(z9)[[0, j]] - expect).abs() < 1e-10);
        }

        assert!(matches!(
            bank.matrix(42),
            Err(DisentangleError::UnknownSubject { subject_id: 42 })
        ));
        assert_eq!(bank.index_of(9).unwrap(), 2);
    }

    #[test]
    fn standardize_features_centers_and_scales_columns() {
        let mut g = Graph::<f64>::new();
        let mut r = rng();
        let data = Array2::from_shape_fn((6, 3), |_| r.random::<f64>() * 40.0 + 25.0);
        let z = g.constant(data.into_dyn());
        let zn = standardize_features(&mut g, z);
        let v = g.value(zn);
        for j in 0..3 {
            let col: Vec<f64> = (0..6).map(|i| v[[i, j]]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12, "col {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "col {j} variance {var}");
        }

        // constant columns carry no information and must map to zero, not NaN
        let flat = g.constant(Array2::from_elem((4, 2), 7.5).into_dyn());
        let fn_ = standardize_features(&mut g, flat);
        assert!(g.value(fn_).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_encoder_maps_everything_to_zero() {
        let cfg = micro_cfg();
        let (mut store, params) = setup(&cfg, &[0, 1]);
        for pid in store.ids().collect::<Vec<_>>() {
            if store.name(pid).starts_with("emo.encoder") {
                let shape = store.value(pid).shape().to_vec();
                store.set_value(pid, ArrayD::zeros(IxDyn(&shape)));
            }
        }
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let mut r = rng();
        let h = g.constant(Array2::from_shape_fn((3, cfg.d_h), |_| r.random::<f64>()).into_dyn());
        let z = emotion_encode(&mut g, &binder, &params, h);
        assert!(g.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lambdas_zero_reduces_total_to_classification() {
        let cfg = RunConfig { lambda_adv: 0.0, lambda_disc: 0.0, ..micro_cfg() };
        let (store, params) = setup(&cfg, &[0, 1]);
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let mut r = rng();
        let h = g.constant(Array2::from_shape_fn((4, cfg.d_h), |_| r.random::<f64>()).into_dyn());
        // subjects omitted entirely: allowed when both lambdas are zero
        let lv = build_loss(&mut g, &binder, &params, &cfg, h, &[0, 1, 2, 0], None, LossMode::MainStep)
            .unwrap();
        assert!(lv.l_adv.is_none() && lv.l_disc.is_none());
        let bd = lv.breakdown(&g, &cfg);
        assert_eq!(bd.total, bd.l_cls);
        assert_eq!(g.scalar(lv.objective), g.scalar(lv.l_cls));
    }

    #[test]
    fn missing_subjects_with_nonzero_lambda_errors() {
        let cfg = micro_cfg();
        let (store, params) = setup(&cfg, &[0, 1]);
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let h = g.constant(Array2::<f64>::zeros((2, cfg.d_h)).into_dyn());
        let res = build_loss(&mut g, &binder, &params, &cfg, h, &[0, 1], None, LossMode::MainStep);
        assert!(matches!(res, Err(DisentangleError::MissingSubjectLabels)));
    }

    #[test]
    fn uniform_discriminator_attains_log_n_subjects() {
        let cfg = micro_cfg();
        let subjects = [2u32, 5, 6, 8];
        let (mut store, params) = setup(&cfg, &subjects);
        for pid in store.ids().collect::<Vec<_>>() {
            if store.name(pid).starts_with("adv.discriminator") {
                let shape = store.value(pid).shape().to_vec();
                store.set_value(pid, ArrayD::zeros(IxDyn(&shape)));
            }
        }
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let mut r = rng();
        let h = g.constant(Array2::from_shape_fn((3, cfg.d_h), |_| r.random::<f64>()).into_dyn());
        let lv = build_loss(
            &mut g,
            &binder,
            &params,
            &cfg,
            h,
            &[0, 1, 2],
            Some(&[2, 5, 8]),
            LossMode::MainStep,
        )
        .unwrap();
        let l_adv = g.scalar(lv.l_adv.unwrap());
        assert!((l_adv - (subjects.len() as f64).ln()).abs() < 1e-12);
    }

    /// Replays the whole objective with plain loops (no autodiff) and checks
    /// the graph value against it.
    #[test]
    fn total_loss_matches_scripted_replay() {
        let cfg = micro_cfg();
        let subjects = [1u32, 4];
        let (store, params) = setup(&cfg, &subjects);
        let mut r = rng();
        let batch = 5;
        let h = Array2::from_shape_fn((batch, cfg.d_h), |_| r.random::<f64>() * 2.0 - 1.0);
        let labels = [0usize, 2, 1, 1, 0];
        let subj = [1u32, 4, 4, 1, 1];

        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let hv = g.constant(h.clone().into_dyn());
        let lv = build_loss(
            &mut g,
            &binder,
            &params,
            &cfg,
            hv,
            &labels,
            Some(&subj),
            LossMode::FullTotalLive,
        )
        .unwrap();
        let bd = lv.breakdown(&g, &cfg);

        // scripted replay
        let mat = |pid: ParamId| store.value(pid).to_owned();
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
        let linear = |x: &Array1<f64>, w: &ArrayD<f64>, b: Option<&ArrayD<f64>>| -> Array1<f64> {
            let (ins, outs) = (w.shape()[0], w.shape()[1]);
            assert_eq!(x.len(), ins);
            Array1::from_shape_fn(outs, |j| {
                let mut acc: f64 = (0..ins).map(|i| x[i] * w[[i, j]]).sum();
                if let Some(b) = b {
                    acc += b[[0, j]];
                }
                acc
            })
        };
        let mlp2 = |x: &Array1<f64>, tag: &str| -> Array1<f64> {
            let find = |suffix: &str| {
                store
                    .ids()
                    .find(|&p| store.name(p) == format!("{tag}.{suffix}"))
                    .unwrap_or_else(|| panic!("missing {tag}.{suffix}"))
            };
            let h1 = linear(x, &mat(find("0.weight")), Some(&mat(find("0.bias"))));
            let h1 = h1.mapv(gelu);
            linear(&h1, &mat(find("1.weight")), Some(&mat(find("1.bias"))))
        };
        let log_softmax = |x: &Array1<f64>| -> Array1<f64> {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            x.mapv(|v| v - lse)
        };
        let find = |name: &str| store.ids().find(|&p| store.name(p) == name).unwrap();
        let z_rows: Vec<Array1<f64>> = (0..batch)
            .map(|i| {
                let hrow = Array1::from_shape_fn(cfg.d_h, |j| h[[i, j]]);
                mlp2(&hrow, "emo.encoder")
            })
            .collect();
        // per-feature batch statistics feeding the adversary
        let d_e = z_rows[0].len();
        let col_mean = Array1::from_shape_fn(d_e, |j| {
            z_rows.iter().map(|z| z[j]).sum::<f64>() / batch as f64
        });
        let col_std = Array1::from_shape_fn(d_e, |j| {
            let v =
                z_rows.iter().map(|z| (z[j] - col_mean[j]).powi(2)).sum::<f64>() / batch as f64;
            (v + 1e-6).sqrt()
        });
        let (mut cls, mut adv, mut disc) = (0.0, 0.0, 0.0);
        for i in 0..batch {
            let hrow = Array1::from_shape_fn(cfg.d_h, |j| h[[i, j]]);
            let z_emo = &z_rows[i];
            let logits = linear(
                z_emo,
                &mat(find("emo.classifier.weight")),
                Some(&mat(find("emo.classifier.bias"))),
            );
            cls += -log_softmax(&logits)[labels[i]];

            let zn = Array1::from_shape_fn(d_e, |j| (z_emo[j] - col_mean[j]) / col_std[j]);
            let d_logits = mlp2(&zn, "adv.discriminator");
            let lp = log_softmax(&d_logits);
            adv += -lp.mean().unwrap();
            let s_idx = params.bank.index_of(subj[i]).unwrap();
            disc += -lp[s_idx];

            let m_s = mat(params.bank.matrix(subj[i]).unwrap());
            let z_sub = Array1::from_shape_fn(cfg.d_s, |j| {
                (0..cfg.d_h).map(|k| hrow[k] * m_s[[k, j]]).sum()
            });
            let p_logits = linear(
                &z_sub,
                &mat(find("adv.probe.weight")),
                Some(&mat(find("adv.probe.bias"))),
            );
            disc += -log_softmax(&p_logits)[s_idx];
        }
        let (cls, adv, disc) = (cls / batch as f64, adv / batch as f64, disc / batch as f64);
        let total = cls + cfg.lambda_adv * adv + cfg.lambda_disc * disc;

        assert!((bd.l_cls - cls).abs() < 1e-6, "cls {} vs {}", bd.l_cls, cls);
        assert!((bd.l_adv - adv).abs() < 1e-6, "adv {} vs {}", bd.l_adv, adv);
        assert!((bd.l_disc - disc).abs() < 1e-6, "disc {} vs {}", bd.l_disc, disc);
        assert!((bd.total - total).abs() < 1e-6);
        assert!((bd.total - (bd.l_cls + cfg.lambda_adv * bd.l_adv + cfg.lambda_disc * bd.l_disc)).abs() < 1e-9);
    }

    #[test]
    fn alternating_steps_isolate_gradients() {
        let cfg = micro_cfg();
        let (store, params) = setup(&cfg, &[0, 1, 2]);
        let mut r = rng();
        let h = Array2::from_shape_fn((6, cfg.d_h), |_| r.random::<f64>());
        let labels = [0usize, 1, 2, 0, 1, 2];
        let subj = [0u32, 1, 2, 0, 1, 2];

        // discriminator step: no Main-group gradients, even unfrozen, because
        // both discriminator inputs are detached
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::None);
        let hv = g.constant(h.clone().into_dyn());
        let lv =
            build_loss(&mut g, &binder, &params, &cfg, hv, &labels, Some(&subj), LossMode::DiscStep)
                .unwrap();
        let grads = g.backward(lv.objective);
        for pid in store.ids() {
            match store.group(pid) {
                ParamGroup::Main => assert!(
                    grads.get(pid).is_none(),
                    "main param {} leaked into the discriminator step",
                    store.name(pid)
                ),
                ParamGroup::Discriminator => assert!(
                    grads.get(pid).is_some(),
                    "discriminator param {} received no gradient",
                    store.name(pid)
                ),
            }
        }

        // main step with the discriminator frozen: gradient flows through it
        // (l_adv is live) but is never reported for its parameters
        let mut g = Graph::new();
        let binder = Binder::new(&store, FreezePolicy::Group(ParamGroup::Discriminator));
        let hv = g.constant(h.into_dyn());
        let lv =
            build_loss(&mut g, &binder, &params, &cfg, hv, &labels, Some(&subj), LossMode::MainStep)
                .unwrap();
        let grads = g.backward(lv.objective);
        for pid in store.ids() {
            match store.group(pid) {
                ParamGroup::Main => assert!(grads.get(pid).is_some()),
                ParamGroup::Discriminator => assert!(
                    grads.get(pid).is_none(),
                    "discriminator param {} leaked into the main step",
                    store.name(pid)
                ),
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_f32() {
        let cfg = RunConfig { d_h: 4, d_e: 3, d_s: 3, n_classes: 2, ..RunConfig::default() };
        let mut store = ParamStore::<f32>::new();
        let mut r = rng();
        let params = DisentangleParams::new(&mut store, &mut r, &cfg, &[0, 1]);
        let h = Array2::<f32>::from_shape_fn((4, cfg.d_h), |_| r.random::<f32>() * 2.0 - 1.0);
        let labels = [0usize, 1, 1, 0];
        let subj = [0u32, 1, 1, 0];

        // each sub-objective is checked only on the parameters it can reach:
        // the disc step detaches its inputs, so Main-side numeric derivatives
        // are real but deliberately not propagated
        for (mode, keep) in [
            (LossMode::MainStep, None),
            (LossMode::DiscStep, Some(ParamGroup::Discriminator)),
            (LossMode::FullTotalLive, None),
        ] {
            let build = |store: &ParamStore<f32>| {
                let mut g = Graph::new();
                let binder = Binder::new(store, FreezePolicy::None);
                let hv = g.constant(h.clone().into_dyn());
                let lv = build_loss(
                    &mut g, &binder, &params, &cfg, hv, &labels, Some(&subj), mode,
                )
                .unwrap();
                (g, lv.objective)
            };
            let (g, obj) = build(&store);
            let grads = g.backward(obj);
            let step = 1e-2f32;
            for pid in store.ids().collect::<Vec<_>>() {
                if let Some(group) = keep {
                    if store.group(pid) != group {
                        continue;
                    }
                }
                let Some(grad) = grads.get(pid) else { continue };
                let base = store.value(pid).to_owned();
                let idx: Vec<usize> = base.shape().iter().map(|&d| d / 2).collect();
                let mut plus = base.clone();
                plus[idx.as_slice()] += step;
                let mut minus = base.clone();
                minus[idx.as_slice()] -= step;
                let mut s2 = store.clone();
                s2.set_value(pid, plus);
                let (gp, lp) = build(&s2);
                s2.set_value(pid, minus);
                let (gm, lm) = build(&s2);
                let fd = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * step);
                let an = grad[idx.as_slice()];
                // floor shields near-zero gradients from f32 finite-difference noise
                let denom = fd.abs().max(an.abs()).max(1e-1);
                assert!(
                    ((fd - an) / denom).abs() < 1e-3,
                    "{:?} param {}: fd {fd} vs analytic {an}",
                    mode,
                    store.name(pid)
                );
            }
        }
    }
}
