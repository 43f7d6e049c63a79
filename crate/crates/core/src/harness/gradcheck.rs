//! Numeric gradient verification: central finite differences over every
//! entry of every parameter tensor, compared against the backward pass on a
//! micro model with all loss terms live.

use crate::autodiff::{GradMap, Graph, Var};
use crate::config::RunConfig;
use crate::disentangle::LossMode;
use crate::features::{band_masks, BandMaskSet, DEFAULT_BAND_EDGES_HZ};
use crate::model::{batch_loss, FreqDgt};
use crate::nn::{Binder, FreezePolicy, ParamStore};
use crate::synth::rng_stream;
use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

const GRADCHECK_STREAM: u32 = 31;

/// Frequency grid whose bins land in all five bands.
const MICRO_BINS_HZ: [f64; 8] = [2.0, 3.0, 5.0, 9.0, 15.0, 25.0, 35.0, 45.0];

/// Symmetric relative error; the floor keeps near-zero pairs finite.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-6)
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    let val = g.value(v);
    assert_eq!(val.len(), 1, "expected a scalar node");
    *val.iter().next().unwrap()
}

/// Worst finite-difference comparison within one parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub group: String,
    pub n_entries: usize,
    pub max_rel_err: f64,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub passed: bool,
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorReport> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn render_report(r: &GradCheckReport) -> String {
    let mut out = format!(
        "gradient check: step {:.1e}, tolerance {:.1e}, max relative error {:.3e} -> {}\n",
        r.step,
        r.tolerance,
        r.max_rel_err,
        if r.passed { "pass" } else { "FAIL" },
    );
    out.push_str("tensor                        group           entries   max_rel_err\n");
    for t in &r.tensors {
        out.push_str(&format!(
            "{:<28}  {:<14}  {:>7}  {:>12.3e}\n",
            t.name, t.group, t.n_entries, t.max_rel_err,
        ));
    }
    out
}

/// A micro model plus a fabricated batch, small enough to difference every
/// parameter entry in seconds.
pub struct GradCheckSetup {
    pub store: ParamStore<f64>,
    pub model: FreqDgt,
    pub cfg: RunConfig,
    pub xs: Vec<ArrayD<f64>>,
    pub labels: Vec<usize>,
    pub subjects: Vec<u32>,
}

fn micro_masks() -> BandMaskSet {
    band_masks(&MICRO_BINS_HZ, DEFAULT_BAND_EDGES_HZ).expect("micro grid is valid")
}

impl GradCheckSetup {
    /// Build a model from `cfg` and a random batch of `batch` samples with
    /// `s_steps` windows over `n_channels` channels on the micro frequency
    /// grid. Labels alternate over classes, subjects over two ids.
    pub fn new(
        cfg: RunConfig,
        s_steps: usize,
        n_channels: usize,
        batch: usize,
        seed: u64,
    ) -> Self {
        let subjects_in_bank = [3u32, 5];
        let masks = micro_masks();
        let mut rng = rng_stream(seed, &[GRADCHECK_STREAM]);
        let mut store = ParamStore::new();
        let model =
            FreqDgt::new(&mut store, &mut rng, &cfg, masks, n_channels, &subjects_in_bank);

        let n_bins = MICRO_BINS_HZ.len();
        let mut xs = Vec::with_capacity(batch);
        for _ in 0..batch {
            // positive rows summing to 1, like a relative spectral density
            let mut x = ArrayD::from_shape_fn(
                ndarray::IxDyn(&[s_steps, n_channels, n_bins]),
                |_| rng.random::<f64>() + 0.05,
            );
            for mut row in x.rows_mut() {
                let total = row.sum();
                row.mapv_inplace(|v| v / total);
            }
            xs.push(x);
        }
        let labels = (0..batch).map(|i| i % cfg.n_classes).collect();
        let subjects = (0..batch).map(|i| subjects_in_bank[i % 2]).collect();
        Self { store, model, cfg, xs, labels, subjects }
    }

    /// The canonical micro instance used by the standalone gradient check.
    pub fn micro(seed: u64) -> Self {
        let cfg = RunConfig {
            d_r: 3,
            d_g: 4,
            d_h: 8,
            d_e: 4,
            d_s: 3,
            fap_hidden: 4,
            cheb_order: 2,
            n_heads: 2,
            scales: vec![1, 2],
            ..RunConfig::default()
        };
        Self::new(cfg, 4, 4, 4, seed)
    }

    /// Full loss with every term live and nothing detached, so each
    /// parameter's numeric derivative has an analytic counterpart.
    fn loss_of(
        store: &ParamStore<f64>,
        model: &FreqDgt,
        cfg: &RunConfig,
        xs: &[ArrayD<f64>],
        labels: &[usize],
        subjects: &[u32],
    ) -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let binder = Binder::new(store, FreezePolicy::None);
        let (lv, _) = batch_loss(
            &mut g,
            &binder,
            model,
            cfg,
            xs,
            labels,
            Some(subjects),
            LossMode::FullTotalLive,
        )
        .expect("micro batch is well-formed");
        (g, lv.objective)
    }

    pub fn loss(&self) -> f64 {
        let (g, obj) =
            Self::loss_of(&self.store, &self.model, &self.cfg, &self.xs, &self.labels, &self.subjects);
        scalar(&g, obj)
    }

    pub fn analytic(&self) -> GradMap<f64> {
        let (g, obj) =
            Self::loss_of(&self.store, &self.model, &self.cfg, &self.xs, &self.labels, &self.subjects);
        g.backward(obj)
    }

    /// Difference every parameter entry and compare against `grads`.
    pub fn compare_grads(&mut self, grads: &GradMap<f64>, step: f64, tolerance: f64) -> GradCheckReport {
        let Self { store, model, cfg, xs, labels, subjects } = self;
        let loss = |st: &ParamStore<f64>| {
            let (g, obj) = Self::loss_of(st, model, cfg, xs, labels, subjects);
            scalar(&g, obj)
        };
        let mut tensors = Vec::new();
        let mut max_rel_err = 0.0f64;
        for pid in store.ids().collect::<Vec<_>>() {
            let base = store.value(pid).to_owned();
            let zeros = ArrayD::zeros(base.raw_dim());
            let an = grads.get(pid).unwrap_or(&zeros);
            let an_flat = an.as_standard_layout();
            let an_flat = an_flat.as_slice().expect("gradients are contiguous");
            let mut report = TensorReport {
                name: store.name(pid).to_string(),
                group: format!("{:?}", store.group(pid)),
                n_entries: base.len(),
                max_rel_err: 0.0,
                worst_analytic: 0.0,
                worst_numeric: 0.0,
            };
            for idx in 0..base.len() {
                let mut probe = |delta: f64| {
                    let mut p = base.clone();
                    p.as_slice_mut().expect("parameters are contiguous")[idx] += delta;
                    store.set_value(pid, p);
                    loss(store)
                };
                let fd = (probe(step) - probe(-step)) / (2.0 * step);
                store.set_value(pid, base.clone());
                let r = rel_err(fd, an_flat[idx]);
                if r > report.max_rel_err {
                    report.max_rel_err = r;
                    report.worst_analytic = an_flat[idx];
                    report.worst_numeric = fd;
                }
            }
            max_rel_err = max_rel_err.max(report.max_rel_err);
            tensors.push(report);
        }
        GradCheckReport { step, tolerance, max_rel_err, passed: max_rel_err < tolerance, tensors }
    }
}

/// Standalone check on the canonical micro model.
pub fn grad_check(step: f64, tolerance: f64, seed: u64) -> GradCheckReport {
    let mut setup = GradCheckSetup::micro(seed);
    let grads = setup.analytic();
    setup.compare_grads(&grads, step, tolerance)
}
