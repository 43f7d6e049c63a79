//! Full model composition: band reweighting, graph propagation, multi-scale
//! temporal attention, aggregation, and the disentanglement head, all inside
//! one graph per batch so a single backward pass covers every path.

use crate::adgl::{adgl_forward, AdglError, AdglOutput, GraphConvParams, RelationNets};
use crate::autodiff::{Graph, Real, Var};
use crate::config::RunConfig;
use crate::data::FeatureTensor;
use crate::disentangle::{
    aggregate, build_loss, infer_logits, DisentangleError, DisentangleParams, LossMode, LossVars,
};
use crate::fap::{bind_masks, fap_forward, FapOutput, FapParams, N_BANDS};
use crate::features::BandMaskSet;
use crate::mstt::{mstt_forward, MsttOutput, MsttParams};
use crate::nn::{Binder, FreezePolicy, ParamStore};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] AdglError),
    #[error(transparent)]
    Head(#[from] DisentangleError),
    #[error("model built for {expected} channels x {expected_bins} bins, got {got} x {got_bins}")]
    ShapeMismatch { expected: usize, expected_bins: usize, got: usize, got_bins: usize },
}

/// Parameter handles of the whole network plus the fixed band masks.
#[derive(Debug, Clone)]
pub struct FreqDgt {
    pub fap: FapParams,
    pub relations: RelationNets,
    pub gcn: GraphConvParams,
    pub mstt: MsttParams,
    pub head: DisentangleParams,
    pub masks: BandMaskSet,
    pub n_channels: usize,
}

impl FreqDgt {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &RunConfig,
        masks: BandMaskSet,
        n_channels: usize,
        subjects: &[u32],
    ) -> Self {
        let n_bins = masks.n_bins();
        let fap = FapParams::new(store, rng, cfg.fap_hidden);
        let relations = RelationNets::new(store, rng, n_bins, cfg.d_r);
        let gcn = GraphConvParams::new(store, rng, cfg.gcn_mode, cfg.cheb_order, n_bins, cfg.d_g);
        let mstt = MsttParams::new(store, rng, cfg, n_channels * cfg.d_g);
        let head = DisentangleParams::new(store, rng, cfg, subjects);
        Self { fap, relations, gcn, mstt, head, masks, n_channels }
    }

    pub fn n_bins(&self) -> usize {
        self.masks.n_bins()
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<(), ModelError> {
        let shape = g.shape(x);
        if shape[1] != self.n_channels || shape[2] != self.n_bins() {
            return Err(ModelError::ShapeMismatch {
                expected: self.n_channels,
                expected_bins: self.n_bins(),
                got: shape[1],
                got_bins: shape[2],
            });
        }
        Ok(())
    }
}

/// Everything one sample's trunk forward produces.
pub struct TrunkOutput {
    /// (1, d_h) aggregated feature.
    pub h_agg: Var,
    pub fap: FapOutput,
    pub adgl: AdglOutput,
    pub mstt: MsttOutput,
}

/// Trunk for one (S, C, F) sample; `mask_vars` come from [`bind_model_masks`]
/// so a whole batch shares the same five constants.
pub fn forward_trunk<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    model: &FreqDgt,
    cfg: &RunConfig,
    x: Var,
    mask_vars: &[Var; N_BANDS],
) -> Result<TrunkOutput, ModelError> {
    model.check_input(g, x)?;
    let fap = fap_forward(g, b, x, mask_vars, &model.fap, cfg.band_attention, cfg.band_importance);
    let adgl = adgl_forward(g, b, fap.y, &model.relations, &model.gcn, cfg)?;
    let mstt = mstt_forward(g, b, adgl.h, &model.mstt, cfg.mask_mode);
    let h_agg = aggregate(g, mstt.h);
    Ok(TrunkOutput { h_agg, fap, adgl, mstt })
}

pub fn bind_model_masks<T: Real>(g: &mut Graph<T>, model: &FreqDgt) -> [Var; N_BANDS] {
    bind_masks(g, &model.masks)
}

/// Per-sample trunk outputs plus the stacked (B, d_h) feature matrix.
pub struct BatchOutput {
    pub h_agg: Var,
    pub trunks: Vec<TrunkOutput>,
}

pub fn forward_batch<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    model: &FreqDgt,
    cfg: &RunConfig,
    xs: &[ArrayD<T>],
) -> Result<BatchOutput, ModelError> {
    assert!(!xs.is_empty(), "batch must be nonempty");
    let mask_vars = bind_model_masks(g, model);
    let mut trunks = Vec::with_capacity(xs.len());
    for x in xs {
        let xv = g.constant(x.clone());
        trunks.push(forward_trunk(g, b, model, cfg, xv, &mask_vars)?);
    }
    let rows: Vec<Var> = trunks.iter().map(|t| t.h_agg).collect();
    let h_agg = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0) };
    Ok(BatchOutput { h_agg, trunks })
}

/// Build the training objective for a batch in one graph.
pub fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    b: &Binder<T>,
    model: &FreqDgt,
    cfg: &RunConfig,
    xs: &[ArrayD<T>],
    labels: &[usize],
    subjects: Option<&[u32]>,
    mode: LossMode,
) -> Result<(LossVars, BatchOutput), ModelError> {
    let out = forward_batch(g, b, model, cfg, xs)?;
    let lv = build_loss(g, b, &model.head, cfg, out.h_agg, labels, subjects, mode)?;
    Ok((lv, out))
}

pub fn argmax_rows<T: Real>(logits: &ArrayD<T>) -> Vec<usize> {
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    (0..rows)
        .map(|i| {
            (0..cols)
                .max_by(|&a, &b| {
                    logits[[i, a]].partial_cmp(&logits[[i, b]]).expect("finite logits")
                })
                .unwrap()
        })
        .collect()
}

/// Emotion-class predictions; pure inference, never consults the subject bank.
pub fn predict<T: Real>(
    store: &ParamStore<T>,
    model: &FreqDgt,
    cfg: &RunConfig,
    xs: &[ArrayD<T>],
) -> Result<Vec<usize>, ModelError> {
    let mut g = Graph::new();
    let binder = Binder::new(store, FreezePolicy::All);
    let out = forward_batch(&mut g, &binder, model, cfg, xs)?;
    let logits = infer_logits(&mut g, &binder, &model.head, out.h_agg);
    Ok(argmax_rows(&g.value(logits).to_owned()))
}

/// Discriminator's subject predictions from the emotion embedding, as dense
/// bank indices; measures how much subject information z_emo still carries.
pub fn predict_subject<T: Real>(
    store: &ParamStore<T>,
    model: &FreqDgt,
    cfg: &RunConfig,
    xs: &[ArrayD<T>],
) -> Result<Vec<usize>, ModelError> {
    let mut g = Graph::new();
    let binder = Binder::new(store, FreezePolicy::All);
    let out = forward_batch(&mut g, &binder, model, cfg, xs)?;
    let z_emo = crate::disentangle::emotion_encode(&mut g, &binder, &model.head, out.h_agg);
    let logits = crate::disentangle::discriminate(&mut g, &binder, &model.head, z_emo);
    Ok(argmax_rows(&g.value(logits).to_owned()))
}

/// Convert a stored feature tensor into model input precision.
pub fn to_input<T: Real>(t: &FeatureTensor) -> ArrayD<T> {
    t.data.mapv(T::from_f).into_dyn()
}
