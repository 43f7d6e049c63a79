//! Ablation study: rerun the full cross-validation with one component
//! disabled at a time and tabulate the comparison.

use crate::config::{BandAttention, GraphMode, RunConfig};
use serde::{Deserialize, Serialize};

use super::dataset::FeatureSet;
use super::folds::FoldSpec;
use super::loso::{run_loso_with, LosoSummary};
use super::train::StepLog;
use super::HarnessError;

/// A scale wide enough to cover any realistic sequence, so a single-scale
/// model degenerates to plain unrestricted attention.
const FULL_ATTENTION_SCALE: usize = 65536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Unmodified configuration: the reference point.
    Full,
    /// Cross-band attention pinned to the uniform distribution.
    NoBandAttention,
    /// Band importance weights pinned to 1.
    NoImportance,
    /// Fixed adjacency instead of learned relation networks.
    StaticGraph,
    /// Adjacency from raw pooled-feature similarity, relation nets bypassed.
    RawSimilarity,
    /// One unrestricted attention scale instead of the multi-scale bank.
    SingleScale,
    /// Adversarial disentanglement switched off entirely.
    NoAdversarial,
}

pub const ALL_VARIANTS: [Variant; 7] = [
    Variant::Full,
    Variant::NoBandAttention,
    Variant::NoImportance,
    Variant::StaticGraph,
    Variant::RawSimilarity,
    Variant::SingleScale,
    Variant::NoAdversarial,
];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBandAttention => "no_band_attention",
            Variant::NoImportance => "no_importance",
            Variant::StaticGraph => "static_graph",
            Variant::RawSimilarity => "raw_similarity",
            Variant::SingleScale => "single_scale",
            Variant::NoAdversarial => "no_adversarial",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown ablation variant {s:?}"))
    }
}

/// The base configuration with exactly one component disabled.
pub fn variant_config(base: &RunConfig, variant: Variant) -> RunConfig {
    let mut cfg = base.clone();
    match variant {
        Variant::Full => {}
        Variant::NoBandAttention => cfg.band_attention = BandAttention::ForcedUniform,
        Variant::NoImportance => cfg.band_importance = false,
        Variant::StaticGraph => cfg.graph_mode = GraphMode::Static,
        Variant::RawSimilarity => cfg.graph_mode = GraphMode::RawSimilarity,
        Variant::SingleScale => cfg.scales = vec![FULL_ATTENTION_SCALE],
        Variant::NoAdversarial => {
            cfg.lambda_adv = 0.0;
            cfg.lambda_disc = 0.0;
        }
    }
    cfg
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub summary: LosoSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub version: u32,
    pub base_config: RunConfig,
    pub variants: Vec<VariantResult>,
}

impl AblationSummary {
    /// The full-model summary, when the study included it.
    pub fn full(&self) -> Option<&LosoSummary> {
        self.variants.iter().find(|v| v.variant == Variant::Full).map(|v| &v.summary)
    }
}

/// Run the cross-validation once per variant on a shared dataset and fold
/// split, so every comparison sees identical data.
pub fn run_ablation(
    data: &FeatureSet,
    folds: &[FoldSpec],
    base: &RunConfig,
    variants: &[Variant],
    mut on_step: impl FnMut(Variant, usize, &StepLog),
) -> Result<AblationSummary, HarnessError> {
    let mut results = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = variant_config(base, variant);
        cfg.validate().map_err(|e| {
            HarnessError::Dataset(format!("variant {variant} yields an invalid config: {e}"))
        })?;
        let summary =
            run_loso_with(data, folds, &cfg, |held_out, s| on_step(variant, held_out, s))?;
        results.push(VariantResult { variant, summary });
    }
    Ok(AblationSummary { version: 1, base_config: base.clone(), variants: results })
}

pub fn render_ablation_table(s: &AblationSummary) -> String {
    let mut out = String::new();
    out.push_str("variant            accuracy     std  macro_f1  disc_acc\n");
    for v in &s.variants {
        out.push_str(&format!(
            "{:<17}  {:>8.4}  {:>6.4}  {:>8.4}  {:>8.4}\n",
            v.variant.name(),
            v.summary.mean_accuracy,
            v.summary.std_accuracy,
            v.summary.mean_f1,
            v.summary.mean_disc_val_accuracy,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GcnMode, MaskMode};
    use crate::harness::testutil::micro_setup;

    #[test]
    fn each_variant_changes_only_its_own_knob() {
        let base = RunConfig::default();
        for variant in ALL_VARIANTS {
            let cfg = variant_config(&base, variant);
            cfg.validate().expect("every variant config is valid");
            // fields no variant may touch
            assert_eq!(cfg.gcn_mode, GcnMode::Cheb);
            assert_eq!(cfg.mask_mode, MaskMode::Additive);
            assert_eq!(cfg.d_h, base.d_h);
            assert_eq!(cfg.seed, base.seed);
            let same_graph = cfg.graph_mode == base.graph_mode;
            let same_scales = cfg.scales == base.scales;
            let same_adv =
                cfg.lambda_adv == base.lambda_adv && cfg.lambda_disc == base.lambda_disc;
            let same_fap = cfg.band_attention == base.band_attention
                && cfg.band_importance == base.band_importance;
            let changed = [!same_graph, !same_scales, !same_adv, !same_fap];
            let expected = usize::from(variant != Variant::Full);
            assert_eq!(
                changed.iter().filter(|&&c| c).count(),
                expected,
                "variant {variant} touched the wrong fields"
            );
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ALL_VARIANTS {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn study_runs_variants_on_the_same_folds() {
        let (data, folds, cfg) = micro_setup();
        let cfg = RunConfig { epochs: 1, ..cfg };
        let chosen = [Variant::Full, Variant::NoAdversarial];
        let summary =
            run_ablation(&data, &folds[..1], &cfg, &chosen, |_, _, _| {}).unwrap();
        assert_eq!(summary.variants.len(), 2);
        assert!(summary.full().is_some());
        assert_eq!(summary.variants[1].summary.config.lambda_adv, 0.0);
        let table = render_ablation_table(&summary);
        assert!(table.contains("full") && table.contains("no_adversarial"));
    }
}
