//! Run configuration: hyperparameters, architecture modes, and ablation
//! toggles, loaded from TOML with strict schema validation.
//!
//! Unknown keys are rejected so a typo in a hyperparameter name fails at
//! startup instead of silently training with a default.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Graph convolution flavor for the propagation layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcnMode {
    /// Chebyshev polynomial filter of order K on the scaled Laplacian.
    Cheb,
    /// Single-hop ReLU(A_hat H W).
    Simple,
}

/// How the channel adjacency is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Learned relation networks produce per-sample adjacencies.
    Dynamic,
    /// Relation nets bypassed: similarity computed on raw pooled features.
    RawSimilarity,
    /// Fixed identity-plus-uniform adjacency, no learning.
    Static,
}

/// Treatment of masked positions in scale-restricted attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Masked logits set to -inf: zero attention outside the band.
    Additive,
    /// Logits multiplied by the 0/1 mask before softmax, as written; masked
    /// positions keep the softmax weight of a zero logit.
    Multiplicative,
}

/// Output treatment of the cross-band attention network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandAttention {
    /// Softmax over the five bands: rows of A form a distribution.
    Softmax,
    /// Raw network outputs, no normalization.
    RawLogits,
    /// Attention disabled: A fixed to the uniform distribution (ablation).
    ForcedUniform,
}

/// Full configuration of a training/evaluation run.
///
/// Every field has a default so a config file only needs to override what
/// changes; `validate` enforces cross-field consistency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Number of emotion classes.
    pub n_classes: usize,
    /// Temporal attention scales (band half-widths); one head group each.
    pub scales: Vec<usize>,
    /// Chebyshev polynomial order K (number of recurrence terms).
    pub cheb_order: usize,
    pub gcn_mode: GcnMode,
    pub graph_mode: GraphMode,
    pub mask_mode: MaskMode,
    pub band_attention: BandAttention,
    /// When false, importance weights are pinned to 1 (ablation).
    pub band_importance: bool,
    /// When false, the auxiliary subject probe on z_sub is dropped.
    pub subject_probe: bool,
    /// Graph node feature width after propagation.
    pub d_g: usize,
    /// Temporal transformer model width.
    pub d_h: usize,
    /// Relation network output width.
    pub d_r: usize,
    /// Emotion latent width.
    pub d_e: usize,
    /// Subject latent width.
    pub d_s: usize,
    /// Hidden width of the two band-weighting networks.
    pub fap_hidden: usize,
    pub n_heads: usize,
    /// Weight of the encoder-side confusion loss.
    pub lambda_adv: f64,
    /// Weight of the discriminator loss (plus subject probe).
    pub lambda_disc: f64,
    pub lr: f64,
    /// Learning-rate multiplier for the discriminator group. The adversary
    /// must out-pace the representation it reads or the minimax game never
    /// engages; two-time-scale updates are the standard remedy.
    pub disc_lr_mult: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early stopping: epochs without validation improvement before halt.
    pub patience: usize,
    /// Fraction of training trials held out for validation.
    pub val_fraction: f64,
    /// Fixed spectral bound for the Chebyshev Laplacian scaling; `None`
    /// estimates the bound by power iteration per sample.
    pub lambda_max_fixed: Option<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            scales: vec![1, 2, 4, 8],
            cheb_order: 4,
            gcn_mode: GcnMode::Cheb,
            graph_mode: GraphMode::Dynamic,
            mask_mode: MaskMode::Additive,
            band_attention: BandAttention::Softmax,
            band_importance: true,
            subject_probe: true,
            d_g: 16,
            d_h: 32,
            d_r: 16,
            d_e: 16,
            d_s: 16,
            fap_hidden: 16,
            n_heads: 8,
            lambda_adv: 0.1,
            lambda_disc: 1.0,
            lr: 5e-4,
            disc_lr_mult: 10.0,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 80,
            patience: 10,
            val_fraction: 0.2,
            lambda_max_fixed: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Number of attention head groups (= number of scales).
    pub fn n_scale_groups(&self) -> usize {
        self.scales.len()
    }

    /// Width of one scale group's output.
    pub fn group_width(&self) -> usize {
        self.d_h / self.scales.len()
    }

    /// Heads inside one scale group.
    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.scales.len()
    }

    /// Per-head key/query width.
    pub fn d_head(&self) -> usize {
        self.d_h / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.n_classes < 2 {
            return fail(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.scales.is_empty() {
            return fail("scales must be nonempty".into());
        }
        if self.scales.iter().any(|&s| s == 0) {
            return fail("every scale must be >= 1".into());
        }
        if self.cheb_order == 0 {
            return fail("cheb_order must be >= 1".into());
        }
        for (name, v) in [
            ("d_g", self.d_g),
            ("d_h", self.d_h),
            ("d_r", self.d_r),
            ("d_e", self.d_e),
            ("d_s", self.d_s),
            ("fap_hidden", self.fap_hidden),
            ("n_heads", self.n_heads),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        if self.n_heads % self.scales.len() != 0 {
            return fail(format!(
                "n_heads ({}) must be divisible by the number of scales ({})",
                self.n_heads,
                self.scales.len()
            ));
        }
        if self.d_h % self.n_heads != 0 {
            return fail(format!(
                "d_h ({}) must be divisible by n_heads ({})",
                self.d_h, self.n_heads
            ));
        }
        if self.lambda_adv < 0.0 || self.lambda_disc < 0.0 {
            return fail("lambda_adv and lambda_disc must be >= 0".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.disc_lr_mult > 0.0 && self.disc_lr_mult.is_finite()) {
            return fail(format!("disc_lr_mult must be finite and > 0, got {}", self.disc_lr_mult));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction must lie in (0,1), got {}", self.val_fraction));
        }
        if let Some(lm) = self.lambda_max_fixed {
            if !(lm > 0.0 && lm.is_finite()) {
                return fail(format!("lambda_max_fixed must be finite and > 0, got {lm}"));
            }
        }
        Ok(())
    }
}
