use std::fs;
use std::path::{Path, PathBuf};

use cfpn::backbone::{check_input_size, BackboneConfig};
use cfpn::metrics::{Aggregation, DEFAULT_BETA2};
use cfpn::training::{AdamConfig, BetaConvention, TrainConfig};
use cfpn::{CfaVariant, CfdConfig, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Everything a run needs. Loaded from `--config` (unknown keys rejected),
/// then overridden by command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub input_size: usize,
    pub cfa_variant: CfaVariant,
    /// Comma-separated active CFD levels, or `none` for the plain FPN path.
    pub cfd_levels: String,
    pub backbone: BackboneConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub augment: bool,
    pub beta_convention: BetaConvention,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Save the checkpoint after every n-th epoch; the final weights are always saved.
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub emit_global: bool,
    pub metric_beta2: f64,
    pub aggregation: Aggregation,
    /// Entries sampled per parameter tensor by the whole-model gradient check.
    pub gradcheck_entries: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input_size: 96,
            cfa_variant: CfaVariant::Collaborative,
            cfd_levels: CfdConfig::all().to_string(),
            backbone: BackboneConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 2,
            steps: 2000,
            augment: true,
            beta_convention: BetaConvention::Ratio,
            manifest: None,
            checkpoint: None,
            checkpoint_every: 1,
            out_dir: PathBuf::from("cfpn-out"),
            emit_global: false,
            metric_beta2: DEFAULT_BETA2,
            aggregation: Aggregation::PerImage,
            gradcheck_entries: 3,
        }
    }
}

fn field(name: &str, message: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("{name}: {message}"))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))
    }

    pub fn cfd(&self) -> Result<Option<CfdConfig>, Failure> {
        let s = self.cfd_levels.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|e| field("cfd_levels", e))
    }

    pub fn model(&self) -> Result<ModelConfig, Failure> {
        Ok(ModelConfig {
            backbone: self.backbone.clone(),
            cfa_variant: self.cfa_variant,
            cfd: self.cfd()?,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: self.optimizer,
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            augment: self.augment,
            beta_convention: self.beta_convention,
        }
    }

    /// Field-level validation of everything but paths.
    pub fn validate(&self) -> Result<(), Failure> {
        check_input_size(self.input_size, self.input_size).map_err(|e| field("input_size", e))?;
        self.cfd()?;
        if self.checkpoint_every == 0 {
            return Err(field("checkpoint_every", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be at least 1"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(field(
                "optimizer.lr",
                format!("must be positive, got {}", o.lr),
            ));
        }
        for (name, v) in [("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(field(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(o.eps > 0.0) {
            return Err(field(
                "optimizer.eps",
                format!("must be positive, got {}", o.eps),
            ));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(field(
                "optimizer.weight_decay",
                format!("must be non-negative, got {}", o.weight_decay),
            ));
        }
        if !(self.metric_beta2 > 0.0) {
            return Err(field(
                "metric_beta2",
                format!("must be positive, got {}", self.metric_beta2),
            ));
        }
        if self.backbone.stem_channels == 0 || self.backbone.block_channels.contains(&0) {
            return Err(field("backbone", "channel widths must be positive"));
        }
        Ok(())
    }
}
