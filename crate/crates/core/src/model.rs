//! End-to-end network: backbone → CFA → CFD → top-down fusion → readouts.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{self, BackboneConfig, FeatureMap, FeaturePyramid};
use crate::cfa::{self, CfaOutput, CfaVariant};
use crate::cfd::{self, CfdConfig};
use crate::decoder::{self, TopDown};
use crate::error::Result;
use crate::params::{Ctx, Initializer, Mode, ModelParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    pub cfa_variant: CfaVariant,
    /// Active distribution levels; `None` feeds the backbone pyramid straight
    /// into the top-down path (plain FPN).
    pub cfd: Option<CfdConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            cfa_variant: CfaVariant::Collaborative,
            cfd: Some(CfdConfig::all()),
        }
    }
}

impl ModelConfig {
    /// Plain FPN baseline: no reweighting and no distribution.
    pub fn fpn_baseline() -> Self {
        Self {
            cfa_variant: CfaVariant::NoReweighting,
            cfd: None,
            ..Self::default()
        }
    }

    fn decoder_levels(&self) -> Vec<usize> {
        match &self.cfd {
            Some(c) => c.active_levels().to_vec(),
            None => (0..backbone::NUM_LEVELS).collect(),
        }
    }

    /// Fresh parameters drawn deterministically from `seed`.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut store = ModelParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer {
            store: &mut store,
            rng: &mut rng,
        };
        backbone::init_backbone(&mut init, &self.backbone);
        cfa::init_cfa(&mut init, self.cfa_variant);
        if let Some(c) = &self.cfd {
            cfd::init_cfd(&mut init, c);
        }
        decoder::init_decoder(&mut init, &self.decoder_levels());
        decoder::init_heads(&mut init);
        store
    }
}

/// Every intermediate of one forward pass, as tape nodes.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub cfa: CfaOutput,
    pub distributed: BTreeMap<usize, FeatureMap>,
    pub topdown: TopDown,
    pub s_global: Var,
    pub s_local: Var,
}

pub fn forward(ctx: &mut Ctx<'_>, config: &ModelConfig, image: &Tensor) -> Result<ForwardOutput> {
    let x = ctx.tape.constant(image.clone());
    let pyramid = backbone::extract_features(ctx, x)?;
    let size = pyramid.image_size;
    let cfa = cfa::run_cfa(ctx, &pyramid, config.cfa_variant)?;
    let distributed = match &config.cfd {
        Some(c) => cfd::distribute(ctx, cfa.f, c)?,
        None => pyramid.levels.iter().map(|l| (l.level, *l)).collect(),
    };
    let topdown = decoder::fuse_topdown(ctx, &distributed, size)?;
    let s_global = decoder::predict_global(ctx, cfa.f, size)?;
    let s_local = decoder::predict_local(ctx, topdown.l, size)?;
    Ok(ForwardOutput {
        pyramid,
        cfa,
        distributed,
        topdown,
        s_global,
        s_local,
    })
}

/// Saliency maps for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Final map from the top-down path.
    pub local: Tensor,
    /// Auxiliary map read out from the aggregated feature.
    pub global: Tensor,
}

/// Eval-mode inference.
pub fn predict(params: &ModelParams, config: &ModelConfig, image: &Tensor) -> Result<Prediction> {
    let mut ctx = Ctx::new(params, Mode::Eval);
    let out = forward(&mut ctx, config, image)?;
    Ok(Prediction {
        local: ctx.tape.value(out.s_local).clone(),
        global: ctx.tape.value(out.s_global).clone(),
    })
}
