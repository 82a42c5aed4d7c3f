//! Small trainable convolutional stack producing the five-level pyramid.
//!
//! Level 0 is the stride-4 stem output, levels 1–4 are the outputs of four
//! conv blocks (strides 4, 8, 16, 32). Each level then passes through a 1x1
//! reduction conv to the channel widths the aggregation module expects.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{init_conv_bn_relu, Ctx, Initializer};

pub const NUM_LEVELS: usize = 5;
pub const LEVEL_CHANNELS: [usize; NUM_LEVELS] = [64, 128, 256, 256, 256];
pub const LEVEL_STRIDES: [usize; NUM_LEVELS] = [4, 4, 8, 16, 32];
/// Input height and width must be multiples of the coarsest stride.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub block_channels: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            block_channels: [32, 48, 64, 96],
        }
    }
}

/// One pyramid level on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub level: usize,
    pub stride: usize,
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
    pub image_size: (usize, usize),
}

impl FeaturePyramid {
    pub fn vars(&self) -> Vec<Var> {
        self.levels.iter().map(|l| l.features).collect()
    }

    /// Spatial size level `level` must have for this pyramid's image size.
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        level_size(self.image_size, level)
    }
}

pub fn level_size((h, w): (usize, usize), level: usize) -> (usize, usize) {
    (h / LEVEL_STRIDES[level], w / LEVEL_STRIDES[level])
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::InputSize {
            height: h,
            width: w,
            multiple: INPUT_MULTIPLE,
        });
    }
    Ok(())
}

pub fn init_backbone(init: &mut Initializer<'_>, config: &BackboneConfig) {
    let s = config.stem_channels;
    init_conv_bn_relu(init, "backbone.stem0", s, 3);
    init_conv_bn_relu(init, "backbone.stem1", s, s);
    let mut c_in = s;
    for (b, &c) in config.block_channels.iter().enumerate() {
        init_conv_bn_relu(init, &format!("backbone.block{}.0", b + 1), c, c_in);
        init_conv_bn_relu(init, &format!("backbone.block{}.1", b + 1), c, c);
        c_in = c;
    }
    let raw = [
        s,
        config.block_channels[0],
        config.block_channels[1],
        config.block_channels[2],
        config.block_channels[3],
    ];
    for (n, (&c_raw, &d)) in raw.iter().zip(&LEVEL_CHANNELS).enumerate() {
        init.conv(&format!("backbone.reduce{n}"), d, c_raw, 1, true);
    }
}

/// Runs the backbone on a `[3, H, W]` image already placed on the tape.
pub fn extract_features(ctx: &mut Ctx<'_>, image: Var) -> Result<FeaturePyramid> {
    let shape = ctx.tape.shape(image).to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::InvalidTensor(format!(
            "image must be [3, H, W], got {shape:?}"
        )));
    };
    if c != 3 {
        return Err(Error::InvalidTensor(format!(
            "image must have 3 channels, got {c}"
        )));
    }
    check_input_size(h, w)?;

    let x = ctx.conv_bn_relu("backbone.stem0", image, 2)?;
    let stem = ctx.conv_bn_relu("backbone.stem1", x, 2)?;
    let mut raw = vec![stem];
    let mut x = stem;
    for b in 1..=4 {
        let stride = if b == 1 { 1 } else { 2 };
        x = ctx.conv_bn_relu(&format!("backbone.block{b}.0"), x, stride)?;
        x = ctx.conv_bn_relu(&format!("backbone.block{b}.1"), x, 1)?;
        raw.push(x);
    }

    let mut levels = Vec::with_capacity(NUM_LEVELS);
    for (n, r) in raw.into_iter().enumerate() {
        let features = ctx.conv(&format!("backbone.reduce{n}"), r, 1, 0)?;
        levels.push(FeatureMap {
            level: n,
            stride: LEVEL_STRIDES[n],
            features,
        });
    }
    Ok(FeaturePyramid {
        levels,
        image_size: (h, w),
    })
}
