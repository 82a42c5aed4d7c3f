//! FPN-style top-down fusion and the two readout heads.

use std::collections::BTreeMap;

use crate::autograd::Var;
use crate::backbone::{FeatureMap, LEVEL_CHANNELS};
use crate::cfa::DESCRIPTOR_LEN;
use crate::error::{Error, Result};
use crate::params::{init_conv_bn_relu, Ctx, Initializer};

/// Hidden width of the global readout conv.
pub const GLOBAL_HEAD_CHANNELS: usize = 128;

/// Result of the top-down pass.
#[derive(Clone, Copy, Debug)]
pub struct TopDown {
    /// Stride-4 local representation `L` with 64 channels.
    pub l: Var,
    /// Number of deeper-into-shallower merge steps.
    pub merges: usize,
    /// Number of those merges that needed a resolution change.
    pub upsamples: usize,
}

/// The merge targets for a set of active levels, deepest first.
///
/// The chain always ends at level 0 so `L` sits at stride 4 with 64 channels.
fn merge_targets(active: &[usize]) -> Vec<(usize, usize)> {
    let mut targets: Vec<usize> = active.iter().rev().skip(1).copied().collect();
    let deepest = *active.last().expect("non-empty");
    if active[0] != 0 {
        targets.push(0);
    }
    let mut prev = deepest;
    targets
        .into_iter()
        .map(|t| {
            let pair = (prev, t);
            prev = t;
            pair
        })
        .collect()
}

pub fn init_decoder(init: &mut Initializer<'_>, active: &[usize]) {
    let deepest = *active.last().expect("non-empty");
    let d = LEVEL_CHANNELS[deepest];
    init.conv("decoder.top.lateral", d, d, 1, true);
    init_conv_bn_relu(init, "decoder.top.smooth", d, d);
    for (from, to) in merge_targets(active) {
        init.conv(
            &format!("decoder.merge{to}.lateral"),
            LEVEL_CHANNELS[to],
            LEVEL_CHANNELS[from],
            1,
            true,
        );
        init_conv_bn_relu(
            init,
            &format!("decoder.merge{to}.smooth"),
            LEVEL_CHANNELS[to],
            LEVEL_CHANNELS[to],
        );
    }
}

pub fn init_heads(init: &mut Initializer<'_>) {
    init.conv(
        "head.global.conv",
        GLOBAL_HEAD_CHANNELS,
        DESCRIPTOR_LEN,
        3,
        false,
    );
    init.batch_norm("head.global.bn", GLOBAL_HEAD_CHANNELS);
    init.conv("head.global.out", 1, GLOBAL_HEAD_CHANNELS, 1, true);
    init.conv("head.local.out", 1, LEVEL_CHANNELS[0], 1, true);
}

/// Merges levels from the deepest active one up to stride 4.
///
/// Each step projects the running feature to the shallower level's width
/// with a 1x1 conv, upsamples it if needed, adds the shallower level and
/// smooths with 3x3 conv + BN + ReLU.
pub fn fuse_topdown(
    ctx: &mut Ctx<'_>,
    levels: &BTreeMap<usize, FeatureMap>,
    image_size: (usize, usize),
) -> Result<TopDown> {
    let active: Vec<usize> = levels.keys().copied().collect();
    let Some(&deepest) = active.last() else {
        return Err(Error::EmptyLevels);
    };
    let top = ctx.conv("decoder.top.lateral", levels[&deepest].features, 1, 0)?;
    let mut p = ctx.conv_bn_relu("decoder.top.smooth", top, 1)?;

    let (mut merges, mut upsamples) = (0, 0);
    for (_, to) in merge_targets(&active) {
        let lateral = ctx.conv(&format!("decoder.merge{to}.lateral"), p, 1, 0)?;
        let (th, tw) = crate::backbone::level_size(image_size, to);
        let shape = ctx.tape.shape(lateral);
        let lateral = if (shape[1], shape[2]) == (th, tw) {
            lateral
        } else {
            upsamples += 1;
            ctx.tape.bilinear_upsample(lateral, th, tw)?
        };
        let merged = match levels.get(&to) {
            Some(level) => ctx.tape.add(lateral, level.features)?,
            None => lateral,
        };
        p = ctx.conv_bn_relu(&format!("decoder.merge{to}.smooth"), merged, 1)?;
        merges += 1;
    }
    Ok(TopDown {
        l: p,
        merges,
        upsamples,
    })
}

/// `Conv3x3(128) → BN → ReLU → Conv1x1(1) → upsample(H, W) → sigmoid` on `F`.
pub fn predict_global(ctx: &mut Ctx<'_>, f: Var, image_size: (usize, usize)) -> Result<Var> {
    let x = ctx.conv("head.global.conv", f, 1, 1)?;
    let x = ctx.batch_norm("head.global.bn", x)?;
    let x = ctx.tape.relu(x);
    let x = ctx.conv("head.global.out", x, 1, 0)?;
    let x = ctx.tape.bilinear_upsample(x, image_size.0, image_size.1)?;
    Ok(ctx.tape.sigmoid(x))
}

/// `Conv1x1(1) → upsample(H, W) → sigmoid` on `L`.
pub fn predict_local(ctx: &mut Ctx<'_>, l: Var, image_size: (usize, usize)) -> Result<Var> {
    let x = ctx.conv("head.local.out", l, 1, 0)?;
    let x = ctx.tape.bilinear_upsample(x, image_size.0, image_size.1)?;
    Ok(ctx.tape.sigmoid(x))
}
