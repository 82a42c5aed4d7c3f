//! Cross-layer feature aggregation.
//!
//! All five levels are squeezed by global average pooling and concatenated
//! into one descriptor `z` (960 values). A two-layer gate maps `z` to one
//! scalar weight per level, each level is scaled by its weight, and the
//! scaled levels are brought to stride 4 and concatenated into the global
//! feature `F`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{FeatureMap, FeaturePyramid, LEVEL_CHANNELS, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::params::{Ctx, Initializer};

/// Total descriptor length `Σ d_n`.
pub const DESCRIPTOR_LEN: usize = 960;
/// Hidden width of the collaborative gate.
pub const GATE_HIDDEN: usize = 128;

/// Reweighting strategy used before aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CfaVariant {
    /// (A) raw levels concatenated.
    #[serde(rename = "A")]
    NoReweighting,
    /// (B) each level scaled by the mean of its own GAP vector.
    #[serde(rename = "B")]
    GapReweighting,
    /// (C) per-level GAP → FC → ReLU → FC gate, computed independently.
    #[serde(rename = "C")]
    Independent,
    /// (D) one gate over the joint descriptor of all levels.
    #[serde(rename = "D")]
    Collaborative,
}

impl CfaVariant {
    pub const ALL: [CfaVariant; 4] = [
        CfaVariant::NoReweighting,
        CfaVariant::GapReweighting,
        CfaVariant::Independent,
        CfaVariant::Collaborative,
    ];

    pub fn letter(self) -> char {
        match self {
            CfaVariant::NoReweighting => 'A',
            CfaVariant::GapReweighting => 'B',
            CfaVariant::Independent => 'C',
            CfaVariant::Collaborative => 'D',
        }
    }
}

impl fmt::Display for CfaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for CfaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(CfaVariant::NoReweighting),
            "B" | "b" => Ok(CfaVariant::GapReweighting),
            "C" | "c" => Ok(CfaVariant::Independent),
            "D" | "d" => Ok(CfaVariant::Collaborative),
            other => Err(Error::Config(format!(
                "cfa variant must be one of A, B, C, D, got `{other}`"
            ))),
        }
    }
}

/// The concatenated squeeze `z` plus the offset of each level's slice.
#[derive(Clone, Debug)]
pub struct GlobalDescriptor {
    pub z: Var,
    pub offsets: [usize; NUM_LEVELS + 1],
}

/// One weight per level, `psi[n]` scaling level `n`.
#[derive(Clone, Copy, Debug)]
pub struct FusionWeights {
    pub psi: Var,
}

#[derive(Clone, Debug)]
pub struct CfaOutput {
    pub f: Var,
    /// The collaborative weight vector; only variant (D) produces one.
    pub psi: Option<Var>,
    pub reweighted: FeaturePyramid,
}

pub fn descriptor_offsets() -> [usize; NUM_LEVELS + 1] {
    let mut offsets = [0; NUM_LEVELS + 1];
    for n in 0..NUM_LEVELS {
        offsets[n + 1] = offsets[n] + LEVEL_CHANNELS[n];
    }
    offsets
}

/// Hidden width of the per-level gate in variant (C).
pub fn independent_hidden(channels: usize) -> usize {
    (channels / 4).min(GATE_HIDDEN)
}

pub fn init_cfa(init: &mut Initializer<'_>, variant: CfaVariant) {
    match variant {
        CfaVariant::NoReweighting | CfaVariant::GapReweighting => {}
        CfaVariant::Independent => {
            for (n, &d) in LEVEL_CHANNELS.iter().enumerate() {
                let hidden = independent_hidden(d);
                init.linear(&format!("cfa.level{n}.fc1"), d, hidden);
                init.linear(&format!("cfa.level{n}.fc2"), hidden, 1);
            }
        }
        CfaVariant::Collaborative => {
            init.linear("cfa.gate.fc1", DESCRIPTOR_LEN, GATE_HIDDEN);
            init.linear("cfa.gate.fc2", GATE_HIDDEN, NUM_LEVELS);
        }
    }
}

fn check_channels(tape: &Tape, pyramid: &FeaturePyramid) -> Result<()> {
    if pyramid.levels.len() != NUM_LEVELS {
        return Err(Error::Config(format!(
            "pyramid must have {NUM_LEVELS} levels, got {}",
            pyramid.levels.len()
        )));
    }
    for (n, level) in pyramid.levels.iter().enumerate() {
        let found = tape.shape(level.features).first().copied().unwrap_or(0);
        if found != LEVEL_CHANNELS[n] || level.level != n {
            return Err(Error::LevelChannels {
                level: n,
                expected: LEVEL_CHANNELS[n],
                found,
            });
        }
    }
    Ok(())
}

/// Global average pooling of every level, concatenated in level order.
pub fn squeeze_global(tape: &mut Tape, pyramid: &FeaturePyramid) -> Result<GlobalDescriptor> {
    check_channels(tape, pyramid)?;
    let mut pooled = Vec::with_capacity(NUM_LEVELS);
    for level in &pyramid.levels {
        let z = tape.global_avg_pool(level.features)?;
        let d = tape.shape(z)[0];
        // view each vector as [d, 1, 1] so the channel concat applies
        pooled.push(tape.reshape(z, &[d, 1, 1])?);
    }
    let cat = tape.concat_channels(&pooled)?;
    Ok(GlobalDescriptor {
        z: tape.reshape(cat, &[DESCRIPTOR_LEN])?,
        offsets: descriptor_offsets(),
    })
}

/// `Ψ = FC2(ReLU(FC1(z)))`, no output squashing.
pub fn gate_weights(ctx: &mut Ctx<'_>, descriptor: &GlobalDescriptor) -> Result<FusionWeights> {
    let h = ctx.linear("cfa.gate.fc1", descriptor.z)?;
    let h = ctx.tape.relu(h);
    let psi = ctx.linear("cfa.gate.fc2", h)?;
    Ok(FusionWeights { psi })
}

/// Scales each level by its own scalar node.
pub fn reweight_by(
    tape: &mut Tape,
    pyramid: &FeaturePyramid,
    scalars: &[Var],
) -> Result<FeaturePyramid> {
    if scalars.len() != pyramid.levels.len() {
        return Err(Error::Config(format!(
            "{} weights for {} levels",
            scalars.len(),
            pyramid.levels.len()
        )));
    }
    let mut levels = Vec::with_capacity(scalars.len());
    for (level, &s) in pyramid.levels.iter().zip(scalars) {
        levels.push(FeatureMap {
            features: tape.scale_by_scalar(level.features, s)?,
            ..*level
        });
    }
    Ok(FeaturePyramid {
        levels,
        image_size: pyramid.image_size,
    })
}

/// `X̃_n = X_n * Ψ_n`.
pub fn reweight(
    tape: &mut Tape,
    pyramid: &FeaturePyramid,
    weights: FusionWeights,
) -> Result<FeaturePyramid> {
    let len = tape.value(weights.psi).numel();
    if len != NUM_LEVELS {
        return Err(Error::ShapeMismatch {
            op: "reweight",
            lhs: vec![NUM_LEVELS],
            rhs: tape.shape(weights.psi).to_vec(),
        });
    }
    let scalars = (0..NUM_LEVELS)
        .map(|n| tape.index(weights.psi, n))
        .collect::<Result<Vec<_>>>()?;
    reweight_by(tape, pyramid, &scalars)
}

/// `F = X̃_0 ⊕ X̃_1 ⊕ UP(X̃_2) ⊕ UP(X̃_3) ⊕ UP(X̃_4)` at level-0 resolution.
pub fn aggregate(tape: &mut Tape, pyramid: &FeaturePyramid) -> Result<Var> {
    let (h0, w0) = pyramid.level_size(0);
    let mut parts = Vec::with_capacity(pyramid.levels.len());
    for level in &pyramid.levels {
        let shape = tape.shape(level.features);
        let v = if (shape[1], shape[2]) == (h0, w0) {
            level.features
        } else {
            tape.bilinear_upsample(level.features, h0, w0)?
        };
        parts.push(v);
    }
    tape.concat_channels(&parts)
}

pub fn run_cfa(
    ctx: &mut Ctx<'_>,
    pyramid: &FeaturePyramid,
    variant: CfaVariant,
) -> Result<CfaOutput> {
    check_channels(&ctx.tape, pyramid)?;
    let (reweighted, psi) = match variant {
        CfaVariant::NoReweighting => (pyramid.clone(), None),
        CfaVariant::GapReweighting => {
            let mut scalars = Vec::with_capacity(NUM_LEVELS);
            for level in &pyramid.levels {
                let z = ctx.tape.global_avg_pool(level.features)?;
                scalars.push(ctx.tape.mean(z));
            }
            (reweight_by(&mut ctx.tape, pyramid, &scalars)?, None)
        }
        CfaVariant::Independent => {
            let mut scalars = Vec::with_capacity(NUM_LEVELS);
            for level in &pyramid.levels {
                let n = level.level;
                let z = ctx.tape.global_avg_pool(level.features)?;
                let h = ctx.linear(&format!("cfa.level{n}.fc1"), z)?;
                let h = ctx.tape.relu(h);
                let s = ctx.linear(&format!("cfa.level{n}.fc2"), h)?;
                scalars.push(s);
            }
            (reweight_by(&mut ctx.tape, pyramid, &scalars)?, None)
        }
        CfaVariant::Collaborative => {
            let descriptor = squeeze_global(&mut ctx.tape, pyramid)?;
            let weights = gate_weights(ctx, &descriptor)?;
            (
                reweight(&mut ctx.tape, pyramid, weights)?,
                Some(weights.psi),
            )
        }
    };
    let f = aggregate(&mut ctx.tape, &reweighted)?;
    Ok(CfaOutput { f, psi, reweighted })
}
