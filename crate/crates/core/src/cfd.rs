//! Cross-layer feature distribution: re-derives a pyramid from the aggregated
//! feature by average pooling at per-level rates followed by a 3x3 conv, BN
//! and ReLU per level.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{FeatureMap, LEVEL_CHANNELS, LEVEL_STRIDES, NUM_LEVELS};
use crate::cfa::DESCRIPTOR_LEN;
use crate::error::{Error, Result};
use crate::params::{init_conv_bn_relu, Ctx, Initializer};

/// Pooling rate applied to `F` (stride 4) to reach each level's stride.
pub const CFD_RATES: [usize; NUM_LEVELS] = [1, 1, 2, 4, 8];

/// Which levels receive a distributed feature. Always non-empty and ascending.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct CfdConfig {
    active_levels: Vec<usize>,
}

impl CfdConfig {
    pub fn new(levels: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut active: Vec<usize> = levels.into_iter().collect();
        active.sort_unstable();
        active.dedup();
        if active.is_empty() {
            return Err(Error::Config(
                "cfd levels must be a non-empty subset of 0..=4".into(),
            ));
        }
        if let Some(&bad) = active.iter().find(|&&n| n >= NUM_LEVELS) {
            return Err(Error::Config(format!("cfd level {bad} out of range 0..=4")));
        }
        Ok(Self {
            active_levels: active,
        })
    }

    pub fn all() -> Self {
        Self {
            active_levels: (0..NUM_LEVELS).collect(),
        }
    }

    pub fn active_levels(&self) -> &[usize] {
        &self.active_levels
    }

    /// The settings compared in the distribution ablation: `{0}`, `{0,1}`, … `{0..4}`.
    pub fn ablation_rows() -> Vec<CfdConfig> {
        (1..=NUM_LEVELS)
            .map(|k| CfdConfig {
                active_levels: (0..k).collect(),
            })
            .collect()
    }
}

impl Default for CfdConfig {
    fn default() -> Self {
        Self::all()
    }
}

impl TryFrom<Vec<usize>> for CfdConfig {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CfdConfig> for Vec<usize> {
    fn from(c: CfdConfig) -> Self {
        c.active_levels
    }
}

impl FromStr for CfdConfig {
    type Err = Error;

    /// Parses a comma-separated list such as `"0,1,2,3,4"`.
    fn from_str(s: &str) -> Result<Self> {
        let levels = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("invalid cfd level `{}`", p.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }
}

impl fmt::Display for CfdConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.active_levels.iter().map(|n| n.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

pub fn init_cfd(init: &mut Initializer<'_>, config: &CfdConfig) {
    for &n in config.active_levels() {
        init_conv_bn_relu(
            init,
            &format!("cfd.level{n}"),
            LEVEL_CHANNELS[n],
            DESCRIPTOR_LEN,
        );
    }
}

/// Distributes `F: [960, H/4, W/4]` to every active level.
pub fn distribute(
    ctx: &mut Ctx<'_>,
    f: Var,
    config: &CfdConfig,
) -> Result<BTreeMap<usize, FeatureMap>> {
    let shape = ctx.tape.shape(f).to_vec();
    if shape.len() != 3 || shape[0] != DESCRIPTOR_LEN {
        return Err(Error::ShapeMismatch {
            op: "distribute",
            lhs: shape,
            rhs: vec![DESCRIPTOR_LEN],
        });
    }
    let mut out = BTreeMap::new();
    for &n in config.active_levels() {
        let rate = CFD_RATES[n];
        // rate-1 levels read F itself
        let pooled = if rate == 1 {
            f
        } else {
            ctx.tape.avg_pool2d(f, rate)?
        };
        let features = ctx.conv_bn_relu(&format!("cfd.level{n}"), pooled, 1)?;
        out.insert(
            n,
            FeatureMap {
                level: n,
                stride: LEVEL_STRIDES[n],
                features,
            },
        );
    }
    Ok(out)
}
