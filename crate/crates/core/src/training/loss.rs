//! Balanced binary cross entropy and the joint two-map objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// How the foreground weight `β` is derived from the mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaConvention {
    /// `β = |Y+| / |Y-|`, clamped to `[0, 1]`.
    #[default]
    Ratio,
    /// `β = |Y-| / |Y|`, the usual edge-detection weighting.
    Hed,
}

/// Counts foreground (`1`) and background (`0`) pixels, rejecting anything non-binary.
pub fn count_labels(mask: &Tensor) -> Result<(usize, usize)> {
    let mut fg = 0;
    for &v in mask.data() {
        if v == 1.0 {
            fg += 1;
        } else if v != 0.0 {
            return Err(Error::InvalidTensor(format!(
                "mask value {v} is not binary"
            )));
        }
    }
    Ok((fg, mask.numel() - fg))
}

/// Foreground weight `β`. An all-foreground mask gives 1, an all-background mask 0.
pub fn balance_weight(mask: &Tensor, convention: BetaConvention) -> Result<f64> {
    let (fg, bg) = count_labels(mask)?;
    if bg == 0 {
        return Ok(1.0);
    }
    if fg == 0 {
        return Ok(0.0);
    }
    Ok(match convention {
        BetaConvention::Ratio => (fg as f64 / bg as f64).clamp(0.0, 1.0),
        BetaConvention::Hed => bg as f64 / (fg + bg) as f64,
    })
}

/// Loss value without building a graph.
pub fn balanced_bce_value(s: &Tensor, mask: &Tensor, convention: BetaConvention) -> Result<f64> {
    let beta = balance_weight(mask, convention)?;
    ops::weighted_bce(s, mask, beta)
}

pub fn balanced_bce(
    tape: &mut Tape,
    s: Var,
    mask: &Tensor,
    convention: BetaConvention,
) -> Result<Var> {
    let beta = balance_weight(mask, convention)?;
    tape.weighted_bce(s, mask, beta)
}

#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub global: Var,
    pub local: Var,
}

/// Unweighted sum of the balanced BCE of both maps against the same mask.
pub fn joint_loss(
    tape: &mut Tape,
    s_global: Var,
    s_local: Var,
    mask: &Tensor,
    convention: BetaConvention,
) -> Result<JointLoss> {
    let global = balanced_bce(tape, s_global, mask, convention)?;
    let local = balanced_bce(tape, s_local, mask, convention)?;
    let total = tape.add(global, local)?;
    Ok(JointLoss {
        total,
        global,
        local,
    })
}
