//! Ways of injecting edge-branch decoder features into the content decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Concat,
    Add,
    Attentive,
}

/// Weight and bias of the convolution used at a fusion site.
#[derive(Clone, Copy, Debug)]
pub struct FuseParams {
    pub weight: Var,
    pub bias: Var,
}

pub(crate) fn check_spatial<T: Real>(tape: &Tape<T>, x_e: Var, x_c: Var) -> Result<()> {
    let (se, sc) = (tape.shape(x_e), tape.shape(x_c));
    if se.len() != 4 || sc.len() != 4 {
        return Err(Error::dim(format!("fusion needs 4-D features, got {se:?} and {sc:?}")));
    }
    if se[0] != sc[0] {
        return Err(Error::dim(format!("fusion batch axis: {} vs {}", se[0], sc[0])));
    }
    if se[2..] != sc[2..] {
        return Err(Error::dim(format!(
            "fusion spatial axes: edge feature {}x{} vs content feature {}x{}",
            se[2], se[3], sc[2], sc[3]
        )));
    }
    Ok(())
}

fn same_padding<T: Real>(tape: &Tape<T>, weight: Var) -> usize {
    tape.shape(weight)[2] / 2
}

/// `σ(g(x_E))`: single-channel spatial mask from an edge feature.
pub fn attention_mask<T: Real>(tape: &mut Tape<T>, x_e: Var, g: FuseParams) -> Result<Var> {
    if tape.shape(g.weight).first() != Some(&1) {
        return Err(Error::dim(format!(
            "attention mapping must have 1 output channel, weight is {:?}",
            tape.shape(g.weight)
        )));
    }
    let pad = same_padding(tape, g.weight);
    let logits = tape.conv2d(x_e, g.weight, g.bias, 1, pad)?;
    Ok(tape.sigmoid(logits))
}

/// `σ(g(x_E)) ⊗ x_C`, the mask broadcast over every content channel.
pub fn attentive_fuse<T: Real>(tape: &mut Tape<T>, x_e: Var, x_c: Var, g: FuseParams) -> Result<Var> {
    check_spatial(tape, x_e, x_c)?;
    let mask = attention_mask(tape, x_e, g)?;
    tape.mul(mask, x_c)
}

/// Fuses `x_e` into `x_c`; the result always has `x_c`'s shape.
///
/// * `None`: `x_c` unchanged.
/// * `Concat`: 1×1 projection of `[x_c, x_e]` back to `x_c`'s channels.
/// * `Add`: `x_c` plus a 1×1 projection of `x_e`.
/// * `Attentive`: see [`attentive_fuse`].
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    mode: FusionMode,
    x_e: Option<Var>,
    x_c: Var,
    params: Option<FuseParams>,
) -> Result<Var> {
    if mode == FusionMode::None {
        return Ok(x_c);
    }
    let x_e = x_e.ok_or_else(|| Error::Contract(format!("{mode:?} fusion needs an edge feature")))?;
    let p = params.ok_or_else(|| Error::Contract(format!("{mode:?} fusion needs mapping parameters")))?;
    check_spatial(tape, x_e, x_c)?;
    match mode {
        FusionMode::None => unreachable!(),
        FusionMode::Attentive => attentive_fuse(tape, x_e, x_c, p),
        FusionMode::Concat => {
            let cat = tape.concat_channels(x_c, x_e)?;
            let pad = same_padding(tape, p.weight);
            tape.conv2d(cat, p.weight, p.bias, 1, pad)
        }
        FusionMode::Add => {
            let pad = same_padding(tape, p.weight);
            let proj = tape.conv2d(x_e, p.weight, p.bias, 1, pad)?;
            tape.add(x_c, proj)
        }
    }
}
