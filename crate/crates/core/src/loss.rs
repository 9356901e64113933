//! Training objectives: plain MSE, the edge-weighted content loss and the
//! edge-branch loss, combined per ablation variant.
//!
//! All losses are non-negative means over every pixel and channel; a
//! single-channel weight map is broadcast over colour channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 4.0,
            lambda_e: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0) || !(self.lambda_e >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda_c={} lambda_e={}",
                self.lambda_c, self.lambda_e
            )));
        }
        Ok(())
    }
}

fn check_edge_map<T: Real>(edges: &Tensor<T>, like: &[usize]) -> Result<()> {
    let s = edges.shape();
    if s.len() != 4 || like.len() != 4 || s[1] != 1 || s[0] != like[0] || s[2..] != like[2..] {
        return Err(Error::dim(format!(
            "edge map {s:?} must be single-channel with the extents of {like:?}"
        )));
    }
    if edges.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(Error::Contract("edge map values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Mean of `weights ⊙ (pred − target)²`; `weights` may be single-channel.
fn weighted_squared_error<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, weights: Option<Tensor<T>>) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    let weighted = match weights {
        Some(w) => {
            let w = tape.constant(w);
            tape.mul(w, sq)?
        }
        None => sq,
    };
    tape.mean(weighted)
}

/// `(1/n) Σ (I_D − I_S)²`.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    weighted_squared_error(tape, pred, target, None)
}

/// `(1/n) Σ M_S · (I_D − I_S)²`, the sharp edge map acting as a per-pixel weight.
pub fn edge_guided_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, sharp_edges: &Tensor<T>) -> Result<Var> {
    check_edge_map(sharp_edges, tape.shape(pred))?;
    weighted_squared_error(tape, pred, target, Some(sharp_edges.clone()))
}

fn affine_weights<T: Real>(edges: &Tensor<T>, lambda: f64) -> Tensor<T> {
    let l = T::from_f64(lambda);
    let data = edges.data().iter().map(|&m| l * m + T::one()).collect();
    Tensor::from_parts(edges.shape().to_vec(), data)
}

/// `(1/n) Σ (λ_C · M_S + 1)(I_D − I_S)²`, i.e. `λ_C · edge_guided + mse`.
pub fn cdn_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, sharp_edges: &Tensor<T>, lambda_c: f64) -> Result<Var> {
    check_edge_map(sharp_edges, tape.shape(pred))?;
    weighted_squared_error(tape, pred, target, Some(affine_weights(sharp_edges, lambda_c)))
}

/// `(1/n) Σ (λ_E · M_S + 1)(M_E − M_S)²`.
pub fn een_loss<T: Real>(tape: &mut Tape<T>, enhanced: Var, sharp_edges: &Tensor<T>, lambda_e: f64) -> Result<Var> {
    if tape.shape(enhanced) != sharp_edges.shape() {
        return Err(Error::dim(format!(
            "enhanced edge map {:?} vs sharp edge map {:?}",
            tape.shape(enhanced),
            sharp_edges.shape()
        )));
    }
    check_edge_map(sharp_edges, sharp_edges.shape())?;
    let target = tape.constant(sharp_edges.clone());
    weighted_squared_error(tape, enhanced, target, Some(affine_weights(sharp_edges, lambda_e)))
}

/// Loss handles for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Content term: `cdn_loss` for edge-guided variants, `mse_loss` otherwise.
    pub content: Var,
    pub edge_branch: Option<Var>,
}

/// Objective for `variant`:
///
/// | variant                      | objective          |
/// |------------------------------|--------------------|
/// | phi                          | mse                |
/// | phi_eal                      | cdn                |
/// | phi_cat, phi_add, phi_att    | mse + een          |
/// | epan                         | cdn + een          |
///
/// `enhanced` must be present exactly when the variant has an edge branch.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    enhanced: Option<Var>,
    sharp_edges: &Tensor<T>,
    weights: &LossWeights,
    variant: Variant,
) -> Result<LossTerms> {
    weights.validate()?;
    if enhanced.is_some() != variant.has_edge_branch() {
        return Err(Error::Contract(format!(
            "variant {variant} {} an enhanced edge map",
            if variant.has_edge_branch() { "requires" } else { "takes no" }
        )));
    }
    let content = if variant.uses_edge_guided_loss() {
        cdn_loss(tape, pred, target, sharp_edges, weights.lambda_c)?
    } else {
        mse_loss(tape, pred, target)?
    };
    let edge_branch = enhanced
        .map(|e| een_loss(tape, e, sharp_edges, weights.lambda_e))
        .transpose()?;
    let total = match edge_branch {
        Some(e) => tape.add(content, e)?,
        None => content,
    };
    Ok(LossTerms {
        total,
        content,
        edge_branch,
    })
}
