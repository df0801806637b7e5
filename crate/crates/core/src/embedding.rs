//! Value embeddings and the patch procedure.
//!
//! The dimension-invariant (DI) embedding lifts a `1 x T x D` series to
//! `c x T x D` with a 3x1 convolution over time, touching neither the time
//! length nor the variable count, so each output channel of variable `d`
//! depends only on input column `d`. Spatial and temporal embeddings are
//! the ablation variants: the former mixes variables at each time step,
//! the latter projects whole patches of one variable.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    Di,
    Spatial,
    Temporal,
}

impl EmbedMode {
    pub fn name(self) -> &'static str {
        match self {
            EmbedMode::Di => "DI",
            EmbedMode::Spatial => "spatial",
            EmbedMode::Temporal => "temporal",
        }
    }
}

/// Weights for one embedding site, gated by `mode`.
#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub mode: EmbedMode,
    /// `[c, 1, 3, 1]` kernel, DI mode.
    pub di_kernel: Option<Var>,
    /// Per-channel bias of length `c`, DI mode.
    pub di_bias: Option<Var>,
    /// `[D, c]` projection, spatial mode.
    pub spatial_weights: Option<Var>,
    /// `[p, c']` per-patch projection, temporal mode.
    pub temporal_weights: Option<Var>,
}

impl EmbeddingParams {
    pub fn di(kernel: Var, bias: Var) -> Self {
        EmbeddingParams {
            mode: EmbedMode::Di,
            di_kernel: Some(kernel),
            di_bias: Some(bias),
            spatial_weights: None,
            temporal_weights: None,
        }
    }

    pub fn spatial(weights: Var) -> Self {
        EmbeddingParams {
            mode: EmbedMode::Spatial,
            di_kernel: None,
            di_bias: None,
            spatial_weights: Some(weights),
            temporal_weights: None,
        }
    }

    pub fn temporal(weights: Var) -> Self {
        EmbeddingParams {
            mode: EmbedMode::Temporal,
            di_kernel: None,
            di_bias: None,
            spatial_weights: None,
            temporal_weights: Some(weights),
        }
    }

    fn expect_mode(&self, expected: EmbedMode) -> Result<(), ModelError> {
        if self.mode != expected {
            return Err(ModelError::WrongMode {
                expected: expected.name(),
                actual: self.mode.name(),
            });
        }
        Ok(())
    }
}

/// A `c x N x p x D` latent block produced by [`patch`].
#[derive(Debug, Clone, Copy)]
pub struct PatchedEmbedding {
    pub values: Var,
    pub patch_size: usize,
    pub n_patches: usize,
    /// Zero time steps prepended so the length divides the patch size.
    pub pad_len: usize,
}

/// DI embedding: `1 x T x D` -> `c x T x D` via a 3x1 convolution over the
/// time axis (zero padding 1) plus a per-channel bias.
pub fn di_embed(
    tape: &mut Tape,
    params: &EmbeddingParams,
    x: Var,
) -> Result<Var, ModelError> {
    params.expect_mode(EmbedMode::Di)?;
    let kernel = params.di_kernel.expect("DI kernel present");
    let bias = params.di_bias.expect("DI bias present");
    let ks = tape.shape(kernel).to_vec();
    if ks.len() != 4 || ks[1] != 1 || ks[2] != 3 || ks[3] != 1 {
        return Err(ModelError::BadDiKernel(ks));
    }
    let y = tape.conv2d(x, kernel, (1, 0))?;
    let c = ks[0];
    let b = tape.reshape(bias, vec![c, 1, 1])?;
    let b = tape.broadcast_to(b, &tape.shape(y).to_vec())?;
    Ok(tape.add(y, b)?)
}

/// Split `c x T x D` into non-overlapping patches of `p` time steps,
/// left-padding with zero steps when `p` does not divide `T`. The result
/// is `c x N x p x D` with `N = ceil(T/p)`.
pub fn patch(tape: &mut Tape, x: Var, p: usize) -> Result<PatchedEmbedding, ModelError> {
    let shape = tape.shape(x).to_vec();
    let (c, t, d) = (shape[0], shape[1], shape[2]);
    let p = p.max(1);
    let n = t.div_ceil(p);
    let pad_len = n * p - t;
    let padded = if pad_len == 0 {
        x
    } else {
        let zeros = tape.constant(Tensor::zeros(&[c, pad_len, d]));
        tape.concat(&[zeros, x], 1)?
    };
    let values = tape.reshape(padded, vec![c, n, p, d])?;
    Ok(PatchedEmbedding {
        values,
        patch_size: p,
        n_patches: n,
        pad_len,
    })
}

/// Reassemble patches into the padded sequence `c x (N*p) x D`.
pub fn inverse_patch(tape: &mut Tape, e: &PatchedEmbedding) -> Result<Var, ModelError> {
    let shape = tape.shape(e.values).to_vec();
    let (c, n, p, d) = (shape[0], shape[1], shape[2], shape[3]);
    Ok(tape.reshape(e.values, vec![c, n * p, d])?)
}

/// Spatial embedding: project the `D` variables of each time step through
/// `[D, c]` weights, preserving the temporal dimension (`I x D -> I x c`).
pub fn spatial_embed(
    tape: &mut Tape,
    params: &EmbeddingParams,
    x: Var,
) -> Result<Var, ModelError> {
    params.expect_mode(EmbedMode::Spatial)?;
    let w = params.spatial_weights.expect("spatial weights present");
    Ok(tape.matmul(x, w)?)
}

/// Temporal embedding: left-pad `I x D` to a multiple of `p`, then project
/// each patch of `p` steps of one variable through `[p, c']` weights,
/// preserving the spatial dimension (`-> N x c' x D`).
pub fn temporal_embed(
    tape: &mut Tape,
    params: &EmbeddingParams,
    x: Var,
    p: usize,
) -> Result<Var, ModelError> {
    params.expect_mode(EmbedMode::Temporal)?;
    let w = params.temporal_weights.expect("temporal weights present");
    let shape = tape.shape(x).to_vec();
    let (t, d) = (shape[0], shape[1]);
    let cw = tape.shape(w)[1];
    let n = t.div_ceil(p);
    let pad_len = n * p - t;
    let padded = if pad_len == 0 {
        x
    } else {
        let zeros = tape.constant(Tensor::zeros(&[pad_len, d]));
        tape.concat(&[zeros, x], 0)?
    };
    let patches = tape.reshape(padded, vec![n, p, d])?;
    let by_var = tape.permute(patches, &[2, 0, 1])?; // D x N x p
    let wb = tape.broadcast_to(w, &[d, p, cw])?;
    let projected = tape.matmul(by_var, wb)?; // D x N x c'
    Ok(tape.permute(projected, &[1, 2, 0])?) // N x c' x D
}
