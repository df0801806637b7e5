//! Canonical transformer encoder/decoder blocks on patch-token sequences.
//!
//! Tokens are rows of an `N x d_model` matrix. Attention projections are
//! stored as full `d_model x d_model` matrices whose column blocks are the
//! per-head projections; feed-forward weights carry no bias, and each
//! sublayer is residual + layer norm.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ModelError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Multi-head attention projections. `wq/wk/wv/wo` are `d_model x d_model`;
/// head `h` owns columns `[h*d_k, (h+1)*d_k)`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

/// One encoder or decoder block. `cross` and `norm3` are present for
/// decoder blocks only.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub cross: Option<AttentionParams>,
    pub ffn_w1: Var,
    pub ffn_w2: Var,
    pub norm1: (Var, Var),
    pub norm2: (Var, Var),
    pub norm3: Option<(Var, Var)>,
}

/// Inverted dropout; absent in evaluation.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn apply_dropout(tape: &mut Tape, x: Var, drop: &mut Option<Dropout>) -> Var {
    let Some(d) = drop else { return x };
    if d.rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - d.rate;
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if d.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask).expect("sized"));
    tape.mul(x, m).expect("same shape")
}

/// `softmax(Q Kᵀ / sqrt(d)) V` with row-wise softmax and no causal mask.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var, ModelError> {
    let d = tape.shape(q)[1];
    let kt = tape.permute(k, &[1, 0])?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(scaled, 1)?;
    Ok(tape.matmul(weights, v)?)
}

/// Apply a 2-D weight matrix to the last axis of a (possibly batched)
/// token tensor.
fn linear(tape: &mut Tape, x: Var, w: Var) -> Result<Var, ModelError> {
    let shape = tape.shape(x).to_vec();
    let width = *shape.last().unwrap();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = tape.reshape(x, vec![rows, width])?;
    let out = tape.matmul(flat, w)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = tape.shape(w)[1];
    Ok(tape.reshape(out, out_shape)?)
}

/// Canonical multi-head attention: per-head projections of the query and
/// key/value sequences, per-head scaled dot-product attention, concat,
/// output projection. Token tensors may carry leading batch dimensions
/// (e.g. the per-variable tracks), which stay strictly independent.
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    params: &AttentionParams,
    drop: &mut Option<Dropout>,
) -> Result<Var, ModelError> {
    let q_shape = tape.shape(x_q).to_vec();
    let kv_shape = tape.shape(x_kv).to_vec();
    let d_model = *q_shape.last().unwrap();
    if *kv_shape.last().unwrap() != d_model
        || q_shape[..q_shape.len() - 2] != kv_shape[..kv_shape.len() - 2]
    {
        return Err(ModelError::Tensor(crate::TensorError::ShapeMismatch {
            op: "multi_head_attention",
            left: q_shape,
            right: kv_shape,
        }));
    }
    if params.heads == 0 || d_model % params.heads != 0 {
        return Err(ModelError::HeadsDivide {
            heads: params.heads,
            d_model,
        });
    }
    let heads = params.heads;
    let d_k = d_model / heads;
    let batch: usize = q_shape[..q_shape.len() - 2].iter().product();
    let n_q = q_shape[q_shape.len() - 2];
    let n_kv = kv_shape[kv_shape.len() - 2];

    let q = linear(tape, x_q, params.wq)?;
    let k = linear(tape, x_kv, params.wk)?;
    let v = linear(tape, x_kv, params.wv)?;
    // column block h of the projections is head h
    let q4 = tape.reshape(q, vec![batch, n_q, heads, d_k])?;
    let qh = tape.permute(q4, &[0, 2, 1, 3])?; // B x h x Nq x dk
    let k4 = tape.reshape(k, vec![batch, n_kv, heads, d_k])?;
    let kt = tape.permute(k4, &[0, 2, 3, 1])?; // B x h x dk x Nkv
    let v4 = tape.reshape(v, vec![batch, n_kv, heads, d_k])?;
    let vh = tape.permute(v4, &[0, 2, 1, 3])?; // B x h x Nkv x dk

    let scores = tape.matmul(qh, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax(scaled, 3)?;
    let weights = apply_dropout(tape, weights, drop);
    let ctx = tape.matmul(weights, vh)?; // B x h x Nq x dk
    let by_token = tape.permute(ctx, &[0, 2, 1, 3])?;
    let merged = tape.reshape(by_token, vec![batch * n_q, d_model])?;
    let out = tape.matmul(merged, params.wo)?;
    Ok(tape.reshape(out, q_shape)?)
}

fn feed_forward(
    tape: &mut Tape,
    x: Var,
    params: &BlockParams,
    drop: &mut Option<Dropout>,
) -> Result<Var, ModelError> {
    let h = linear(tape, x, params.ffn_w1)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, params.ffn_w2)?;
    Ok(apply_dropout(tape, h, drop))
}

fn residual_norm(
    tape: &mut Tape,
    x: Var,
    delta: Var,
    norm: (Var, Var),
) -> Result<Var, ModelError> {
    let summed = tape.add(x, delta)?;
    let width = *tape.shape(summed).last().unwrap();
    Ok(tape.layer_norm(summed, width, norm.0, norm.1, LAYER_NORM_EPS)?)
}

/// `LayerNorm(x + SelfAttn(x))` then `LayerNorm(· + FFN(·))`.
pub fn encoder_block(
    tape: &mut Tape,
    x: Var,
    params: &BlockParams,
    drop: &mut Option<Dropout>,
) -> Result<Var, ModelError> {
    let attn = multi_head_attention(tape, x, x, &params.attn, drop)?;
    let x1 = residual_norm(tape, x, attn, params.norm1)?;
    let ffn = feed_forward(tape, x1, params, drop)?;
    residual_norm(tape, x1, ffn, params.norm2)
}

/// Self-attention, cross-attention against `memory` (queries from the
/// running sequence, keys/values from memory), then the feed-forward
/// network; every sublayer residual + layer norm. No causal mask: all
/// horizon placeholders are generated at once.
pub fn decoder_block(
    tape: &mut Tape,
    x: Var,
    memory: Var,
    params: &BlockParams,
    drop: &mut Option<Dropout>,
) -> Result<Var, ModelError> {
    let cross = params.cross.as_ref().expect("decoder block has cross attention");
    let norm3 = params.norm3.expect("decoder block has third norm");
    let self_attn = multi_head_attention(tape, x, x, &params.attn, drop)?;
    let x1 = residual_norm(tape, x, self_attn, params.norm1)?;
    let cross_attn = multi_head_attention(tape, x1, memory, cross, drop)?;
    let x2 = residual_norm(tape, x1, cross_attn, params.norm2)?;
    let ffn = feed_forward(tape, x2, params, drop)?;
    residual_norm(tape, x2, ffn, norm3)
}

/// Add a learnable `c x N x p` position embedding to every variable slice
/// of a `c x N x p x D` block.
pub fn add_position(tape: &mut Tape, x: Var, pos: Var) -> Result<Var, ModelError> {
    let xs = tape.shape(x).to_vec();
    let ps = tape.shape(pos).to_vec();
    if xs.len() != 4 || ps.len() != 3 || xs[..3] != ps[..] {
        return Err(ModelError::Tensor(crate::TensorError::ShapeMismatch {
            op: "add_position",
            left: xs,
            right: ps,
        }));
    }
    let p4 = tape.reshape(pos, vec![ps[0], ps[1], ps[2], 1])?;
    let pb = tape.broadcast_to(p4, &xs)?;
    Ok(tape.add(x, pb)?)
}
