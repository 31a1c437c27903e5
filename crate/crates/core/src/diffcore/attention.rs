use super::element::Element;
use super::tape::{Tape, Var};
use crate::error::{dim_err, Error, Result};

/// Handles to the weights of one self-attention layer with a fused QKV
/// projection (`qkv_weight` is `[3D, D]`).
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub proj_weight: Var,
    pub proj_bias: Var,
}

/// Multi-head self-attention over `x` of shape `[N, D]` or `[B, N, D]`.
pub fn multi_head_attention<E: Element>(
    tape: &mut Tape<'_, E>,
    x: Var,
    heads: usize,
    weights: &AttentionWeights,
) -> Result<Var> {
    multi_head_attention_with_weights(tape, x, heads, weights).map(|(y, _)| y)
}

/// Like [`multi_head_attention`], also returning the attention matrix
/// `[B, heads, N, N]` (rows sum to one).
pub fn multi_head_attention_with_weights<E: Element>(
    tape: &mut Tape<'_, E>,
    x: Var,
    heads: usize,
    weights: &AttentionWeights,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let (batch, n, d) = match shape.as_slice() {
        [n, d] => (1, *n, *d),
        [b, n, d] => (*b, *n, *d),
        _ => {
            return Err(dim_err!(
                "attention expects [N, D] or [B, N, D], got {shape:?}"
            ))
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "embedding dim {d} is not divisible by {heads} heads"
        )));
    }
    let head_dim = d / heads;

    let qkv = tape.linear(x, weights.qkv_weight, Some(weights.qkv_bias))?;
    let qkv = tape.reshape(qkv, [batch, n, 3, heads, head_dim])?;
    // -> [3, B, heads, N, head_dim]
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let q = tape.select(qkv, 0)?;
    let k = tape.select(qkv, 1)?;
    let v = tape.select(qkv, 2)?;

    let scores = tape.matmul(q, k, true)?;
    let scores = tape.scale(scores, E::from_f64_lossy(1.0 / (head_dim as f64).sqrt()))?;
    let attn = tape.softmax(scores)?;
    let ctx = tape.matmul(attn, v, false)?;
    // [B, heads, N, hd] -> [B, N, heads, hd] -> [B, N, D]
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, shape.clone())?;
    let out = tape.linear(ctx, weights.proj_weight, Some(weights.proj_bias))?;
    Ok((out, attn))
}
