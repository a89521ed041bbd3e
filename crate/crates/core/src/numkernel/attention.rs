use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Projection weights of one multi-head self-attention block. Each matrix
/// is `[d × d]`, each bias `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'t> {
    pub query: Var<'t>,
    pub query_bias: Var<'t>,
    pub key: Var<'t>,
    pub key_bias: Var<'t>,
    pub value: Var<'t>,
    pub value_bias: Var<'t>,
    pub output: Var<'t>,
    pub output_bias: Var<'t>,
}

#[derive(Debug)]
pub struct AttentionOutput<'t> {
    /// `[l × d]`
    pub output: Var<'t>,
    /// Per-head `[l × l]` weights; each row sums to one.
    pub weights: Vec<Tensor>,
}

/// Scaled dot-product self-attention over the rows of `seq` (`[l × d]`),
/// split into `heads` heads of width `d / heads`, concatenated and passed
/// through the output projection.
pub fn multi_head_self_attention<'t>(
    seq: Var<'t>,
    params: &AttentionParams<'t>,
    heads: usize,
) -> Result<AttentionOutput<'t>> {
    let shape = seq.shape();
    if shape.len() != 2 {
        return Err(Error::Rank {
            op: "multi_head_self_attention",
            shape,
        });
    }
    let d = shape[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} attention heads"
        )));
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = seq.matmul(params.query)?.add_row(params.query_bias)?;
    let k = seq.matmul(params.key)?.add_row(params.key_bias)?;
    let v = seq.matmul(params.value)?.add_row(params.value_bias)?;

    let mut per_head = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.slice_cols(lo, hi)?;
        let kh = k.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let attn = qh.matmul(kh.transpose()?)?.scale(scale).softmax()?;
        weights.push(attn.value());
        per_head.push(attn.matmul(vh)?);
    }
    let joined = seq.tape().concat(&per_head)?;
    let output = joined.matmul(params.output)?.add_row(params.output_bias)?;
    Ok(AttentionOutput { output, weights })
}
