//! Fixed-size encoder heads. Both map `T` variable-length states per
//! sentence to exactly `N` states of size `d_model`.

use super::{Bound, Net};
use crate::error::Result;
use crate::numeric::{Graph, Tensor, TensorError, Var};

fn lengths(valid: &[bool], batch: usize) -> Result<Vec<usize>> {
    let len = valid.len() / batch;
    let lens: Vec<usize> = valid
        .chunks(len)
        .map(|c| c.iter().filter(|&&v| v).count())
        .collect();
    if lens.contains(&0) {
        return Err(TensorError::AllMasked.into());
    }
    Ok(lens)
}

/// Multi-head mean pooling: state `i` of a sentence is the masked time
/// average of `H_v · W_i`.
///
/// `hv` is `[batch * len, d]`, `valid` marks real positions, and the
/// projections live in `pool.proj` as `[d, n * d]`. Returns `[batch * n, d]`.
pub fn mean_pool(
    g: &mut Graph<f32>,
    p: &Bound,
    hv: Var,
    batch: usize,
    valid: &[bool],
    n: usize,
) -> Result<Var> {
    let lens = lengths(valid, batch)?;
    let d = g.shape(hv)[1];
    let rows = valid.len();
    let len = rows / batch;
    let projected = g.matmul(hv, p.get("pool.proj"))?;
    let avg = Tensor::from_fn(&[batch, rows], |i| {
        let (b, r) = (i / rows, i % rows);
        if r / len == b && valid[r] {
            1.0 / lens[b] as f32
        } else {
            0.0
        }
    });
    let avg = g.constant(avg);
    let pooled = g.matmul(avg, projected)?;
    Ok(g.reshape(pooled, &[batch * n, d])?)
}

/// Attention pooling: `n` learned queries attend over the encoder states.
/// Returns the `[batch * n, d]` outputs and the attention weights
/// `[batch * heads, n, len]`.
pub fn attention_pool(
    net: &Net<'_>,
    g: &mut Graph<f32>,
    p: &Bound,
    hv: Var,
    batch: usize,
    valid: &[bool],
    n: usize,
) -> Result<(Var, Var)> {
    lengths(valid, batch)?;
    let len = valid.len() / batch;
    let tile = Tensor::from_fn(&[batch * n, n], |i| {
        let (row, q) = (i / n, i % n);
        if row % n == q {
            1.0
        } else {
            0.0
        }
    });
    let tile = g.constant(tile);
    let q = g.matmul(tile, p.get("pool.queries"))?;
    let k = g.matmul(hv, p.get("pool.wk"))?;
    let k = g.add_row(k, p.get("pool.bk"))?;
    let v = g.matmul(hv, p.get("pool.wv"))?;
    let v = g.add_row(v, p.get("pool.bv"))?;
    let heads = net.cfg.n_heads;
    let mut keep = Vec::with_capacity(batch * heads * n * len);
    for b in 0..batch {
        for _ in 0..heads * n {
            keep.extend_from_slice(&valid[b * len..(b + 1) * len]);
        }
    }
    let att = net.attend_projected(g, p, "pool", q, k, v, batch, &keep)?;
    Ok((att.out, att.weights))
}
