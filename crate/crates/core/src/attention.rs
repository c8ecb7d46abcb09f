//! Projection parameters, attention masks and vanilla scaled-dot multi-head attention.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Mask, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::init::xavier_uniform;

/// `W^q, W^k, W^v, W^o` for one attention block.
///
/// Per-head projections are stored fused: head `i` owns columns
/// `[i * d_h, (i + 1) * d_h)` of `wq`, `wk` and `wv`. No projection biases.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub d_model: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        head_dim(d_model, heads)?;
        let mut mat = |name: &str| store.insert(format!("{prefix}.{name}"), xavier_uniform(rng, d_model, d_model));
        Ok(AttentionParams { d_model, heads, wq: mat("wq")?, wk: mat("wk")?, wv: mat("wv")?, wo: mat("wo")? })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn num_params(d_model: usize) -> usize {
        4 * d_model * d_model
    }
}

pub fn head_dim(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!("d_model {d_model} is not divisible into {heads} heads")));
    }
    Ok(d_model / heads)
}

/// `[B, q_len, k_len]` mask allowing key `j` of sentence `b` iff `j < key_lens[b]`
/// (and `j <= i` when `causal`).
pub fn attention_mask(key_lens: &[usize], q_len: usize, k_len: usize, causal: bool) -> Mask {
    let mut m = Vec::with_capacity(key_lens.len() * q_len * k_len);
    for &len in key_lens {
        for i in 0..q_len {
            for j in 0..k_len {
                m.push(j < len && (!causal || j <= i));
            }
        }
    }
    Rc::new(m)
}

/// Lifts `[S, d]` to `[1, S, d]`; returns whether it did.
pub(crate) fn ensure_batched(g: &mut Graph, x: Var) -> Result<(Var, bool)> {
    match g.shape(x).len() {
        3 => Ok((x, false)),
        2 => {
            let s = g.shape(x).to_vec();
            Ok((g.reshape(x, &[1, s[0], s[1]])?, true))
        }
        _ => Err(Error::shape("attention", "x", format!("{:?}", g.shape(x)), "[B, S, d] or [S, d]")),
    }
}

/// Scaled-dot multi-head attention of `query[B, Sq, d]` over `memory[B, Sk, d]`.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    query: Var,
    memory: Var,
    mask: &Mask,
) -> Result<Var> {
    let (query, lifted) = ensure_batched(g, query)?;
    let (memory, _) = ensure_batched(g, memory)?;
    let dh = p.head_dim();
    let (wq, wk, wv, wo) = (g.param(store, p.wq), g.param(store, p.wk), g.param(store, p.wv), g.param(store, p.wo));
    let q_all = g.matmul(query, wq)?;
    let k_all = g.matmul(memory, wk)?;
    let v_all = g.matmul(memory, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let q = g.slice(q_all, i * dh, dh)?;
        let k = g.slice(k_all, i * dh, dh)?;
        let v = g.slice(v_all, i * dh, dh)?;
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, Some(mask))?;
        heads.push(g.bmm(attn, v)?);
    }
    let cat = g.concat(&heads)?;
    let out = g.matmul(cat, wo)?;
    if lifted {
        let s = g.shape(out).to_vec();
        return g.reshape(out, &s[1..]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_padding_mask() {
        let m = attention_mask(&[2], 3, 3, true);
        #[rustfmt::skip]
        let want = vec![
            true, false, false,
            true, true, false,
            true, true, false,
        ];
        assert_eq!(*m, want);
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(matches!(head_dim(10, 4), Err(Error::Config(_))));
        assert_eq!(head_dim(512, 4).unwrap(), 128);
    }
}
