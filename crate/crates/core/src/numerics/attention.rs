//! Multi-head window attention with a learnable per-head bias table.
//!
//! Queries come from one input and keys/values from another, so the same
//! routine serves self-attention (`q_in == kv_in`) and the RGB-keyed
//! cross-attentions used by the fusion paths.

use std::sync::Arc;

use super::graph::Var;
use super::nn::Linear;
use super::params::{ParamBuilder, ParamId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    /// `[num_heads, n_p, n_p]`, added to the scaled logits.
    pub bias_table: ParamId,
    pub num_heads: usize,
    pub head_dim: usize,
    pub window_patches: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        dim: usize,
        num_heads: usize,
        window_patches: usize,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::config(format!(
                "attention width {dim} is not divisible by {num_heads} heads"
            )));
        }
        if window_patches == 0 {
            return Err(Error::config("attention window must hold at least one patch"));
        }
        let mut pb = pb.scoped(name);
        let inner = dim;
        Ok(Self {
            q_proj: Linear::new(&mut pb, "q", dim, inner, true)?,
            k_proj: Linear::new(&mut pb, "k", dim, inner, true)?,
            v_proj: Linear::new(&mut pb, "v", dim, inner, true)?,
            out_proj: Linear::new(&mut pb, "out", inner, dim, true)?,
            bias_table: pb.zeros("bias_table", &[num_heads, window_patches, window_patches])?,
            num_heads,
            head_dim: dim / num_heads,
            window_patches,
            dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in [&self.q_proj, &self.k_proj, &self.v_proj, &self.out_proj] {
            ids.extend(l.param_ids());
        }
        ids.push(self.bias_table);
        ids
    }
}

/// `[nw, n, h, d] -> [nw, h, n, d]` as a row gather with rows of `d`.
fn split_heads_index(nw: usize, n: usize, h: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(nw * n * h);
    for w in 0..nw {
        for hh in 0..h {
            for i in 0..n {
                idx.push((w * n + i) * h + hh);
            }
        }
    }
    idx.into()
}

/// Inverse of [`split_heads_index`].
fn merge_heads_index(nw: usize, n: usize, h: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(nw * n * h);
    for w in 0..nw {
        for i in 0..n {
            for hh in 0..h {
                idx.push((w * h + hh) * n + i);
            }
        }
    }
    idx.into()
}

/// Windowed multi-head attention.
///
/// `q_in` and `kv_in` are `[nw, n_p, C]`. Per window and head the weights are
/// `softmax(QKᵀ/√d + B + mask)`; `mask`, when given, is `[nw, n_p, n_p]`.
pub fn attention<'g>(
    q_in: &Var<'g>,
    kv_in: &Var<'g>,
    params: &AttentionParams,
    mask: Option<&Tensor>,
) -> Result<Var<'g>> {
    attention_with_weights(q_in, kv_in, params, mask).map(|(out, _)| out)
}

/// [`attention`] that also returns the post-softmax weights `[nw, heads, n_p, n_p]`.
pub fn attention_with_weights<'g>(
    q_in: &Var<'g>,
    kv_in: &Var<'g>,
    params: &AttentionParams,
    mask: Option<&Tensor>,
) -> Result<(Var<'g>, Var<'g>)> {
    let shape = q_in.shape();
    if shape != kv_in.shape() {
        return Err(Error::dim(format!(
            "attention query input {shape:?} differs from key/value input {:?}",
            kv_in.shape()
        )));
    }
    if shape.len() != 3 || shape[1] != params.window_patches || shape[2] != params.dim {
        return Err(Error::dim(format!(
            "attention expects [nw, {}, {}], got {shape:?}",
            params.window_patches, params.dim
        )));
    }
    let (nw, n, c) = (shape[0], shape[1], shape[2]);
    let (h, d) = (params.num_heads, params.head_dim);
    let g = q_in.graph();

    let split = split_heads_index(nw, n, h);
    let heads = |x: Var<'g>| x.gather_rows(d, split.clone(), &[nw * h, n, d]);
    let q = heads(params.q_proj.forward(q_in)?)?;
    let k = heads(params.k_proj.forward(kv_in)?)?;
    let v = heads(params.v_proj.forward(kv_in)?)?;

    let mut logits = q
        .bmm(&k, true)?
        .scale(1.0 / (d as f64).sqrt())
        .reshape(&[nw, h, n, n])?
        .add_broadcast(&g.param(params.bias_table))?;
    if let Some(mask) = mask {
        if mask.shape() != [nw, n, n] {
            return Err(Error::dim(format!(
                "attention mask {:?} does not match [{nw}, {n}, {n}]",
                mask.shape()
            )));
        }
        let mut expanded = Vec::with_capacity(nw * h * n * n);
        for w in 0..nw {
            let m = &mask.data()[w * n * n..(w + 1) * n * n];
            for _ in 0..h {
                expanded.extend_from_slice(m);
            }
        }
        logits = logits.add(&g.constant(Tensor::new(vec![nw, h, n, n], expanded)?))?;
    }
    let probs = logits.softmax()?;
    let context = probs
        .reshape(&[nw * h, n, n])?
        .bmm(&v, false)?
        .gather_rows(d, merge_heads_index(nw, n, h), &[nw, n, c])?;
    Ok((params.out_proj.forward(&context)?, probs))
}
