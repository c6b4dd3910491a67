//! The three attention layers of the model: divergence-enhanced multi-head
//! view attention for the encoder, and volume / view-volume attention for
//! the decoder. All are built on the same scaled dot-product primitive and
//! capture their per-head score matrices for diagnostics.
//!
//! Projections carry no bias terms and there is no attention dropout.

use crate::error::{Result, VoltError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Where an attention matrix came from, for trace exports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnRole {
    /// Encoder self-attention over views (M×M).
    ViewView,
    /// Decoder self-attention over volume tokens (N×N).
    VolumeVolume,
    /// Decoder cross-attention from volume tokens to views (N×M).
    ViewVolume,
}

impl AttnRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttnRole::ViewView => "view-view",
            AttnRole::VolumeVolume => "volume-volume",
            AttnRole::ViewVolume => "view-volume",
        }
    }
}

/// One captured attention-score matrix. Each row is a softmax distribution.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub layer: usize,
    pub head: usize,
    pub role: AttnRole,
    pub scores: Tensor,
}

/// Per-head projection triple, graph-bound.
#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

/// Per-head projection triple as plain tensors (for the non-graph wrappers).
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Scaled dot-product attention: `softmax(q·kᵀ/√d_k)·v`.
/// Returns the output and the score matrix node (rows_q × rows_kv).
pub fn attn(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<(NodeId, NodeId)> {
    let d_k = g.value(q).cols();
    if g.value(k).cols() != d_k || g.value(v).cols() != d_k {
        return Err(VoltError::shape(format!(
            "attn: q/k/v column dims {} / {} / {} must match",
            d_k,
            g.value(k).cols(),
            g.value(v).cols()
        )));
    }
    if g.value(k).rows() != g.value(v).rows() {
        return Err(VoltError::shape(format!(
            "attn: k has {} rows but v has {}",
            g.value(k).rows(),
            g.value(v).rows()
        )));
    }
    let logits = g.matmul_nt(q, k)?;
    let scaled = g.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let scores = g.softmax_rows(scaled)?;
    let out = g.matmul(scores, v)?;
    Ok((out, scores))
}

/// Project `x` through each head and run attention with queries from
/// `q_src` and keys/values from `kv_src`; returns per-head outputs + scores.
fn run_heads(
    g: &mut Graph,
    q_src: NodeId,
    kv_src: NodeId,
    heads: &[HeadIds],
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    if heads.is_empty() {
        return Err(VoltError::shape("attention requires at least one head"));
    }
    let mut outs = Vec::with_capacity(heads.len());
    let mut scores = Vec::with_capacity(heads.len());
    for h in heads {
        let q = g.matmul(q_src, h.w_q)?;
        let k = g.matmul(kv_src, h.w_k)?;
        let v = g.matmul(kv_src, h.w_v)?;
        let (out, s) = attn(g, q, k, v)?;
        outs.push(out);
        scores.push(s);
    }
    Ok((outs, scores))
}

/// View-divergence enhancing function: concatenate the attention output with
/// the original view embeddings along the feature dimension.
pub fn diview_node(g: &mut Graph, a: NodeId, x0: NodeId) -> Result<NodeId> {
    if g.value(a).rows() != g.value(x0).rows() {
        return Err(VoltError::shape(format!(
            "diview: row counts {} vs {}",
            g.value(a).rows(),
            g.value(x0).rows()
        )));
    }
    g.concat_cols(&[a, x0])
}

/// Multi-head divergence-enhanced view attention.
///
/// `enhance = true`: out = DiView(cat(A¹..A^H), x0)·w_view with
/// w_view ∈ (H·d_k + d)×d. `enhance = false`: plain multi-head attention,
/// out = cat(A¹..A^H)·w_view with w_view ∈ (H·d_k)×d and x0 unused.
pub fn mh_deatt(
    g: &mut Graph,
    x: NodeId,
    x0: NodeId,
    heads: &[HeadIds],
    w_view: NodeId,
    enhance: bool,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (outs, scores) = run_heads(g, x, x, heads)?;
    let cat = g.concat_cols(&outs)?;
    let pre = if enhance { diview_node(g, cat, x0)? } else { cat };
    expect_proj(g, pre, w_view, "mh_deatt w_view")?;
    let out = g.matmul(pre, w_view)?;
    Ok((out, scores))
}

/// Decoder self-attention over volume tokens (queries = keys = values = y).
pub fn mh_vol_attn(
    g: &mut Graph,
    y: NodeId,
    heads: &[HeadIds],
    w_vol: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (outs, scores) = run_heads(g, y, y, heads)?;
    let cat = g.concat_cols(&outs)?;
    expect_proj(g, cat, w_vol, "mh_vol_attn w_vol")?;
    let out = g.matmul(cat, w_vol)?;
    Ok((out, scores))
}

/// Decoder cross-attention: queries from volume tokens, keys/values from the
/// encoder view outputs.
pub fn mh_view_vol_attn(
    g: &mut Graph,
    y: NodeId,
    x_l: NodeId,
    heads: &[HeadIds],
    w: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let (outs, scores) = run_heads(g, y, x_l, heads)?;
    let cat = g.concat_cols(&outs)?;
    expect_proj(g, cat, w, "mh_view_vol_attn w")?;
    let out = g.matmul(cat, w)?;
    Ok((out, scores))
}

fn expect_proj(g: &Graph, pre: NodeId, w: NodeId, what: &str) -> Result<()> {
    let need = g.value(pre).cols();
    let got = g.value(w).rows();
    if need != got {
        return Err(VoltError::shape(format!(
            "{what}: projection expects {need} input columns, matrix has {got} rows"
        )));
    }
    Ok(())
}

// ── Plain-tensor wrappers ────────────────────────────────────────────
// Same code path as the graph layers; each builds a throwaway graph and
// extracts values. Used by tests and diagnostics.

pub fn attn_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (qi, ki, vi) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let (out, scores) = attn(&mut g, qi, ki, vi)?;
    Ok((g.value(out).clone(), g.value(scores).clone()))
}

pub fn diview(a: &Tensor, x0: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (ai, xi) = (g.input(a.clone()), g.input(x0.clone()));
    let out = diview_node(&mut g, ai, xi)?;
    Ok(g.value(out).clone())
}

fn bind_heads(g: &mut Graph, heads: &[HeadParams]) -> Vec<HeadIds> {
    heads
        .iter()
        .map(|h| HeadIds {
            w_q: g.input(h.w_q.clone()),
            w_k: g.input(h.w_k.clone()),
            w_v: g.input(h.w_v.clone()),
        })
        .collect()
}

fn traces_of(g: &Graph, scores: &[NodeId], role: AttnRole, layer: usize) -> Vec<AttentionTrace> {
    scores
        .iter()
        .enumerate()
        .map(|(h, &s)| AttentionTrace {
            layer,
            head: h,
            role,
            scores: g.value(s).clone(),
        })
        .collect()
}

pub fn mh_deatt_forward(
    x: &Tensor,
    x0: &Tensor,
    heads: &[HeadParams],
    w_view: &Tensor,
    enhance: bool,
) -> Result<(Tensor, Vec<AttentionTrace>)> {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let x0i = g.input(x0.clone());
    let hid = bind_heads(&mut g, heads);
    let wv = g.input(w_view.clone());
    let (out, scores) = mh_deatt(&mut g, xi, x0i, &hid, wv, enhance)?;
    let traces = traces_of(&g, &scores, AttnRole::ViewView, 0);
    Ok((g.value(out).clone(), traces))
}

pub fn mh_vol_attn_forward(
    y: &Tensor,
    heads: &[HeadParams],
    w_vol: &Tensor,
) -> Result<(Tensor, Vec<AttentionTrace>)> {
    let mut g = Graph::new();
    let yi = g.input(y.clone());
    let hid = bind_heads(&mut g, heads);
    let wv = g.input(w_vol.clone());
    let (out, scores) = mh_vol_attn(&mut g, yi, &hid, wv)?;
    let traces = traces_of(&g, &scores, AttnRole::VolumeVolume, 0);
    Ok((g.value(out).clone(), traces))
}

pub fn mh_view_vol_attn_forward(
    y: &Tensor,
    x_l: &Tensor,
    heads: &[HeadParams],
    w: &Tensor,
) -> Result<(Tensor, Vec<AttentionTrace>)> {
    let mut g = Graph::new();
    let yi = g.input(y.clone());
    let xi = g.input(x_l.clone());
    let hid = bind_heads(&mut g, heads);
    let wi = g.input(w.clone());
    let (out, scores) = mh_view_vol_attn(&mut g, yi, xi, &hid, wi)?;
    let traces = traces_of(&g, &scores, AttnRole::ViewVolume, 0);
    Ok((g.value(out).clone(), traces))
}
