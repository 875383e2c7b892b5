use serde::{Deserialize, Serialize};

use super::params::{BoundLayer, BoundParams, LayerParams};
use super::{TokenMask, ViTConfig, ViTParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-6;

/// Splits `[H, W, C]` images into `[L, p*p*C]` rows: patches in row-major
/// grid order, pixels within a patch in row-major `(row, col, channel)` order.
pub fn patchify(image: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let [h, w, c] = match image.shape() {
        &[h, w, c] => [h, w, c],
        other => return Err(Error::shape("patchify", other, &config.image_shape())),
    };
    if h % config.patch_size != 0 || w % config.patch_size != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches",
            p = config.patch_size
        )));
    }
    if [h, w, c] != config.image_shape() {
        return Err(Error::shape("patchify", image.shape(), &config.image_shape()));
    }
    let mut g = Graph::new();
    let x = g.constant(&image.reshaped(&[1, h, w, c])?);
    let p = patchify_graph(&mut g, x, config)?;
    Ok(g.value(p))
}

/// Differentiable patch extraction: `[B, H, W, C] -> [B*L, p*p*C]`.
pub fn patchify_graph(g: &mut Graph, images: Var, config: &ViTConfig) -> Result<Var> {
    let shape = g.shape(images).to_vec();
    let [b, h, w, c] = match shape[..] {
        [b, h, w, c] => [b, h, w, c],
        _ => return Err(Error::shape("patchify", &shape, &config.image_shape())),
    };
    if [h, w, c] != config.image_shape() {
        return Err(Error::shape("patchify", &shape[1..], &config.image_shape()));
    }
    let p = config.patch_size;
    let gh = h / p;
    let gw = w / p;
    let x = g.reshape(images, &[b, gh, p, gw, p, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, &[b * gh * gw, p * p * c])
}

/// Per-layer nodes of a graph forward pass.
#[derive(Clone, Debug)]
pub struct LayerNodes {
    /// Token states entering the block, `[B*S, D]`.
    pub input: Var,
    /// Layernormed tokens fed to the Q/K/V projections, `[B*S, D]`.
    pub normed: Var,
    /// Attention map `[B*heads, S, S]`.
    pub attention: Var,
    /// Per-head attention output `A V`, `[B*heads, S, head_dim]`.
    pub head_out: Var,
    /// Token states leaving the block, `[B*S, D]`.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct GraphForward {
    /// `[B, K]`
    pub logits: Var,
    pub layers: Vec<LayerNodes>,
}

/// Row-keep flags for a masked batch, `[B*S]`, class token always kept.
fn keep_rows(masks: &[TokenMask]) -> Vec<bool> {
    masks.iter().flat_map(|m| m.sequence_keep()).collect()
}

/// Column-activity flags for `[B*heads, S, S]` attention scores.
fn active_columns(masks: &[TokenMask], heads: usize) -> Vec<bool> {
    masks
        .iter()
        .flat_map(|m| std::iter::repeat_n(m, heads).flat_map(|m| m.sequence_keep()))
        .collect()
}

/// Multi-head self-attention on pre-normalized tokens `[B*S, D]`.
///
/// Masked tokens get `-inf` scores (exactly zero attention) in every row, and
/// their own output rows are zeroed. Returns `(output [B*S, D], A, A V)`.
pub(crate) fn attention_graph(
    g: &mut Graph,
    normed: Var,
    layer: &BoundLayer,
    batch: usize,
    seq: usize,
    heads: usize,
    masks: &[TokenMask],
) -> Result<(Var, Var, Var)> {
    let dim = g.shape(normed)[1];
    let hd = dim / heads;
    let split = |g: &mut Graph, v: Var| -> Result<Var> {
        let v = g.reshape(v, &[batch, seq, heads, hd])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        g.reshape(v, &[batch * heads, seq, hd])
    };
    let q = g.matmul(normed, layer.w_q)?;
    let q = g.add_row_broadcast(q, layer.b_q)?;
    let k = g.matmul(normed, layer.w_k)?;
    let k = g.add_row_broadcast(k, layer.b_k)?;
    let v = g.matmul(normed, layer.w_v)?;
    let v = g.add_row_broadcast(v, layer.b_v)?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let kt = g.transpose(k)?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let attn = g.masked_softmax(scores, &active_columns(masks, heads))?;
    let head_out = g.bmm(attn, v)?;
    let merged = g.reshape(head_out, &[batch, heads, seq, hd])?;
    let merged = g.permute(merged, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, &[batch * seq, dim])?;
    let out = g.matmul(merged, layer.w_o)?;
    let out = g.add_row_broadcast(out, layer.b_o)?;
    let out = g.mask_rows(out, &keep_rows(masks))?;
    Ok((out, attn, head_out))
}

/// Batched forward on a graph. `images` is `[B, H, W, C]`; one mask per image.
///
/// Masked patches are removed from the computation: their token rows are
/// replaced by detached zeros right after embedding and kept at zero through
/// every block, and no token attends to them.
pub fn forward_graph(
    g: &mut Graph,
    params: &BoundParams,
    config: &ViTConfig,
    images: Var,
    masks: &[TokenMask],
) -> Result<GraphForward> {
    let b = g.shape(images)[0];
    if masks.len() != b {
        return Err(Error::invalid(format!("{} masks for a batch of {b}", masks.len())));
    }
    let l = config.num_patches();
    if let Some(m) = masks.iter().find(|m| m.len() != l) {
        return Err(Error::invalid(format!("mask of length {} for {l} patches", m.len())));
    }
    let s = config.seq_len();
    let d = config.embed_dim;
    let keep = keep_rows(masks);

    let patches = patchify_graph(g, images, config)?;
    let emb = g.matmul(patches, params.patch_w)?;
    let emb = g.add_row_broadcast(emb, params.patch_b)?;
    let emb = g.reshape(emb, &[b, l, d])?;
    let cls = g.reshape(params.cls_token, &[1, 1, d])?;
    let cls = g.tile(cls, b)?;
    let tokens = g.concat(&[cls, emb], 1)?;
    let tokens = g.reshape(tokens, &[b, s * d])?;
    let pos = g.reshape(params.pos_embed, &[s * d])?;
    let tokens = g.add_row_broadcast(tokens, pos)?;
    let tokens = g.reshape(tokens, &[b * s, d])?;
    let mut x = g.mask_rows(tokens, &keep)?;

    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let input = x;
        let normed = g.layernorm(x, layer.ln1_gamma, layer.ln1_beta, LAYERNORM_EPS)?;
        let (attn_out, attention, head_out) =
            attention_graph(g, normed, layer, b, s, config.num_heads, masks)?;
        let h = g.add(x, attn_out)?;
        let m = g.layernorm(h, layer.ln2_gamma, layer.ln2_beta, LAYERNORM_EPS)?;
        let m = g.matmul(m, layer.mlp_w1)?;
        let m = g.add_row_broadcast(m, layer.mlp_b1)?;
        let m = g.gelu(m);
        let m = g.matmul(m, layer.mlp_w2)?;
        let m = g.add_row_broadcast(m, layer.mlp_b2)?;
        let out = g.add(h, m)?;
        x = g.mask_rows(out, &keep)?;
        layers.push(LayerNodes {
            input,
            normed,
            attention,
            head_out,
            output: x,
        });
    }

    let x = g.reshape(x, &[b, s, d])?;
    let cls_out = g.slice(x, 1, 0, 1)?;
    let cls_out = g.reshape(cls_out, &[b, d])?;
    let cls_out = g.layernorm(cls_out, params.norm_gamma, params.norm_beta, LAYERNORM_EPS)?;
    let logits = g.matmul(cls_out, params.head_w)?;
    let logits = g.add_row_broadcast(logits, params.head_b)?;
    Ok(GraphForward { logits, layers })
}

/// Which attention map and head reduction produce the class-token scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduce {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClsReadout {
    /// Encoder layer to read; `None` is the last layer.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub heads: HeadReduce,
}

/// Everything captured from one image's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[K]`
    pub logits: Tensor,
    /// Per layer, `[heads, S, S]`.
    pub attention: Vec<Tensor>,
    /// Per layer output token states, `[S, D]`.
    pub tokens: Vec<Tensor>,
    /// Last-layer, head-averaged class-token attention over patches, `[L]`.
    pub cls_attention: Vec<f64>,
}

/// Class-token attention over patch tokens: the chosen layer's class row,
/// reduced over heads, self-entry dropped, renormalized to sum to one.
pub fn extract_cls_attention(trace: &ForwardTrace) -> Vec<f64> {
    extract_cls_attention_with(trace, ClsReadout::default())
}

pub fn extract_cls_attention_with(trace: &ForwardTrace, readout: ClsReadout) -> Vec<f64> {
    let Some(attn) = (match readout.layer {
        Some(i) => trace.attention.get(i),
        None => trace.attention.last(),
    }) else {
        return Vec::new();
    };
    let (heads, s) = (attn.shape()[0], attn.shape()[1]);
    let data = attn.data();
    let mut scores = vec![0.0; s - 1];
    for h in 0..heads {
        let row = &data[h * s * s + 1..h * s * s + s];
        for (acc, &v) in scores.iter_mut().zip(row) {
            match readout.heads {
                HeadReduce::Mean => *acc += v / heads as f64,
                HeadReduce::Max => *acc = acc.max(v),
            }
        }
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter_mut().for_each(|v| *v /= total);
    }
    scores
}

/// Batched inference without gradients; returns per-image traces.
pub fn forward_batch(params: &ViTParams, images: &Tensor, masks: &[TokenMask]) -> Result<Vec<ForwardTrace>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(images);
    let out = forward_graph(&mut g, &bound, &params.config, x, masks)?;
    Ok(collect_traces(&g, &out, &params.config))
}

pub(crate) fn collect_traces(g: &Graph, out: &GraphForward, config: &ViTConfig) -> Vec<ForwardTrace> {
    let b = g.shape(out.logits)[0];
    let k = config.num_classes;
    let s = config.seq_len();
    let d = config.embed_dim;
    let heads = config.num_heads;
    let logits = g.data(out.logits);
    (0..b)
        .map(|i| {
            let attention: Vec<Tensor> = out
                .layers
                .iter()
                .map(|l| {
                    let a = &g.data(l.attention)[i * heads * s * s..(i + 1) * heads * s * s];
                    Tensor::new(vec![heads, s, s], a.to_vec()).expect("attention slice")
                })
                .collect();
            let tokens = out
                .layers
                .iter()
                .map(|l| {
                    let t = &g.data(l.output)[i * s * d..(i + 1) * s * d];
                    Tensor::new(vec![s, d], t.to_vec()).expect("token slice")
                })
                .collect();
            let mut trace = ForwardTrace {
                logits: Tensor::new(vec![k], logits[i * k..(i + 1) * k].to_vec()).expect("logit slice"),
                attention,
                tokens,
                cls_attention: Vec::new(),
            };
            trace.cls_attention = extract_cls_attention(&trace);
            trace
        })
        .collect()
}

/// Single-image forward. `mask = None` keeps every patch.
pub fn vit_forward(params: &ViTParams, image: &Tensor, mask: Option<&TokenMask>) -> Result<ForwardTrace> {
    let cfg = &params.config;
    if image.shape() != cfg.image_shape() {
        return Err(Error::shape("vit_forward", image.shape(), &cfg.image_shape()));
    }
    let mask = mask.cloned().unwrap_or_else(|| TokenMask::full(cfg.num_patches()));
    let [h, w, c] = cfg.image_shape();
    let batch = image.reshaped(&[1, h, w, c])?;
    Ok(forward_batch(params, &batch, std::slice::from_ref(&mask))?.remove(0))
}

/// Batched logits `[B, K]` without gradients.
pub fn batch_logits(params: &ViTParams, images: &Tensor, masks: &[TokenMask]) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(images);
    let out = forward_graph(&mut g, &bound, &params.config, x, masks)?;
    Ok(g.value(out.logits))
}

/// One attention layer on explicit tokens `[S, D]` (already layernormed),
/// with `mask` over the `S - 1` patch tokens. Returns `(output, A)` where
/// `A` is `[heads, S, S]`.
pub fn attention(
    tokens: &Tensor,
    layer: &LayerParams,
    num_heads: usize,
    mask: &TokenMask,
) -> Result<(Tensor, Tensor)> {
    let (s, d) = match tokens.shape() {
        &[s, d] => (s, d),
        other => return Err(Error::shape("attention", other, &[0, 0])),
    };
    if mask.len() + 1 != s {
        return Err(Error::invalid(format!("mask of length {} for {s} tokens", mask.len())));
    }
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::invalid(format!("{num_heads} heads for dim {d}")));
    }
    let mut g = Graph::new();
    let x = g.constant(tokens);
    let mut bind = |t: &Tensor| g.constant(t);
    let bl = BoundLayer {
        ln1_gamma: bind(&layer.ln1_gamma),
        ln1_beta: bind(&layer.ln1_beta),
        w_q: bind(&layer.w_q),
        b_q: bind(&layer.b_q),
        w_k: bind(&layer.w_k),
        b_k: bind(&layer.b_k),
        w_v: bind(&layer.w_v),
        b_v: bind(&layer.b_v),
        w_o: bind(&layer.w_o),
        b_o: bind(&layer.b_o),
        ln2_gamma: bind(&layer.ln2_gamma),
        ln2_beta: bind(&layer.ln2_beta),
        mlp_w1: bind(&layer.mlp_w1),
        mlp_b1: bind(&layer.mlp_b1),
        mlp_w2: bind(&layer.mlp_w2),
        mlp_b2: bind(&layer.mlp_b2),
    };
    let (out, attn, _) = attention_graph(&mut g, x, &bl, 1, s, num_heads, std::slice::from_ref(mask))?;
    Ok((g.value(out), g.value(attn)))
}
