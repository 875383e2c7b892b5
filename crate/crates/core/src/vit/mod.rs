//! Miniature Vision Transformer with class token, attention capture and
//! patch masking.

mod config;
mod forward;
mod mask;
mod params;

pub use config::ViTConfig;
pub use forward::{
    attention, batch_logits, extract_cls_attention, extract_cls_attention_with, forward_batch, forward_graph,
    patchify, patchify_graph, vit_forward, ClsReadout, ForwardTrace, GraphForward, HeadReduce, LayerNodes,
    LAYERNORM_EPS,
};
pub(crate) use forward::collect_traces;
pub use mask::TokenMask;
pub use params::{BoundLayer, BoundParams, LayerParams, ViTParams, EMBED_INIT_STD};

#[cfg(test)]
mod tests;
