//! Motion-aware encoder: mode tokens, global context aggregation via
//! scaled additive attention, and context-aware refinement per head.

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::model::params::{MaeHeadParams, MaeLayerParams, MaeParams};
use crate::modes::{flatten_future, MotionModeBank};
use crate::numerics::{Tape, Tensor};

/// Per-head attention record kept for export and invariant checks.
#[derive(Debug, Clone)]
pub struct MaeHeadTrace {
    /// Global-context weights over the K modes.
    pub alpha: Vec<f64>,
    /// Pre-softmax context-transform scores over the K modes.
    pub s_en: Vec<f64>,
    /// Softmax of `s_en`; the per-mode refinement weights.
    pub ctx_weights: Vec<f64>,
}

/// Encoder output: refined mode features plus per-layer/head traces.
#[derive(Debug)]
pub struct MaeOutput {
    /// `[K, d_model]` refined mode features.
    pub features: Tensor,
    /// `trace[layer][head]`.
    pub trace: Vec<Vec<MaeHeadTrace>>,
}

impl MaeOutput {
    /// Context-transform scores as `[layer][head][K]`.
    pub fn scores(&self) -> Vec<Vec<Vec<f64>>> {
        self.trace
            .iter()
            .map(|layer| layer.iter().map(|h| h.s_en.clone()).collect())
            .collect()
    }
}

/// Build the K mode-embedded trajectory tokens, already flattened to
/// `2 (t_obs + t_pre)` interleaved coordinates per row.
pub fn build_mode_tokens(
    scene: &Scene,
    bank: &MotionModeBank,
    t_obs: usize,
    t_pre: usize,
) -> Result<Tensor> {
    if scene.target_obs.len() != t_obs {
        return Err(Error::Shape(format!(
            "scene holds {} observed frames, expected {t_obs}",
            scene.target_obs.len()
        )));
    }
    if bank.t_pre != t_pre {
        return Err(Error::Shape(format!(
            "bank horizon {} does not match configured {t_pre}",
            bank.t_pre
        )));
    }
    let width = 2 * (t_obs + t_pre);
    let obs_flat = flatten_future(&scene.target_obs);
    let mut data = Vec::with_capacity(bank.k * width);
    for mode in &bank.modes {
        data.extend_from_slice(&obs_flat);
        data.extend(flatten_future(mode));
    }
    Tensor::new(vec![bank.k, width], data)
}

/// Map flattened tokens to the embedding space: `[K, d_model]`.
pub fn embed_tokens(
    tape: &mut Tape,
    tokens: &Tensor,
    embed: &crate::model::params::LinearParams,
) -> Result<Tensor> {
    embed.apply(tape, tokens)
}

/// Global context for one head.
#[derive(Debug)]
pub struct GlobalContext {
    /// `[1, d_k]` aggregated context vector.
    pub g: Tensor,
    /// `[K]` aggregation weights.
    pub alpha: Tensor,
}

/// Scaled additive aggregation over modes: per-mode score is the
/// `tanh(q + k)` feature sum divided by `sqrt(d_k)`, the weights are a
/// softmax over modes, and the context is the weighted value sum.
pub fn global_context(
    tape: &mut Tape,
    embeddings: &Tensor,
    head: &MaeHeadParams,
    d_k: usize,
) -> Result<GlobalContext> {
    let k_modes = embeddings.shape()[0];
    if k_modes == 0 {
        return Err(Error::Contract(
            "global context needs at least one mode".into(),
        ));
    }
    let q_g = head.q_global.apply(tape, embeddings)?;
    let k_g = head.k_global.apply(tape, embeddings)?;
    let v_g = head.v_global.apply(tape, embeddings)?;
    let added = tape.add(&q_g, &k_g)?;
    let activated = tape.tanh(&added)?;
    let summed = tape.sum_last(&activated)?;
    let scores = tape.scale(&summed, 1.0 / (d_k as f64).sqrt())?;
    let alpha = tape.softmax_last(&scores)?;
    let alpha_row = tape.reshape(&alpha, vec![1, k_modes])?;
    let g = tape.matmul(&alpha_row, &v_g)?;
    Ok(GlobalContext { g, alpha })
}

/// Context-aware transform for one head: queries and keys are shifted by
/// the shared context, scored additively against the original query, and
/// each mode keeps its own softmax-weighted value plus context share.
/// Returns `(c_en [K, d_k], s_en [K], weights [K])`.
pub fn context_transform(
    tape: &mut Tape,
    embeddings: &Tensor,
    context: &GlobalContext,
    head: &MaeHeadParams,
    d_k: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let k_modes = embeddings.shape()[0];
    let q = head.q.apply(tape, embeddings)?;
    let k = head.k.apply(tape, embeddings)?;
    let v = head.v.apply(tape, embeddings)?;
    let g_vec = tape.reshape(&context.g, vec![d_k])?;
    let q_ctx = tape.add_rowvec(&q, &g_vec)?;
    let k_ctx = tape.add_rowvec(&k, &g_vec)?;
    let added = tape.add(&q_ctx, &k_ctx)?;
    let activated = tape.tanh(&added)?;
    let gated = tape.mul(&activated, &q)?;
    let summed = tape.sum_last(&gated)?;
    let s_en = tape.scale(&summed, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.softmax_last(&s_en)?;
    let own = tape.scale_rows(&v, &weights)?;
    let w_col = tape.reshape(&weights, vec![k_modes, 1])?;
    let shared = tape.matmul(&w_col, &context.g)?;
    let c_en = tape.add(&own, &shared)?;
    Ok((c_en, s_en, weights))
}

/// One encoder layer: per-head context aggregation and transform, head
/// concat + projection, then the residual/norm/feed-forward block.
pub fn mae_layer(
    tape: &mut Tape,
    x: &Tensor,
    layer: &MaeLayerParams,
    d_k: usize,
) -> Result<(Tensor, Vec<MaeHeadTrace>)> {
    let mut head_outputs = Vec::with_capacity(layer.heads.len());
    let mut traces = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let ctx = global_context(tape, x, head, d_k)?;
        let (c_en, s_en, weights) = context_transform(tape, x, &ctx, head, d_k)?;
        traces.push(MaeHeadTrace {
            alpha: ctx.alpha.data().to_vec(),
            s_en: s_en.data().to_vec(),
            ctx_weights: weights.data().to_vec(),
        });
        head_outputs.push(c_en);
    }
    let refs: Vec<&Tensor> = head_outputs.iter().collect();
    let concat = tape.concat_cols(&refs)?;
    let projected = layer.out_proj.apply(tape, &concat)?;
    let residual = tape.add(x, &projected)?;
    let normed = layer.ln1.apply(tape, &residual)?;
    let ffn_out = layer.ffn.apply(tape, &normed)?;
    let residual2 = tape.add(&normed, &ffn_out)?;
    let out = layer.ln2.apply(tape, &residual2)?;
    Ok((out, traces))
}

/// Full encoder: tokens, embedding, stacked layers.
pub fn mae_forward(
    tape: &mut Tape,
    scene: &Scene,
    bank: &MotionModeBank,
    params: &MaeParams,
    t_obs: usize,
    t_pre: usize,
    d_k: usize,
) -> Result<MaeOutput> {
    let tokens = build_mode_tokens(scene, bank, t_obs, t_pre)?;
    let mut x = embed_tokens(tape, &tokens, &params.embed)?;
    let mut trace = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, layer_trace) = mae_layer(tape, &x, layer, d_k)?;
        x = next;
        trace.push(layer_trace);
    }
    Ok(MaeOutput { features: x, trace })
}
