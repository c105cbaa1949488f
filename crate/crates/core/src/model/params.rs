//! Parameter containers, initialization, and checkpoint files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

/// Affine layer weights: `w` is `[in, out]`, `b` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); zero bias.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-a..a))
            .collect();
        LinearParams {
            w: Tensor::new(vec![fan_in, fan_out], data).unwrap(),
            b: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        tape.linear(x, &self.w, &self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            bias: Tensor::zeros(vec![d]),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        tape.layer_norm(x, &self.gain, &self.bias)
    }
}

/// Two-layer feed-forward block with tanh activation.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

impl FfnParams {
    pub fn init<R: Rng>(d_model: usize, factor: usize, rng: &mut R) -> Self {
        FfnParams {
            lin1: LinearParams::init(d_model, d_model * factor, rng),
            lin2: LinearParams::init(d_model * factor, d_model, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = self.lin1.apply(tape, x)?;
        let a = tape.tanh(&h)?;
        self.lin2.apply(tape, &a)
    }
}

/// Per-head encoder projections: a global q/k/v set for context
/// aggregation and a standard q/k/v set for the context-aware transform.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeHeadParams {
    pub q_global: LinearParams,
    pub k_global: LinearParams,
    pub v_global: LinearParams,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
}

impl MaeHeadParams {
    fn init<R: Rng>(d_model: usize, d_k: usize, rng: &mut R) -> Self {
        MaeHeadParams {
            q_global: LinearParams::init(d_model, d_k, rng),
            k_global: LinearParams::init(d_model, d_k, rng),
            v_global: LinearParams::init(d_model, d_k, rng),
            q: LinearParams::init(d_model, d_k, rng),
            k: LinearParams::init(d_model, d_k, rng),
            v: LinearParams::init(d_model, d_k, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeLayerParams {
    pub heads: Vec<MaeHeadParams>,
    pub out_proj: LinearParams,
    pub ln1: LayerNormParams,
    pub ffn: FfnParams,
    pub ln2: LayerNormParams,
}

impl MaeLayerParams {
    fn init<R: Rng>(d_model: usize, n_heads: usize, ffn_factor: usize, rng: &mut R) -> Self {
        let d_k = d_model / n_heads;
        MaeLayerParams {
            heads: (0..n_heads)
                .map(|_| MaeHeadParams::init(d_model, d_k, rng))
                .collect(),
            out_proj: LinearParams::init(d_model, d_model, rng),
            ln1: LayerNormParams::init(d_model),
            ffn: FfnParams::init(d_model, ffn_factor, rng),
            ln2: LayerNormParams::init(d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeParams {
    pub embed: LinearParams,
    pub layers: Vec<MaeLayerParams>,
}

/// Per-head decoder projections. The q/k/v set drives both cross-attention
/// pathways; the neighbor q/k pair scores the neighbor context, whose
/// values come from the shared v projection.
#[derive(Debug, Clone, PartialEq)]
pub struct HidHeadParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub q_neighbor: LinearParams,
    pub k_neighbor: LinearParams,
}

impl HidHeadParams {
    fn init<R: Rng>(d_model: usize, d_k: usize, rng: &mut R) -> Self {
        HidHeadParams {
            q: LinearParams::init(d_model, d_k, rng),
            k: LinearParams::init(d_model, d_k, rng),
            v: LinearParams::init(d_model, d_k, rng),
            q_neighbor: LinearParams::init(d_model, d_k, rng),
            k_neighbor: LinearParams::init(d_model, d_k, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HidLayerParams {
    pub heads: Vec<HidHeadParams>,
    /// Raw fusion weight; the effective weight is
    /// `lambda_min + (lambda_max - lambda_min) * sigmoid(lambda_raw)`.
    pub lambda_raw: Tensor,
    pub gate: LinearParams,
    pub out_proj: LinearParams,
    pub ln1: LayerNormParams,
    pub ffn: FfnParams,
    pub ln2: LayerNormParams,
}

impl HidLayerParams {
    fn init<R: Rng>(d_model: usize, n_heads: usize, ffn_factor: usize, rng: &mut R) -> Self {
        let d_k = d_model / n_heads;
        HidLayerParams {
            heads: (0..n_heads)
                .map(|_| HidHeadParams::init(d_model, d_k, rng))
                .collect(),
            lambda_raw: Tensor::scalar(0.0),
            gate: LinearParams::init(d_model, 1, rng),
            out_proj: LinearParams::init(d_model, d_model, rng),
            ln1: LayerNormParams::init(d_model),
            ffn: FfnParams::init(d_model, ffn_factor, rng),
            ln2: LayerNormParams::init(d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HidParams {
    pub embed: LinearParams,
    pub layers: Vec<HidLayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub cls: LinearParams,
    pub reg: LinearParams,
}

/// Every learnable tensor in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mae: MaeParams,
    pub hid: HidParams,
    pub heads: HeadParams,
}

impl ModelParams {
    pub fn init<R: Rng>(config: &RunConfig, rng: &mut R) -> Self {
        let m = &config.model;
        let h = &config.horizons;
        let token_width = 2 * (h.t_obs + h.t_pre);
        ModelParams {
            mae: MaeParams {
                embed: LinearParams::init(token_width, m.d_model, rng),
                layers: (0..m.mae_layers)
                    .map(|_| MaeLayerParams::init(m.d_model, m.heads, m.ffn_factor, rng))
                    .collect(),
            },
            hid: HidParams {
                embed: LinearParams::init(2 * h.t_obs, m.d_model, rng),
                layers: (0..m.hid_layers)
                    .map(|_| HidLayerParams::init(m.d_model, m.heads, m.ffn_factor, rng))
                    .collect(),
            },
            heads: HeadParams {
                cls: LinearParams::init(m.d_model, 1, rng),
                reg: LinearParams::init(m.d_model, 2 * h.t_pre, rng),
            },
        }
    }

    /// Stable (name, tensor) enumeration; the single source of parameter
    /// ordering for binding, gradients, the optimizer, and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        visit_linear(&mut out, "mae.embed", &self.mae.embed);
        for (l, layer) in self.mae.layers.iter().enumerate() {
            let p = format!("mae.l{l}");
            for (h, head) in layer.heads.iter().enumerate() {
                let hp = format!("{p}.h{h}");
                visit_linear(&mut out, &format!("{hp}.q_global"), &head.q_global);
                visit_linear(&mut out, &format!("{hp}.k_global"), &head.k_global);
                visit_linear(&mut out, &format!("{hp}.v_global"), &head.v_global);
                visit_linear(&mut out, &format!("{hp}.q"), &head.q);
                visit_linear(&mut out, &format!("{hp}.k"), &head.k);
                visit_linear(&mut out, &format!("{hp}.v"), &head.v);
            }
            visit_linear(&mut out, &format!("{p}.out_proj"), &layer.out_proj);
            out.push((format!("{p}.ln1.gain"), &layer.ln1.gain));
            out.push((format!("{p}.ln1.bias"), &layer.ln1.bias));
            visit_linear(&mut out, &format!("{p}.ffn1"), &layer.ffn.lin1);
            visit_linear(&mut out, &format!("{p}.ffn2"), &layer.ffn.lin2);
            out.push((format!("{p}.ln2.gain"), &layer.ln2.gain));
            out.push((format!("{p}.ln2.bias"), &layer.ln2.bias));
        }
        visit_linear(&mut out, "hid.embed", &self.hid.embed);
        for (l, layer) in self.hid.layers.iter().enumerate() {
            let p = format!("hid.l{l}");
            for (h, head) in layer.heads.iter().enumerate() {
                let hp = format!("{p}.h{h}");
                visit_linear(&mut out, &format!("{hp}.q"), &head.q);
                visit_linear(&mut out, &format!("{hp}.k"), &head.k);
                visit_linear(&mut out, &format!("{hp}.v"), &head.v);
                visit_linear(&mut out, &format!("{hp}.q_neighbor"), &head.q_neighbor);
                visit_linear(&mut out, &format!("{hp}.k_neighbor"), &head.k_neighbor);
            }
            out.push((format!("{p}.lambda_raw"), &layer.lambda_raw));
            visit_linear(&mut out, &format!("{p}.gate"), &layer.gate);
            visit_linear(&mut out, &format!("{p}.out_proj"), &layer.out_proj);
            out.push((format!("{p}.ln1.gain"), &layer.ln1.gain));
            out.push((format!("{p}.ln1.bias"), &layer.ln1.bias));
            visit_linear(&mut out, &format!("{p}.ffn1"), &layer.ffn.lin1);
            visit_linear(&mut out, &format!("{p}.ffn2"), &layer.ffn.lin2);
            out.push((format!("{p}.ln2.gain"), &layer.ln2.gain));
            out.push((format!("{p}.ln2.bias"), &layer.ln2.bias));
        }
        visit_linear(&mut out, "head.cls", &self.heads.cls);
        visit_linear(&mut out, "head.reg", &self.heads.reg);
        out
    }

    /// Mutable variant of [`ModelParams::named`]; identical ordering.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        visit_linear_mut(&mut out, "mae.embed", &mut self.mae.embed);
        for (l, layer) in self.mae.layers.iter_mut().enumerate() {
            let p = format!("mae.l{l}");
            for (h, head) in layer.heads.iter_mut().enumerate() {
                let hp = format!("{p}.h{h}");
                visit_linear_mut(&mut out, &format!("{hp}.q_global"), &mut head.q_global);
                visit_linear_mut(&mut out, &format!("{hp}.k_global"), &mut head.k_global);
                visit_linear_mut(&mut out, &format!("{hp}.v_global"), &mut head.v_global);
                visit_linear_mut(&mut out, &format!("{hp}.q"), &mut head.q);
                visit_linear_mut(&mut out, &format!("{hp}.k"), &mut head.k);
                visit_linear_mut(&mut out, &format!("{hp}.v"), &mut head.v);
            }
            visit_linear_mut(&mut out, &format!("{p}.out_proj"), &mut layer.out_proj);
            out.push((format!("{p}.ln1.gain"), &mut layer.ln1.gain));
            out.push((format!("{p}.ln1.bias"), &mut layer.ln1.bias));
            visit_linear_mut(&mut out, &format!("{p}.ffn1"), &mut layer.ffn.lin1);
            visit_linear_mut(&mut out, &format!("{p}.ffn2"), &mut layer.ffn.lin2);
            out.push((format!("{p}.ln2.gain"), &mut layer.ln2.gain));
            out.push((format!("{p}.ln2.bias"), &mut layer.ln2.bias));
        }
        visit_linear_mut(&mut out, "hid.embed", &mut self.hid.embed);
        for (l, layer) in self.hid.layers.iter_mut().enumerate() {
            let p = format!("hid.l{l}");
            for (h, head) in layer.heads.iter_mut().enumerate() {
                let hp = format!("{p}.h{h}");
                visit_linear_mut(&mut out, &format!("{hp}.q"), &mut head.q);
                visit_linear_mut(&mut out, &format!("{hp}.k"), &mut head.k);
                visit_linear_mut(&mut out, &format!("{hp}.v"), &mut head.v);
                visit_linear_mut(&mut out, &format!("{hp}.q_neighbor"), &mut head.q_neighbor);
                visit_linear_mut(&mut out, &format!("{hp}.k_neighbor"), &mut head.k_neighbor);
            }
            out.push((format!("{p}.lambda_raw"), &mut layer.lambda_raw));
            visit_linear_mut(&mut out, &format!("{p}.gate"), &mut layer.gate);
            visit_linear_mut(&mut out, &format!("{p}.out_proj"), &mut layer.out_proj);
            out.push((format!("{p}.ln1.gain"), &mut layer.ln1.gain));
            out.push((format!("{p}.ln1.bias"), &mut layer.ln1.bias));
            visit_linear_mut(&mut out, &format!("{p}.ffn1"), &mut layer.ffn.lin1);
            visit_linear_mut(&mut out, &format!("{p}.ffn2"), &mut layer.ffn.lin2);
            out.push((format!("{p}.ln2.gain"), &mut layer.ln2.gain));
            out.push((format!("{p}.ln2.bias"), &mut layer.ln2.bias));
        }
        visit_linear_mut(&mut out, "head.cls", &mut self.heads.cls);
        visit_linear_mut(&mut out, "head.reg", &mut self.heads.reg);
        out
    }

    /// Copy of the parameters with every tensor registered as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams {
        let mut bound = self.clone();
        for (_, t) in bound.named_mut() {
            *t = tape.leaf(t);
        }
        bound
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.named()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

fn visit_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, lin: &'a LinearParams) {
    out.push((format!("{prefix}.w"), &lin.w));
    out.push((format!("{prefix}.b"), &lin.b));
}

fn visit_linear_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    lin: &'a mut LinearParams,
) {
    out.push((format!("{prefix}.w"), &mut lin.w));
    out.push((format!("{prefix}.b"), &mut lin.b));
}

// ── Checkpoint files ─────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct ParamBlob {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk model state: named flat tensors plus the configuration echo
/// they were trained under.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    params: BTreeMap<String, ParamBlob>,
}

pub fn save_checkpoint(
    params: &ModelParams,
    config: &RunConfig,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let blobs: BTreeMap<String, ParamBlob> = params
        .named()
        .into_iter()
        .map(|(name, t)| {
            (
                name,
                ParamBlob {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            )
        })
        .collect();
    let ckpt = Checkpoint {
        config: config.clone(),
        seed,
        params: blobs,
    };
    let text = serde_json::to_string(&ckpt)
        .map_err(|e| Error::Format(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Load a checkpoint and validate it against the active configuration.
pub fn load_checkpoint(path: &Path, config: &RunConfig) -> Result<(ModelParams, u64)> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: bad checkpoint: {e}", path.display())))?;
    if ckpt.config.model != config.model || ckpt.config.horizons != config.horizons {
        return Err(Error::Config(
            "checkpoint was trained under a different model configuration".into(),
        ));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut params = ModelParams::init(config, &mut rng);
    let mut used = 0usize;
    for (name, t) in params.named_mut() {
        let blob = ckpt
            .params
            .get(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter '{name}'")))?;
        if blob.shape != t.shape() {
            return Err(Error::Config(format!(
                "parameter '{name}': checkpoint shape {:?} vs configured {:?}",
                blob.shape,
                t.shape()
            )));
        }
        *t = Tensor::new(blob.shape.clone(), blob.data.clone())?;
        used += 1;
    }
    if used != ckpt.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {used}",
            ckpt.params.len()
        )));
    }
    Ok((params, ckpt.seed))
}
