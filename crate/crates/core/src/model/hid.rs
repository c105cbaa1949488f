//! Hierarchical interaction decoder: dual-pathway cross-attention over
//! neighbors with a learnable fusion weight and gated combination.

use crate::data::Scene;
use crate::error::Result;
use crate::model::params::{HidLayerParams, HidParams};
use crate::modes::flatten_future;
use crate::numerics::MASK_NEG;
use crate::numerics::{Tape, Tensor};

/// Per-head decoder attention record.
#[derive(Debug, Clone)]
pub struct HidHeadTrace {
    /// Neighbor-context weights over neighbor slots (zeros when no
    /// neighbor is valid).
    pub beta: Vec<f64>,
    /// Standard cross-attention weights, `[modes][neighbor slots]`.
    pub std_attn: Vec<Vec<f64>>,
    /// Context-enhanced cross-attention weights, same shape.
    pub enh_attn: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HidLayerTrace {
    pub heads: Vec<HidHeadTrace>,
    /// Gate values per decoded mode, in (0, 1).
    pub gate: Vec<f64>,
    /// Effective fusion weight for this layer.
    pub lambda: f64,
}

/// Decoder output: socially conditioned mode features plus traces.
#[derive(Debug)]
pub struct HidOutput {
    /// `[decoded modes, d_model]`.
    pub features: Tensor,
    pub trace: Vec<HidLayerTrace>,
}

/// Embed flattened neighbor histories: `[n_slots, d_model]`. Padded rows
/// are embedded too; masking removes them from every attention sum.
pub fn embed_neighbors(
    tape: &mut Tape,
    scene: &Scene,
    embed: &crate::model::params::LinearParams,
    t_obs: usize,
) -> Result<Tensor> {
    let n = scene.neighbors_obs.len();
    let mut data = Vec::with_capacity(n * 2 * t_obs);
    for row in &scene.neighbors_obs {
        data.extend(flatten_future(row));
    }
    let flat = Tensor::new(vec![n, 2 * t_obs], data)?;
    embed.apply(tape, &flat)
}

/// Additive mask vector: 0 for valid slots, a large negative number for
/// padding, so masked softmax weights underflow to exactly zero.
pub fn validity_bias(valid: &[bool]) -> Tensor {
    Tensor::vector(
        &valid
            .iter()
            .map(|&v| if v { 0.0 } else { MASK_NEG })
            .collect::<Vec<_>>(),
    )
}

/// Masked scaled dot-product cross-attention for one head.
/// Returns the attended values `[m, d_k]` and the attention weights.
pub fn cross_attention(
    tape: &mut Tape,
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask_bias: &Tensor,
    d_k: usize,
) -> Result<(Tensor, Tensor)> {
    let kt = tape.transpose(keys)?;
    let raw = tape.matmul(queries, &kt)?;
    let scaled = tape.scale(&raw, 1.0 / (d_k as f64).sqrt())?;
    let masked = tape.add_rowvec(&scaled, mask_bias)?;
    let attn = tape.softmax_last(&masked)?;
    let out = tape.matmul(&attn, values)?;
    Ok((out, attn))
}

/// Scaled additive aggregation over valid neighbors; the context values
/// come from the shared cross-attention value projection.
/// Returns `(context [1, d_k], beta weights)`; both zero when no neighbor
/// is valid.
pub fn neighbor_global_context(
    tape: &mut Tape,
    neighbor_values: &Tensor,
    neighbor_embeds: &Tensor,
    head: &crate::model::params::HidHeadParams,
    mask_bias: &Tensor,
    n_valid: usize,
    d_k: usize,
) -> Result<(Tensor, Tensor)> {
    let n_slots = neighbor_embeds.shape()[0];
    if n_valid == 0 {
        return Ok((Tensor::zeros(vec![1, d_k]), Tensor::zeros(vec![n_slots])));
    }
    let qn = head.q_neighbor.apply(tape, neighbor_embeds)?;
    let kn = head.k_neighbor.apply(tape, neighbor_embeds)?;
    let added = tape.add(&qn, &kn)?;
    let act = tape.tanh(&added)?;
    let summed = tape.sum_last(&act)?;
    let scaled = tape.scale(&summed, 1.0 / (d_k as f64).sqrt())?;
    let masked = tape.add(&scaled, mask_bias)?;
    let beta = tape.softmax_last(&masked)?;
    let beta_row = tape.reshape(&beta, vec![1, n_slots])?;
    let g = tape.matmul(&beta_row, neighbor_values)?;
    Ok((g, beta))
}

/// One decoder layer over `modes_in` (`[m, d_model]`).
pub fn hid_layer(
    tape: &mut Tape,
    modes_in: &Tensor,
    neighbor_embeds: &Tensor,
    valid: &[bool],
    layer: &HidLayerParams,
    d_k: usize,
    lambda_bounds: (f64, f64),
) -> Result<(Tensor, HidLayerTrace)> {
    let m = modes_in.shape()[0];
    let n_slots = neighbor_embeds.shape()[0];
    let n_valid = valid.iter().filter(|v| **v).count();
    let mask_bias = validity_bias(valid);

    // lambda = min + (max - min) * sigmoid(raw)
    let sig = tape.sigmoid(&layer.lambda_raw)?;
    let span = lambda_bounds.1 - lambda_bounds.0;
    let scaled = tape.scale(&sig, span)?;
    let lambda = tape.add_scalar(&scaled, lambda_bounds.0)?;

    let (o_std, o_enh, head_traces) = if n_valid == 0 {
        // no social context: both pathways are defined as zero
        let zeros = Tensor::zeros(vec![m, layer.out_proj.w.shape()[0]]);
        let traces = layer
            .heads
            .iter()
            .map(|_| HidHeadTrace {
                beta: vec![0.0; n_slots],
                std_attn: vec![vec![0.0; n_slots]; m],
                enh_attn: vec![vec![0.0; n_slots]; m],
            })
            .collect();
        (zeros.clone(), zeros, traces)
    } else {
        let mut std_heads = Vec::with_capacity(layer.heads.len());
        let mut enh_heads = Vec::with_capacity(layer.heads.len());
        let mut traces = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let q = head.q.apply(tape, modes_in)?;
            let keys = head.k.apply(tape, neighbor_embeds)?;
            let values = head.v.apply(tape, neighbor_embeds)?;
            let (g_neig, beta) = neighbor_global_context(
                tape,
                &values,
                neighbor_embeds,
                head,
                &mask_bias,
                n_valid,
                d_k,
            )?;
            let (std_out, std_attn) = cross_attention(tape, &q, &keys, &values, &mask_bias, d_k)?;
            let lam_g = tape.scale_by(&g_neig, &lambda)?;
            let lam_g_vec = tape.reshape(&lam_g, vec![d_k])?;
            let q_enh = tape.add_rowvec(&q, &lam_g_vec)?;
            let (enh_out, enh_attn) =
                cross_attention(tape, &q_enh, &keys, &values, &mask_bias, d_k)?;
            traces.push(HidHeadTrace {
                beta: beta.data().to_vec(),
                std_attn: (0..m).map(|r| std_attn.row(r).to_vec()).collect(),
                enh_attn: (0..m).map(|r| enh_attn.row(r).to_vec()).collect(),
            });
            std_heads.push(std_out);
            enh_heads.push(enh_out);
        }
        let std_refs: Vec<&Tensor> = std_heads.iter().collect();
        let enh_refs: Vec<&Tensor> = enh_heads.iter().collect();
        let std_cat = tape.concat_cols(&std_refs)?;
        let enh_cat = tape.concat_cols(&enh_refs)?;
        // one shared output projection for both pathways
        let o_std = layer.out_proj.apply(tape, &std_cat)?;
        let o_enh = layer.out_proj.apply(tape, &enh_cat)?;
        (o_std, o_enh, traces)
    };

    // mode-specific gate from the layer input
    let gate_logit = layer.gate.apply(tape, modes_in)?;
    let gate = tape.sigmoid(&gate_logit)?;
    let gate_vec = tape.reshape(&gate, vec![m])?;
    let neg = tape.scale(&gate_vec, -1.0)?;
    let complement = tape.add_scalar(&neg, 1.0)?;
    let std_part = tape.scale_rows(&o_std, &gate_vec)?;
    let enh_part = tape.scale_rows(&o_enh, &complement)?;
    let c_dec = tape.add(&std_part, &enh_part)?;

    let residual = tape.add(&c_dec, modes_in)?;
    let c1 = layer.ln1.apply(tape, &residual)?;
    let ffn_out = layer.ffn.apply(tape, &c1)?;
    let residual2 = tape.add(&c1, &ffn_out)?;
    let out = layer.ln2.apply(tape, &residual2)?;

    Ok((
        out,
        HidLayerTrace {
            heads: head_traces,
            gate: gate_vec.data().to_vec(),
            lambda: lambda.item()?,
        },
    ))
}

/// Full decoder over selected mode features.
pub fn hid_forward(
    tape: &mut Tape,
    modes: &Tensor,
    scene: &Scene,
    params: &HidParams,
    t_obs: usize,
    d_k: usize,
    lambda_bounds: (f64, f64),
) -> Result<HidOutput> {
    let neighbor_embeds = embed_neighbors(tape, scene, &params.embed, t_obs)?;
    let mut x = modes.clone();
    let mut trace = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, layer_trace) = hid_layer(
            tape,
            &x,
            &neighbor_embeds,
            &scene.neighbor_valid,
            layer,
            d_k,
            lambda_bounds,
        )?;
        x = next;
        trace.push(layer_trace);
    }
    Ok(HidOutput { features: x, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::NormTransform;
    use crate::model::params::{HidHeadParams, LinearParams, ModelParams};
    use crate::numerics::grad_check_named;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.d_model = 16;
        c.model.heads = 2;
        c.model.k_modes = 4;
        c.model.k_top = 2;
        c
    }

    fn scene_with_neighbors(rng: &mut ChaCha8Rng, n_valid: usize, n_slots: usize) -> Scene {
        let mut neighbors_obs = Vec::new();
        for _ in 0..n_valid {
            neighbors_obs.push(
                (0..8)
                    .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-8.0..8.0)])
                    .collect(),
            );
        }
        for _ in n_valid..n_slots {
            neighbors_obs.push(vec![[0.0, 0.0]; 8]);
        }
        let mut valid = vec![true; n_valid];
        valid.extend(vec![false; n_slots - n_valid]);
        Scene {
            start_time: 0.0,
            target_obs: (0..8).map(|k| [(7 - k) as f64 * 5.0, 0.0]).collect(),
            target_future: Some((1..=12).map(|k| [-(k as f64) * 5.0, 0.0]).collect()),
            neighbors_obs,
            neighbor_valid: valid,
            norm: NormTransform::identity(),
        }
    }

    fn random_modes(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![m, d],
            (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn neighbor_embedding_width_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut rng);
        assert_eq!(params.hid.embed.w.shape(), &[16, 16]); // 2 * t_obs = 16 in
        let mut scene = scene_with_neighbors(&mut rng, 1, 2);
        scene.neighbors_obs[0] = vec![[0.0, 0.0]; 8];
        let mut tape = Tape::new();
        let e = embed_neighbors(&mut tape, &scene, &params.hid.embed, 8).unwrap();
        assert_eq!(e.shape(), &[2, 16]);
        // zero history with zero bias embeds to zero
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_neighbors_embed_identically_and_split_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut rng);
        let mut scene = scene_with_neighbors(&mut rng, 2, 2);
        scene.neighbors_obs[1] = scene.neighbors_obs[0].clone();
        let modes = random_modes(&mut rng, 3, 16);
        let mut tape = Tape::new();
        let out = hid_forward(&mut tape, &modes, &scene, &params.hid, 8, 8, (0.0, 1.0)).unwrap();
        for head in &out.trace[0].heads {
            // identical valid neighbors share weight equally
            assert!((head.beta[0] - 0.5).abs() < 1e-12);
            assert!((head.beta[1] - 0.5).abs() < 1e-12);
            for row in &head.std_attn {
                assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_valid_neighbor_takes_all_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut rng);
        let scene = scene_with_neighbors(&mut rng, 1, 3);
        let modes = random_modes(&mut rng, 2, 16);
        let mut tape = Tape::new();
        let out = hid_forward(&mut tape, &modes, &scene, &params.hid, 8, 8, (0.0, 1.0)).unwrap();
        for head in &out.trace[0].heads {
            assert_eq!(head.beta[0], 1.0);
            assert_eq!(head.beta[1], 0.0);
            for row in &head.std_attn {
                assert_eq!(row[0], 1.0);
                assert_eq!(row[1], 0.0);
                assert_eq!(row[2], 0.0);
            }
            for row in &head.enh_attn {
                assert_eq!(row[0], 1.0);
            }
        }
        // beta one-hot means the context equals the lone value projection
        let head = &params.hid.layers[0].heads[0];
        let mut t2 = Tape::new();
        let e = embed_neighbors(&mut t2, &scene, &params.hid.embed, 8).unwrap();
        let values = head.v.apply(&mut t2, &e).unwrap();
        let bias = validity_bias(&scene.neighbor_valid);
        let (g, _) = neighbor_global_context(&mut t2, &values, &e, head, &bias, 1, 8).unwrap();
        for j in 0..8 {
            assert!((g.data()[j] - values.row(0)[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn mutating_padded_slots_never_changes_any_output_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut rng);
        let scene = scene_with_neighbors(&mut rng, 2, 4);
        let modes = random_modes(&mut rng, 3, 16);
        let mut tape = Tape::new();
        let base = hid_forward(&mut tape, &modes, &scene, &params.hid, 8, 8, (0.0, 1.0)).unwrap();
        for _ in 0..20 {
            let mut mutated = scene.clone();
            for slot in 2..4 {
                for p in mutated.neighbors_obs[slot].iter_mut() {
                    p[0] = rng.gen_range(-1000.0..1000.0);
                    p[1] = rng.gen_range(-1000.0..1000.0);
                }
            }
            let mut tape = Tape::new();
            let out =
                hid_forward(&mut tape, &modes, &mutated, &params.hid, 8, 8, (0.0, 1.0)).unwrap();
            assert_eq!(out.features.data(), base.features.data());
        }
    }

    #[test]
    fn permuting_valid_neighbors_leaves_outputs_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut rng);
        let scene = scene_with_neighbors(&mut rng, 4, 5);
        let modes = random_modes(&mut rng, 3, 16);
        let mut tape = Tape::new();
        let base = hid_forward(&mut tape, &modes, &scene, &params.hid, 8, 8, (0.0, 1.0)).unwrap();
        let mut permuted = scene.clone();
        permuted.neighbors_obs.swap(0, 3);
        permuted.neighbors_obs.swap(1, 2);
        let mut tape = Tape::new();
        let out = hid_forward(&mut tape, &modes, &permuted, &params.hid, 8, 8, (0.0, 1.0)).unwrap();
        for (a, b) in base.features.data().iter().zip(out.features.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_mapping_and_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = test_config();
        let mut params = ModelParams::init(&cfg, &mut rng);
        let scene = scene_with_neighbors(&mut rng, 2, 2);
        let modes = random_modes(&mut rng, 2, 16);
        // lambda_raw = 0 with bounds [0, 1] gives exactly 0.5
        params.hid.layers[0].lambda_raw = Tensor::scalar(0.0);
        let mut tape = Tape::new();
        let out = hid_forward(&mut tape, &modes, &scene, &params.hid, 8, 8, (0.0, 1.0)).unwrap();
        assert_eq!(out.trace[0].lambda, 0.5);
        // deep negative raw saturates to the lower bound
        params.hid.layers[0].lambda_raw = Tensor::scalar(-20.0);
        let mut tape = Tape::new();
        let out = hid_forward(&mut tape, &modes, &scene, &params.hid, 8, 8, (0.0, 1.0)).unwrap();
        assert!(out.trace[0].lambda < 1e-8);
        // custom bounds
        params.hid.layers[0].lambda_raw = Tensor::scalar(0.0);
        let mut tape = Tape::new();
        let out = hid_forward(&mut tape, &modes, &scene, &params.hid, 8, 8, (0.25, 0.75)).unwrap();
        assert_eq!(out.trace[0].lambda, 0.5);
    }

    #[test]
    fn zero_lambda_makes_pathways_coincide_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = test_config();
        let mut params = ModelParams::init(&cfg, &mut rng);
        // sigmoid(-1000) underflows to exactly zero
        params.hid.layers[0].lambda_raw = Tensor::scalar(-1000.0);
        let scene = scene_with_neighbors(&mut rng, 3, 3);
        let modes = random_modes(&mut rng, 4, 16);
        let mut tape = Tape::new();
        let out = hid_forward(&mut tape, &modes, &scene, &params.hid, 8, 8, (0.0, 1.0)).unwrap();
        assert_eq!(out.trace[0].lambda, 0.0);
        for head in &out.trace[0].heads {
            assert_eq!(head.std_attn, head.enh_attn);
        }
    }

    #[test]
    fn gate_limits_select_one_pathway() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = test_config();
        let mut params = ModelParams::init(&cfg, &mut rng);
        let scene = scene_with_neighbors(&mut rng, 2, 2);
        let modes = random_modes(&mut rng, 2, 16);
        let d_k = 8;

        let run = |params: &ModelParams| {
            let mut tape = Tape::new();
            let e = embed_neighbors(&mut tape, &scene, &params.hid.embed, 8).unwrap();
            hid_layer(
                &mut tape,
                &modes,
                &e,
                &scene.neighbor_valid,
                &params.hid.layers[0],
                d_k,
                (0.0, 1.0),
            )
            .unwrap()
            .1
        };
        params.hid.layers[0].gate.w = Tensor::zeros(vec![16, 1]);
        params.hid.layers[0].gate.b = Tensor::vector(&[1000.0]);
        let trace = run(&params);
        assert!(trace.gate.iter().all(|&g| g == 1.0));
        params.hid.layers[0].gate.b = Tensor::vector(&[-1000.0]);
        let trace = run(&params);
        assert!(trace.gate.iter().all(|&g| g == 0.0));
        // finite logits keep the gate strictly inside (0, 1)
        params.hid.layers[0].gate.b = Tensor::vector(&[0.35]);
        let trace = run(&params);
        assert!(trace.gate.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn half_gate_takes_the_pathway_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = test_config();
        let mut params = ModelParams::init(&cfg, &mut rng);
        params.hid.layers[0].gate.w = Tensor::zeros(vec![16, 1]);
        params.hid.layers[0].gate.b = Tensor::zeros(vec![1]);
        let scene = scene_with_neighbors(&mut rng, 2, 2);
        let modes = random_modes(&mut rng, 2, 16);
        let mut tape = Tape::new();
        let e = embed_neighbors(&mut tape, &scene, &params.hid.embed, 8).unwrap();
        let (_, trace) = hid_layer(
            &mut tape,
            &modes,
            &e,
            &scene.neighbor_valid,
            &params.hid.layers[0],
            8,
            (0.0, 1.0),
        )
        .unwrap();
        assert!(trace.gate.iter().all(|&g| g == 0.5));
    }

    #[test]
    fn no_valid_neighbors_degenerate_to_the_residual_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut rng);
        let scene = scene_with_neighbors(&mut rng, 0, 2);
        let modes = random_modes(&mut rng, 3, 16);
        let mut tape = Tape::new();
        let out = hid_forward(&mut tape, &modes, &scene, &params.hid, 8, 8, (0.0, 1.0)).unwrap();
        // expected: ffn block applied to LayerNorm(modes), c_dec = 0
        let layer = &params.hid.layers[0];
        let c1 = layer.ln1.apply(&mut tape, &modes).unwrap();
        let f = layer.ffn.apply(&mut tape, &c1).unwrap();
        let r2 = tape.add(&c1, &f).unwrap();
        let expect = layer.ln2.apply(&mut tape, &r2).unwrap();
        assert_eq!(out.features.data(), expect.data());
        for head in &out.trace[0].heads {
            assert!(head.beta.iter().all(|&b| b == 0.0));
        }
    }

    // Independent scalar evaluation of neighbor context aggregation.
    #[test]
    fn neighbor_context_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d_k = 2;
        let d_model = 6;
        let head = HidHeadParams {
            q: LinearParams::init(d_model, d_k, &mut rng),
            k: LinearParams::init(d_model, d_k, &mut rng),
            v: LinearParams::init(d_model, d_k, &mut rng),
            q_neighbor: LinearParams::init(d_model, d_k, &mut rng),
            k_neighbor: LinearParams::init(d_model, d_k, &mut rng),
        };
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d_model).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let embeds = Tensor::matrix(&rows).unwrap();
        let valid = vec![true, true, true];
        let bias = validity_bias(&valid);
        let mut tape = Tape::new();
        let values = head.v.apply(&mut tape, &embeds).unwrap();
        let (g, beta) =
            neighbor_global_context(&mut tape, &values, &embeds, &head, &bias, 3, d_k).unwrap();

        let lin = |p: &LinearParams, x: &[f64]| -> Vec<f64> {
            let (din, dout) = (p.w.shape()[0], p.w.shape()[1]);
            (0..dout)
                .map(|j| {
                    (0..din)
                        .map(|i| x[i] * p.w.data()[i * dout + j])
                        .sum::<f64>()
                        + p.b.data()[j]
                })
                .collect()
        };
        let raw: Vec<f64> = rows
            .iter()
            .map(|r| {
                let q = lin(&head.q_neighbor, r);
                let k = lin(&head.k_neighbor, r);
                (0..d_k).map(|j| (q[j] + k[j]).tanh()).sum::<f64>() / (d_k as f64).sqrt()
            })
            .collect();
        let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = raw.iter().map(|&s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let beta_o: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let mut g_o = vec![0.0; d_k];
        for (i, r) in rows.iter().enumerate() {
            let v = lin(&head.v, r);
            for j in 0..d_k {
                g_o[j] += beta_o[i] * v[j];
            }
        }
        for (a, b) in beta.data().iter().zip(&beta_o) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.data().iter().zip(&g_o) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Scalar oracle for one cross-attention head.
    #[test]
    fn cross_attention_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d_k = 2;
        let q_rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d_k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let k_rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d_k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let v_rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d_k).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let valid = vec![true, true, true, false];
        let mut tape = Tape::new();
        let (out, attn) = cross_attention(
            &mut tape,
            &Tensor::matrix(&q_rows).unwrap(),
            &Tensor::matrix(&k_rows).unwrap(),
            &Tensor::matrix(&v_rows).unwrap(),
            &validity_bias(&valid),
            d_k,
        )
        .unwrap();

        for (r, q) in q_rows.iter().enumerate() {
            let mut scores: Vec<f64> = k_rows
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    if valid[i] {
                        (0..d_k).map(|j| q[j] * k[j]).sum::<f64>() / (d_k as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
            }
            let z: f64 = scores.iter().sum();
            let weights: Vec<f64> = scores.iter().map(|&e| e / z).collect();
            let mut expect = vec![0.0; d_k];
            for (i, v) in v_rows.iter().enumerate() {
                for j in 0..d_k {
                    expect[j] += weights[i] * v[j];
                }
            }
            for j in 0..d_k {
                assert!((out.row(r)[j] - expect[j]).abs() < 1e-12);
            }
            for (i, &w) in weights.iter().enumerate() {
                assert!((attn.row(r)[i] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = test_config();
        let params = ModelParams::init(&cfg, &mut rng);
        let scene = scene_with_neighbors(&mut rng, 2, 3);
        let modes = random_modes(&mut rng, 2, 16);
        let layer = params.hid.layers[0].clone();
        let embed = params.hid.embed.clone();
        let valid = scene.neighbor_valid.clone();
        let scene2 = scene.clone();

        let inputs = vec![
            ("modes", modes),
            ("lambda_raw", layer.lambda_raw.clone()),
            ("gate.w", layer.gate.w.clone()),
            ("h0.q.w", layer.heads[0].q.w.clone()),
            ("h0.q_neighbor.w", layer.heads[0].q_neighbor.w.clone()),
            ("h1.v.w", layer.heads[1].v.w.clone()),
            ("out_proj.w", layer.out_proj.w.clone()),
            ("embed.w", embed.w.clone()),
        ];
        let report = grad_check_named(
            move |tape, vals| {
                let mut l = layer.clone();
                l.lambda_raw = vals[1].clone();
                l.gate.w = vals[2].clone();
                l.heads[0].q.w = vals[3].clone();
                l.heads[0].q_neighbor.w = vals[4].clone();
                l.heads[1].v.w = vals[5].clone();
                l.out_proj.w = vals[6].clone();
                let mut e = embed.clone();
                e.w = vals[7].clone();
                let n_embed = embed_neighbors(tape, &scene2, &e, 8).unwrap();
                let (out, _) =
                    hid_layer(tape, &vals[0], &n_embed, &valid, &l, 8, (0.0, 1.0)).unwrap();
                let squashed = tape.tanh(&out).unwrap();
                tape.sum_all(&squashed).unwrap()
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed,
            "max rel err {:.3e} at {:?}",
            report.max_rel_err, report.worst
        );
    }
}
