//! Attention-weight extraction for model-inference explanation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::model::heads::classify_modes;
use crate::model::{hid_forward, mae_forward, ModelParams};
use crate::modes::MotionModeBank;
use crate::numerics::Tape;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaeHeadExport {
    /// Global-context weights over modes; a distribution.
    pub alpha: Vec<f64>,
    /// Raw context-transform scores over modes.
    pub s_en: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaeLayerExport {
    pub heads: Vec<MaeHeadExport>,
    pub alpha_mean: Vec<f64>,
    pub s_en_mean: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HidHeadExport {
    /// Neighbor-context weights; a distribution over valid slots or zero.
    pub beta: Vec<f64>,
    /// modes x neighbor-slots attention weights, standard pathway.
    pub std_attn: Vec<Vec<f64>>,
    /// Same shape, context-enhanced pathway.
    pub enh_attn: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HidLayerExport {
    pub heads: Vec<HidHeadExport>,
    pub beta_mean: Vec<f64>,
    pub std_attn_mean: Vec<Vec<f64>>,
    pub enh_attn_mean: Vec<Vec<f64>>,
    /// Gate value per mode.
    pub gate: Vec<f64>,
    /// Effective fusion weight.
    pub lambda: f64,
}

/// Full per-scene attention trace: every mode decoded, per-head and
/// head-averaged weights for both submodules, plus classifier scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub k: usize,
    pub n_neighbor_slots: usize,
    pub n_valid_neighbors: usize,
    pub cls_scores: Vec<f64>,
    pub mae: Vec<MaeLayerExport>,
    pub hid: Vec<HidLayerExport>,
}

fn mean_rows(rows: &[&Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let len = rows.first().map_or(0, |r| r.len());
    (0..len)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect()
}

fn mean_mats(mats: &[&Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = mats.len() as f64;
    let rows = mats.first().map_or(0, |m| m.len());
    (0..rows)
        .map(|r| {
            let cols = mats[0][r].len();
            (0..cols)
                .map(|c| mats.iter().map(|m| m[r][c]).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Capture attention for one scene, decoding all K modes.
pub fn trace_for_scene(
    params: &ModelParams,
    bank: &MotionModeBank,
    config: &RunConfig,
    scene: &Scene,
) -> Result<AttentionTrace> {
    let mut tape = Tape::new();
    let mae = mae_forward(
        &mut tape,
        scene,
        bank,
        &params.mae,
        config.horizons.t_obs,
        config.horizons.t_pre,
        config.head_dim(),
    )?;
    let scores = classify_modes(&mut tape, &mae.features, &params.heads.cls)?;
    let hid = hid_forward(
        &mut tape,
        &mae.features,
        scene,
        &params.hid,
        config.horizons.t_obs,
        config.head_dim(),
        (config.model.lambda_min, config.model.lambda_max),
    )?;

    let mae_export: Vec<MaeLayerExport> = mae
        .trace
        .iter()
        .map(|layer| {
            let heads: Vec<MaeHeadExport> = layer
                .iter()
                .map(|h| MaeHeadExport {
                    alpha: h.alpha.clone(),
                    s_en: h.s_en.clone(),
                })
                .collect();
            let alphas: Vec<&Vec<f64>> = layer.iter().map(|h| &h.alpha).collect();
            let s_ens: Vec<&Vec<f64>> = layer.iter().map(|h| &h.s_en).collect();
            MaeLayerExport {
                alpha_mean: mean_rows(&alphas),
                s_en_mean: mean_rows(&s_ens),
                heads,
            }
        })
        .collect();

    let hid_export: Vec<HidLayerExport> = hid
        .trace
        .iter()
        .map(|layer| {
            let heads: Vec<HidHeadExport> = layer
                .heads
                .iter()
                .map(|h| HidHeadExport {
                    beta: h.beta.clone(),
                    std_attn: h.std_attn.clone(),
                    enh_attn: h.enh_attn.clone(),
                })
                .collect();
            let betas: Vec<&Vec<f64>> = layer.heads.iter().map(|h| &h.beta).collect();
            let stds: Vec<&Vec<Vec<f64>>> = layer.heads.iter().map(|h| &h.std_attn).collect();
            let enhs: Vec<&Vec<Vec<f64>>> = layer.heads.iter().map(|h| &h.enh_attn).collect();
            HidLayerExport {
                beta_mean: mean_rows(&betas),
                std_attn_mean: mean_mats(&stds),
                enh_attn_mean: mean_mats(&enhs),
                gate: layer.gate.clone(),
                lambda: layer.lambda,
                heads,
            }
        })
        .collect();

    let trace = AttentionTrace {
        k: bank.k,
        n_neighbor_slots: scene.neighbors_obs.len(),
        n_valid_neighbors: scene.n_valid_neighbors(),
        cls_scores: scores.data().to_vec(),
        mae: mae_export,
        hid: hid_export,
    };
    validate_trace(&trace)?;
    Ok(trace)
}

// Every attention row must sum to one over its valid support, or be
// all-zero when the support is empty.
fn validate_trace(trace: &AttentionTrace) -> Result<()> {
    let check_dist = |v: &[f64], what: &str| -> Result<()> {
        let s: f64 = v.iter().sum();
        let zero = v.iter().all(|&x| x == 0.0);
        if !zero && (s - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("{what} sums to {s}, expected 1")));
        }
        if v.iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric(format!("{what} has negative entries")));
        }
        Ok(())
    };
    for (l, layer) in trace.mae.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            check_dist(&head.alpha, &format!("mae layer {l} head {h} alpha"))?;
        }
        check_dist(&layer.alpha_mean, &format!("mae layer {l} mean alpha"))?;
    }
    for (l, layer) in trace.hid.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            check_dist(&head.beta, &format!("hid layer {l} head {h} beta"))?;
            for (r, row) in head.std_attn.iter().enumerate() {
                check_dist(row, &format!("hid layer {l} head {h} std row {r}"))?;
            }
            for (r, row) in head.enh_attn.iter().enumerate() {
                check_dist(row, &format!("hid layer {l} head {h} enh row {r}"))?;
            }
        }
        for &g in &layer.gate {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Numeric(format!("gate value {g} outside [0, 1]")));
            }
        }
    }
    Ok(())
}

/// Validate and write the trace for one scene as JSON.
pub fn export_attention_trace(
    params: &ModelParams,
    bank: &MotionModeBank,
    config: &RunConfig,
    scene: &Scene,
    path: &Path,
) -> Result<AttentionTrace> {
    let trace = trace_for_scene(params, bank, config, scene)?;
    let text = serde_json::to_string_pretty(&trace)
        .map_err(|e| Error::Format(format!("trace serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NormTransform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (RunConfig, ModelParams, MotionModeBank, Scene) {
        let mut config = RunConfig::default();
        config.model.d_model = 16;
        config.model.heads = 2;
        config.model.k_modes = 5;
        config.model.k_top = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ModelParams::init(&config, &mut rng);
        let bank = MotionModeBank {
            k: 5,
            t_pre: 12,
            modes: (0..5)
                .map(|_| {
                    (1..=12)
                        .map(|t| {
                            [
                                -(t as f64) * rng.gen_range(3.0..7.0),
                                rng.gen_range(-2.0..2.0),
                            ]
                        })
                        .collect()
                })
                .collect(),
            seed: 0,
            objective: 1.0,
            iterations: 1,
        };
        let scene = Scene {
            start_time: 0.0,
            target_obs: {
                let mut obs: Vec<[f64; 2]> = (0..8).map(|k| [(7 - k) as f64 * 5.0, 0.0]).collect();
                obs[7] = [0.0, 0.0];
                obs
            },
            target_future: Some((1..=12).map(|k| [-(k as f64) * 5.0, 0.0]).collect()),
            neighbors_obs: vec![
                (0..8).map(|k| [(7 - k) as f64 * 5.0, 3.5]).collect(),
                vec![[0.0, 0.0]; 8],
            ],
            neighbor_valid: vec![true, false],
            norm: NormTransform::identity(),
        };
        (config, params, bank, scene)
    }

    #[test]
    fn trace_covers_all_modes_and_validates() {
        let (config, params, bank, scene) = setup();
        let trace = trace_for_scene(&params, &bank, &config, &scene).unwrap();
        assert_eq!(trace.k, 5);
        assert_eq!(trace.cls_scores.len(), 5);
        assert_eq!(trace.mae.len(), 2);
        assert_eq!(trace.mae[0].heads.len(), 2);
        assert_eq!(trace.mae[0].heads[0].alpha.len(), 5);
        assert_eq!(trace.hid[0].heads[0].std_attn.len(), 5);
        assert_eq!(trace.hid[0].heads[0].std_attn[0].len(), 2);
        assert_eq!(trace.hid[0].gate.len(), 5);
    }

    #[test]
    fn single_valid_neighbor_gets_unit_beta() {
        let (config, params, bank, scene) = setup();
        let trace = trace_for_scene(&params, &bank, &config, &scene).unwrap();
        for head in &trace.hid[0].heads {
            assert_eq!(head.beta[0], 1.0);
            assert_eq!(head.beta[1], 0.0);
        }
    }

    #[test]
    fn head_averages_match_recomputation_after_reload() {
        let (config, params, bank, scene) = setup();
        let dir = std::env::temp_dir().join("trajcast_trace_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.json");
        export_attention_trace(&params, &bank, &config, &scene, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let loaded: AttentionTrace = serde_json::from_str(&text).unwrap();
        for layer in &loaded.mae {
            for j in 0..loaded.k {
                let mean: f64 =
                    layer.heads.iter().map(|h| h.alpha[j]).sum::<f64>() / layer.heads.len() as f64;
                assert!((layer.alpha_mean[j] - mean).abs() < 1e-12);
                let mean_s: f64 =
                    layer.heads.iter().map(|h| h.s_en[j]).sum::<f64>() / layer.heads.len() as f64;
                assert!((layer.s_en_mean[j] - mean_s).abs() < 1e-12);
            }
        }
        for layer in &loaded.hid {
            for j in 0..loaded.n_neighbor_slots {
                let mean: f64 =
                    layer.heads.iter().map(|h| h.beta[j]).sum::<f64>() / layer.heads.len() as f64;
                assert!((layer.beta_mean[j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broken_weights_fail_validation() {
        let (config, params, bank, scene) = setup();
        let mut trace = trace_for_scene(&params, &bank, &config, &scene).unwrap();
        trace.mae[0].heads[0].alpha[0] += 0.5;
        assert!(validate_trace(&trace).is_err());
    }
}
