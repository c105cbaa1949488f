//! Dual-head output: mode classification, closest-mode regression, the
//! two losses, and top-k inference.

use crate::config::{RegressionTarget, RunConfig};
use crate::data::{denormalize_prediction, Point, Scene};
use crate::error::{Error, Result};
use crate::model::hid::{hid_forward, HidOutput};
use crate::model::params::{LinearParams, ModelParams};
use crate::modes::{flatten_future, unflatten_future, MotionModeBank};
use crate::numerics::{Tape, Tensor};

/// Confidence score per mode: `[K]` from `[K, d_model]` features.
pub fn classify_modes(tape: &mut Tape, features: &Tensor, cls: &LinearParams) -> Result<Tensor> {
    let k = features.shape()[0];
    let logits = cls.apply(tape, features)?;
    tape.reshape(&logits, vec![k])
}

/// Flattened-trajectory distances to every mode. `squared` selects the
/// squared Euclidean variant.
pub fn mode_distances(future: &[Point], bank: &MotionModeBank, squared: bool) -> Vec<f64> {
    let y = flatten_future(future);
    bank.modes
        .iter()
        .map(|m| {
            let d2: f64 = flatten_future(m)
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if squared {
                d2
            } else {
                d2.sqrt()
            }
        })
        .collect()
}

/// Soft labels over modes: `softmax(-distance)`.
pub fn soft_labels(future: &[Point], bank: &MotionModeBank, squared: bool) -> Vec<f64> {
    let neg: Vec<f64> = mode_distances(future, bank, squared)
        .iter()
        .map(|d| -d)
        .collect();
    let mx = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Index of the nearest mode; ties break to the lowest index.
pub fn closest_mode(future: &[Point], bank: &MotionModeBank) -> usize {
    let d = mode_distances(future, bank, false);
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v < d[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy between `softmax(scores)` and the soft labels.
pub fn classification_loss(tape: &mut Tape, scores: &Tensor, labels: &[f64]) -> Result<Tensor> {
    tape.soft_cross_entropy(scores, &Tensor::vector(labels))
}

/// Smooth-L1 regression loss over flattened trajectories.
pub fn regression_loss(tape: &mut Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    tape.smooth_l1(pred, target)
}

/// Decode the given mode rows through the decoder and regress futures.
/// Returns the flat predictions `[rows, 2 t_pre]` and the decoder output.
pub fn decode_and_regress(
    tape: &mut Tape,
    features: &Tensor,
    mode_rows: &[usize],
    scene: &Scene,
    bank: &MotionModeBank,
    params: &ModelParams,
    config: &RunConfig,
) -> Result<(Tensor, HidOutput)> {
    let selected = tape.select_rows(features, mode_rows)?;
    let hid = hid_forward(
        tape,
        &selected,
        scene,
        &params.hid,
        config.horizons.t_obs,
        config.head_dim(),
        (config.model.lambda_min, config.model.lambda_max),
    )?;
    let flat = params.heads.reg.apply(tape, &hid.features)?;
    let pred = match config.model.regression_target {
        RegressionTarget::Absolute => flat,
        RegressionTarget::AnchorOffset => {
            let mut anchor_data = Vec::with_capacity(mode_rows.len() * 2 * bank.t_pre);
            for &k in mode_rows {
                anchor_data.extend(bank.flat_mode(k));
            }
            let anchors = Tensor::new(vec![mode_rows.len(), 2 * bank.t_pre], anchor_data)?;
            tape.add(&flat, &anchors)?
        }
    };
    Ok((pred, hid))
}

/// Top-k predicted futures with normalized probabilities.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// Normalized-frame trajectories, `k_top` of them.
    pub trajectories: Vec<Vec<Point>>,
    /// The same trajectories mapped back to world coordinates.
    pub trajectories_world: Vec<Vec<Point>>,
    /// Softmax over the selected confidence scores; sums to one.
    pub probabilities: Vec<f64>,
    /// Which bank anchors were selected, best first.
    pub mode_indices: Vec<usize>,
}

/// Rank scores descending with ties broken by the lower index; the spine
/// of top-k selection.
pub fn rank_modes(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Run the full model on one scene and produce `k_top` candidates.
pub fn infer(
    scene: &Scene,
    bank: &MotionModeBank,
    params: &ModelParams,
    config: &RunConfig,
    k_top: usize,
) -> Result<PredictionSet> {
    if k_top == 0 || k_top > bank.k {
        return Err(Error::Config(format!(
            "k_top {k_top} must be in 1..=K ({})",
            bank.k
        )));
    }
    let mut tape = Tape::new();
    let mae = crate::model::mae::mae_forward(
        &mut tape,
        scene,
        bank,
        &params.mae,
        config.horizons.t_obs,
        config.horizons.t_pre,
        config.head_dim(),
    )?;
    let scores = classify_modes(&mut tape, &mae.features, &params.heads.cls)?;
    let order = rank_modes(scores.data());
    let selected: Vec<usize> = order[..k_top].to_vec();

    let (pred_flat, _) = decode_and_regress(
        &mut tape,
        &mae.features,
        &selected,
        scene,
        bank,
        params,
        config,
    )?;

    // probabilities over the selected scores only
    let sel_scores: Vec<f64> = selected.iter().map(|&i| scores.data()[i]).collect();
    let mx = sel_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sel_scores.iter().map(|&s| (s - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probabilities: Vec<f64> = exps.iter().map(|&e| e / z).collect();

    let mut trajectories = Vec::with_capacity(k_top);
    let mut trajectories_world = Vec::with_capacity(k_top);
    for r in 0..k_top {
        let traj = unflatten_future(pred_flat.row(r))?;
        trajectories_world.push(denormalize_prediction(&traj, &scene.norm));
        trajectories.push(traj);
    }
    Ok(PredictionSet {
        trajectories,
        trajectories_world,
        probabilities,
        mode_indices: selected,
    })
}
