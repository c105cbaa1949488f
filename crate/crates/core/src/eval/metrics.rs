//! Displacement metrics over best-of-N prediction sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Point, Scene};
use crate::error::{Error, Result};
use crate::model::heads::infer;
use crate::model::ModelParams;
use crate::modes::MotionModeBank;

/// Per-scene evaluation record, anchored for spatial analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSample {
    pub min_ade: f64,
    pub min_fde: f64,
    /// Last observed target position, world frame.
    pub obs_end: Point,
    /// Ground-truth endpoint, world frame.
    pub gt_end: Point,
}

/// Aggregate metric report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub min_ade: f64,
    pub min_fde: f64,
    /// Threshold (formatted) -> miss rate.
    pub mr: BTreeMap<String, f64>,
    pub cvar: f64,
    pub n_samples: usize,
    pub per_sample: Option<Vec<PerSample>>,
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Minimum over candidates of the time-averaged pointwise error.
pub fn min_ade(preds: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract(
            "min_ade over an empty prediction set".into(),
        ));
    }
    let mut best = f64::INFINITY;
    for cand in preds {
        if cand.len() != gt.len() {
            return Err(Error::Shape(format!(
                "candidate has {} steps, ground truth {}",
                cand.len(),
                gt.len()
            )));
        }
        let ade: f64 =
            cand.iter().zip(gt).map(|(&p, &q)| dist(p, q)).sum::<f64>() / gt.len() as f64;
        best = best.min(ade);
    }
    Ok(best)
}

/// Minimum over candidates of the final-step error.
pub fn min_fde(preds: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract(
            "min_fde over an empty prediction set".into(),
        ));
    }
    let last = gt.len() - 1;
    Ok(preds
        .iter()
        .map(|cand| dist(cand[last], gt[last]))
        .fold(f64::INFINITY, f64::min))
}

/// Fraction of samples whose minFDE exceeds `delta`.
pub fn miss_rate(per_sample_min_fde: &[f64], delta: f64) -> Result<f64> {
    if per_sample_min_fde.is_empty() {
        return Err(Error::Contract("miss rate over an empty sample set".into()));
    }
    if delta <= 0.0 {
        return Err(Error::Config(format!(
            "miss-rate threshold {delta} must be positive"
        )));
    }
    let misses = per_sample_min_fde.iter().filter(|&&v| v > delta).count();
    Ok(misses as f64 / per_sample_min_fde.len() as f64)
}

/// Mean of the worst `ceil(tail * N)` minFDE values.
pub fn cvar(per_sample_min_fde: &[f64], tail: f64) -> Result<f64> {
    if per_sample_min_fde.is_empty() {
        return Err(Error::Contract("cvar over an empty sample set".into()));
    }
    if !(tail > 0.0 && tail <= 1.0) {
        return Err(Error::Config(format!("cvar tail {tail} must be in (0, 1]")));
    }
    let mut sorted = per_sample_min_fde.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let take = ((tail * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[..take].iter().sum::<f64>() / take as f64)
}

fn format_threshold(delta: f64) -> String {
    if delta.fract() == 0.0 {
        format!("{}", delta as i64)
    } else {
        format!("{delta}")
    }
}

/// Run inference over every test scene and aggregate all four metrics in
/// the world frame. Pure with respect to the parameters. `threads` > 1
/// splits scenes across worker threads; aggregation stays in scene order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ModelParams,
    bank: &MotionModeBank,
    config: &RunConfig,
    scenes: &[Scene],
    k_top: usize,
    mr_thresholds: &[f64],
    tail: f64,
    threads: usize,
) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to evaluate".into()));
    }
    let per_sample = run_scenes(params, bank, config, scenes, k_top, threads.max(1))?;

    let ades: Vec<f64> = per_sample.iter().map(|p| p.min_ade).collect();
    let fdes: Vec<f64> = per_sample.iter().map(|p| p.min_fde).collect();
    let mut mr = BTreeMap::new();
    for &delta in mr_thresholds {
        mr.insert(format_threshold(delta), miss_rate(&fdes, delta)?);
    }
    Ok(MetricsReport {
        min_ade: ades.iter().sum::<f64>() / ades.len() as f64,
        min_fde: fdes.iter().sum::<f64>() / fdes.len() as f64,
        mr,
        cvar: cvar(&fdes, tail)?,
        n_samples: scenes.len(),
        per_sample: Some(per_sample),
    })
}

fn eval_one(
    params: &ModelParams,
    bank: &MotionModeBank,
    config: &RunConfig,
    scene: &Scene,
    k_top: usize,
) -> Result<PerSample> {
    let future = scene
        .target_future
        .as_ref()
        .ok_or_else(|| Error::Data("test scene without a ground-truth future".into()))?;
    let preds = infer(scene, bank, params, config, k_top)?;
    let gt_world: Vec<Point> = future.iter().map(|&p| scene.norm.invert(p)).collect();
    Ok(PerSample {
        min_ade: min_ade(&preds.trajectories_world, &gt_world)?,
        min_fde: min_fde(&preds.trajectories_world, &gt_world)?,
        obs_end: scene.norm.translation,
        gt_end: gt_world[gt_world.len() - 1],
    })
}

fn run_scenes(
    params: &ModelParams,
    bank: &MotionModeBank,
    config: &RunConfig,
    scenes: &[Scene],
    k_top: usize,
    threads: usize,
) -> Result<Vec<PerSample>> {
    if threads <= 1 || scenes.len() < 2 {
        return scenes
            .iter()
            .map(|s| eval_one(params, bank, config, s, k_top))
            .collect();
    }
    let chunk = scenes.len().div_ceil(threads);
    let mut out: Vec<Option<Result<PerSample>>> = Vec::new();
    out.resize_with(scenes.len(), || None);
    std::thread::scope(|scope| {
        for (slot_chunk, scene_chunk) in out.chunks_mut(chunk).zip(scenes.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, scene) in slot_chunk.iter_mut().zip(scene_chunk) {
                    *slot = Some(eval_one(params, bank, config, scene, k_top));
                }
            });
        }
    });
    out.into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}
