//! Temporal train/test partitioning.

use crate::data::scene::Scene;

/// Split scenes by window start time: scenes at or before the
/// nearest-rank `ratio` percentile go to train, strictly later ones to
/// test. No shuffling; relative order is preserved.
pub fn temporal_split(scenes: Vec<Scene>, ratio: f64) -> (Vec<Scene>, Vec<Scene>) {
    if scenes.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let mut times: Vec<f64> = scenes.iter().map(|s| s.start_time).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((ratio * times.len() as f64).ceil() as usize).clamp(1, times.len());
    let cutoff = times[k - 1];
    scenes.into_iter().partition(|s| s.start_time <= cutoff)
}
