//! Social interaction masking: distance-based neighbor retention and the
//! binary batch mask.

use crate::data::scene::{Point, Scene};
use crate::data::windows::Window;

/// Retain neighbors whose mean Euclidean distance to the target over the
/// observation span (raw coordinates, co-present frames only) stays below
/// `delta`. Neighbors missing more than half the observation frames are
/// dropped; retained tracks have gaps filled with the nearest present
/// frame. Returns the raw tracks, packed in candidate order.
pub fn retain_neighbors(window: &Window, delta: f64, t_obs: usize) -> Vec<Vec<Point>> {
    let target_obs = window.target_obs(t_obs);
    let mut retained = Vec::new();
    for cand in &window.neighbors {
        let present = cand.obs.iter().filter(|p| p.is_some()).count();
        if present * 2 < t_obs {
            continue;
        }
        let mut dist_sum = 0.0;
        let mut n = 0usize;
        for (t, p) in cand.obs.iter().enumerate() {
            if let Some(p) = p {
                let dx = p[0] - target_obs[t][0];
                let dy = p[1] - target_obs[t][1];
                dist_sum += (dx * dx + dy * dy).sqrt();
                n += 1;
            }
        }
        if n == 0 || dist_sum / n as f64 >= delta {
            continue;
        }
        retained.push(fill_gaps(&cand.obs));
    }
    retained
}

// Nearest-present-frame hold for missing observations.
fn fill_gaps(obs: &[Option<Point>]) -> Vec<Point> {
    let n = obs.len();
    let mut filled = vec![[0.0, 0.0]; n];
    for t in 0..n {
        if let Some(p) = obs[t] {
            filled[t] = p;
            continue;
        }
        let mut best: Option<(usize, Point)> = None;
        for (s, p) in obs.iter().enumerate() {
            if let Some(p) = p {
                let d = s.abs_diff(t);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, *p));
                }
            }
        }
        filled[t] = best.expect("retained track has at least one frame").1;
    }
    filled
}

/// Pad every scene in the set to the same neighbor count (all-zero rows,
/// flagged invalid). Returns the shared maximum.
pub fn pad_scenes(scenes: &mut [Scene], t_obs: usize) -> usize {
    let n_max = scenes
        .iter()
        .map(|s| s.n_valid_neighbors())
        .max()
        .unwrap_or(0);
    for s in scenes {
        while s.neighbors_obs.len() < n_max {
            s.neighbors_obs.push(vec![[0.0, 0.0]; t_obs]);
            s.neighbor_valid.push(false);
        }
    }
    n_max
}

/// Binary interaction mask for one scene: entry `[i][k]` is 1 iff both
/// indices address valid (non-padded) neighbors.
pub fn mask_matrix(n_valid: usize, n_max: usize) -> Vec<Vec<u8>> {
    (0..n_max)
        .map(|i| {
            (0..n_max)
                .map(|k| u8::from(i < n_valid && k < n_valid))
                .collect()
        })
        .collect()
}
