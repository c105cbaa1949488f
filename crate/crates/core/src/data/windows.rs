//! Observation/prediction window extraction on the resampled grid.

use std::collections::BTreeMap;

use crate::data::records::RawRecord;
use crate::data::scene::Point;

/// A candidate neighbor over the observation frames; `None` marks frames
/// where the vehicle was not observed.
#[derive(Debug, Clone)]
pub struct NeighborTrack {
    pub vehicle_id: u64,
    pub obs: Vec<Option<Point>>,
}

/// One raw (un-normalized) prediction instance.
#[derive(Debug, Clone)]
pub struct Window {
    pub start_time: f64,
    pub target_id: u64,
    /// t_obs + t_pre consecutive target positions.
    pub target: Vec<Point>,
    pub neighbors: Vec<NeighborTrack>,
}

impl Window {
    pub fn target_obs(&self, t_obs: usize) -> &[Point] {
        &self.target[..t_obs]
    }
}

/// Cut windows from resampled records.
///
/// Resampling is frame decimation on the global grid: a record survives iff
/// its decisecond time is a multiple of `dt` (no interpolation). A window
/// exists for every start frame where the target holds `t_obs + t_pre`
/// consecutive resampled frames; neighbors only need presence during the
/// observation span and keep per-frame gaps.
pub fn build_windows(records: &[RawRecord], dt: f64, t_obs: usize, t_pre: usize) -> Vec<Window> {
    let step_ds = (dt * 10.0).round() as i64;
    let total = t_obs + t_pre;

    // vehicle -> (resampled frame index -> position)
    let mut frames: BTreeMap<u64, BTreeMap<i64, Point>> = BTreeMap::new();
    for r in records {
        let ds = r.time_ds();
        if ds % step_ds != 0 {
            continue;
        }
        frames
            .entry(r.vehicle_id)
            .or_default()
            .insert(ds / step_ds, [r.x, r.y]);
    }

    let mut windows = Vec::new();
    for (&target_id, target_frames) in &frames {
        for &start in target_frames.keys() {
            let full: Option<Vec<Point>> = (0..total as i64)
                .map(|k| target_frames.get(&(start + k)).copied())
                .collect();
            let Some(target) = full else { continue };
            let mut neighbors = Vec::new();
            for (&nid, nframes) in &frames {
                if nid == target_id {
                    continue;
                }
                let obs: Vec<Option<Point>> = (0..t_obs as i64)
                    .map(|k| nframes.get(&(start + k)).copied())
                    .collect();
                if obs.iter().any(|p| p.is_some()) {
                    neighbors.push(NeighborTrack {
                        vehicle_id: nid,
                        obs,
                    });
                }
            }
            windows.push(Window {
                start_time: start as f64 * dt,
                target_id,
                target,
                neighbors,
            });
        }
    }
    windows
}
