//! Normalized prediction scenes and the line-delimited archive format.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::windows::Window;
use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Rigid transform that produced a normalized scene: translate by the
/// target's last observed position, then rotate by `-theta` so the first
/// observation lands on the positive x-axis.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormTransform {
    pub translation: Point,
    pub theta: f64,
    /// Set when first and last observed points coincide; theta is 0 then.
    pub degenerate: bool,
}

impl NormTransform {
    pub fn identity() -> Self {
        NormTransform {
            translation: [0.0, 0.0],
            theta: 0.0,
            degenerate: false,
        }
    }

    /// World frame -> normalized frame.
    pub fn apply(&self, p: Point) -> Point {
        let dx = p[0] - self.translation[0];
        let dy = p[1] - self.translation[1];
        let (s, c) = self.theta.sin_cos();
        [dx * c + dy * s, -dx * s + dy * c]
    }

    /// Normalized frame -> world frame.
    pub fn invert(&self, p: Point) -> Point {
        let (s, c) = self.theta.sin_cos();
        let x = p[0] * c - p[1] * s;
        let y = p[0] * s + p[1] * c;
        [x + self.translation[0], y + self.translation[1]]
    }
}

/// One normalized prediction instance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scene {
    pub start_time: f64,
    pub target_obs: Vec<Point>,
    /// Absent at pure inference.
    pub target_future: Option<Vec<Point>>,
    /// Zero-padded to the archive-wide neighbor maximum; valid rows first.
    pub neighbors_obs: Vec<Vec<Point>>,
    pub neighbor_valid: Vec<bool>,
    pub norm: NormTransform,
}

impl Scene {
    pub fn n_valid_neighbors(&self) -> usize {
        self.neighbor_valid.iter().filter(|v| **v).count()
    }
}

/// Normalize a window: translate so the last observed target position is
/// the origin, rotate so the first observed position sits on the positive
/// x-axis. `neighbors` are the retained, gap-filled raw tracks.
pub fn normalize_scene(
    window: &Window,
    neighbors: &[Vec<Point>],
    t_obs: usize,
    t_pre: usize,
) -> Result<Scene> {
    if window.target.len() != t_obs + t_pre {
        return Err(Error::Shape(format!(
            "window target has {} frames, expected {}",
            window.target.len(),
            t_obs + t_pre
        )));
    }
    let translation = window.target[t_obs - 1];
    let first = window.target[0];
    let dx = first[0] - translation[0];
    let dy = first[1] - translation[1];
    let degenerate = dx == 0.0 && dy == 0.0;
    let theta = if degenerate { 0.0 } else { dy.atan2(dx) };
    let norm = NormTransform {
        translation,
        theta,
        degenerate,
    };

    let map = |pts: &[Point]| pts.iter().map(|&p| norm.apply(p)).collect::<Vec<_>>();
    let target_obs = map(&window.target[..t_obs]);
    let target_future = map(&window.target[t_obs..]);
    let neighbors_obs: Vec<Vec<Point>> = neighbors.iter().map(|n| map(n)).collect();
    let neighbor_valid = vec![true; neighbors_obs.len()];

    Ok(Scene {
        start_time: window.start_time,
        target_obs,
        target_future: Some(target_future),
        neighbors_obs,
        neighbor_valid,
        norm,
    })
}

/// Exact inverse of the scene normalization for predicted futures.
pub fn denormalize_prediction(pred: &[Point], norm: &NormTransform) -> Vec<Point> {
    pred.iter().map(|&p| norm.invert(p)).collect()
}

/// Check the normalization contract and padding structure.
pub fn validate_scene(scene: &Scene, t_obs: usize, t_pre: usize) -> Result<()> {
    if scene.target_obs.len() != t_obs {
        return Err(Error::Data(format!(
            "scene has {} observed frames, expected {t_obs}",
            scene.target_obs.len()
        )));
    }
    if let Some(f) = &scene.target_future {
        if f.len() != t_pre {
            return Err(Error::Data(format!(
                "scene has {} future frames, expected {t_pre}",
                f.len()
            )));
        }
    }
    let last = scene.target_obs[t_obs - 1];
    if last != [0.0, 0.0] {
        return Err(Error::Data(format!(
            "normalized last observation is {last:?}, expected the origin"
        )));
    }
    let first = scene.target_obs[0];
    if !scene.norm.degenerate && (first[1].abs() >= 1e-9 || first[0] < 0.0) {
        return Err(Error::Data(format!(
            "normalized first observation {first:?} is off the positive x-axis"
        )));
    }
    if scene.neighbor_valid.len() != scene.neighbors_obs.len() {
        return Err(Error::Data("neighbor validity length mismatch".into()));
    }
    let mut seen_invalid = false;
    for (row, &valid) in scene.neighbors_obs.iter().zip(&scene.neighbor_valid) {
        if row.len() != t_obs {
            return Err(Error::Data("neighbor row length mismatch".into()));
        }
        if valid && seen_invalid {
            return Err(Error::Data("valid neighbor after padding".into()));
        }
        if !valid {
            seen_invalid = true;
            if row.iter().any(|p| *p != [0.0, 0.0]) {
                return Err(Error::Data("padded neighbor row is not all-zero".into()));
            }
        }
    }
    // Round trip through the stored transform.
    for &p in &scene.target_obs {
        let back = scene.norm.apply(scene.norm.invert(p));
        if (back[0] - p[0]).abs() > 1e-9 || (back[1] - p[1]).abs() > 1e-9 {
            return Err(Error::Data("norm transform does not round-trip".into()));
        }
    }
    Ok(())
}

/// Write scenes as line-delimited JSON.
pub fn write_archive(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::Format(format!("scene serialization failed: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Scene = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: bad scene: {e}", path.display(), i + 1)))?;
        scenes.push(s);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::windows::Window;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window_from_target(target: Vec<Point>) -> Window {
        Window {
            start_time: 0.0,
            target_id: 0,
            target,
            neighbors: vec![],
        }
    }

    fn straight_window() -> Window {
        // heading +x, one meter per frame, last obs at (7, 0)
        let target: Vec<Point> = (0..20).map(|k| [k as f64, 0.0]).collect();
        window_from_target(target)
    }

    #[test]
    fn quarter_turn_heading_lands_on_positive_x_axis() {
        // first obs (0, 1), last obs (0, 0): theta = pi/2
        let mut target = vec![[0.0, 1.0]];
        for k in 1..8 {
            target.push([0.0, 1.0 - k as f64 / 7.0]);
        }
        for k in 1..=12 {
            target.push([0.0, -(k as f64)]);
        }
        let scene = normalize_scene(&window_from_target(target), &[], 8, 12).unwrap();
        assert!((scene.norm.theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let first = scene.target_obs[0];
        assert!((first[0] - 1.0).abs() < 1e-12 && first[1].abs() < 1e-12);
        assert_eq!(scene.target_obs[7], [0.0, 0.0]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let scene = normalize_scene(&straight_window(), &[], 8, 12).unwrap();
        let mut again_target = scene.target_obs.clone();
        again_target.extend(scene.target_future.clone().unwrap());
        let again = normalize_scene(&window_from_target(again_target), &[], 8, 12).unwrap();
        for (a, b) in scene.target_obs.iter().zip(&again.target_obs) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_stationary_target_gets_zero_theta() {
        let target = vec![[2.0, 3.0]; 20];
        let scene = normalize_scene(&window_from_target(target), &[], 8, 12).unwrap();
        assert!(scene.norm.degenerate);
        assert_eq!(scene.norm.theta, 0.0);
        validate_scene(&scene, 8, 12).unwrap();
    }

    #[test]
    fn rigid_motions_cancel_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let speed = rng.gen_range(5.0..20.0);
            let heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let target: Vec<Point> = (0..20)
                .map(|k| {
                    let d = 0.4 * k as f64 * speed;
                    [d * heading.cos(), d * heading.sin()]
                })
                .collect();
            let neighbors = vec![(0..8).map(|k| [k as f64, 3.5]).collect::<Vec<Point>>()];

            let g_theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let g_t = [rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0)];
            let g = |p: Point| -> Point {
                let (s, c) = g_theta.sin_cos();
                [p[0] * c - p[1] * s + g_t[0], p[0] * s + p[1] * c + g_t[1]]
            };
            let moved_target: Vec<Point> = target.iter().map(|&p| g(p)).collect();
            let moved_neighbors: Vec<Vec<Point>> = neighbors
                .iter()
                .map(|n| n.iter().map(|&p| g(p)).collect())
                .collect();

            let a = normalize_scene(&window_from_target(target), &neighbors, 8, 12).unwrap();
            let b = normalize_scene(&window_from_target(moved_target), &moved_neighbors, 8, 12)
                .unwrap();
            let close = |u: &[Point], v: &[Point]| {
                u.iter()
                    .zip(v)
                    .all(|(a, b)| (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9)
            };
            assert!(close(&a.target_obs, &b.target_obs));
            assert!(close(
                a.target_future.as_ref().unwrap(),
                b.target_future.as_ref().unwrap()
            ));
            assert!(close(&a.neighbors_obs[0], &b.neighbors_obs[0]));
        }
    }

    #[test]
    fn denormalize_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let norm = NormTransform {
                translation: [rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)],
                theta: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                degenerate: false,
            };
            let pts: Vec<Point> = (0..12)
                .map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)])
                .collect();
            let normed: Vec<Point> = pts.iter().map(|&p| norm.apply(p)).collect();
            let back = denormalize_prediction(&normed, &norm);
            for (a, b) in pts.iter().zip(&back) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_transform_changes_nothing() {
        let pts = vec![[1.5, -2.5], [0.0, 0.0]];
        assert_eq!(
            denormalize_prediction(&pts, &NormTransform::identity()),
            pts
        );
    }

    #[test]
    fn archive_round_trips() {
        let scene = normalize_scene(&straight_window(), &[], 8, 12).unwrap();
        let dir = std::env::temp_dir().join("trajcast_scene_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("archive.jsonl");
        write_archive(&path, &[scene.clone(), scene.clone()]).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], scene);
    }

    #[test]
    fn validation_flags_broken_scenes() {
        let mut scene = normalize_scene(&straight_window(), &[], 8, 12).unwrap();
        validate_scene(&scene, 8, 12).unwrap();
        scene.target_obs[7] = [0.1, 0.0];
        assert!(validate_scene(&scene, 8, 12).is_err());
    }
}
