//! Training-time scale augmentation.

use rand::Rng;

use crate::data::scene::Scene;

/// Multiply every normalized coordinate of the scene by one draw
/// `s ~ Uniform[1 - jitter, 1 + jitter]`. The origin (the target's last
/// observation) is a fixed point, so the normalization contract survives.
pub fn scale_augment<R: Rng>(scene: &Scene, jitter: f64, rng: &mut R) -> Scene {
    let s = rng.gen_range(1.0 - jitter..=1.0 + jitter);
    scale_scene(scene, s)
}

pub(crate) fn scale_scene(scene: &Scene, s: f64) -> Scene {
    let mut out = scene.clone();
    let scale = |pts: &mut Vec<[f64; 2]>| {
        for p in pts.iter_mut() {
            p[0] *= s;
            p[1] *= s;
        }
    };
    scale(&mut out.target_obs);
    if let Some(f) = out.target_future.as_mut() {
        scale(f);
    }
    for row in out.neighbors_obs.iter_mut() {
        for p in row.iter_mut() {
            p[0] *= s;
            p[1] *= s;
        }
    }
    out
}
