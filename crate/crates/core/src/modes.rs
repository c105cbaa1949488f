//! General motion modes: k-means over flattened normalized futures.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Point, Scene};
use crate::error::{Error, Result};

/// Cluster-centroid future trajectories used as anchors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MotionModeBank {
    pub k: usize,
    pub t_pre: usize,
    /// K trajectories of t_pre points each.
    pub modes: Vec<Vec<Point>>,
    pub seed: u64,
    /// Final within-cluster sum of squares.
    pub objective: f64,
    /// Lloyd iterations of the winning restart.
    pub iterations: usize,
}

impl MotionModeBank {
    pub fn validate(&self) -> Result<()> {
        if self.modes.len() != self.k {
            return Err(Error::Format(format!(
                "bank holds {} modes, header says {}",
                self.modes.len(),
                self.k
            )));
        }
        for m in &self.modes {
            if m.len() != self.t_pre {
                return Err(Error::Format(format!(
                    "mode has {} points, header says {}",
                    m.len(),
                    self.t_pre
                )));
            }
        }
        if !self.objective.is_finite() || self.objective < 0.0 {
            return Err(Error::Format(format!(
                "objective {} is not usable",
                self.objective
            )));
        }
        Ok(())
    }

    /// Mode `k` flattened to `[x1, y1, x2, y2, ...]`.
    pub fn flat_mode(&self, k: usize) -> Vec<f64> {
        flatten_future(&self.modes[k])
    }
}

/// Interleave a trajectory into `[x1, y1, x2, y2, ...]`.
pub fn flatten_future(traj: &[Point]) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.len() * 2);
    for p in traj {
        out.push(p[0]);
        out.push(p[1]);
    }
    out
}

/// Inverse of [`flatten_future`].
pub fn unflatten_future(flat: &[f64]) -> Result<Vec<Point>> {
    if flat.len() % 2 != 0 {
        return Err(Error::Shape(format!("odd flat length {}", flat.len())));
    }
    Ok(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn objective(features: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    features
        .iter()
        .zip(assign)
        .map(|(f, &a)| sq_dist(f, &centroids[a]))
        .sum()
}

// k-means++ seeding: first center uniform, the rest weighted by squared
// distance to the nearest chosen center.
fn kmeanspp_init(features: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(features[rng.gen_range(0..features.len())].clone());
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..features.len())
        } else {
            let mut draw = rng.gen_range(0.0..total);
            let mut picked = features.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if draw < w {
                    picked = i;
                    break;
                }
                draw -= w;
            }
            picked
        };
        centroids.push(features[next].clone());
        for (i, f) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(f, centroids.last().unwrap()));
        }
    }
    centroids
}

struct LloydRun {
    centroids: Vec<Vec<f64>>,
    assign: Vec<usize>,
    objective: f64,
    iterations: usize,
    trace: Vec<f64>,
}

/// Outcome of a clustering fit.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub objective: f64,
    /// Lloyd iterations of the winning restart.
    pub iterations: usize,
    /// Per-iteration objective values, one trace per restart.
    pub objective_traces: Vec<Vec<f64>>,
}

fn lloyd(
    features: &[Vec<f64>],
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iter: usize,
    tol: f64,
) -> LloydRun {
    let dim = features[0].len();
    let mut centroids = kmeanspp_init(features, k, rng);
    let mut assign = vec![0usize; features.len()];
    let mut prev_obj = f64::INFINITY;
    let mut iterations = 0;
    let mut trace = Vec::new();

    for _ in 0..max_iter {
        iterations += 1;
        // assignment step; ties go to the lowest centroid index
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist(f, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        // update step
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &a) in features.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(f) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            }
        }
        // empty clusters are reseeded to the point farthest from its
        // assigned centroid
        for c in 0..k {
            if counts[c] == 0 {
                let far = features
                    .iter()
                    .enumerate()
                    .max_by(|(i, f), (j, g)| {
                        let di = sq_dist(f, &centroids[assign[*i]]);
                        let dj = sq_dist(g, &centroids[assign[*j]]);
                        di.partial_cmp(&dj).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[c] = features[far].clone();
                assign[far] = c;
                counts[c] = 1;
                changed = true;
            }
        }

        let obj = objective(features, &centroids, &assign);
        assert!(
            obj <= prev_obj + 1e-9 * prev_obj.max(1.0),
            "objective increased: {prev_obj} -> {obj}"
        );
        trace.push(obj);
        let rel_change = if prev_obj.is_finite() {
            (prev_obj - obj) / prev_obj.max(f64::MIN_POSITIVE)
        } else {
            f64::INFINITY
        };
        prev_obj = obj;
        if !changed || rel_change < tol {
            break;
        }
    }
    LloydRun {
        centroids,
        assign,
        objective: prev_obj,
        iterations,
        trace,
    }
}

const RESTARTS: usize = 10;

/// Lloyd's algorithm with k-means++ seeding, 10 seeded restarts, best
/// objective kept (ties broken by the earliest restart).
pub fn kmeans_fit(
    features: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KmeansResult> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if features.len() < k {
        return Err(Error::Config(format!(
            "{} feature vectors cannot fill {} clusters",
            features.len(),
            k
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("inconsistent feature dimensions".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let sub_seeds: Vec<u64> = (0..RESTARTS).map(|_| master.gen()).collect();

    let mut best: Option<LloydRun> = None;
    let mut traces = Vec::with_capacity(RESTARTS);
    for sub in sub_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        let run = lloyd(features, k, &mut rng, max_iter, tol);
        traces.push(run.trace.clone());
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    let best = best.unwrap();
    // post-hoc: every point must sit with its nearest centroid
    for (f, &a) in features.iter().zip(&best.assign) {
        let d_assigned = sq_dist(f, &best.centroids[a]);
        for cent in &best.centroids {
            debug_assert!(sq_dist(f, cent) >= d_assigned - 1e-9);
        }
    }
    Ok(KmeansResult {
        centroids: best.centroids,
        objective: best.objective,
        iterations: best.iterations,
        objective_traces: traces,
    })
}

/// Build the mode bank from training futures only.
pub fn modes_from_training(
    train_scenes: &[Scene],
    k: usize,
    t_pre: usize,
    seed: u64,
) -> Result<MotionModeBank> {
    let features: Vec<Vec<f64>> = train_scenes
        .iter()
        .filter_map(|s| s.target_future.as_ref())
        .map(|f| flatten_future(f))
        .collect();
    if features.len() < k {
        return Err(Error::Config(format!(
            "{} training futures cannot support K = {k}; lower K",
            features.len()
        )));
    }
    if features.iter().any(|f| f.len() != 2 * t_pre) {
        return Err(Error::Shape("future length does not match t_pre".into()));
    }
    let fit = kmeans_fit(&features, k, seed, 100, 1e-6)?;
    let modes = fit
        .centroids
        .iter()
        .map(|c| unflatten_future(c))
        .collect::<Result<Vec<_>>>()?;
    let bank = MotionModeBank {
        k,
        t_pre,
        modes,
        seed,
        objective: fit.objective,
        iterations: fit.iterations,
    };
    bank.validate()?;
    Ok(bank)
}

pub fn save_bank(bank: &MotionModeBank, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(bank)
        .map_err(|e| Error::Format(format!("bank serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<MotionModeBank> {
    let text = std::fs::read_to_string(path)?;
    let bank: MotionModeBank = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: bad mode bank: {e}", path.display())))?;
    bank.validate()?;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn flatten_is_interleaved_and_invertible() {
        let traj = vec![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(flatten_future(&traj), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flatten_future(&[[0.0, 0.0]; 3]), vec![0.0; 6]);
        assert_eq!(unflatten_future(&flatten_future(&traj)).unwrap(), traj);
    }

    #[test]
    fn one_point_per_cluster_reaches_zero_objective() {
        let features = vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![-3.0, 1.0]];
        let fit = kmeans_fit(&features, 3, 1, 100, 1e-6).unwrap();
        let (centroids, obj) = (fit.centroids, fit.objective);
        assert!(obj.abs() < 1e-12);
        for f in &features {
            assert!(centroids.iter().any(|c| sq_dist(c, f) < 1e-12));
        }
    }

    #[test]
    fn separated_clouds_recover_their_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut features = Vec::new();
        for _ in 0..20 {
            features.push(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        }
        for _ in 0..20 {
            features.push(vec![
                100.0 + rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
        }
        let centroids = kmeans_fit(&features, 2, 0, 100, 1e-6).unwrap().centroids;
        let mean = |range: std::ops::Range<usize>| -> Vec<f64> {
            let mut m = vec![0.0; 2];
            for f in &features[range.clone()] {
                m[0] += f[0];
                m[1] += f[1];
            }
            m.iter().map(|v| v / range.len() as f64).collect()
        };
        let (m0, m1) = (mean(0..20), mean(20..40));
        for m in [m0, m1] {
            assert!(
                centroids.iter().any(|c| sq_dist(c, &m) < 1e-18),
                "no centroid equals cloud mean {m:?}"
            );
        }
    }

    #[test]
    fn restarts_match_exhaustive_assignment_optimum() {
        // M = 7 points in 4 dimensions, K = 2: enumerate all 2^7 labelings
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let features: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << 7) {
            let mut sums = [vec![0.0; 4], vec![0.0; 4]];
            let mut counts = [0usize; 2];
            for (i, f) in features.iter().enumerate() {
                let c = ((mask >> i) & 1) as usize;
                counts[c] += 1;
                for (s, v) in sums[c].iter_mut().zip(f) {
                    *s += v;
                }
            }
            let mut obj = 0.0;
            for (i, f) in features.iter().enumerate() {
                let c = ((mask >> i) & 1) as usize;
                if counts[c] == 0 {
                    continue;
                }
                let cent: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                obj += sq_dist(f, &cent);
            }
            if counts[0] > 0 && counts[1] > 0 {
                best = best.min(obj);
            }
        }
        let obj = kmeans_fit(&features, 2, 5, 100, 1e-9).unwrap().objective;
        assert!(
            (obj - best).abs() < 1e-9,
            "kmeans {obj} vs exhaustive optimum {best}"
        );
    }

    #[test]
    fn fewer_points_than_clusters_is_a_config_error() {
        let features = vec![vec![0.0, 0.0]];
        assert!(matches!(
            kmeans_fit(&features, 2, 0, 10, 1e-6),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn clustering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let features: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let a = kmeans_fit(&features, 4, 123, 100, 1e-6).unwrap();
        let b = kmeans_fit(&features, 4, 123, 100, 1e-6).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn bank_io_round_trips_and_validates() {
        let bank = MotionModeBank {
            k: 2,
            t_pre: 3,
            modes: vec![vec![[0.0, 0.0]; 3], vec![[1.0, 1.0]; 3]],
            seed: 7,
            objective: 1.5,
            iterations: 4,
        };
        let dir = std::env::temp_dir().join("trajcast_modes_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bank.json");
        save_bank(&bank, &path).unwrap();
        assert_eq!(load_bank(&path).unwrap(), bank);

        // truncated file fails as a format error
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = dir.join("cut.json");
        std::fs::write(&cut, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_bank(&cut), Err(Error::Format(_))));

        // header/shape mismatch fails validation
        let mut broken = bank.clone();
        broken.k = 3;
        save_bank(&broken, &path).unwrap();
        assert!(load_bank(&path).is_err());
    }

    #[test]
    fn full_size_bank_has_expected_element_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let features: Vec<Vec<f64>> = (0..150)
            .map(|_| (0..24).map(|_| rng.gen_range(-40.0..40.0)).collect())
            .collect();
        let centroids = kmeans_fit(&features, 100, 3, 50, 1e-6).unwrap().centroids;
        let total: usize = centroids.iter().map(|c| c.len()).sum();
        assert_eq!(total, 100 * 12 * 2);
    }
}
