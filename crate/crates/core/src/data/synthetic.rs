//! Seeded synthetic highway-ramp scene generator.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::records::RawRecord;
use crate::error::{Error, Result};

const LANE_WIDTH: f64 = 3.5;
/// Frames per target track on the 0.1 s grid: exactly one 20-frame window
/// after decimation to the 0.4 s grid.
const TARGET_FRAMES: usize = 77;
/// Neighbor tracks cover the observation span but never reach a full
/// window of their own.
const NEIGHBOR_FRAMES: usize = 45;
/// Deciseconds between scene starts; scenes never overlap in time.
const SCENE_SPACING_DS: i64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Straight,
    LaneChange,
    RampArc,
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Scenario::Straight),
            "lane_change" => Ok(Scenario::LaneChange),
            "ramp_arc" => Ok(Scenario::RampArc),
            other => Err(Error::Config(format!(
                "unknown scenario '{other}' (expected straight, lane_change, ramp_arc)"
            ))),
        }
    }
}

/// Generator configuration, serialized as plain JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Scenario name -> sampling weight.
    pub scenario_mix: BTreeMap<String, f64>,
    pub n_scenes: usize,
    /// Inclusive neighbor count bounds.
    pub neighbor_range: [usize; 2],
    /// Speeds in m/s.
    pub speed_range: [f64; 2],
    /// Gaussian position noise, meters. Capped at 0.05.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Arc radii in meters for ramp_arc scenes.
    pub arc_radius_range: [f64; 2],
}

impl Default for GenConfig {
    fn default() -> Self {
        let mut mix = BTreeMap::new();
        mix.insert("straight".to_string(), 1.0);
        mix.insert("lane_change".to_string(), 1.0);
        mix.insert("ramp_arc".to_string(), 1.0);
        GenConfig {
            scenario_mix: mix,
            n_scenes: 100,
            neighbor_range: [0, 6],
            speed_range: [10.0, 20.0],
            noise_sigma: 0.02,
            seed: 0,
            arc_radius_range: [40.0, 120.0],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenario_mix.is_empty() {
            return Err(Error::Config("scenario_mix is empty".into()));
        }
        let mut total = 0.0;
        for (name, &w) in &self.scenario_mix {
            Scenario::from_str(name)?;
            if w.is_nan() || w < 0.0 {
                return Err(Error::Config(format!("negative weight for '{name}'")));
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::Config("scenario_mix weights sum to zero".into()));
        }
        if self.n_scenes == 0 {
            return Err(Error::Config("n_scenes must be positive".into()));
        }
        if self.neighbor_range[0] > self.neighbor_range[1] {
            return Err(Error::Config("neighbor_range is inverted".into()));
        }
        if !(self.speed_range[0] > 0.0 && self.speed_range[0] <= self.speed_range[1]) {
            return Err(Error::Config(
                "speed_range must be positive and ordered".into(),
            ));
        }
        if !(0.0..=0.05).contains(&self.noise_sigma) {
            return Err(Error::Config(format!(
                "noise_sigma {} outside [0, 0.05]",
                self.noise_sigma
            )));
        }
        if !(self.arc_radius_range[0] > 0.0 && self.arc_radius_range[0] <= self.arc_radius_range[1])
        {
            return Err(Error::Config(
                "arc_radius_range must be positive and ordered".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: GenConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// Position at time t (seconds from scene start) on an ideal path.
struct Path {
    origin: [f64; 2],
    heading: f64,
    speed: f64,
    kind: PathKind,
}

enum PathKind {
    Straight,
    // lateral sigmoid ramp of one lane width, 10-90% transition over ~3 s
    LaneChange { direction: f64, mid_time: f64 },
    // constant-curvature arc
    Arc { radius: f64, turn: f64 },
}

impl Path {
    fn at(&self, t: f64) -> [f64; 2] {
        let (sh, ch) = self.heading.sin_cos();
        match &self.kind {
            PathKind::Straight => [
                self.origin[0] + self.speed * t * ch,
                self.origin[1] + self.speed * t * sh,
            ],
            PathKind::LaneChange {
                direction,
                mid_time,
            } => {
                let along = self.speed * t;
                let k = 2.0 * (9.0f64).ln() / 3.0;
                let lat = direction * LANE_WIDTH / (1.0 + (-(t - mid_time) * k).exp());
                [
                    self.origin[0] + along * ch - lat * sh,
                    self.origin[1] + along * sh + lat * ch,
                ]
            }
            PathKind::Arc { radius, turn } => {
                let center = [
                    self.origin[0] - turn * radius * sh,
                    self.origin[1] + turn * radius * ch,
                ];
                let start_angle = (self.origin[1] - center[1]).atan2(self.origin[0] - center[0]);
                let angle = start_angle + turn * self.speed * t / radius;
                [
                    center[0] + radius * angle.cos(),
                    center[1] + radius * angle.sin(),
                ]
            }
        }
    }
}

/// Generate records for `n_scenes` disjoint scenes. Deterministic for a
/// fixed (config, seed); all frames sit on the 0.1 s grid and every target
/// admits exactly one full observation/prediction window.
pub fn generate_synthetic(config: &GenConfig, seed: u64) -> Result<Vec<RawRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
    let mix: Vec<(Scenario, f64)> = config
        .scenario_mix
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(name, &w)| (Scenario::from_str(name).unwrap(), w))
        .collect();
    let total_weight: f64 = mix.iter().map(|(_, w)| w).sum();

    let mut records = Vec::new();
    for scene_idx in 0..config.n_scenes {
        let base_ds = scene_idx as i64 * SCENE_SPACING_DS;
        let scenario = {
            let mut draw = rng.gen_range(0.0..total_weight);
            let mut picked = mix[0].0;
            for (s, w) in &mix {
                if draw < *w {
                    picked = *s;
                    break;
                }
                draw -= w;
            }
            picked
        };
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let origin = [rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0)];
        let speed = rng.gen_range(config.speed_range[0]..=config.speed_range[1]);
        let kind = match scenario {
            Scenario::Straight => PathKind::Straight,
            Scenario::LaneChange => PathKind::LaneChange {
                direction: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                mid_time: (TARGET_FRAMES - 1) as f64 * 0.1 / 2.0,
            },
            Scenario::RampArc => PathKind::Arc {
                radius: rng.gen_range(config.arc_radius_range[0]..=config.arc_radius_range[1]),
                turn: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            },
        };
        let target = Path {
            origin,
            heading,
            speed,
            kind,
        };
        let target_id = scene_idx as u64 * 10;
        emit(
            &mut records,
            &target,
            target_id,
            base_ds,
            TARGET_FRAMES,
            config.noise_sigma,
            &noise,
            &mut rng,
        );

        let n_neighbors = rng.gen_range(config.neighbor_range[0]..=config.neighbor_range[1]);
        for j in 0..n_neighbors {
            let lanes = [-2.0, -1.0, 1.0, 2.0];
            let mut lateral = lanes[rng.gen_range(0..lanes.len())] * LANE_WIDTH;
            // occasionally push a neighbor outside the retention radius
            if rng.gen_bool(0.2) {
                lateral += 60.0 * lateral.signum();
            }
            let longitudinal = rng.gen_range(-20.0..20.0);
            let (sh, ch) = heading.sin_cos();
            let n_origin = [
                origin[0] + longitudinal * ch - lateral * sh,
                origin[1] + longitudinal * sh + lateral * ch,
            ];
            let n_speed = (speed + rng.gen_range(-2.0..2.0)).max(1.0);
            let neighbor = Path {
                origin: n_origin,
                heading,
                speed: n_speed,
                kind: PathKind::Straight,
            };
            emit(
                &mut records,
                &neighbor,
                target_id + 1 + j as u64,
                base_ds,
                NEIGHBOR_FRAMES,
                config.noise_sigma,
                &noise,
                &mut rng,
            );
        }
    }
    records.sort_by_key(|r| (r.vehicle_id, r.time_ds()));
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn emit(
    records: &mut Vec<RawRecord>,
    path: &Path,
    vehicle_id: u64,
    base_ds: i64,
    frames: usize,
    sigma: f64,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) {
    for k in 0..frames {
        let t = k as f64 * 0.1;
        let mut p = path.at(t);
        if sigma > 0.0 {
            p[0] += noise.sample(rng);
            p[1] += noise.sample(rng);
        }
        records.push(RawRecord {
            time: (base_ds + k as i64) as f64 * 0.1,
            vehicle_id,
            x: p[0],
            y: p[1],
        });
    }
}
