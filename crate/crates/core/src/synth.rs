//! Synthetic highway scenes and driver behaviour.
//!
//! Stands in for recorded traffic: every draw is an independent random
//! scene plus the target vehicle's next few seconds of motion, produced by a
//! scene-gated mixture of maneuver templates. Independence across draws is
//! what makes the calibration guarantees testable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{deviation_encode, Trajectory};
use crate::scene::{collision_check, LaneGeometry, Scene, VehicleState};

/// Initial-condition sampler for a straight multi-lane road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadSampler {
    pub lanes: usize,
    pub lane_width: f64,
    pub speed_range: (f64, f64),
    /// Bumper-to-bumper gap between consecutive vehicles in a lane [m].
    pub gap_range: (f64, f64),
    pub length_range: (f64, f64),
    pub width_range: (f64, f64),
    /// Maximum lateral offset from the lane centre at spawn [m].
    pub lateral_jitter: f64,
}

impl Default for RoadSampler {
    fn default() -> Self {
        Self {
            lanes: 3,
            lane_width: 3.7,
            speed_range: (20.0, 32.0),
            gap_range: (15.0, 50.0),
            length_range: (4.4, 5.0),
            width_range: (1.8, 2.0),
            lateral_jitter: 0.2,
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

impl RoadSampler {
    pub fn validate(&self) -> Result<()> {
        if self.lanes == 0 || !(self.lane_width > 0.0) {
            return Err(Error::Contract("road needs at least one lane of positive width".into()));
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if !(ordered(self.speed_range) && ordered(self.gap_range) && ordered(self.length_range) && ordered(self.width_range)) {
            return Err(Error::Contract("sampler ranges must be finite and ordered".into()));
        }
        if self.gap_range.0 <= 0.0 || self.speed_range.0 < 0.0 || self.length_range.0 <= 0.0 || self.width_range.0 <= 0.0 {
            return Err(Error::Contract("gaps and footprints must be positive, speeds non-negative".into()));
        }
        if self.width_range.1 + 2.0 * self.lateral_jitter >= self.lane_width {
            return Err(Error::Contract("vehicles in adjacent lanes could overlap at spawn".into()));
        }
        Ok(())
    }

    pub fn lanes(&self) -> LaneGeometry {
        LaneGeometry::uniform(self.lanes, self.lane_width).expect("validated sampler")
    }

    /// `count` non-overlapping vehicles with ids `0..count`, centred so the
    /// median vehicle sits near x = 0.
    pub fn sample_vehicles<R: Rng>(&self, rng: &mut R, count: usize) -> Vec<VehicleState> {
        let lanes = self.lanes();
        let mut per_lane: Vec<Vec<usize>> = vec![Vec::new(); self.lanes];
        let mut vehicles: Vec<VehicleState> = (0..count)
            .map(|i| {
                let lane = rng.random_range(0..self.lanes);
                per_lane[lane].push(i);
                let jitter = if self.lateral_jitter > 0.0 {
                    rng.random_range(-self.lateral_jitter..self.lateral_jitter)
                } else {
                    0.0
                };
                VehicleState {
                    id: i as u32,
                    x: 0.0,
                    y: lanes.centers[lane] + jitter,
                    v: uniform(rng, self.speed_range),
                    psi: 0.0,
                    length: uniform(rng, self.length_range),
                    width: uniform(rng, self.width_range),
                }
            })
            .collect();
        for members in &per_lane {
            let mut x = uniform(rng, (0.0, self.gap_range.1));
            let mut prev_half: Option<f64> = None;
            for &i in members {
                let half = 0.5 * vehicles[i].length;
                if let Some(ph) = prev_half {
                    x += ph + half + uniform(rng, self.gap_range);
                }
                vehicles[i].x = x;
                prev_half = Some(half);
            }
        }
        if !vehicles.is_empty() {
            let mut xs: Vec<f64> = vehicles.iter().map(|v| v.x).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let mid = xs[xs.len() / 2];
            for v in &mut vehicles {
                v.x -= mid;
            }
        }
        vehicles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    KeepLane,
    Brake,
    Accelerate,
    LeftChange,
    RightChange,
}

impl Maneuver {
    pub const ALL: [Maneuver; 5] = [
        Maneuver::KeepLane,
        Maneuver::Brake,
        Maneuver::Accelerate,
        Maneuver::LeftChange,
        Maneuver::RightChange,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Mixture over maneuvers, gated by what the scene allows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorPolicy {
    /// Prior weights in [`Maneuver::ALL`] order.
    pub weights: [f64; 5],
    pub keep_accel: (f64, f64),
    pub brake_accel: (f64, f64),
    pub accelerate_accel: (f64, f64),
    /// Duration of a full lane change [s].
    pub lane_change_duration: (f64, f64),
}

impl Default for BehaviorPolicy {
    fn default() -> Self {
        Self {
            weights: [0.5, 0.15, 0.15, 0.1, 0.1],
            keep_accel: (-0.3, 0.3),
            brake_accel: (-4.0, -1.0),
            accelerate_accel: (0.5, 2.0),
            lane_change_duration: (2.5, 4.0),
        }
    }
}

/// Smooth 0 → 1 profile with zero velocity and acceleration at both ends.
fn quintic(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Maneuver realisation parameters.
#[derive(Debug, Clone, Copy)]
struct Template {
    accel: f64,
    lateral: f64,
    duration: f64,
}

fn template_path(v0: f64, tpl: Template, dt: f64, horizon: usize) -> Vec<[f64; 2]> {
    (0..horizon)
        .map(|k| {
            let t = k as f64 * dt;
            // stop instead of reversing
            let x = if tpl.accel < 0.0 && v0 + tpl.accel * t < 0.0 {
                v0 * v0 / (-2.0 * tpl.accel)
            } else {
                v0 * t + 0.5 * tpl.accel * t * t
            };
            [x, tpl.lateral * quintic(t / tpl.duration)]
        })
        .collect()
}

impl BehaviorPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Contract("maneuver weights must be non-negative with positive sum".into()));
        }
        if !(self.lane_change_duration.0 > 0.0 && self.lane_change_duration.0 <= self.lane_change_duration.1) {
            return Err(Error::Contract("lane change duration range is invalid".into()));
        }
        Ok(())
    }

    fn lateral_target(scene: &Scene, m: Maneuver) -> Option<f64> {
        let lanes = &scene.lanes;
        let lane = lanes.lane_of(scene.ego.y)?;
        let target = match m {
            Maneuver::LeftChange => (lane + 1 < lanes.lane_count()).then_some(lane + 1)?,
            Maneuver::RightChange => lane.checked_sub(1)?,
            _ => lane,
        };
        Some(lanes.centers[target] - scene.ego.y)
    }

    fn nominal(&self, scene: &Scene, m: Maneuver) -> Option<Template> {
        let mid = |r: (f64, f64)| 0.5 * (r.0 + r.1);
        let lateral = Self::lateral_target(scene, m)?;
        let duration = mid(self.lane_change_duration);
        Some(match m {
            Maneuver::KeepLane => Template {
                accel: 0.0,
                lateral: 0.0,
                duration,
            },
            Maneuver::Brake => Template {
                accel: mid(self.brake_accel),
                lateral: 0.0,
                duration,
            },
            Maneuver::Accelerate => Template {
                accel: mid(self.accelerate_accel),
                lateral: 0.0,
                duration,
            },
            Maneuver::LeftChange | Maneuver::RightChange => Template {
                accel: 0.0,
                lateral,
                duration,
            },
        })
    }

    /// Mixture weights after removing maneuvers that leave the road or whose
    /// nominal template collides under constant-velocity neighbours. Braking
    /// stays available when everything else is gated out.
    pub fn gated_weights(&self, scene: &Scene, dt: f64, horizon: usize) -> [f64; 5] {
        let mut w = [0.0; 5];
        for m in Maneuver::ALL {
            let Some(tpl) = self.nominal(scene, m) else {
                continue;
            };
            let raw = template_path(scene.ego.v, tpl, dt, horizon);
            let Ok(raw) = Trajectory::new(raw, dt, "nominal", scene.ego.v) else {
                continue;
            };
            let Ok(dev) = deviation_encode(&raw, scene.ego.v) else {
                continue;
            };
            if !collision_check(scene, &dev, dt) {
                w[m.index()] = self.weights[m.index()];
            }
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            let mut only_brake = [0.0; 5];
            only_brake[Maneuver::Brake.index()] = 1.0;
            return only_brake;
        }
        w.map(|x| x / total)
    }

    fn realise<R: Rng>(&self, rng: &mut R, scene: &Scene, m: Maneuver, dt: f64, horizon: usize) -> Vec<[f64; 2]> {
        let lateral = Self::lateral_target(scene, m).unwrap_or(0.0);
        let tpl = match m {
            Maneuver::KeepLane => Template {
                accel: uniform(rng, self.keep_accel),
                // drift half-way back towards the lane centre
                lateral: 0.5 * lateral * uniform(rng, (0.0, 1.0)),
                duration: horizon as f64 * dt,
            },
            Maneuver::Brake => Template {
                accel: uniform(rng, self.brake_accel),
                lateral: 0.0,
                duration: 1.0,
            },
            Maneuver::Accelerate => Template {
                accel: uniform(rng, self.accelerate_accel),
                lateral: 0.0,
                duration: 1.0,
            },
            Maneuver::LeftChange | Maneuver::RightChange => Template {
                accel: uniform(rng, self.keep_accel),
                lateral,
                duration: uniform(rng, self.lane_change_duration),
            },
        };
        template_path(scene.ego.v, tpl, dt, horizon)
    }
}

/// One synthetic draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub scene: Scene,
    /// Deviation-encoded future of the scene's ego.
    pub observed: Trajectory,
    pub maneuver: Maneuver,
    /// Mixture the maneuver was drawn from.
    pub gated_weights: [f64; 5],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub sampler: RoadSampler,
    pub policy: BehaviorPolicy,
    /// Vehicles per scene, target included.
    pub vehicles: (usize, usize),
    pub dt: f64,
    pub horizon: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sampler: RoadSampler::default(),
            policy: BehaviorPolicy::default(),
            vehicles: (1, 8),
            dt: crate::geometry::DEFAULT_DT,
            horizon: crate::geometry::DEFAULT_HORIZON,
        }
    }
}

/// Lazy stream of i.i.d. synthetic samples.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    cfg: SyntheticConfig,
    rng: ChaCha8Rng,
    remaining: usize,
    next_id: u64,
}

impl Iterator for SyntheticStream {
    type Item = SyntheticSample;

    fn next(&mut self) -> Option<SyntheticSample> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let id = self.next_id;
        self.next_id += 1;
        Some(draw(&self.cfg, &mut self.rng, id))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

fn draw<R: Rng>(cfg: &SyntheticConfig, rng: &mut R, id: u64) -> SyntheticSample {
    let count = rng.random_range(cfg.vehicles.0.max(1)..=cfg.vehicles.1.max(cfg.vehicles.0.max(1)));
    let mut vehicles = cfg.sampler.sample_vehicles(rng, count);
    let target = rng.random_range(0..vehicles.len());
    let ego = vehicles.remove(target);
    let scene = Scene {
        ego,
        others: vehicles,
        lanes: cfg.sampler.lanes(),
    };
    let gated = cfg.policy.gated_weights(&scene, cfg.dt, cfg.horizon);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut maneuver = Maneuver::Brake;
    for m in Maneuver::ALL {
        acc += gated[m.index()];
        if gated[m.index()] > 0.0 && u < acc {
            maneuver = m;
            break;
        }
    }
    let raw = cfg.policy.realise(rng, &scene, maneuver, cfg.dt, cfg.horizon);
    let raw = Trajectory::new(raw, cfg.dt, format!("syn{id}"), scene.ego.v).expect("templates are finite");
    let observed = deviation_encode(&raw, scene.ego.v).expect("speeds are non-negative");
    SyntheticSample {
        scene,
        observed,
        maneuver,
        gated_weights: gated,
    }
}

/// `n` i.i.d. draws fully determined by `seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig, n: usize, seed: u64) -> Result<SyntheticStream> {
    cfg.sampler.validate()?;
    cfg.policy.validate()?;
    if cfg.vehicles.0 > cfg.vehicles.1 || cfg.vehicles.1 == 0 {
        return Err(Error::Contract("vehicle count range is invalid".into()));
    }
    Ok(SyntheticStream {
        cfg: *cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
        remaining: n,
        next_id: 0,
    })
}
