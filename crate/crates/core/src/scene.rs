//! Highway scenes, the 21-entry affordance descriptor, constant-velocity
//! collision checks and per-base training labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_base, Trajectory, TrajectoryBasis};

/// Clearance reported for an empty neighbour slot [m].
pub const DEFAULT_CLEARANCE: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    /// Longitudinal position of the footprint centre [m].
    pub x: f64,
    /// Lateral position of the footprint centre [m], increasing to the left.
    pub y: f64,
    pub v: f64,
    pub psi: f64,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.v, self.psi, self.length, self.width]
            .iter()
            .all(|f| f.is_finite());
        if !finite {
            return Err(Error::Scene(format!("vehicle {} has non-finite state", self.id)));
        }
        if self.length <= 0.0 || self.width <= 0.0 {
            return Err(Error::Scene(format!("vehicle {} has non-positive footprint", self.id)));
        }
        if self.v < 0.0 {
            return Err(Error::Scene(format!("vehicle {} has negative speed", self.id)));
        }
        Ok(())
    }

    /// Position after `t` seconds at constant speed and heading.
    pub fn advance(&self, t: f64) -> [f64; 2] {
        [
            self.x + self.v * self.psi.cos() * t,
            self.y + self.v * self.psi.sin() * t,
        ]
    }

    pub fn half_extents(&self) -> [f64; 2] {
        [0.5 * self.length, 0.5 * self.width]
    }
}

/// Straight multi-lane road; lane 0 is the rightmost (lowest y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGeometry {
    pub lane_width: f64,
    /// Lateral lane centres, strictly increasing.
    pub centers: Vec<f64>,
}

impl LaneGeometry {
    pub fn new(lane_width: f64, centers: Vec<f64>) -> Result<Self> {
        if !(lane_width.is_finite() && lane_width > 0.0) {
            return Err(Error::Scene(format!("lane width must be positive, got {lane_width}")));
        }
        if centers.is_empty() || centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Scene("lane centres must be non-empty and increasing".into()));
        }
        Ok(Self { lane_width, centers })
    }

    /// `count` lanes of width `lane_width` with the rightmost centred on y = 0.
    pub fn uniform(count: usize, lane_width: f64) -> Result<Self> {
        Self::new(lane_width, (0..count).map(|i| i as f64 * lane_width).collect())
    }

    pub fn bounds(&self) -> (f64, f64) {
        let half = 0.5 * self.lane_width;
        (self.centers[0] - half, self.centers[self.centers.len() - 1] + half)
    }

    pub fn lane_count(&self) -> usize {
        self.centers.len()
    }

    /// Lane index containing `y`, or `None` when off the road.
    pub fn lane_of(&self, y: f64) -> Option<usize> {
        let (lo, hi) = self.bounds();
        if !(y >= lo && y <= hi) {
            return None;
        }
        let half = 0.5 * self.lane_width;
        self.centers
            .iter()
            .position(|c| y < c + half)
            .or(Some(self.centers.len() - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ego: VehicleState,
    pub others: Vec<VehicleState>,
    pub lanes: LaneGeometry,
}

impl Scene {
    pub fn new(ego: VehicleState, others: Vec<VehicleState>, lanes: LaneGeometry) -> Result<Self> {
        let scene = Self { ego, others, lanes };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        self.ego.validate()?;
        let mut ids = vec![self.ego.id];
        for o in &self.others {
            o.validate()?;
            ids.push(o.id);
        }
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Scene("duplicate vehicle id".into()));
        }
        Ok(())
    }

    /// The same road seen from vehicle `id`'s perspective.
    pub fn with_ego(&self, id: u32) -> Option<Scene> {
        if self.ego.id == id {
            return Some(self.clone());
        }
        let idx = self.others.iter().position(|o| o.id == id)?;
        let mut others = self.others.clone();
        let ego = others.remove(idx);
        others.push(self.ego);
        Some(Scene {
            ego,
            others,
            lanes: self.lanes.clone(),
        })
    }
}

/// Scene descriptor for one vehicle, entries in the canonical table order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affordance {
    pub forward_velocity: f64,
    pub distance_to_lane_center: f64,
    pub forward_clearance: f64,
    pub forward_vehicle_velocity: f64,
    pub left_front_y_clearance: f64,
    pub left_front_velocity: f64,
    pub left_front_x_clearance: f64,
    pub left_rear_y_clearance: f64,
    pub left_rear_x_clearance: f64,
    pub left_rear_velocity: f64,
    pub right_front_y_clearance: f64,
    pub right_front_velocity: f64,
    pub right_front_x_clearance: f64,
    pub right_rear_y_clearance: f64,
    pub right_rear_x_clearance: f64,
    pub right_rear_velocity: f64,
    pub left_front_length: f64,
    pub left_rear_length: f64,
    pub right_front_length: f64,
    pub right_rear_length: f64,
    pub ego_length: f64,
}

pub const AFFORDANCE_DIM: usize = 21;

pub const AFFORDANCE_NAMES: [&str; AFFORDANCE_DIM] = [
    "forward_velocity",
    "distance_to_lane_center",
    "forward_clearance",
    "forward_vehicle_velocity",
    "left_front_y_clearance",
    "left_front_velocity",
    "left_front_x_clearance",
    "left_rear_y_clearance",
    "left_rear_x_clearance",
    "left_rear_velocity",
    "right_front_y_clearance",
    "right_front_velocity",
    "right_front_x_clearance",
    "right_rear_y_clearance",
    "right_rear_x_clearance",
    "right_rear_velocity",
    "left_front_length",
    "left_rear_length",
    "right_front_length",
    "right_rear_length",
    "ego_length",
];

impl Affordance {
    pub fn to_array(&self) -> [f64; AFFORDANCE_DIM] {
        [
            self.forward_velocity,
            self.distance_to_lane_center,
            self.forward_clearance,
            self.forward_vehicle_velocity,
            self.left_front_y_clearance,
            self.left_front_velocity,
            self.left_front_x_clearance,
            self.left_rear_y_clearance,
            self.left_rear_x_clearance,
            self.left_rear_velocity,
            self.right_front_y_clearance,
            self.right_front_velocity,
            self.right_front_x_clearance,
            self.right_rear_y_clearance,
            self.right_rear_x_clearance,
            self.right_rear_velocity,
            self.left_front_length,
            self.left_rear_length,
            self.right_front_length,
            self.right_rear_length,
            self.ego_length,
        ]
    }

    pub fn from_array(v: &[f64]) -> Result<Self> {
        if v.len() != AFFORDANCE_DIM {
            return Err(Error::Contract(format!(
                "affordance needs {AFFORDANCE_DIM} entries, got {}",
                v.len()
            )));
        }
        if v.iter().any(|f| !f.is_finite()) {
            return Err(Error::Data("affordance entries must be finite".into()));
        }
        Ok(Self {
            forward_velocity: v[0],
            distance_to_lane_center: v[1],
            forward_clearance: v[2],
            forward_vehicle_velocity: v[3],
            left_front_y_clearance: v[4],
            left_front_velocity: v[5],
            left_front_x_clearance: v[6],
            left_rear_y_clearance: v[7],
            left_rear_x_clearance: v[8],
            left_rear_velocity: v[9],
            right_front_y_clearance: v[10],
            right_front_velocity: v[11],
            right_front_x_clearance: v[12],
            right_rear_y_clearance: v[13],
            right_rear_x_clearance: v[14],
            right_rear_velocity: v[15],
            left_front_length: v[16],
            left_rear_length: v[17],
            right_front_length: v[18],
            right_rear_length: v[19],
            ego_length: v[20],
        })
    }
}

/// Neighbour occupying one slot, measured from the ego.
#[derive(Debug, Clone, Copy)]
struct Slot {
    x_clearance: f64,
    y_clearance: f64,
    velocity: f64,
    length: f64,
}

impl Slot {
    fn empty(ego_v: f64) -> Self {
        Self {
            x_clearance: DEFAULT_CLEARANCE,
            y_clearance: DEFAULT_CLEARANCE,
            velocity: ego_v,
            length: 0.0,
        }
    }
}

/// Picks the vehicle nearest in |ΔX| in `lane` ahead of (`front`) or at/behind
/// the ego. Ties go to the lower id so the result ignores input order.
fn nearest_in_region<'a>(scene: &'a Scene, lane: usize, front: bool) -> Option<&'a VehicleState> {
    let ego = &scene.ego;
    let mut best: Option<&VehicleState> = None;
    for o in &scene.others {
        if scene.lanes.lane_of(o.y) != Some(lane) {
            continue;
        }
        let dx = o.x - ego.x;
        if (dx > 0.0) != front {
            continue;
        }
        best = match best {
            None => Some(o),
            Some(b) => {
                let (db, d) = ((b.x - ego.x).abs(), dx.abs());
                if d < db || (d == db && o.id < b.id) {
                    Some(o)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

fn slot(scene: &Scene, lane: Option<usize>, front: bool) -> Slot {
    let ego = &scene.ego;
    match lane.and_then(|l| nearest_in_region(scene, l, front)) {
        None => Slot::empty(ego.v),
        Some(o) => Slot {
            x_clearance: (o.x - ego.x).abs() - 0.5 * (o.length + ego.length),
            y_clearance: (o.y - ego.y).abs() - 0.5 * (o.width + ego.width),
            velocity: o.v,
            length: o.length,
        },
    }
}

/// Builds the affordance of `scene.ego`. Fails when the ego is off the road.
pub fn extract_affordance(scene: &Scene) -> Result<Affordance> {
    let ego = &scene.ego;
    let lane = scene
        .lanes
        .lane_of(ego.y)
        .ok_or_else(|| Error::Scene(format!("ego {} is off the road at y = {}", ego.id, ego.y)))?;
    let left = (lane + 1 < scene.lanes.lane_count()).then_some(lane + 1);
    let right = lane.checked_sub(1);

    let forward = slot(scene, Some(lane), true);
    let lf = slot(scene, left, true);
    let lr = slot(scene, left, false);
    let rf = slot(scene, right, true);
    let rr = slot(scene, right, false);

    Ok(Affordance {
        forward_velocity: ego.v,
        distance_to_lane_center: ego.y - scene.lanes.centers[lane],
        forward_clearance: forward.x_clearance,
        forward_vehicle_velocity: forward.velocity,
        left_front_y_clearance: lf.y_clearance,
        left_front_velocity: lf.velocity,
        left_front_x_clearance: lf.x_clearance,
        left_rear_y_clearance: lr.y_clearance,
        left_rear_x_clearance: lr.x_clearance,
        left_rear_velocity: lr.velocity,
        right_front_y_clearance: rf.y_clearance,
        right_front_velocity: rf.velocity,
        right_front_x_clearance: rf.x_clearance,
        right_rear_y_clearance: rr.y_clearance,
        right_rear_x_clearance: rr.x_clearance,
        right_rear_velocity: rr.velocity,
        left_front_length: lf.length,
        left_rear_length: lr.length,
        right_front_length: rf.length,
        right_rear_length: rr.length,
        ego_length: ego.length,
    })
}

/// Strict overlap of two axis-aligned rectangles given centres and half extents.
pub fn rectangles_overlap(c1: [f64; 2], h1: [f64; 2], c2: [f64; 2], h2: [f64; 2]) -> bool {
    (c1[0] - c2[0]).abs() < h1[0] + h2[0] && (c1[1] - c2[1]).abs() < h1[1] + h2[1]
}

/// A footprint moving along sampled centres.
#[derive(Debug, Clone)]
pub struct FootprintPath {
    pub half_extents: [f64; 2],
    pub centers: Vec<[f64; 2]>,
}

/// First step at which `subject` overlaps any of `others`, comparing only the
/// steps both paths define.
pub fn collision_onset(subject: &FootprintPath, others: &[FootprintPath]) -> Option<usize> {
    for (k, c) in subject.centers.iter().enumerate() {
        for o in others {
            if let Some(oc) = o.centers.get(k) {
                if rectangles_overlap(*c, subject.half_extents, *oc, o.half_extents) {
                    return Some(k);
                }
            }
        }
    }
    None
}

/// Constant-velocity paths of all non-ego vehicles over `steps` instants.
pub fn constant_velocity_paths(vehicles: &[VehicleState], dt: f64, steps: usize) -> Vec<FootprintPath> {
    vehicles
        .iter()
        .map(|o| FootprintPath {
            half_extents: o.half_extents(),
            centers: (0..steps).map(|k| o.advance(k as f64 * dt)).collect(),
        })
        .collect()
}

/// Ego path when it follows the deviation-encoded `candidate` from its current state.
pub fn ego_candidate_path(ego: &VehicleState, candidate: &Trajectory, dt: f64) -> FootprintPath {
    FootprintPath {
        half_extents: ego.half_extents(),
        centers: candidate.reconstruct([ego.x, ego.y], ego.v, dt, candidate.len()),
    }
}

/// True iff the ego following `candidate` overlaps a constant-velocity
/// neighbour at any sampled instant `k * dt`.
pub fn collision_check(scene: &Scene, candidate: &Trajectory, dt: f64) -> bool {
    let path = ego_candidate_path(&scene.ego, candidate, dt);
    let others = constant_velocity_paths(&scene.others, dt, candidate.len());
    collision_onset(&path, &others).is_some()
}

/// Per-base training label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Flag {
    /// The base closest to the observed trajectory.
    Pos,
    /// Not observed, collision-free under constant velocity.
    NegSafe,
    /// Not observed, leads to a collision.
    NegColliding,
}

impl Flag {
    /// CSV code: 1, 0, 2.
    pub fn code(self) -> u8 {
        match self {
            Flag::Pos => 1,
            Flag::NegSafe => 0,
            Flag::NegColliding => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Flag::Pos),
            0 => Ok(Flag::NegSafe),
            2 => Ok(Flag::NegColliding),
            other => Err(Error::Schema(format!("flag code must be 0, 1 or 2, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub affordance: Affordance,
    pub flags: Vec<Flag>,
}

impl LabeledSample {
    pub fn new(affordance: Affordance, flags: Vec<Flag>) -> Result<Self> {
        let pos = flags.iter().filter(|f| **f == Flag::Pos).count();
        if pos != 1 {
            return Err(Error::Contract(format!("label needs exactly one positive flag, got {pos}")));
        }
        Ok(Self { affordance, flags })
    }

    pub fn positive_index(&self) -> usize {
        self.flags
            .iter()
            .position(|f| *f == Flag::Pos)
            .expect("labels carry exactly one positive flag")
    }
}

/// What to do with an observation farther than ε from every base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoveragePolicy {
    /// Reject with [`Error::Coverage`].
    #[default]
    Strict,
    /// Label the nearest base positive regardless of distance.
    Nearest,
}

pub fn label_sample(scene: &Scene, observed: &Trajectory, basis: &TrajectoryBasis) -> Result<LabeledSample> {
    label_sample_with(scene, observed, basis, CoveragePolicy::Strict)
}

pub fn label_sample_with(
    scene: &Scene,
    observed: &Trajectory,
    basis: &TrajectoryBasis,
    policy: CoveragePolicy,
) -> Result<LabeledSample> {
    let (pos, distance) = nearest_base(observed, basis)?;
    if policy == CoveragePolicy::Strict && distance > basis.epsilon {
        return Err(Error::Coverage {
            index: pos,
            distance,
            epsilon: basis.epsilon,
        });
    }
    let affordance = extract_affordance(scene)?;
    let dt = basis.dt();
    let flags = basis
        .bases
        .iter()
        .enumerate()
        .map(|(i, base)| {
            if i == pos {
                Flag::Pos
            } else if collision_check(scene, base, dt) {
                Flag::NegColliding
            } else {
                Flag::NegSafe
            }
        })
        .collect();
    LabeledSample::new(affordance, flags)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagCounts {
    pub pos: usize,
    pub neg_safe: usize,
    pub neg_colliding: usize,
}

impl FlagCounts {
    fn add(&mut self, flags: &[Flag]) {
        for f in flags {
            match f {
                Flag::Pos => self.pos += 1,
                Flag::NegSafe => self.neg_safe += 1,
                Flag::NegColliding => self.neg_colliding += 1,
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub counts: FlagCounts,
}

impl Dataset {
    pub fn from_samples(samples: Vec<LabeledSample>) -> Self {
        let mut counts = FlagCounts::default();
        for s in &samples {
            counts.add(&s.flags);
        }
        Self { samples, counts }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of output coordinates, or `None` for an empty dataset.
    pub fn output_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.flags.len())
    }

    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.samples.len());
        (
            Dataset::from_samples(self.samples[..n].to_vec()),
            Dataset::from_samples(self.samples[n..].to_vec()),
        )
    }
}

/// Labels a stream of (scene, observed trajectory) pairs in order.
pub fn dataset_build<I>(stream: I, basis: &TrajectoryBasis, policy: CoveragePolicy) -> Result<Dataset>
where
    I: IntoIterator<Item = (Scene, Trajectory)>,
{
    let horizon = basis.horizon();
    let dt = basis.dt();
    let mut samples = Vec::new();
    for (index, (scene, observed)) in stream.into_iter().enumerate() {
        if observed.len() != horizon || (observed.dt() - dt).abs() > 1e-12 {
            return Err(Error::at_sample(
                index,
                Error::Contract(format!(
                    "observation has {} samples at dt {}, basis expects {} at dt {}",
                    observed.len(),
                    observed.dt(),
                    horizon,
                    dt
                )),
            ));
        }
        let sample = label_sample_with(&scene, &observed, basis, policy).map_err(|e| Error::at_sample(index, e))?;
        samples.push(sample);
    }
    Ok(Dataset::from_samples(samples))
}
