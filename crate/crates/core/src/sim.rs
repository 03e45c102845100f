//! Closed-loop highway simulation.
//!
//! Uncontrolled vehicles replan periodically by drawing a collision-free base
//! trajectory from their calibrated predicted set; the controlled vehicle
//! runs the MPC against keep-out tubes built from its neighbours' predicted
//! sets. Collisions are detected on footprint rectangles and classified.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedPredictor;
use crate::error::{Error, Result};
use crate::geometry::TrajectoryBasis;
use crate::planner::{
    build_obstacle_field, constant_velocity_tube, is_directly_behind, ControlInput, EgoState, FieldConfig,
    MpcConfig, MpcController, ObstacleField, VehiclePrediction,
};
use crate::scene::{collision_onset, extract_affordance, rectangles_overlap, FootprintPath, LaneGeometry, Scene, VehicleState};
use crate::synth::RoadSampler;

/// Id of the controlled vehicle; uncontrolled vehicles are numbered from 1.
pub const CONTROLLED_ID: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub n_uncontrolled: usize,
    /// Trial length [s].
    pub duration: f64,
    /// Simulation step [s].
    pub dt: f64,
    /// Time between uncontrolled replans [s].
    pub replan_period: f64,
    /// Leave the vehicle directly behind out of the controlled vehicle's field.
    pub ignore_rear: bool,
    pub seed: u64,
    pub sampler: RoadSampler,
    pub field: FieldConfig,
    pub mpc: MpcConfig,
    /// Keep a per-step trace in the outcome.
    pub record_trace: bool,
    /// Distance within which a same-lane vehicle or an adjacent-lane vehicle
    /// counts as blocking for trap detection [m].
    pub trap_margin: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            n_uncontrolled: 3,
            duration: 20.0,
            dt: 0.1,
            replan_period: 1.0,
            ignore_rear: true,
            seed: 0,
            sampler: RoadSampler::default(),
            field: FieldConfig::default(),
            mpc: MpcConfig::default(),
            record_trace: false,
            trap_margin: 10.0,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.mpc.validate()?;
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(Error::Contract("trial duration must be finite and non-negative".into()));
        }
        if !(self.dt > 0.0 && self.replan_period > 0.0) {
            return Err(Error::Contract("simulation step and replan period must be positive".into()));
        }
        if !(self.trap_margin >= 0.0) {
            return Err(Error::Contract("trap margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Trained predictor and the basis its outputs index.
#[derive(Debug, Clone, Copy)]
pub struct SimModel<'a> {
    pub predictor: &'a CalibratedPredictor,
    pub basis: &'a TrajectoryBasis,
}

impl SimModel<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.predictor.len() != self.basis.len() {
            return Err(Error::Contract(format!(
                "predictor has {} outputs but the basis has {} trajectories",
                self.predictor.len(),
                self.basis.len()
            )));
        }
        Ok(())
    }
}

/// Absolute path an uncontrolled vehicle follows until its next replan.
#[derive(Debug, Clone, PartialEq)]
pub struct Commitment {
    /// Committed base, `None` when holding speed and lane.
    pub base: Option<usize>,
    /// Predicted set the base was drawn from.
    pub predicted: Vec<usize>,
    pub start: f64,
    step: f64,
    path: Vec<[f64; 2]>,
}

impl Commitment {
    fn new(base: Option<usize>, predicted: Vec<usize>, start: f64, step: f64, mut path: Vec<[f64; 2]>) -> Self {
        // vehicles stop rather than reverse
        for k in 1..path.len() {
            if path[k][0] < path[k - 1][0] {
                path[k][0] = path[k - 1][0];
            }
        }
        Self {
            base,
            predicted,
            start,
            step,
            path,
        }
    }

    /// Position at absolute time `t`, interpolating between samples and
    /// extrapolating the last segment.
    pub fn position(&self, t: f64) -> [f64; 2] {
        let s = ((t - self.start) / self.step).max(0.0);
        let n = self.path.len();
        if n == 1 {
            return self.path[0];
        }
        let i = (s.floor() as usize).min(n - 2);
        let f = s - i as f64;
        let (p, q) = (self.path[i], self.path[i + 1]);
        [p[0] + f * (q[0] - p[0]), p[1] + f * (q[1] - p[1])]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub state: VehicleState,
    pub commitment: Commitment,
    pub next_replan: f64,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub time: f64,
    pub ego: EgoState,
    /// Controlled vehicle `(length, width)`.
    pub ego_size: (f64, f64),
    pub agents: Vec<Agent>,
    pub lanes: LaneGeometry,
    pub rng: ChaCha8Rng,
    pub controller: MpcController,
}

impl WorldState {
    /// Controlled vehicle as a scene participant.
    pub fn ego_vehicle(&self) -> VehicleState {
        VehicleState {
            id: CONTROLLED_ID,
            x: self.ego.x,
            y: self.ego.y,
            v: self.ego.v.max(0.0),
            psi: self.ego.psi,
            length: self.ego_size.0,
            width: self.ego_size.1,
        }
    }

    /// Every vehicle, controlled first.
    pub fn vehicles(&self) -> Vec<VehicleState> {
        let mut all = vec![self.ego_vehicle()];
        all.extend(self.agents.iter().map(|a| a.state));
        all
    }

    /// Scene seen from vehicle `id`.
    pub fn scene_of(&self, id: u32) -> Result<Scene> {
        let all = self.vehicles();
        let ego = *all
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::Scene(format!("no vehicle with id {id}")))?;
        let others = all.into_iter().filter(|v| v.id != id).collect();
        Ok(Scene {
            ego,
            others,
            lanes: self.lanes.clone(),
        })
    }

    /// Random initial world: the median vehicle in X becomes the controlled one.
    pub fn initialize(cfg: &TrialConfig, model: &SimModel<'_>) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut vehicles = cfg.sampler.sample_vehicles(&mut rng, cfg.n_uncontrolled + 1);
        vehicles.sort_by(|a, b| a.x.partial_cmp(&b.x).expect("finite"));
        let ego_v = vehicles.remove(vehicles.len() / 2);
        let lanes = cfg.sampler.lanes();
        let mut mpc = cfg.mpc;
        if let Some(lane) = lanes.lane_of(ego_v.y) {
            mpc.y_ref = lanes.centers[lane];
        }
        let agents: Vec<Agent> = vehicles
            .into_iter()
            .enumerate()
            .map(|(j, mut v)| {
                v.id = j as u32 + 1;
                Agent {
                    state: v,
                    commitment: hold(&v, 0.0, cfg.dt, lookahead_steps(cfg, model.basis)),
                    next_replan: 0.0,
                }
            })
            .collect();
        let mut world = WorldState {
            time: 0.0,
            ego: EgoState {
                x: ego_v.x,
                y: ego_v.y,
                v: ego_v.v,
                psi: 0.0,
            },
            ego_size: (ego_v.length, ego_v.width),
            agents,
            lanes,
            rng,
            controller: MpcController::new(mpc),
        };
        let n = world.agents.len();
        for j in 0..n {
            world.agents[j].commitment = uncontrolled_policy(j, &mut world, model, cfg)?;
            // stagger later replans across the period
            world.agents[j].next_replan = cfg.replan_period * (1.0 + j as f64 / n as f64);
        }
        Ok(world)
    }
}

fn lookahead_steps(cfg: &TrialConfig, basis: &TrajectoryBasis) -> usize {
    let span = cfg.replan_period + basis.horizon() as f64 * basis.dt();
    (span / cfg.dt).ceil() as usize + 2
}

fn hold(v: &VehicleState, start: f64, step: f64, steps: usize) -> Commitment {
    let vx = v.v * v.psi.cos();
    let path = (0..steps).map(|k| [v.x + vx * k as f64 * step, v.y]).collect();
    Commitment::new(None, Vec::new(), start, step, path)
}

/// Longitudinal speed used as the deviation-encoding reference.
fn forward_speed(v: &VehicleState) -> f64 {
    (v.v * v.psi.cos()).max(0.0)
}

/// Predicted set of vehicle `id` from its own perspective.
fn predicted_set(world: &WorldState, id: u32, model: &SimModel<'_>) -> Result<Vec<usize>> {
    let scene = world.scene_of(id)?;
    let aff = extract_affordance(&scene)?;
    model.predictor.predict_set(&aff.to_array())
}

/// New commitment for agent `index` at the current time.
///
/// Candidates are the predicted set, filtered by a collision check against
/// the other uncontrolled vehicles' commitments and, only when it is directly
/// ahead in the same lane, the constant-velocity controlled vehicle. A
/// candidate that takes the footprint off the road counts as colliding from
/// the step it leaves. The draw
/// is uniform over survivors. Without survivors the candidate whose collision
/// comes latest is taken, or a straight hold when every candidate collides
/// immediately.
pub fn uncontrolled_policy(index: usize, world: &mut WorldState, model: &SimModel<'_>, cfg: &TrialConfig) -> Result<Commitment> {
    let me = world.agents[index].state;
    let now = world.time;
    let steps = lookahead_steps(cfg, model.basis);
    let predicted = predicted_set(world, me.id, model)?;
    if predicted.is_empty() {
        log::debug!("vehicle {} has an empty predicted set at t={now}; holding", me.id);
        return Ok(hold(&me, now, cfg.dt, steps));
    }
    let bdt = model.basis.dt();
    let horizon = model.basis.horizon();
    let speed = forward_speed(&me);
    let mut others: Vec<FootprintPath> = world
        .agents
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != index)
        .map(|(_, a)| FootprintPath {
            half_extents: a.state.half_extents(),
            centers: (0..horizon).map(|k| a.commitment.position(now + k as f64 * bdt)).collect(),
        })
        .collect();
    let ego = world.ego_vehicle();
    let my_lane = world.lanes.lane_of(me.y);
    if my_lane.is_some() && world.lanes.lane_of(ego.y) == my_lane && ego.x > me.x {
        others.push(FootprintPath {
            half_extents: ego.half_extents(),
            centers: (0..horizon).map(|k| ego.advance(k as f64 * bdt)).collect(),
        });
    }
    let mut survivors = Vec::new();
    let mut latest: Option<(usize, usize)> = None;
    for &b in &predicted {
        let base = &model.basis.bases[b];
        let path = FootprintPath {
            half_extents: me.half_extents(),
            centers: base.reconstruct([me.x, me.y], speed, bdt, horizon),
        };
        let (lo, hi) = world.lanes.bounds();
        let half_w = 0.5 * me.width;
        let departure = path.centers.iter().position(|c| c[1] < lo + half_w || c[1] > hi - half_w);
        let onset = match (collision_onset(&path, &others), departure) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        match onset {
            None => survivors.push(b),
            Some(onset) => {
                if latest.is_none_or(|(_, k)| onset > k) {
                    latest = Some((b, onset));
                }
            }
        }
    }
    let chosen = if !survivors.is_empty() {
        Some(survivors[world.rng.random_range(0..survivors.len())])
    } else {
        match latest {
            Some((b, onset)) if onset > 0 => Some(b),
            _ => None,
        }
    };
    let Some(b) = chosen else {
        return Ok(Commitment {
            predicted,
            ..hold(&me, now, cfg.dt, steps)
        });
    };
    let path = model.basis.bases[b].reconstruct([me.x, me.y], speed, cfg.dt, steps);
    Ok(Commitment::new(Some(b), predicted, now, cfg.dt, path))
}

/// Keep-out field for the controlled vehicle from every neighbour's predicted set.
pub fn controlled_field(world: &WorldState, model: &SimModel<'_>, cfg: &TrialConfig) -> Result<ObstacleField> {
    let scene = world.scene_of(CONTROLLED_ID)?;
    let field_cfg = FieldConfig {
        ignore_rear: cfg.ignore_rear,
        ..cfg.field
    };
    let mut predictions = Vec::new();
    let mut fallback = Vec::new();
    for a in &world.agents {
        let set = predicted_set(world, a.state.id, model)?;
        if set.is_empty() {
            fallback.push(a.state);
        } else {
            predictions.push(VehiclePrediction {
                vehicle_id: a.state.id,
                bases: set,
            });
        }
    }
    let (horizon, dt) = (cfg.mpc.horizon, cfg.mpc.dt);
    let mut field = build_obstacle_field(&scene, &predictions, model.basis, horizon, dt, &field_cfg)?;
    let (atom_a, atom_b) = model.basis.atoms.max_axes();
    for v in fallback {
        if field_cfg.ignore_rear && is_directly_behind(&scene, v.x, v.y) {
            continue;
        }
        let axes = field_cfg.semi_axes(&v, (atom_a, atom_b));
        field
            .tubes
            .push(constant_velocity_tube(v.id, [v.x, v.y], forward_speed(&v), axes, horizon, dt));
    }
    Ok(field)
}

/// Advances the world by one step of `cfg.dt`.
pub fn step_world(world: &mut WorldState, model: &SimModel<'_>, cfg: &TrialConfig) -> Result<()> {
    let eps = 1e-9;
    for j in 0..world.agents.len() {
        if world.agents[j].next_replan <= world.time + eps {
            world.agents[j].commitment = uncontrolled_policy(j, world, model, cfg)?;
            world.agents[j].next_replan += cfg.replan_period;
        }
    }
    let field = controlled_field(world, model, cfg)?;
    let mut u = world.controller.policy(&world.ego, &field)?;
    // keep v >= 0
    u.a = u.a.max(-world.ego.v.max(0.0) / cfg.dt);
    apply_control(world, u, cfg.dt);
    let t1 = world.time + cfg.dt;
    for a in &mut world.agents {
        let p = a.commitment.position(t1);
        let q = a.commitment.position(t1 + cfg.dt);
        let (vx, vy) = ((q[0] - p[0]) / cfg.dt, (q[1] - p[1]) / cfg.dt);
        a.state.x = p[0];
        a.state.y = p[1];
        a.state.v = vx.hypot(vy);
        a.state.psi = if a.state.v > 1e-9 { vy.atan2(vx) } else { 0.0 };
    }
    world.time = t1;
    Ok(())
}

fn apply_control(world: &mut WorldState, u: ControlInput, dt: f64) {
    world.ego = crate::planner::dubins_step(&world.ego, &u, dt);
    world.ego.v = world.ego.v.max(0.0);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionClass {
    FrontalSide,
    RearEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub time: f64,
    /// Vehicle ids, lower first.
    pub pair: (u32, u32),
    pub class: CollisionClass,
    /// Vehicle held responsible: the one behind for rear-end contacts.
    pub striker: u32,
    pub involves_controlled: bool,
    /// Controlled vehicle boxed in on all four sides at contact.
    pub trapped: bool,
}

/// Classifies a contact between two overlapping footprints.
///
/// The contact normal is the axis of least penetration. A longitudinal normal
/// with the rear vehicle closing on the front one is a rear-end contact with
/// the rear vehicle striking; everything else is frontal/side.
pub fn classify_contact(a: &VehicleState, b: &VehicleState) -> (CollisionClass, u32) {
    let (ha, hb) = (a.half_extents(), b.half_extents());
    let pen_x = ha[0] + hb[0] - (a.x - b.x).abs();
    let pen_y = ha[1] + hb[1] - (a.y - b.y).abs();
    let (rear, front) = if a.x <= b.x { (a, b) } else { (b, a) };
    let closing = rear.v * rear.psi.cos() - front.v * front.psi.cos();
    if pen_x < pen_y && closing > 0.0 {
        (CollisionClass::RearEnd, rear.id)
    } else {
        let speed = |v: &VehicleState| v.v;
        let striker = if speed(a) >= speed(b) { a.id } else { b.id };
        (CollisionClass::FrontalSide, striker)
    }
}

/// True when the controlled vehicle has no free side: a vehicle close ahead
/// and behind in its lane, and each adjacent side either off-road or occupied
/// alongside it.
pub fn is_trapped(world: &WorldState, margin: f64) -> bool {
    let ego = world.ego_vehicle();
    let lanes = &world.lanes;
    let Some(lane) = lanes.lane_of(ego.y) else {
        return false;
    };
    let others: Vec<VehicleState> = world.agents.iter().map(|a| a.state).collect();
    let gap = |o: &VehicleState| (o.x - ego.x).abs() - 0.5 * (o.length + ego.length);
    let in_lane = |o: &VehicleState, l: usize| lanes.lane_of(o.y) == Some(l);
    let front = others.iter().any(|o| in_lane(o, lane) && o.x >= ego.x && gap(o) <= margin);
    let rear = others.iter().any(|o| in_lane(o, lane) && o.x < ego.x && gap(o) <= margin);
    let side_blocked = |l: Option<usize>| match l {
        None => true,
        Some(l) => others.iter().any(|o| in_lane(o, l) && gap(o) <= margin),
    };
    let left = side_blocked((lane + 1 < lanes.lane_count()).then_some(lane + 1));
    let right = side_blocked(lane.checked_sub(1));
    front && rear && left && right
}

/// Pairs currently overlapping, with their classification.
pub fn detect_collisions(world: &WorldState, margin: f64) -> Vec<CollisionEvent> {
    let all = world.vehicles();
    let mut events = Vec::new();
    for i in 0..all.len() {
        for j in (i + 1)..all.len() {
            let (a, b) = (&all[i], &all[j]);
            if !rectangles_overlap([a.x, a.y], a.half_extents(), [b.x, b.y], b.half_extents()) {
                continue;
            }
            let (class, striker) = classify_contact(a, b);
            let involves = a.id == CONTROLLED_ID || b.id == CONTROLLED_ID;
            events.push(CollisionEvent {
                time: world.time,
                pair: (a.id.min(b.id), a.id.max(b.id)),
                class,
                striker,
                involves_controlled: involves,
                trapped: involves && is_trapped(world, margin),
            });
        }
    }
    events
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub psi: f64,
    pub committed_base: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub n_uncontrolled: usize,
    /// Contact onsets, one per pair per contact episode.
    pub events: Vec<CollisionEvent>,
    /// Minimum over the trial of the footprint-scaled centre distance between
    /// the controlled vehicle and any neighbour (below 1 only when
    /// footprints come close to touching).
    pub min_scaled_clearance: f64,
    pub completed: bool,
    pub diagnostics: Option<String>,
    pub steps: usize,
    pub trace: Vec<TraceRow>,
}

impl TrialOutcome {
    pub fn controlled_events(&self) -> impl Iterator<Item = &CollisionEvent> {
        self.events.iter().filter(|e| e.involves_controlled)
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "id", "X", "Y", "v", "psi", "committed_base"])?;
        for r in &self.trace {
            w.write_record([
                r.t.to_string(),
                r.id.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                r.v.to_string(),
                r.psi.to_string(),
                r.committed_base.map(|b| b.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn scaled_clearance(world: &WorldState) -> f64 {
    let ego = world.ego_vehicle();
    let h = ego.half_extents();
    world
        .agents
        .iter()
        .map(|a| {
            let ho = a.state.half_extents();
            let dx = (a.state.x - ego.x) / (h[0] + ho[0]);
            let dy = (a.state.y - ego.y) / (h[1] + ho[1]);
            dx.hypot(dy)
        })
        .fold(f64::INFINITY, f64::min)
}

fn record(world: &WorldState, trace: &mut Vec<TraceRow>) {
    let e = world.ego_vehicle();
    trace.push(TraceRow {
        t: world.time,
        id: e.id,
        x: e.x,
        y: e.y,
        v: e.v,
        psi: e.psi,
        committed_base: None,
    });
    for a in &world.agents {
        trace.push(TraceRow {
            t: world.time,
            id: a.state.id,
            x: a.state.x,
            y: a.state.y,
            v: a.state.v,
            psi: a.state.psi,
            committed_base: a.commitment.base,
        });
    }
}

/// One seeded trial; stops at the first collision involving the controlled
/// vehicle.
pub fn run_trial(cfg: &TrialConfig, model: &SimModel<'_>) -> Result<TrialOutcome> {
    let mut world = WorldState::initialize(cfg, model)?;
    let mut outcome = TrialOutcome {
        seed: cfg.seed,
        n_uncontrolled: cfg.n_uncontrolled,
        events: Vec::new(),
        min_scaled_clearance: scaled_clearance(&world),
        completed: true,
        diagnostics: None,
        steps: 0,
        trace: Vec::new(),
    };
    if cfg.record_trace {
        record(&world, &mut outcome.trace);
    }
    let total = (cfg.duration / cfg.dt + 1e-9).floor() as usize;
    let mut in_contact: Vec<(u32, u32)> = Vec::new();
    for _ in 0..total {
        if let Err(e) = step_world(&mut world, model, cfg) {
            outcome.completed = false;
            outcome.diagnostics = Some(format!("t={:.2}: {e}", world.time));
            break;
        }
        outcome.steps += 1;
        if cfg.record_trace {
            record(&world, &mut outcome.trace);
        }
        outcome.min_scaled_clearance = outcome.min_scaled_clearance.min(scaled_clearance(&world));
        let now = detect_collisions(&world, cfg.trap_margin);
        let mut stop = false;
        for e in &now {
            if !in_contact.contains(&e.pair) {
                stop |= e.involves_controlled;
                outcome.events.push(e.clone());
            }
        }
        in_contact = now.iter().map(|e| e.pair).collect();
        if stop {
            break;
        }
    }
    Ok(outcome)
}

/// Seed of trial `index` derived from a master seed.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `count` trials with derived seeds, in index order.
pub fn run_trials(cfg: &TrialConfig, model: &SimModel<'_>, count: usize) -> Result<Vec<TrialOutcome>> {
    (0..count)
        .map(|i| {
            let c = TrialConfig {
                seed: trial_seed(cfg.seed, i as u64),
                ..*cfg
            };
            run_trial(&c, model)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateInterval {
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Wilson score interval for `successes` out of `n` at normal quantile `z`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> RateInterval {
    if n == 0 {
        return RateInterval {
            rate: 0.0,
            lower: 0.0,
            upper: 1.0,
        };
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    RateInterval {
        rate: p,
        lower: if successes == 0 { 0.0 } else { (centre - half).max(0.0) },
        upper: if successes == n { 1.0 } else { (centre + half).min(1.0) },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub n_uncontrolled: usize,
    pub trials: usize,
    pub frontal_side: usize,
    pub rear_end: usize,
}

/// Collision statistics over trials; counts refer to the controlled vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub trials: usize,
    pub incomplete: usize,
    pub frontal_side: usize,
    pub rear_end: usize,
    /// Controlled-vehicle collisions while boxed in on all sides.
    pub traps: usize,
    /// Collisions among uncontrolled vehicles only.
    pub background_events: usize,
    pub by_n_uncontrolled: Vec<GroupCounts>,
    /// Per-trial rate with a 95% Wilson interval.
    pub frontal_side_rate: RateInterval,
    pub rear_end_rate: RateInterval,
}

const WILSON_Z95: f64 = 1.959963984540054;

pub fn aggregate(outcomes: &[TrialOutcome]) -> Result<SimulationReport> {
    if outcomes.is_empty() {
        return Err(Error::Contract("no trial outcomes to aggregate".into()));
    }
    let mut groups: Vec<GroupCounts> = Vec::new();
    let (mut fs, mut re, mut traps, mut bg) = (0, 0, 0, 0);
    let (mut fs_trials, mut re_trials) = (0, 0);
    for o in outcomes {
        let gi = match groups.iter().position(|g| g.n_uncontrolled == o.n_uncontrolled) {
            Some(i) => i,
            None => {
                groups.push(GroupCounts {
                    n_uncontrolled: o.n_uncontrolled,
                    trials: 0,
                    frontal_side: 0,
                    rear_end: 0,
                });
                groups.len() - 1
            }
        };
        groups[gi].trials += 1;
        let (mut any_fs, mut any_re) = (false, false);
        for e in &o.events {
            if !e.involves_controlled {
                bg += 1;
                continue;
            }
            traps += usize::from(e.trapped);
            match e.class {
                CollisionClass::FrontalSide => {
                    fs += 1;
                    groups[gi].frontal_side += 1;
                    any_fs = true;
                }
                CollisionClass::RearEnd => {
                    re += 1;
                    groups[gi].rear_end += 1;
                    any_re = true;
                }
            }
        }
        fs_trials += usize::from(any_fs);
        re_trials += usize::from(any_re);
    }
    groups.sort_by_key(|g| g.n_uncontrolled);
    let n = outcomes.len();
    Ok(SimulationReport {
        trials: n,
        incomplete: outcomes.iter().filter(|o| !o.completed).count(),
        frontal_side: fs,
        rear_end: re,
        traps,
        background_events: bg,
        by_n_uncontrolled: groups,
        frontal_side_rate: wilson_interval(fs_trials, n, WILSON_Z95),
        rear_end_rate: wilson_interval(re_trials, n, WILSON_Z95),
    })
}

impl SimulationReport {
    /// Flat `n_uncontrolled,class,count` table.
    pub fn write_counts_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n_uncontrolled", "class", "count"])?;
        for g in &self.by_n_uncontrolled {
            w.write_record([g.n_uncontrolled.to_string(), "frontal_side".into(), g.frontal_side.to_string()])?;
            w.write_record([g.n_uncontrolled.to_string(), "rear_end".into(), g.rear_end.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
