//! Finite-horizon MPC for the controlled vehicle.
//!
//! Dynamics are the Euler-discretised Dubins car. Predicted neighbour
//! trajectories become time-varying elliptical keep-out regions, relaxed by
//! a per-step slack that is penalised quadratically. The slack is eliminated
//! in closed form (`γ_k = max(0, 1 - min LHS_k)`), leaving the inputs as the
//! only decision variables. The problem is solved by single shooting with a
//! diagonally scaled projected gradient and backtracking line search; the
//! gradient is exact (adjoint pass through the rollout).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Trajectory, TrajectoryBasis};
use crate::scene::{Scene, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Acceleration [m/s²].
    pub a: f64,
    /// Yaw rate [rad/s].
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputBounds {
    pub a_min: f64,
    pub a_max: f64,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        Self {
            a_min: -6.0,
            a_max: 3.0,
            r_min: -0.3,
            r_max: 0.3,
        }
    }
}

impl InputBounds {
    pub fn project(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            a: u.a.clamp(self.a_min, self.a_max),
            r: u.r.clamp(self.r_min, self.r_max),
        }
    }

    pub fn contains(&self, u: &ControlInput) -> bool {
        u.a >= self.a_min && u.a <= self.a_max && u.r >= self.r_min && u.r <= self.r_max
    }
}

pub fn dubins_step(x: &EgoState, u: &ControlInput, dt: f64) -> EgoState {
    EgoState {
        x: x.x + x.v * x.psi.cos() * dt,
        y: x.y + x.v * x.psi.sin() * dt,
        v: x.v + u.a * dt,
        psi: x.psi + u.r * dt,
    }
}

/// States `x_0..x_N` obtained by folding [`dubins_step`] over `inputs`.
pub fn rollout(x0: &EgoState, inputs: &[ControlInput], dt: f64) -> Vec<EgoState> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x0);
    for u in inputs {
        let next = dubins_step(states.last().expect("non-empty"), u, dt);
        states.push(next);
    }
    states
}

/// One predicted trajectory of one neighbour, sampled at the MPC steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleTube {
    pub vehicle_id: u32,
    /// Index of the base trajectory, `None` for a constant-velocity fallback.
    pub base: Option<usize>,
    /// Semi-axes `(a^i, b^i)` of the neighbour's ellipse.
    pub semi_axes: (f64, f64),
    /// Centres for `k = 0..=N`.
    pub centers: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleField {
    /// Semi-axes `(a, b)` of the controlled vehicle.
    pub ego_semi_axes: (f64, f64),
    pub horizon: usize,
    pub tubes: Vec<ObstacleTube>,
}

impl ObstacleField {
    pub fn empty(ego_semi_axes: (f64, f64), horizon: usize) -> Self {
        Self {
            ego_semi_axes,
            horizon,
            tubes: Vec::new(),
        }
    }

    /// Distinct vehicles represented in the field.
    pub fn vehicle_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.tubes.iter().map(|t| t.vehicle_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Ellipse left-hand side `((X-Xc)/(a^i+a))² + ((Y-Yc)/(b^i+b))²` of tube `j` at step `k`.
    pub fn lhs(&self, j: usize, k: usize, x: f64, y: f64) -> f64 {
        let t = &self.tubes[j];
        let c = t.centers[k];
        let ax = t.semi_axes.0 + self.ego_semi_axes.0;
        let by = t.semi_axes.1 + self.ego_semi_axes.1;
        let (dx, dy) = ((x - c[0]) / ax, (y - c[1]) / by);
        dx * dx + dy * dy
    }

    /// `sqrt(min_j LHS)` at step `k`; infinite when the field is empty.
    pub fn min_scaled_distance(&self, k: usize, x: f64, y: f64) -> f64 {
        (0..self.tubes.len())
            .map(|j| self.lhs(j, k, x, y))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Multiplier on the atom semi-axes added to each neighbour's footprint
    /// (normally the basis ε).
    pub inflation: f64,
    /// Drop neighbours directly behind the ego in its own lane.
    pub ignore_rear: bool,
    /// Scale applied to every vehicle's half-length and half-width before the
    /// atom inflation. `√2` makes the ellipse circumscribe the footprint.
    pub footprint_scale: f64,
}

impl FieldConfig {
    /// Keep-out semi-axes of a neighbour given the largest atom axes.
    pub fn semi_axes(&self, veh: &VehicleState, atom: (f64, f64)) -> (f64, f64) {
        (
            0.5 * veh.length * self.footprint_scale + self.inflation * atom.0,
            0.5 * veh.width * self.footprint_scale + self.inflation * atom.1,
        )
    }
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            inflation: 1.0,
            ignore_rear: false,
            footprint_scale: std::f64::consts::SQRT_2,
        }
    }
}

/// Predicted base indices for one neighbour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehiclePrediction {
    pub vehicle_id: u32,
    pub bases: Vec<usize>,
}

/// True when `other` is behind the ego in the ego's own lane.
pub fn is_directly_behind(scene: &Scene, other_x: f64, other_y: f64) -> bool {
    let lane = scene.lanes.lane_of(scene.ego.y);
    lane.is_some() && scene.lanes.lane_of(other_y) == lane && other_x < scene.ego.x
}

/// Keep-out tubes for every predicted trajectory of every neighbour in `scene.others`.
pub fn build_obstacle_field(
    scene: &Scene,
    predictions: &[VehiclePrediction],
    basis: &TrajectoryBasis,
    horizon: usize,
    dt: f64,
    cfg: &FieldConfig,
) -> Result<ObstacleField> {
    let ego = &scene.ego;
    let ego_axes = (
        0.5 * ego.length * cfg.footprint_scale,
        0.5 * ego.width * cfg.footprint_scale,
    );
    let (atom_a, atom_b) = basis.atoms.max_axes();
    let mut field = ObstacleField::empty(ego_axes, horizon);
    for p in predictions {
        let veh = scene
            .others
            .iter()
            .find(|o| o.id == p.vehicle_id)
            .ok_or_else(|| Error::Contract(format!("prediction for unknown vehicle {}", p.vehicle_id)))?;
        if p.bases.is_empty() {
            return Err(Error::Contract(format!("empty prediction set for vehicle {}", veh.id)));
        }
        if cfg.ignore_rear && is_directly_behind(scene, veh.x, veh.y) {
            continue;
        }
        let semi_axes = cfg.semi_axes(veh, (atom_a, atom_b));
        for &b in &p.bases {
            let base = basis
                .bases
                .get(b)
                .ok_or_else(|| Error::Contract(format!("base index {b} out of range")))?;
            field.tubes.push(ObstacleTube {
                vehicle_id: veh.id,
                base: Some(b),
                semi_axes,
                centers: base.reconstruct([veh.x, veh.y], veh.v, dt, horizon + 1),
            });
        }
    }
    Ok(field)
}

/// Tube for a neighbour assumed to hold its current speed and lane.
pub fn constant_velocity_tube(
    id: u32,
    position: [f64; 2],
    speed: f64,
    semi_axes: (f64, f64),
    horizon: usize,
    dt: f64,
) -> ObstacleTube {
    let still = Trajectory::new(vec![[0.0, 0.0]], dt, "hold", speed).expect("finite sample");
    ObstacleTube {
        vehicle_id: id,
        base: None,
        semi_axes,
        centers: still.reconstruct(position, speed, dt, horizon + 1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcWeights {
    pub w_v: f64,
    pub w_y: f64,
    pub w_psi: f64,
    pub w_a: f64,
    pub w_r: f64,
    /// Slack penalty `c_k` (same for every step).
    pub slack: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self {
            w_v: 1.0,
            w_y: 2.0,
            w_psi: 10.0,
            w_a: 0.1,
            w_r: 1.0,
            slack: 1.0e4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub weights: MpcWeights,
    pub bounds: InputBounds,
    pub v_ref: f64,
    pub y_ref: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Penalise every (vehicle, trajectory) violation separately instead of
    /// only the worst one per step.
    pub per_constraint_slack: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            dt: 0.1,
            weights: MpcWeights::default(),
            bounds: InputBounds::default(),
            v_ref: 28.0,
            y_ref: 0.0,
            max_iters: 200,
            grad_tol: 1e-6,
            per_constraint_slack: false,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::Contract("MPC horizon and dt must be positive".into()));
        }
        let b = &self.bounds;
        if !(b.a_min <= b.a_max && b.r_min <= b.r_max) {
            return Err(Error::Contract("input bounds are inverted".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub states: Vec<EgoState>,
    pub inputs: Vec<ControlInput>,
    /// `γ_k` for `k = 0..=N` (worst term per step).
    pub slack: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective of every accepted iterate, starting with the initial guess.
    pub objective_history: Vec<f64>,
}

impl PlanResult {
    /// Per-step dump with header `k,X,Y,v,psi,a,r,slack`; the terminal row has zero inputs.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "X", "Y", "v", "psi", "a", "r", "slack"])?;
        for (k, s) in self.states.iter().enumerate() {
            let u = self.inputs.get(k).copied().unwrap_or_default();
            w.write_record(&[
                k.to_string(),
                s.x.to_string(),
                s.y.to_string(),
                s.v.to_string(),
                s.psi.to_string(),
                u.a.to_string(),
                u.r.to_string(),
                self.slack[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_dims(inputs: &[ControlInput], field: &ObstacleField, cfg: &MpcConfig) -> Result<()> {
    if inputs.len() != cfg.horizon {
        return Err(Error::Contract(format!(
            "{} inputs for horizon {}",
            inputs.len(),
            cfg.horizon
        )));
    }
    if field.tubes.iter().any(|t| t.centers.len() < cfg.horizon + 1) {
        return Err(Error::Contract("obstacle tube shorter than the MPC horizon".into()));
    }
    Ok(())
}

fn state_cost(s: &EgoState, cfg: &MpcConfig) -> f64 {
    let w = &cfg.weights;
    w.w_v * (s.v - cfg.v_ref).powi(2) + w.w_y * (s.y - cfg.y_ref).powi(2) + w.w_psi * s.psi * s.psi
}

/// Slack penalty at one step and its gradient with respect to (X, Y).
fn slack_terms(s: &EgoState, k: usize, field: &ObstacleField, cfg: &MpcConfig) -> (f64, f64, [f64; 2]) {
    let c = cfg.weights.slack;
    let grad_of = |j: usize| {
        let t = &field.tubes[j];
        let ctr = t.centers[k];
        let ax = t.semi_axes.0 + field.ego_semi_axes.0;
        let by = t.semi_axes.1 + field.ego_semi_axes.1;
        [2.0 * (s.x - ctr[0]) / (ax * ax), 2.0 * (s.y - ctr[1]) / (by * by)]
    };
    if cfg.per_constraint_slack {
        let mut penalty = 0.0;
        let mut worst: f64 = 0.0;
        let mut g = [0.0, 0.0];
        for j in 0..field.tubes.len() {
            let gamma = (1.0 - field.lhs(j, k, s.x, s.y)).max(0.0);
            if gamma > 0.0 {
                penalty += c * gamma * gamma;
                let d = grad_of(j);
                g[0] -= 2.0 * c * gamma * d[0];
                g[1] -= 2.0 * c * gamma * d[1];
                worst = worst.max(gamma);
            }
        }
        return (penalty, worst, g);
    }
    let mut min_lhs = f64::INFINITY;
    let mut arg = None;
    for j in 0..field.tubes.len() {
        let l = field.lhs(j, k, s.x, s.y);
        if l < min_lhs {
            min_lhs = l;
            arg = Some(j);
        }
    }
    match arg {
        Some(j) if min_lhs < 1.0 => {
            let gamma = 1.0 - min_lhs;
            let d = grad_of(j);
            (c * gamma * gamma, gamma, [-2.0 * c * gamma * d[0], -2.0 * c * gamma * d[1]])
        }
        _ => (0.0, 0.0, [0.0, 0.0]),
    }
}

/// Objective of a state/input sequence with the slack eliminated analytically.
pub fn mpc_cost(states: &[EgoState], inputs: &[ControlInput], field: &ObstacleField, cfg: &MpcConfig) -> Result<f64> {
    check_dims(inputs, field, cfg)?;
    if states.len() != inputs.len() + 1 {
        return Err(Error::Contract("need exactly one more state than inputs".into()));
    }
    Ok(evaluate(states, inputs, field, cfg).0)
}

/// (objective, per-step slack).
fn evaluate(states: &[EgoState], inputs: &[ControlInput], field: &ObstacleField, cfg: &MpcConfig) -> (f64, Vec<f64>) {
    let w = &cfg.weights;
    let n = inputs.len();
    let mut j = 0.0;
    let mut slack = Vec::with_capacity(n + 1);
    for (k, s) in states.iter().enumerate() {
        j += state_cost(s, cfg);
        if k < n {
            j += w.w_a * inputs[k].a.powi(2) + w.w_r * inputs[k].r.powi(2);
        }
        let (p, gamma, _) = slack_terms(s, k, field, cfg);
        j += p;
        slack.push(gamma);
    }
    (j, slack)
}

/// Objective and its exact gradient with respect to the inputs.
fn cost_and_gradient(x0: &EgoState, inputs: &[ControlInput], field: &ObstacleField, cfg: &MpcConfig) -> (f64, Vec<[f64; 2]>, Vec<EgoState>) {
    let states = rollout(x0, inputs, cfg.dt);
    let (j, _) = evaluate(&states, inputs, field, cfg);
    let w = &cfg.weights;
    let dt = cfg.dt;
    let n = inputs.len();
    let state_grad = |k: usize| {
        let s = &states[k];
        let (_, _, g) = slack_terms(s, k, field, cfg);
        [
            g[0],
            2.0 * w.w_y * (s.y - cfg.y_ref) + g[1],
            2.0 * w.w_v * (s.v - cfg.v_ref),
            2.0 * w.w_psi * s.psi,
        ]
    };
    let mut lambda = state_grad(n);
    let mut grad = vec![[0.0; 2]; n];
    for k in (0..n).rev() {
        let s = &states[k];
        grad[k] = [
            2.0 * w.w_a * inputs[k].a + lambda[2] * dt,
            2.0 * w.w_r * inputs[k].r + lambda[3] * dt,
        ];
        let g = state_grad(k);
        let (c, sn) = (s.psi.cos(), s.psi.sin());
        lambda = [
            g[0] + lambda[0],
            g[1] + lambda[1],
            g[2] + lambda[0] * c * dt + lambda[1] * sn * dt + lambda[2],
            g[3] - lambda[0] * s.v * sn * dt + lambda[1] * s.v * c * dt + lambda[3],
        ];
    }
    (j, grad, states)
}

/// Diagonal curvature estimate of the tracking part of the objective, used
/// to scale the gradient step per input.
fn diagonal_scaling(states: &[EgoState], cfg: &MpcConfig) -> Vec<[f64; 2]> {
    let w = &cfg.weights;
    let dt = cfg.dt;
    let n = states.len() - 1;
    (0..n)
        .map(|k| {
            let later = (n - k) as f64;
            let da = 2.0 * w.w_a + 2.0 * w.w_v * dt * dt * later;
            let mut dr = 2.0 * w.w_r + 2.0 * w.w_psi * dt * dt * later;
            for j in (k + 2)..=n {
                let sens = states[j - 1].v.abs() * dt * dt * (j - k - 1) as f64;
                dr += 2.0 * w.w_y * sens * sens;
            }
            [da, dr]
        })
        .collect()
}

fn project_all(inputs: &mut [ControlInput], bounds: &InputBounds) {
    for u in inputs.iter_mut() {
        *u = bounds.project(*u);
    }
}

fn projected_gradient_norm(inputs: &[ControlInput], grad: &[[f64; 2]], bounds: &InputBounds) -> f64 {
    inputs
        .iter()
        .zip(grad)
        .map(|(u, g)| {
            let p = bounds.project(ControlInput {
                a: u.a - g[0],
                r: u.r - g[1],
            });
            (u.a - p.a).powi(2) + (u.r - p.r).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Open-loop input sequences tried when the first descent ends with a
/// violated keep-out constraint: full braking and a swerve to either side.
fn restart_guesses(cfg: &MpcConfig) -> Vec<Vec<ControlInput>> {
    let n = cfg.horizon;
    let b = &cfg.bounds;
    let swerve = |r: f64| {
        (0..n)
            .map(|k| ControlInput {
                a: 0.0,
                r: if k < n / 3 { r } else if k < 2 * n / 3 { -r } else { 0.0 },
            })
            .collect::<Vec<_>>()
    };
    vec![
        vec![ControlInput { a: b.a_min, r: 0.0 }; n],
        swerve(b.r_max),
        swerve(b.r_min),
    ]
}

fn violates(plan: &PlanResult) -> bool {
    // the slack at k = 0 does not depend on the inputs
    plan.slack.iter().skip(1).any(|g| *g > 0.0)
}

/// Single-shooting solve from `x0`, optionally warm-started.
///
/// Passing straight through an obstacle centre is a stationary point of the
/// slack penalty, so a plan that still violates a constraint is re-solved
/// from [`restart_guesses`] and the lowest objective is kept.
pub fn solve_mpc(x0: &EgoState, field: &ObstacleField, cfg: &MpcConfig, warm_start: Option<&[ControlInput]>) -> Result<PlanResult> {
    cfg.validate()?;
    let n = cfg.horizon;
    let inputs: Vec<ControlInput> = match warm_start {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![ControlInput::default(); n],
    };
    check_dims(&inputs, field, cfg)?;
    let mut best = descend(x0, field, cfg, inputs)?;
    if violates(&best) {
        for guess in restart_guesses(cfg) {
            let plan = descend(x0, field, cfg, guess)?;
            if plan.objective < best.objective {
                best = plan;
            }
        }
    }
    Ok(best)
}

fn descend(x0: &EgoState, field: &ObstacleField, cfg: &MpcConfig, mut inputs: Vec<ControlInput>) -> Result<PlanResult> {
    let n = cfg.horizon;
    project_all(&mut inputs, &cfg.bounds);
    let (mut j, mut g, mut states) = cost_and_gradient(x0, &inputs, field, cfg);
    if !j.is_finite() {
        inputs = vec![cfg.bounds.project(ControlInput::default()); n];
        (j, g, states) = cost_and_gradient(x0, &inputs, field, cfg);
        if !j.is_finite() {
            return Err(Error::Solver("non-finite objective at the zero-input start".into()));
        }
    }

    let mut history = vec![j];
    let mut converged = false;
    let mut iterations = 0;
    let mut step = 1.0;
    const ARMIJO: f64 = 1e-4;
    while iterations < cfg.max_iters {
        if projected_gradient_norm(&inputs, &g, &cfg.bounds) < cfg.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let scale = diagonal_scaling(&states, cfg);
        let mut accepted = false;
        while step > 1e-14 {
            let trial: Vec<ControlInput> = inputs
                .iter()
                .zip(&g)
                .zip(&scale)
                .map(|((u, gk), d)| {
                    cfg.bounds.project(ControlInput {
                        a: u.a - step * gk[0] / d[0],
                        r: u.r - step * gk[1] / d[1],
                    })
                })
                .collect();
            let decrease: f64 = trial
                .iter()
                .zip(&inputs)
                .zip(&g)
                .map(|((t, u), gk)| gk[0] * (t.a - u.a) + gk[1] * (t.r - u.r))
                .sum();
            let (jt, gt, st) = cost_and_gradient(x0, &trial, field, cfg);
            if jt.is_finite() && jt <= j + ARMIJO * decrease && jt <= j {
                inputs = trial;
                j = jt;
                g = gt;
                states = st;
                accepted = true;
                step = (step * 2.0).min(1.0);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no descent possible along the scaled projected gradient
            break;
        }
        history.push(j);
    }
    if !converged && projected_gradient_norm(&inputs, &g, &cfg.bounds) < cfg.grad_tol {
        converged = true;
    }
    let (objective, slack) = evaluate(&states, &inputs, field, cfg);
    Ok(PlanResult {
        states,
        inputs,
        slack,
        objective,
        iterations,
        converged,
        objective_history: history,
    })
}

/// Receding-horizon policy: re-solves at every call and warm-starts from the
/// previous solution shifted by one step.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: MpcConfig,
    warm: Option<Vec<ControlInput>>,
    last: Option<PlanResult>,
}

impl MpcController {
    pub fn new(config: MpcConfig) -> Self {
        Self {
            config,
            warm: None,
            last: None,
        }
    }

    pub fn policy(&mut self, x: &EgoState, field: &ObstacleField) -> Result<ControlInput> {
        let plan = solve_mpc(x, field, &self.config, self.warm.as_deref())?;
        let u = plan.inputs[0];
        let mut shifted = plan.inputs[1..].to_vec();
        shifted.push(*plan.inputs.last().expect("horizon >= 1"));
        self.warm = Some(shifted);
        self.last = Some(plan);
        Ok(u)
    }

    pub fn last_plan(&self) -> Option<&PlanResult> {
        self.last.as_ref()
    }

    pub fn reset(&mut self) {
        self.warm = None;
        self.last = None;
    }
}
