//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line and then
//! asserts the same verdict, runtime budget included.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setpred::calibration::{
    conformal_calibrate, conformal_quantile, evaluate_fnr, post_bloat, rcp_epsilon, CalibratedPredictor, ResidualScope,
};
use setpred::config::PipelineConfig;
use setpred::geometry::{atomic_distance, greedy_sparsify, AtomSet, Trajectory, TrajectoryBasis};
use setpred::planner::{
    constant_velocity_tube, dubins_step, mpc_cost, rollout, solve_mpc, ControlInput, EgoState, FieldConfig, MpcConfig,
    ObstacleField,
};
use setpred::predictor::{forward, grad, loss, train, Example, LossConfig, NetworkParams, TrainConfig};
use setpred::scene::{dataset_build, CoveragePolicy, Dataset, Flag, VehicleState, AFFORDANCE_DIM};
use setpred::sim::{
    aggregate, detect_collisions, run_trial, step_world, CollisionClass, SimModel, WorldState, CONTROLLED_ID,
};
use setpred::synth::{generate_synthetic, SyntheticConfig};

fn verdict(n: u32, name: &str, pass: bool, elapsed: Duration, budget: Duration, detail: &str) {
    let ok = pass && elapsed <= budget;
    println!(
        "criterion {n} [{name}]: {} ({detail}; {:.2}s of {:.0}s budget)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(ok, "criterion {n} failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. RCP bound reproduction
// ---------------------------------------------------------------------------

/// Calibration sizes and published 99% bounds (as fractions).
const REFERENCE_BOUNDS: [(usize, f64); 7] = [
    (15946, 0.0019),
    (23919, 0.00103),
    (31893, 0.00077),
    (39866, 0.00062),
    (47839, 0.00052),
    (55813, 0.00044),
    (63786, 0.00039),
];

#[test]
fn criterion_1_rcp_bound_reproduction() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for (n2, published) in REFERENCE_BOUNDS {
        let eps = rcp_epsilon(0.99, 17, n2).unwrap().epsilon;
        let rel = (eps - published).abs() / published;
        worst = worst.max(rel);
        rows.push(format!("{n2}: {:.4}% vs {:.3}%", 100.0 * eps, 100.0 * published));
        println!("  N2 = {n2}: computed {:.4}%, published {:.3}%, relative error {:.3}", 100.0 * eps, 100.0 * published, rel);
    }
    verdict(
        1,
        "RCP bound reproduction",
        worst <= 0.05,
        start.elapsed(),
        Duration::from_secs(1),
        &format!("worst relative error {worst:.3}, tolerance 0.05"),
    );
}

// ---------------------------------------------------------------------------
// Shared synthetic pipeline pieces
// ---------------------------------------------------------------------------

fn synthetic_basis(cfg: &SyntheticConfig, corpus_size: usize, seed: u64) -> TrajectoryBasis {
    let corpus: Vec<Trajectory> = generate_synthetic(cfg, corpus_size, seed).unwrap().map(|s| s.observed).collect();
    let atoms = AtomSet::uniform(cfg.horizon, 2.0, 0.5).unwrap();
    greedy_sparsify(&corpus, 1.0, &atoms).unwrap()
}

fn synthetic_dataset(cfg: &SyntheticConfig, basis: &TrajectoryBasis, n: usize, seed: u64) -> Dataset {
    let pairs = generate_synthetic(cfg, n, seed).unwrap().map(|s| (s.scene, s.observed));
    dataset_build(pairs, basis, CoveragePolicy::Nearest).unwrap()
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        seed,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------------------
// 2. Post-bloating soundness
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_post_bloat_soundness() {
    let start = Instant::now();
    let cfg = SyntheticConfig::default();
    let basis = synthetic_basis(&cfg, 500, 21);
    let mut misses = Vec::new();
    for rep in 0..5u64 {
        let data = synthetic_dataset(&cfg, &basis, 1500, 100 + rep);
        let (train_set, cal) = data.split_at(1000);
        let model = train(&train_set, (16, 16), &LossConfig::default(), &TrainConfig { epochs: 3, ..train_cfg(rep) })
            .unwrap();
        let pb = post_bloat(&model.params, &cal, 0.5).unwrap();
        misses.push(evaluate_fnr(&model.params, &pb.thresholds, &cal).unwrap().misses);
    }
    // also on a random network that was never trained
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = basis.len();
    let p = NetworkParams::init(&[AFFORDANCE_DIM, 8, 8, m], rng.random()).unwrap();
    let cal = synthetic_dataset(&cfg, &basis, 500, 7);
    let pb = post_bloat(&p, &cal, 0.5).unwrap();
    misses.push(evaluate_fnr(&p, &pb.thresholds, &cal).unwrap().misses);
    verdict(
        2,
        "post-bloating soundness",
        misses.iter().all(|m| *m == 0),
        start.elapsed(),
        Duration::from_secs(30),
        &format!("calibration-set misses per run {misses:?}"),
    );
}

// ---------------------------------------------------------------------------
// 3. Coverage experiment
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_coverage_experiment() {
    let start = Instant::now();
    let cfg = SyntheticConfig::default();
    let basis = synthetic_basis(&cfg, 2000, 31);
    let m = basis.len();
    let (n1, n2, n_test) = (10_000, 5_000, 20_000);
    let bound = rcp_epsilon(0.99, m, n2).unwrap().epsilon;
    let mut violations = 0;
    let mut rates = Vec::new();
    for rep in 0..50u64 {
        let data = synthetic_dataset(&cfg, &basis, n1 + n2 + n_test, 1000 + rep);
        let (train_set, rest) = data.split_at(n1);
        let (cal, test) = rest.split_at(n2);
        let model = train(&train_set, (32, 32), &LossConfig::default(), &train_cfg(rep)).unwrap();
        let pb = post_bloat(&model.params, &cal, LossConfig::default().gamma1).unwrap();
        let fnr = evaluate_fnr(&model.params, &pb.thresholds, &test).unwrap().rate;
        violations += usize::from(fnr > bound);
        rates.push(fnr);
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let max = rates.iter().cloned().fold(0.0, f64::max);
    verdict(
        3,
        "coverage experiment",
        violations <= 2,
        start.elapsed(),
        Duration::from_secs(600),
        &format!("M = {m}, bound {bound:.5}, held-out FNR mean {mean:.5} max {max:.5}, violations {violations}/50"),
    );
}

// ---------------------------------------------------------------------------
// 4. Conformal coverage band
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_conformal_coverage_band() {
    let start = Instant::now();
    let eps = 0.1;
    let n_cal = 2000;
    let n_fresh = 20_000;
    // continuous residuals: exponential with rate 3 by inversion
    let draw = |rng: &mut ChaCha8Rng| -(1.0 - rng.random::<f64>()).ln() / 3.0;
    let mut coverage = Vec::new();
    for rep in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + rep);
        let cal: Vec<f64> = (0..n_cal).map(|_| draw(&mut rng)).collect();
        let d = conformal_quantile(&cal, eps).unwrap();
        let covered = (0..n_fresh).filter(|_| draw(&mut rng) <= d).count();
        coverage.push(covered as f64 / n_fresh as f64);
    }
    let mean = coverage.iter().sum::<f64>() / coverage.len() as f64;
    let (lo, hi) = (1.0 - eps, 1.0 - eps + 2.0 / (n_cal as f64 + 2.0) + 0.01);
    let band = mean >= lo && mean <= hi;

    // weighted d on the synthetic classification task for decreasing ε
    let cfg = SyntheticConfig::default();
    let basis = synthetic_basis(&cfg, 500, 41);
    let data = synthetic_dataset(&cfg, &basis, 4000, 42);
    let (train_set, cal) = data.split_at(2000);
    let model = train(&train_set, (16, 16), &LossConfig::default(), &TrainConfig { epochs: 5, ..train_cfg(4) }).unwrap();
    let levels = [0.2, 0.1, 0.05, 0.02, 0.01];
    let dbar: Vec<f64> = levels
        .iter()
        .map(|e| conformal_calibrate(&model.params, &cal, *e, ResidualScope::Positives).unwrap().weighted_d)
        .collect();
    let monotone = dbar.windows(2).all(|w| w[1] >= w[0]) && dbar[dbar.len() - 1] > dbar[0];
    verdict(
        4,
        "conformal coverage band",
        band && monotone,
        start.elapsed(),
        Duration::from_secs(120),
        &format!(
            "mean coverage {mean:.5} in [{lo:.4}, {hi:.4}]: {band}; weighted d over ε {levels:?}: {:?}",
            dbar.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Sparsification
// ---------------------------------------------------------------------------

fn line_corpus(xs: &[f64]) -> Vec<Trajectory> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| Trajectory::new(vec![[*x, 0.0]; 3], 0.1, format!("t{i}"), 20.0).unwrap())
        .collect()
}

fn brute_force_cover(corpus: &[Trajectory], eps: f64, atoms: &AtomSet) -> usize {
    let n = corpus.len();
    let mut adj = vec![0u32; n];
    for i in 0..n {
        for j in 0..n {
            if atomic_distance(&corpus[i], &corpus[j], atoms).unwrap() <= eps {
                adj[i] |= 1 << j;
            }
        }
    }
    let full = (1u32 << n) - 1;
    (1u32..=full)
        .filter(|set| {
            let covered = (0..n).filter(|i| set & (1 << i) != 0).fold(0, |acc, i| acc | adj[i]);
            covered == full
        })
        .map(|set| set.count_ones() as usize)
        .min()
        .unwrap()
}

#[test]
fn criterion_5_sparsification() {
    let start = Instant::now();
    let cfg = SyntheticConfig::default();
    let corpus: Vec<Trajectory> = generate_synthetic(&cfg, 200, 51).unwrap().map(|s| s.observed).collect();
    let atoms = AtomSet::uniform(cfg.horizon, 2.0, 0.5).unwrap();
    let eps = 1.0;
    let basis = greedy_sparsify(&corpus, eps, &atoms).unwrap();
    let worst = corpus
        .iter()
        .map(|t| {
            basis
                .bases
                .iter()
                .map(|b| atomic_distance(t, b, &atoms).unwrap())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    let cover = worst <= eps;

    let line_atoms = AtomSet::uniform(3, 1.0, 1.0).unwrap();
    let instance = line_corpus(&[0.0, 0.3, 0.45, 1.2, 1.5, 1.6, 2.4, 2.5, 3.3, 3.4]);
    let greedy = greedy_sparsify(&instance, 1.0, &line_atoms).unwrap().len();
    let optimum = brute_force_cover(&instance, 1.0, &line_atoms);
    verdict(
        5,
        "sparsification",
        cover && greedy == optimum,
        start.elapsed(),
        Duration::from_secs(30),
        &format!(
            "200-corpus M = {}, worst min-distance {worst:.4} <= {eps}; 10-instance greedy {greedy} vs optimum {optimum}",
            basis.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Gradient correctness
// ---------------------------------------------------------------------------

/// Smallest |pre-activation| over hidden units and smallest distance of an
/// output to its hinge margin, computed by a separate layer walk.
fn kink_margin(p: &NetworkParams, x: &[f64], flags: &[Flag], cfg: &LossConfig) -> f64 {
    let mut a: Vec<f64> = x
        .iter()
        .zip(&p.input_shift)
        .zip(&p.input_scale)
        .map(|((v, s), c)| (v - s) / c)
        .collect();
    let mut margin = f64::INFINITY;
    let layers = p.weights.len();
    for l in 0..layers {
        let (n_in, n_out) = (p.sizes[l], p.sizes[l + 1]);
        let z: Vec<f64> = (0..n_out)
            .map(|o| p.biases[l][o] + (0..n_in).map(|i| p.weights[l][o * n_in + i] * a[i]).sum::<f64>())
            .collect();
        if l + 1 < layers {
            margin = margin.min(z.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min));
            a = z.iter().map(|v| v.max(0.0)).collect();
        } else {
            a = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        }
    }
    for (y, f) in a.iter().zip(flags) {
        let g = if *f == Flag::Pos { cfg.gamma1 } else { cfg.gamma2 };
        margin = margin.min((y - g).abs());
    }
    margin
}

#[test]
fn criterion_6_gradient_correctness() {
    let start = Instant::now();
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut errors = Vec::new();
    let mut seed = 0;
    while errors.len() < 20 {
        seed += 1;
        let m = 5;
        let p = NetworkParams::init(&[AFFORDANCE_DIM, 10, 8, m], seed).unwrap();
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..AFFORDANCE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let fs: Vec<Vec<Flag>> = (0..4)
            .map(|_| {
                let pos = rng.random_range(0..m);
                (0..m)
                    .map(|i| match (i == pos, rng.random_bool(0.3)) {
                        (true, _) => Flag::Pos,
                        (false, true) => Flag::NegColliding,
                        (false, false) => Flag::NegSafe,
                    })
                    .collect()
            })
            .collect();
        if xs.iter().zip(&fs).any(|(x, f)| kink_margin(&p, x, f, &cfg) < 1e-3) {
            continue;
        }
        let batch: Vec<Example<'_>> = xs.iter().zip(&fs).map(|(x, f)| (&x[..], &f[..])).collect();
        let (g, _) = grad(&p, &batch, &cfg).unwrap();
        let analytic = g.flat();
        let theta = p.flat();
        let objective = |t: &[f64]| {
            let mut q = p.clone();
            q.set_flat(t).unwrap();
            batch.iter().map(|(x, f)| loss(&forward(&q, x).unwrap(), f, &cfg)).sum::<f64>() / batch.len() as f64
        };
        let h = 1e-5;
        let mut t = theta.clone();
        let numeric: Vec<f64> = (0..theta.len())
            .map(|i| {
                t[i] = theta[i] + h;
                let up = objective(&t);
                t[i] = theta[i] - h;
                let down = objective(&t);
                t[i] = theta[i];
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            // zero loss everywhere nearby: both gradients must vanish
            errors.push(diff);
        } else {
            errors.push(diff / norm);
        }
    }
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    verdict(
        6,
        "gradient correctness",
        worst < 1e-4,
        start.elapsed(),
        Duration::from_secs(10),
        &format!("worst relative error {worst:.2e} over 20 kink-free configurations"),
    );
}

// ---------------------------------------------------------------------------
// 7. MPC contracts
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_mpc_contracts() {
    let start = Instant::now();
    let cfg = MpcConfig::default();

    // blocked lane: a stopped car 45 m ahead in the ego lane
    let stopped = VehicleState {
        id: 1,
        x: 45.0,
        y: 0.0,
        v: 0.0,
        psi: 0.0,
        length: 4.8,
        width: 1.9,
    };
    let fc = FieldConfig {
        inflation: 0.0,
        ..FieldConfig::default()
    };
    let axes = fc.semi_axes(&stopped, (0.0, 0.0));
    let mut field = ObstacleField::empty(axes, cfg.horizon);
    field
        .tubes
        .push(constant_velocity_tube(1, [stopped.x, stopped.y], 0.0, axes, cfg.horizon, cfg.dt));
    let x0 = EgoState {
        x: 0.0,
        y: 0.0,
        v: 20.0,
        psi: 0.0,
    };
    let plan = solve_mpc(&x0, &field, &cfg, None).unwrap();
    let mut replay = vec![x0];
    for u in &plan.inputs {
        let next = dubins_step(replay.last().unwrap(), u, cfg.dt);
        replay.push(next);
    }
    let rollout_exact = plan.states == replay;
    let min_dist = plan
        .states
        .iter()
        .enumerate()
        .map(|(k, s)| field.min_scaled_distance(k, s.x, s.y))
        .fold(f64::INFINITY, f64::min);

    // regulation without obstacles
    let reg_cfg = MpcConfig {
        v_ref: 25.0,
        y_ref: 3.7,
        ..MpcConfig::default()
    };
    let on_ref = EgoState {
        x: 0.0,
        y: 3.7,
        v: 25.0,
        psi: 0.0,
    };
    let empty = ObstacleField::empty(axes, reg_cfg.horizon);
    let reg = solve_mpc(&on_ref, &empty, &reg_cfg, None).unwrap().objective;

    // one-step problems against a 21×21 grid
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..20 {
        let one = MpcConfig {
            horizon: 1,
            v_ref: rng.random_range(15.0..30.0),
            y_ref: rng.random_range(-2.0..2.0),
            ..MpcConfig::default()
        };
        let s = EgoState {
            x: 0.0,
            y: rng.random_range(-3.0..3.0),
            v: rng.random_range(5.0..30.0),
            psi: rng.random_range(-0.2..0.2),
        };
        let mut f = ObstacleField::empty(axes, 1);
        f.tubes
            .push(constant_velocity_tube(1, [s.x + 3.0, s.y + 0.5], s.v, axes, 1, one.dt));
        let solved = solve_mpc(&s, &f, &one, None).unwrap().objective;
        let b = one.bounds;
        let mut best = f64::INFINITY;
        for i in 0..21 {
            for j in 0..21 {
                let u = ControlInput {
                    a: b.a_min + (b.a_max - b.a_min) * i as f64 / 20.0,
                    r: b.r_min + (b.r_max - b.r_min) * j as f64 / 20.0,
                };
                best = best.min(mpc_cost(&rollout(&s, &[u], one.dt), &[u], &f, &one).unwrap());
            }
        }
        worst_gap = worst_gap.max(solved - best);
    }
    verdict(
        7,
        "MPC contracts",
        rollout_exact && reg < 1e-6 && min_dist >= 0.95 && worst_gap <= 1e-3,
        start.elapsed(),
        Duration::from_secs(60),
        &format!(
            "rollout exact {rollout_exact}; regulation objective {reg:.2e}; blocked-lane min scaled distance {min_dist:.4}; worst solver minus grid {worst_gap:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Closed loop
// ---------------------------------------------------------------------------

/// Boxed-in test written against raw footprints: vehicles within `margin`
/// bumper-to-bumper ahead and behind in the ego lane, and each side lane
/// either missing or holding a vehicle within `margin` longitudinally.
fn trapped_oracle(world: &WorldState, margin: f64) -> bool {
    let ego = world.ego_vehicle();
    let w = world.lanes.lane_width;
    let lane = |y: f64| {
        let c = &world.lanes.centers;
        c.iter().position(|cy| (y - cy).abs() <= 0.5 * w)
    };
    let Some(me) = lane(ego.y) else {
        return false;
    };
    let near = |o: &VehicleState| (o.x - ego.x).abs() - 0.5 * (o.length + ego.length) <= margin;
    let others: Vec<VehicleState> = world.agents.iter().map(|a| a.state).collect();
    let ahead = others.iter().any(|o| lane(o.y) == Some(me) && o.x >= ego.x && near(o));
    let behind = others.iter().any(|o| lane(o.y) == Some(me) && o.x < ego.x && near(o));
    let side = |l: Option<usize>| match l {
        None => true,
        Some(l) => others.iter().any(|o| lane(o.y) == Some(l) && near(o)),
    };
    let left = side((me + 1 < world.lanes.centers.len()).then_some(me + 1));
    let right = side(me.checked_sub(1));
    ahead && behind && left && right
}

#[test]
fn criterion_8_closed_loop() {
    let start = Instant::now();
    let mut pc = PipelineConfig {
        seed: 81,
        ..PipelineConfig::default()
    };
    pc.simulator.n_uncontrolled = (3, 3);
    pc.simulator.ignore_rear = true;
    pc.simulator.duration = 20.0;
    let syn = pc.data.synthetic;
    let basis = synthetic_basis(&syn, 2000, 82);
    let data = synthetic_dataset(&syn, &basis, 15_000, 83);
    let (train_set, cal) = data.split_at(10_000);
    let model = train(&train_set, (32, 32), &LossConfig::default(), &train_cfg(84)).unwrap();
    let pb = post_bloat(&model.params, &cal, LossConfig::default().gamma1).unwrap();
    let predictor = CalibratedPredictor::new(model.params, pb.thresholds).unwrap();
    let sim = SimModel {
        predictor: &predictor,
        basis: &basis,
    };

    let mut outcomes = Vec::new();
    let mut replay_consistent = true;
    let mut trap_flags_correct = true;
    for i in 0..50 {
        let tc = pc.trial_config(i);
        let outcome = run_trial(&tc, &sim).unwrap();
        // replay the trial step by step and check every event independently
        let mut world = WorldState::initialize(&tc, &sim).unwrap();
        let mut events = Vec::new();
        let mut in_contact: Vec<(u32, u32)> = Vec::new();
        for _ in 0..outcome.steps {
            step_world(&mut world, &sim, &tc).unwrap();
            let now = detect_collisions(&world, tc.trap_margin);
            for e in &now {
                if !in_contact.contains(&e.pair) {
                    if e.involves_controlled && e.trapped != trapped_oracle(&world, tc.trap_margin) {
                        trap_flags_correct = false;
                    }
                    events.push(e.clone());
                }
            }
            in_contact = now.iter().map(|e| e.pair).collect();
        }
        replay_consistent &= events == outcome.events;
        outcomes.push(outcome);
    }
    let report = aggregate(&outcomes).unwrap();
    let ego_events: Vec<_> = outcomes.iter().flat_map(|o| o.controlled_events()).collect();
    let recount_fs = ego_events.iter().filter(|e| e.class == CollisionClass::FrontalSide).count();
    let recount_re = ego_events.iter().filter(|e| e.class == CollisionClass::RearEnd).count();
    let classified = report.frontal_side == recount_fs
        && report.rear_end == recount_re
        && report.frontal_side + report.rear_end == ego_events.len()
        && report.traps == ego_events.iter().filter(|e| e.trapped).count()
        && ego_events.iter().all(|e| e.pair.0 == CONTROLLED_ID);
    let complete = report.incomplete == 0;
    verdict(
        8,
        "closed loop",
        report.frontal_side == 0 && classified && trap_flags_correct && replay_consistent && complete,
        start.elapsed(),
        Duration::from_secs(900),
        &format!(
            "M = {}, controlled frontal/side {}, rear-end {}, traps {}, background {}, incomplete {}; classification recount {classified}, trap flags {trap_flags_correct}, replay {replay_consistent}",
            basis.len(),
            report.frontal_side,
            report.rear_end,
            report.traps,
            report.background_events,
            report.incomplete
        ),
    );
}
