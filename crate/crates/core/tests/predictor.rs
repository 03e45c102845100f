use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setpred::predictor::{forward, grad, loss, predict_set, train, Example, LossConfig, NetworkParams, TrainConfig};
use setpred::scene::{Affordance, Dataset, Flag, LabeledSample, AFFORDANCE_DIM};
use setpred::Error;

/// Layer-by-layer evaluation written independently of the library; returns
/// the hidden pre-activations alongside the scores.
fn oracle(params: &NetworkParams, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a: Vec<f64> = x
        .iter()
        .zip(&params.input_shift)
        .zip(&params.input_scale)
        .map(|((v, s), c)| (v - s) / c)
        .collect();
    let mut pres = Vec::new();
    let layers = params.weights.len();
    for l in 0..layers {
        let (n_in, n_out) = (params.sizes[l], params.sizes[l + 1]);
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut acc = params.biases[l][o];
            for i in 0..n_in {
                acc += params.weights[l][o * n_in + i] * a[i];
            }
            z[o] = acc;
        }
        if l + 1 < layers {
            pres.push(z.clone());
            a = z.iter().map(|v| v.max(0.0)).collect();
        } else {
            a = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        }
    }
    (a, pres)
}

fn random_input(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..AFFORDANCE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn random_flags(rng: &mut ChaCha8Rng, m: usize) -> Vec<Flag> {
    let pos = rng.random_range(0..m);
    (0..m)
        .map(|i| {
            if i == pos {
                Flag::Pos
            } else if rng.random_bool(0.3) {
                Flag::NegColliding
            } else {
                Flag::NegSafe
            }
        })
        .collect()
}

#[test]
fn zero_network_outputs_one_half() {
    let mut p = NetworkParams::init(&[AFFORDANCE_DIM, 8, 8, 5], 1).unwrap();
    let zeros = vec![0.0; p.flat().len()];
    p.set_flat(&zeros).unwrap();
    let y = forward(&p, &[1.0; AFFORDANCE_DIM]).unwrap();
    assert_eq!(y, vec![0.5; 5]);
}

#[test]
fn forward_matches_oracle_and_rejects_bad_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..50 {
        let mut p = NetworkParams::init(&[AFFORDANCE_DIM, 16, 12, 7], seed).unwrap();
        p.input_shift = (0..AFFORDANCE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.input_scale = (0..AFFORDANCE_DIM).map(|_| rng.random_range(0.5..2.0)).collect();
        let x = random_input(&mut rng);
        let y = forward(&p, &x).unwrap();
        let (expect, _) = oracle(&p, &x);
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
            assert!(*a > 0.0 && *a < 1.0);
        }
    }
    let p = NetworkParams::init(&[AFFORDANCE_DIM, 4, 4, 3], 0).unwrap();
    assert!(matches!(forward(&p, &[0.0; 20]), Err(Error::Contract(_))));
}

#[test]
fn scaling_last_layer_keeps_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = NetworkParams::init(&[AFFORDANCE_DIM, 10, 10, 6], 3).unwrap();
    let mut q = p.clone();
    let last = q.weights.len() - 1;
    q.weights[last].iter_mut().for_each(|w| *w *= 3.0);
    q.biases[last].iter_mut().for_each(|b| *b *= 3.0);
    let argmax = |v: Vec<f64>| {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    for _ in 0..50 {
        let x = random_input(&mut rng);
        assert_eq!(argmax(forward(&p, &x).unwrap()), argmax(forward(&q, &x).unwrap()));
    }
}

#[test]
fn loss_hand_example() {
    let cfg = LossConfig {
        gamma1: 0.9,
        gamma2: 0.2,
        w1: 1.0,
        w0: 1.0,
        w0bar: 5.0,
    };
    let j = loss(&[0.8, 0.3], &[Flag::Pos, Flag::NegColliding], &cfg);
    assert!((j - 0.6).abs() < 1e-12);
    let inside = loss(&[0.95, 0.1], &[Flag::Pos, Flag::NegColliding], &cfg);
    assert_eq!(inside, 0.0);
}

#[test]
fn swapping_negative_weights_scales_safe_loss() {
    let a = LossConfig {
        w0: 1.0,
        w0bar: 4.0,
        ..LossConfig::default()
    };
    let b = LossConfig {
        w0: 4.0,
        w0bar: 4.0,
        ..LossConfig::default()
    };
    let y = [0.5, 0.6, 0.9];
    let flags = [Flag::NegSafe; 3];
    assert!((loss(&y, &flags, &b) - 4.0 * loss(&y, &flags, &a)).abs() < 1e-12);
}

#[test]
fn loss_is_non_negative_and_zero_only_inside_margins() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = LossConfig::default();
    for _ in 0..1000 {
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let flags = random_flags(&mut rng, 6);
        let j = loss(&y, &flags, &cfg);
        assert!(j >= 0.0);
        let inside = y.iter().zip(&flags).all(|(v, f)| match f {
            Flag::Pos => *v >= cfg.gamma1,
            _ => *v <= cfg.gamma2,
        });
        assert_eq!(j == 0.0, inside);
    }
}

#[test]
fn increasing_w0bar_never_decreases_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let y: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut flags = random_flags(&mut rng, 5);
        let k = (flags.iter().position(|f| *f == Flag::Pos).unwrap() + 1) % 5;
        flags[k] = Flag::NegColliding;
        let lo = LossConfig::default();
        let hi = LossConfig { w0bar: 9.0, ..lo };
        let (jl, jh) = (loss(&y, &flags, &lo), loss(&y, &flags, &hi));
        assert!(jh >= jl);
        if y[k] > lo.gamma2 {
            assert!(jh > jl);
        }
    }
}

/// Distance of the configuration to the nearest ReLU or hinge kink.
fn kink_margin(p: &NetworkParams, x: &[f64], flags: &[Flag], cfg: &LossConfig) -> f64 {
    let (y, pres) = oracle(p, x);
    let relu = pres.iter().flatten().map(|z| z.abs()).fold(f64::INFINITY, f64::min);
    let hinge = y
        .iter()
        .zip(flags)
        .map(|(v, f)| match f {
            Flag::Pos => (v - cfg.gamma1).abs(),
            _ => (v - cfg.gamma2).abs(),
        })
        .fold(f64::INFINITY, f64::min);
    relu.min(hinge)
}

#[test]
fn gradient_matches_central_differences_on_kink_free_configurations() {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tested = 0;
    let mut seed = 0;
    while tested < 20 {
        seed += 1;
        let mut p = NetworkParams::init(&[AFFORDANCE_DIM, 6, 5, 4], seed).unwrap();
        let biases: Vec<Vec<f64>> = p.biases.iter().map(|b| b.iter().map(|_| rng.random_range(-0.3..0.3)).collect()).collect();
        p.biases = biases;
        let xs: Vec<Vec<f64>> = (0..3).map(|_| random_input(&mut rng)).collect();
        let fs: Vec<Vec<Flag>> = (0..3).map(|_| random_flags(&mut rng, 4)).collect();
        if xs.iter().zip(&fs).any(|(x, f)| kink_margin(&p, x, f, &cfg) < 1e-3) {
            continue;
        }
        let batch: Vec<Example<'_>> = xs.iter().zip(&fs).map(|(x, f)| (&x[..], &f[..])).collect();
        let (g, _) = grad(&p, &batch, &cfg).unwrap();
        let g = g.flat();
        let theta = p.flat();
        let h = 1e-5;
        let mut num = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut q = p.clone();
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            q.set_flat(&t).unwrap();
            let jp: f64 = batch.iter().map(|(x, f)| loss(&forward(&q, x).unwrap(), f, &cfg)).sum::<f64>() / 3.0;
            t[i] = theta[i] - h;
            q.set_flat(&t).unwrap();
            let jm: f64 = batch.iter().map(|(x, f)| loss(&forward(&q, x).unwrap(), f, &cfg)).sum::<f64>() / 3.0;
            num.push((jp - jm) / (2.0 * h));
        }
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        if scale > 1e-10 {
            assert!(diff / scale < 1e-4, "seed {seed}: relative error {}", diff / scale);
        } else {
            assert!(diff < 1e-9);
        }
        tested += 1;
    }
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = NetworkParams::init(&[AFFORDANCE_DIM, 8, 8, 4], 9).unwrap();
    let (x1, x2) = (random_input(&mut rng), random_input(&mut rng));
    let (f1, f2) = (random_flags(&mut rng, 4), random_flags(&mut rng, 4));
    let (g1, _) = grad(&p, &[(&x1, &f1)], &cfg).unwrap();
    let (g2, _) = grad(&p, &[(&x2, &f2)], &cfg).unwrap();
    let (g12, _) = grad(&p, &[(&x1, &f1), (&x2, &f2)], &cfg).unwrap();
    for ((a, b), c) in g1.flat().iter().zip(g2.flat()).zip(g12.flat()) {
        assert!((0.5 * (a + b) - c).abs() < 1e-14);
    }
    assert!(grad(&p, &[], &cfg).is_err());
}

#[test]
fn zero_loss_gives_zero_gradient() {
    let cfg = LossConfig::default();
    let mut p = NetworkParams::init(&[AFFORDANCE_DIM, 4, 4, 2], 1).unwrap();
    let last = p.biases.len() - 1;
    p.biases[last] = vec![10.0, -10.0];
    p.weights[last].iter_mut().for_each(|w| *w = 0.0);
    let x = vec![0.3; AFFORDANCE_DIM];
    let flags = [Flag::Pos, Flag::NegColliding];
    let (g, j) = grad(&p, &[(&x, &flags)], &cfg).unwrap();
    assert_eq!(j, 0.0);
    assert!(g.flat().iter().all(|v| *v == 0.0));
}

fn sample(x: [f64; AFFORDANCE_DIM], flags: Vec<Flag>) -> LabeledSample {
    LabeledSample::new(Affordance::from_array(&x).unwrap(), flags).unwrap()
}

#[test]
fn single_sample_is_fit_exactly() {
    let mut x = [0.0; AFFORDANCE_DIM];
    x[0] = 25.0;
    x[2] = 40.0;
    let data = Dataset::from_samples(vec![sample(x, vec![Flag::NegSafe, Flag::Pos, Flag::NegColliding])]);
    let cfg = LossConfig::default();
    let tc = TrainConfig {
        epochs: 300,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let out = train(&data, (8, 8), &cfg, &tc).unwrap();
    let y = forward(&out.params, &x).unwrap();
    assert_eq!(loss(&y, &data.samples[0].flags, &cfg), 0.0);
    assert_eq!(*out.loss_history.last().unwrap(), 0.0);
}

fn separable(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..AFFORDANCE_DIM).map(|i| if i % 3 == 0 { 1.0 } else { -0.5 }).collect();
    let mut out = Vec::new();
    while out.len() < n {
        let mut x = [0.0; AFFORDANCE_DIM];
        x.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        if s.abs() < 0.2 {
            continue;
        }
        let flags = if s > 0.0 {
            vec![Flag::Pos, Flag::NegSafe]
        } else {
            vec![Flag::NegSafe, Flag::Pos]
        };
        out.push(sample(x, flags));
    }
    Dataset::from_samples(out)
}

#[test]
fn separable_toy_generalises() {
    let train_set = separable(7, 2000);
    let test_set = separable(8, 1000);
    let tc = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let out = train(&train_set, (16, 16), &LossConfig::default(), &tc).unwrap();
    let correct = test_set
        .samples
        .iter()
        .filter(|s| {
            let y = forward(&out.params, &s.affordance.to_array()).unwrap();
            let pred = if y[0] >= y[1] { 0 } else { 1 };
            pred == s.positive_index()
        })
        .count();
    let acc = correct as f64 / test_set.len() as f64;
    assert!(acc > 0.95, "accuracy {acc}");
}

#[test]
fn training_is_deterministic() {
    let data = separable(9, 300);
    let tc = TrainConfig {
        epochs: 5,
        seed: 42,
        ..TrainConfig::default()
    };
    let a = train(&data, (8, 8), &LossConfig::default(), &tc).unwrap();
    let b = train(&data, (8, 8), &LossConfig::default(), &tc).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loss_history, b.loss_history);
    let c = train(&data, (8, 8), &LossConfig::default(), &TrainConfig { seed: 43, ..tc }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn divergence_reports_epoch() {
    let data = separable(10, 50);
    let tc = TrainConfig {
        learning_rate: f64::INFINITY,
        epochs: 3,
        ..TrainConfig::default()
    };
    match train(&data, (8, 8), &LossConfig::default(), &tc) {
        Err(Error::Divergence { epoch, .. }) => assert!(epoch < 3),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn empty_dataset_is_rejected() {
    assert!(train(&Dataset::default(), (4, 4), &LossConfig::default(), &TrainConfig::default()).is_err());
}

#[test]
fn predict_set_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = NetworkParams::init(&[AFFORDANCE_DIM, 8, 8, 6], 2).unwrap();
    let x = random_input(&mut rng);
    assert_eq!(predict_set(&p, &[0.0; 6], &x).unwrap(), (0..6).collect::<Vec<_>>());
    assert!(predict_set(&p, &[1.0 + 1e-9; 6], &x).unwrap().is_empty());
    for _ in 0..100 {
        let x = random_input(&mut rng);
        let c: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = forward(&p, &x).unwrap();
        let expect: Vec<usize> = (0..6).filter(|&i| y[i] >= c[i]).collect();
        assert_eq!(predict_set(&p, &c, &x).unwrap(), expect);
    }
    assert!(predict_set(&p, &[0.5; 5], &x).is_err());
}

#[test]
fn invalid_loss_configs_are_rejected() {
    let bad = [
        LossConfig { gamma1: 0.3, gamma2: 0.7, ..LossConfig::default() },
        LossConfig { w0bar: 0.5, w0: 1.0, ..LossConfig::default() },
        LossConfig { w1: 0.0, ..LossConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}
