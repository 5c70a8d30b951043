use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use splitgym::algorithms::*;
use splitgym::data::{Dataset, DatasetMeta, Episode, Transition};
use splitgym::diffnet::{forward, grad_params, ParamVector};
use splitgym::fisher::FisherState;

fn dataset_from(transitions: Vec<Transition>, sd: usize, ad: usize) -> Dataset {
    Dataset {
        meta: DatasetMeta {
            policy: "synthetic".into(),
            config_hash: String::new(),
            state_dim: sd,
            action_dim: ad,
        },
        episodes: vec![Episode {
            seed: 0,
            transitions,
        }],
    }
}

fn random_dataset(n: usize, sd: usize, ad: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transitions = (0..n)
        .map(|_| {
            let s: Vec<f64> = (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..ad).map(|_| rng.random_range(0.0..1.0)).collect();
            let s_next: Vec<f64> = (0..sd).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = 0.3 * s[0] - (a[0] - 0.6).powi(2);
            Transition { s, a, r, s_next }
        })
        .collect();
    dataset_from(transitions, sd, ad)
}

fn options(algo: Algo, critic: &[usize], actor: &[usize], batch: usize) -> TrainOptions {
    let mut o = TrainOptions::new(algo);
    o.hyper.td3.critic_hidden = critic.to_vec();
    o.hyper.td3.actor_hidden = actor.to_vec();
    o.hyper.td3.batch_size = batch;
    o
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn ptd3_without_pessimism_replays_td3() {
    let ds = random_dataset(300, 4, 2, 3);
    let mut td3 = options(Algo::Td3, &[8, 8], &[8], 16);
    td3.hyper.td3.steps = 1000;
    let mut ptd3 = td3.clone();
    ptd3.algo = Algo::Ptd3;
    ptd3.hyper.beta = 0.0;
    let a = train(td3, &ds, 11).unwrap();
    let b = train(ptd3, &ds, 11).unwrap();
    assert_eq!(a.actor, b.actor);
    assert_eq!(a.critic1, b.critic1);
    assert_eq!(a.actor_target, b.actor_target);
}

#[test]
fn same_seed_gives_identical_checkpoint_bytes() {
    let ds = random_dataset(200, 3, 2, 1);
    let mut o = options(Algo::Ptd3, &[6], &[6], 8);
    o.hyper.td3.steps = 60;
    let write = |b: &AgentBundle| {
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        buf
    };
    let x = write(&train(o.clone(), &ds, 5).unwrap());
    let y = write(&train(o.clone(), &ds, 5).unwrap());
    let z = write(&train(o, &ds, 6).unwrap());
    assert_eq!(x, y);
    assert_ne!(x, z);
}

#[test]
fn resume_from_midpoint_matches_uninterrupted_run() {
    let ds = random_dataset(200, 3, 2, 2);
    for algo in [Algo::Bc, Algo::Td3, Algo::Td3Bc, Algo::Ptd3] {
        let o = options(algo, &[6], &[6], 8);
        let mut straight = Trainer::new(o.clone(), &ds, 8).unwrap();
        straight.run(80).unwrap();

        let mut first = Trainer::new(o, &ds, 8).unwrap();
        first.run(40).unwrap();
        let mut resumed = first.clone();
        drop(first);
        resumed.run(40).unwrap();
        assert_eq!(resumed.bundle(), straight.bundle(), "{algo}");
        assert_eq!(
            resumed.fisher().map(|f| f.inverse().clone()),
            straight.fisher().map(|f| f.inverse().clone())
        );
    }
}

/// One transition, linear critics, gamma = 0: the target is the reward and
/// the first Adam step moves every coordinate by `lr * g / (|g| + eps)`.
#[test]
fn linear_critic_single_step_matches_hand_derivation() {
    let t = Transition {
        s: vec![0.5, -1.0],
        a: vec![0.25],
        r: 2.0,
        s_next: vec![0.1, 0.2],
    };
    let ds = dataset_from(vec![t.clone()], 2, 1);
    let mut o = options(Algo::Td3, &[], &[], 1);
    o.hyper.td3.gamma = 0.0;
    let data = TrainingData::from_dataset(&ds).unwrap();
    let mut bundle = AgentBundle::new(o, 2, 1, 4).unwrap();
    let mut opts = Optimizers::new(&bundle);
    let before = bundle.critic1.clone();
    let x = [t.s[0], t.s[1], t.a[0], 1.0];
    let q: f64 = (0..4).map(|k| before.0[k] * x[k]).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let losses = td3_critic_update(&mut bundle, &mut opts, &data, &[0], &mut rng).unwrap();
    assert!((losses.critic1 - (q - t.r).powi(2)).abs() < 1e-12);
    let lr = bundle.options.hyper.td3.critic_lr;
    for k in 0..4 {
        let g = 2.0 * (q - t.r) * x[k];
        let expected = before.0[k] - lr * g / (g.abs() + 1e-8);
        assert!((bundle.critic1.0[k] - expected).abs() < 1e-15, "coordinate {k}");
    }
}

#[test]
fn twin_targets_share_the_minimum() {
    let ds = random_dataset(20, 3, 2, 7);
    let data = TrainingData::from_dataset(&ds).unwrap();
    let mut o = options(Algo::Td3, &[], &[4], 1);
    o.hyper.td3.gamma = 0.9;
    let mut bundle = AgentBundle::new(o, 3, 2, 1).unwrap();
    bundle.critic2_target = bundle.critic1_target.clone();
    let mut opts = Optimizers::new(&bundle);
    let before = bundle.critic1.clone();

    // replay the noise draw to rebuild the target by hand
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut shadow = rng.clone();
    let mut a_next = forward(&bundle.actor_spec, &bundle.actor_target, data.next_state(5)).unwrap();
    for a in a_next.iter_mut() {
        let e: f64 = shadow.sample(StandardNormal);
        *a = (*a + (0.2 * e).clamp(-0.5, 0.5)).clamp(0.0, 1.0);
    }
    let mut xn = data.next_state(5).to_vec();
    xn.extend(&a_next);
    let y = data.rewards[5] + 0.9 * forward(&bundle.critic_spec, &bundle.critic1_target, &xn).unwrap()[0];
    let mut x = data.state(5).to_vec();
    x.extend(data.action(5));
    let q = forward(&bundle.critic_spec, &before, &x).unwrap()[0];

    let losses = td3_critic_update(&mut bundle, &mut opts, &data, &[5], &mut rng).unwrap();
    assert!((losses.critic1 - (q - y).powi(2)).abs() < 1e-12);
}

#[test]
fn bc_fits_a_constant_action() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let transitions: Vec<Transition> = (0..400)
        .map(|_| Transition {
            s: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
            a: vec![0.3, 0.75],
            r: 0.0,
            s_next: vec![0.0; 5],
        })
        .collect();
    let ds = dataset_from(transitions, 5, 2);
    let mut h = PtD3Hyper::default();
    h.td3.actor_hidden = vec![16];
    h.td3.batch_size = 64;
    h.td3.actor_lr = 3e-3;
    h.td3.steps = 3000;
    let b = bc_train(h, &ds, 1, false).unwrap();
    for t in ds.transitions() {
        let out = b.act(&t.s).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-2 && (out[1] - 0.75).abs() < 1e-2, "{out:?}");
    }
}

#[test]
fn bc_loss_decreases_on_realizable_data() {
    // actions produced by a linear actor head, so the model class contains them
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = [0.8, -0.5, 0.3];
    let transitions: Vec<Transition> = (0..500)
        .map(|_| {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z: f64 = s.iter().zip(&w).map(|(a, b)| a * b).sum();
            Transition {
                a: vec![(z.tanh() + 1.0) / 2.0],
                s_next: s.clone(),
                s,
                r: 0.0,
            }
        })
        .collect();
    let ds = dataset_from(transitions, 3, 1);
    let mut o = options(Algo::Bc, &[], &[], 256);
    o.hyper.td3.actor_lr = 1e-2;
    let mut tr = Trainer::new(o, &ds, 3).unwrap();
    let losses: Vec<f64> = (0..1000).map(|_| tr.step().unwrap().actor.unwrap()).collect();
    let windows: Vec<f64> = losses.chunks(100).map(|c| c.iter().sum::<f64>() / 100.0).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0] * 1.05 + 1e-9, "{windows:?}");
    }
    assert!(windows[9] < 0.1 * windows[0], "{windows:?}");
}

fn random_fisher(d: usize, rng: &mut ChaCha8Rng) -> FisherState {
    let mut f = DMatrix::<f64>::identity(d, d);
    for _ in 0..5 {
        let g = DMatrix::from_fn(d, 1, |_, _| rng.random_range(-1.0..1.0));
        f += &g * g.transpose();
    }
    FisherState::new(d, 1.0).unwrap().with_matrix(f).unwrap().frozen()
}

fn perturbed(bundle: &AgentBundle, k: usize, h: f64) -> AgentBundle {
    let mut b = bundle.clone();
    b.actor.0[k] += h;
    b
}

#[test]
fn ptd3_gradient_matches_finite_differences() {
    let ds = random_dataset(64, 4, 2, 9);
    let data = TrainingData::from_dataset(&ds).unwrap();
    let states: Vec<&[f64]> = (0..16).map(|i| data.state(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (seed, pure) in [(1u64, false), (2, false), (3, true)] {
        let bundle = AgentBundle::new(options(Algo::Ptd3, &[6, 6], &[5], 16), 4, 2, seed).unwrap();
        let fisher = random_fisher(bundle.critic1.len(), &mut rng);
        let beta = 0.7;
        let (value, grad) = ptd3_actor_gradient(&bundle, Some(&fisher), &states, beta, pure).unwrap();
        let j0 = ptd3_objective(&bundle, Some(&fisher), &states, beta, pure).unwrap();
        assert!((value - j0).abs() < 1e-12);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 10 {
            let k = rng.random_range(0..bundle.actor.len());
            if grad[k].abs() < 1e-5 {
                continue;
            }
            let up = ptd3_objective(&perturbed(&bundle, k, h), Some(&fisher), &states, beta, pure).unwrap();
            let dn = ptd3_objective(&perturbed(&bundle, k, -h), Some(&fisher), &states, beta, pure).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(grad[k], fd) < 1e-3, "coord {k}: {} vs {fd}", grad[k]);
            checked += 1;
        }
    }
}

#[test]
fn td3bc_gradient_matches_finite_differences() {
    let ds = random_dataset(64, 4, 2, 12);
    let data = TrainingData::from_dataset(&ds).unwrap();
    let batch: Vec<usize> = (0..12).collect();
    let bundle = AgentBundle::new(options(Algo::Td3Bc, &[6], &[5], 12), 4, 2, 3).unwrap();
    let (_, grad) = td3bc_actor_gradient(&bundle, &data, &batch, 2.5).unwrap();
    let h = 1e-6;
    for k in (0..bundle.actor.len()).step_by(7) {
        let up = td3bc_actor_gradient(&perturbed(&bundle, k, h), &data, &batch, 2.5).unwrap().0;
        let dn = td3bc_actor_gradient(&perturbed(&bundle, k, -h), &data, &batch, 2.5).unwrap().0;
        let fd = (up - dn) / (2.0 * h);
        if grad[k].abs() > 1e-6 {
            assert!(rel_err(grad[k], fd) < 1e-4, "coord {k}: {} vs {fd}", grad[k]);
        }
    }
}

/// Linear critic `Q = w . [s; a] + b` has `grad_theta Q = [s; a; 1]`, so under
/// `F = I` the bonus is `beta * |[s; a; 1]|` and its action derivative is
/// `beta * a / |[s; a; 1]|`.
#[test]
fn identity_fisher_linear_critic_closed_form() {
    let (sd, ad) = (3, 2);
    let ds = random_dataset(10, sd, ad, 4);
    let data = TrainingData::from_dataset(&ds).unwrap();
    let states: Vec<&[f64]> = (0..10).map(|i| data.state(i)).collect();
    let bundle = AgentBundle::new(options(Algo::Ptd3, &[], &[], 10), sd, ad, 7).unwrap();
    let d = bundle.critic1.len();
    let fisher = FisherState::new(d, 1.0).unwrap().frozen();
    let beta = 1.5;
    let w = &bundle.critic1.0;
    for pure in [false, true] {
        let (_, grad) = ptd3_actor_gradient(&bundle, Some(&fisher), &states, beta, pure).unwrap();
        let mut expected = vec![0.0; bundle.actor.len()];
        for s in &states {
            let pi = forward(&bundle.actor_spec, &bundle.actor, s).unwrap();
            let mut x = s.to_vec();
            x.extend(&pi);
            x.push(1.0);
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let g = grad_params(&bundle.critic_spec, &bundle.critic1, &x[..sd + ad]).unwrap();
            assert!((g.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt() - norm).abs() < 1e-12);
            for j in 0..ad {
                let q_term = if pure { 0.0 } else { w[sd + j] };
                let dj_dpi = q_term - beta * pi[j] / norm;
                // unit-interval head: pi = (tanh z + 1) / 2, dpi/dz = 2 pi (1 - pi)
                let dz = dj_dpi * 2.0 * pi[j] * (1.0 - pi[j]) / states.len() as f64;
                for k in 0..sd {
                    expected[j * sd + k] += dz * s[k];
                }
                expected[ad * sd + j] += dz;
            }
        }
        for (a, b) in grad.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-7 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

/// With every hidden unit dead the critic is constant, its parameter
/// gradient does not depend on the action, and the bonus is flat in phi.
#[test]
fn constant_bonus_leaves_td3_step_and_pure_pessimism_is_still() {
    let ds = random_dataset(40, 3, 2, 5);
    let data = TrainingData::from_dataset(&ds).unwrap();
    let batch: Vec<usize> = (0..20).collect();
    let mut bundle = AgentBundle::new(options(Algo::Ptd3, &[4], &[4], 20), 3, 2, 2).unwrap();
    let spec = bundle.critic_spec.clone();
    let (fan_in, fan_out) = spec.layer_dims()[0];
    let p = &mut bundle.critic1.0;
    p[..fan_in * fan_out].iter_mut().for_each(|v| *v = 0.0);
    p[fan_in * fan_out..(fan_in + 1) * fan_out].iter_mut().for_each(|v| *v = -1.0);
    let d = bundle.critic1.len();
    let fisher = FisherState::new(d, 1.0).unwrap().frozen();
    let states: Vec<&[f64]> = batch.iter().map(|&i| data.state(i)).collect();

    let (_, td3) = ptd3_actor_gradient(&bundle, None, &states, 0.0, false).unwrap();
    let (_, pess) = ptd3_actor_gradient(&bundle, Some(&fisher), &states, 10.0, false).unwrap();
    assert_eq!(td3, pess);
    let (value, pure) = ptd3_actor_gradient(&bundle, Some(&fisher), &states, 10.0, true).unwrap();
    assert!(pure.iter().all(|&g| g == 0.0));
    // only the output bias feeds the gradient, so the bonus is exactly beta
    assert!((value + 10.0).abs() < 1e-12);
}

#[test]
fn td3bc_degenerate_cases() {
    let ds = random_dataset(30, 3, 2, 6);
    let data = TrainingData::from_dataset(&ds).unwrap();
    let batch: Vec<usize> = (0..30).collect();
    let bundle = AgentBundle::new(options(Algo::Td3Bc, &[5], &[5], 30), 3, 2, 4).unwrap();

    // bc_alpha = 0 is behavioral cloning: gradient of -mean |pi - a|^2
    let (value, grad) = td3bc_actor_gradient(&bundle, &data, &batch, 0.0).unwrap();
    let mut bc_bundle = bundle.clone();
    let mut opts = Optimizers::new(&bc_bundle);
    let loss = bc_actor_update(&mut bc_bundle, &mut opts, &data, &batch).unwrap();
    assert!((value + loss).abs() < 1e-12);
    let lr = bundle.options.hyper.td3.actor_lr;
    for ((after, before), g) in bc_bundle.actor.0.iter().zip(&bundle.actor.0).zip(&grad) {
        let expected = before + lr * g / (g.abs() + 1e-8);
        assert!((after - expected).abs() < 1e-15);
    }

    // dataset actions equal to the actor's own outputs: only the Q term remains
    let mut matched = ds.clone();
    for t in &mut matched.episodes[0].transitions {
        t.a = bundle.act(&t.s).unwrap();
    }
    let mdata = TrainingData::from_dataset(&matched).unwrap();
    let (_, bc_only) = td3bc_actor_gradient(&bundle, &mdata, &batch, 0.0).unwrap();
    assert!(bc_only.iter().all(|g| g.abs() < 1e-15));
    let (_, combined) = td3bc_actor_gradient(&bundle, &mdata, &batch, 2.5).unwrap();
    let abs_q: f64 = batch
        .iter()
        .map(|&i| {
            let mut x = mdata.state(i).to_vec();
            x.extend(mdata.action(i));
            forward(&bundle.critic_spec, &bundle.critic1, &x).unwrap()[0].abs()
        })
        .sum::<f64>()
        / 30.0;
    let states: Vec<&[f64]> = batch.iter().map(|&i| mdata.state(i)).collect();
    let (_, q_grad) = ptd3_actor_gradient(&bundle, None, &states, 0.0, false).unwrap();
    for (c, q) in combined.iter().zip(&q_grad) {
        assert!((c - 2.5 / abs_q * q).abs() < 1e-12 * q.abs().max(1.0));
    }
}

/// One sample, linear actor and critic: the TD3+BC direction is
/// `lambda w_a - 2 (pi - a)` pushed through the unit-interval head.
#[test]
fn td3bc_one_sample_linear_closed_form() {
    let t = Transition {
        s: vec![0.4, -0.2],
        a: vec![0.9],
        r: 0.0,
        s_next: vec![0.0, 0.0],
    };
    let ds = dataset_from(vec![t.clone()], 2, 1);
    let data = TrainingData::from_dataset(&ds).unwrap();
    let mut bundle = AgentBundle::new(options(Algo::Td3Bc, &[], &[], 1), 2, 1, 0).unwrap();
    bundle.critic1 = ParamVector(vec![0.5, -0.3, 1.2, 0.1]);
    let (_, grad) = td3bc_actor_gradient(&bundle, &data, &[0], 2.5).unwrap();
    let q_data = 0.5 * 0.4 + 0.3 * 0.2 + 1.2 * 0.9 + 0.1;
    let lambda = 2.5 / q_data;
    let pi = bundle.act(&t.s).unwrap()[0];
    let dpi = lambda * 1.2 - 2.0 * (pi - 0.9);
    let dz = dpi * 2.0 * pi * (1.0 - pi);
    let expected = [dz * 0.4, dz * -0.2, dz];
    for (g, e) in grad.iter().zip(expected) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn ptd3_actor_update_feeds_fisher_once_per_call() {
    let ds = random_dataset(50, 3, 2, 8);
    let data = TrainingData::from_dataset(&ds).unwrap();
    let mut o = options(Algo::Ptd3, &[4], &[4], 8);
    o.hyper.td3.policy_delay = 2;
    let mut tr = Trainer::new(o, &ds, 1).unwrap();
    tr.run(10).unwrap();
    assert_eq!(tr.fisher().unwrap().updates(), 5);
    assert_eq!(tr.data(), &data);
}

#[test]
fn normalization_is_stored_and_applied() {
    let mut ds = random_dataset(100, 3, 1, 9);
    for t in &mut ds.episodes[0].transitions {
        t.s[1] = 100.0 + 10.0 * t.s[1];
    }
    let mut o = options(Algo::Bc, &[], &[4], 16);
    o.normalize = true;
    o.hyper.td3.steps = 5;
    let b = train(o, &ds, 0).unwrap();
    let stats = b.norm.clone().unwrap();
    assert!((stats.mean[1] - 100.0).abs() < 2.0);
    let s = &ds.episodes[0].transitions[0].s;
    let direct = forward(&b.actor_spec, &b.actor, &stats.apply(s)).unwrap();
    assert_eq!(b.act(s).unwrap(), direct);
}
