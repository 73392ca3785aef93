use ncap_core::checkpoint::{PolicySpec, TrainablePolicy};
use ncap_core::es::{derive_seed, evaluate_policy, train, EsConfig, EsOptimizer, Evaluation, TrainOptions};
use ncap_core::experiments::median;
use ncap_core::{rollout, CommandSchedule, NcapFlags, SwimmerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quick(seed: u64) -> EsConfig {
    EsConfig {
        population_size: 8,
        total_timesteps: 24_000,
        seed,
        ..Default::default()
    }
}

fn no_clock() -> TrainOptions {
    TrainOptions {
        wall_clock: false,
        ..Default::default()
    }
}

#[test]
fn sphere_oracle_converges_for_five_seeds() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = EsConfig {
            population_size: 64,
            sigma: 0.05,
            learning_rate: 0.05,
            l2_decay: 0.0,
            seed,
            ..Default::default()
        };
        let mut opt = EsOptimizer::new(cfg, vec![0.0; 10]).unwrap();
        let dist = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let mut done = false;
        for _ in 0..200 {
            opt.step(|x, _| Ok(Evaluation { fitness: -dist(x).powi(2), timesteps: 1 })).unwrap();
            if dist(&opt.center) < 0.1 {
                done = true;
                break;
            }
        }
        assert!(done, "seed {seed} ended at distance {}", dist(&opt.center));
    }
}

#[test]
fn same_seed_gives_identical_records() {
    let env = SwimmerConfig::default();
    let policy = PolicySpec::ncap(NcapFlags::default()).build(5, 0).unwrap();
    let (p1, r1) = train(&policy, &env, &quick(9), &no_clock(), |_, _| Ok(())).unwrap();
    let (p2, r2) = train(&policy, &env, &quick(9), &no_clock(), |_, _| Ok(())).unwrap();
    assert_eq!(r1, r2);
    use ncap_core::Trainable;
    assert_eq!(p1.trainable_params(), p2.trainable_params());
    let (_, r3) = train(&policy, &env, &quick(10), &no_clock(), |_, _| Ok(())).unwrap();
    assert_ne!(r1, r3);
}

#[test]
fn timesteps_count_every_candidate_episode() {
    let env = SwimmerConfig {
        episode_steps: 250,
        ..SwimmerConfig::default()
    };
    let policy = PolicySpec::Mlp { hidden: vec![8] }.build(5, 1).unwrap();
    let cfg = EsConfig {
        population_size: 6,
        total_timesteps: 4_000,
        ..quick(1)
    };
    let (_, records) = train(&policy, &env, &cfg, &no_clock(), |_, _| Ok(())).unwrap();
    for r in &records {
        assert_eq!(r.timesteps, r.generation * 6 * 250);
    }
    assert!(records.last().unwrap().timesteps >= 4_000);
    assert_eq!(records.len(), 4);
}

#[test]
fn budget_must_be_positive() {
    let env = SwimmerConfig::default();
    let policy = PolicySpec::ncap(NcapFlags::default()).build(5, 0).unwrap();
    let cfg = EsConfig {
        total_timesteps: 0,
        ..quick(0)
    };
    assert!(train(&policy, &env, &cfg, &no_clock(), |_, _| Ok(())).unwrap_err().is_config());
}

#[test]
fn circuit_training_does_not_lose_ground() {
    let env = SwimmerConfig::default();
    let mut initial = Vec::new();
    let mut last = Vec::new();
    for seed in 0..3 {
        let policy = PolicySpec::ncap(NcapFlags::default()).build(5, seed).unwrap();
        let cfg = EsConfig {
            population_size: 16,
            total_timesteps: 64_000,
            seed,
            ..Default::default()
        };
        let (_, records) = train(&policy, &env, &cfg, &no_clock(), |_, _| Ok(())).unwrap();
        initial.push(records[0].return_center);
        last.push(records.last().unwrap().return_center);
    }
    assert!(median(&last) >= median(&initial), "{initial:?} -> {last:?}");
}

#[test]
fn random_large_mlp_barely_moves() {
    let env = SwimmerConfig::default();
    let sched = CommandSchedule::swim();
    let returns: Vec<f64> = (0..10)
        .map(|s| {
            let p = PolicySpec::Mlp { hidden: vec![256, 256] }.build(5, s).unwrap();
            evaluate_policy(&p, &env, &sched, derive_seed(s, u64::MAX), 1).unwrap().fitness
        })
        .collect();
    assert!(median(&returns) < 0.05 * env.episode_steps as f64, "{returns:?}");
}

#[test]
fn thrust_needs_anisotropic_drag() {
    let env = SwimmerConfig::default();
    let policy = PolicySpec::ncap(NcapFlags::default()).build(5, 0).unwrap();
    let cfg = EsConfig {
        population_size: 16,
        total_timesteps: 64_000,
        ..Default::default()
    };
    let (trained, _) = train(&policy, &env, &cfg, &no_clock(), |_, _| Ok(())).unwrap();
    let isotropic = SwimmerConfig {
        drag_normal: env.drag_tangential,
        ..env.clone()
    };
    let distance = |cfg: &SwimmerConfig, mut p: TrainablePolicy| {
        rollout(&mut p, cfg, &CommandSchedule::swim(), 0, false).unwrap().distance()
    };
    let normal = distance(&env, trained.clone());
    let flat = distance(&isotropic, trained);
    assert!(flat <= 0.1 * normal, "isotropic {flat} vs anisotropic {normal}");
}
