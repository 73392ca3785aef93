//! Evolution strategies with Gaussian perturbations, centered-rank fitness
//! shaping, L2 decay and Adam.
//!
//! Seeds are hierarchical: run seed -> generation seed -> candidate seed, so
//! the order in which parallel rollouts finish never affects the result.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NcapError, Result};
use crate::policy::{CommandSchedule, Policy};
use crate::swimmer::{rollout, SwimmerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsConfig {
    pub population_size: usize,
    pub sigma: f64,
    pub l2_decay: f64,
    pub learning_rate: f64,
    pub total_timesteps: u64,
    pub antithetic: bool,
    pub rank_shaping: bool,
    pub eval_episodes_per_candidate: usize,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            population_size: 256,
            sigma: 0.02,
            l2_decay: 0.005,
            learning_rate: 0.01,
            total_timesteps: 50_000_000,
            antithetic: true,
            rank_shaping: true,
            eval_episodes_per_candidate: 1,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NcapError::Config(m));
        if self.population_size < 2 {
            return fail(format!("population_size must be >= 2, got {}", self.population_size));
        }
        if self.antithetic && !self.population_size.is_multiple_of(2) {
            return fail(format!(
                "antithetic sampling needs an even population, got {}",
                self.population_size
            ));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return fail(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.l2_decay.is_finite() && self.l2_decay >= 0.0) {
            return fail(format!("l2_decay must be >= 0, got {}", self.l2_decay));
        }
        if self.eval_episodes_per_candidate == 0 {
            return fail("eval_episodes_per_candidate must be >= 1".into());
        }
        if self.total_timesteps == 0 {
            return fail("total_timesteps must be > 0".into());
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive child seeds.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    let mut z = parent
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Ascent step along `grad`; returns the parameter increment.
    fn ascend(&mut self, grad: &[f64], lr: f64) -> Vec<f64> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(g, (m, v))| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect()
    }
}

/// One generation's population: unit noise directions and the candidates
/// `center + sigma * noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub noise: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<f64>>,
}

/// Draws the population for one generation. Does not validate `cfg`, so a
/// zero sigma is accepted here.
pub fn sample_perturbations(center: &[f64], cfg: &EsConfig, generation_seed: u64) -> Population {
    let mut rng = ChaCha8Rng::seed_from_u64(generation_seed);
    let mut draw = || -> Vec<f64> {
        (0..center.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    };
    let mut noise = Vec::with_capacity(cfg.population_size);
    if cfg.antithetic {
        for _ in 0..cfg.population_size / 2 {
            let eps = draw();
            let neg = eps.iter().map(|e| -e).collect();
            noise.push(eps);
            noise.push(neg);
        }
    } else {
        for _ in 0..cfg.population_size {
            noise.push(draw());
        }
    }
    let candidates = noise
        .iter()
        .map(|eps| {
            center
                .iter()
                .zip(eps)
                .map(|(c, e)| c + cfg.sigma * e)
                .collect()
        })
        .collect();
    Population { noise, candidates }
}

/// Centered ranks in `[-0.5, 0.5]`; tied returns share their average rank.
pub fn shape_fitness(returns: &[f64]) -> Result<Vec<f64>> {
    let n = returns.len();
    if n < 2 {
        return Err(NcapError::Config(format!("need at least 2 returns, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| returns[a].total_cmp(&returns[b]));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && returns[order[end]] == returns[order[start]] {
            end += 1;
        }
        let avg = (start + end - 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    let scale = (n - 1) as f64;
    Ok(ranks.iter().map(|r| r / scale - 0.5).collect())
}

/// Mean-centered, standardized returns. Used when rank shaping is off.
pub fn standardize(returns: &[f64]) -> Vec<f64> {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return vec![0.0; returns.len()];
    }
    let sd = var.sqrt();
    returns.iter().map(|r| (r - mean) / sd).collect()
}

/// Applies one ES update to `center` in place.
///
/// On a non-finite gradient estimate the center and the Adam state are left
/// untouched and an error is returned.
pub fn es_update(
    center: &mut [f64],
    noise: &[Vec<f64>],
    weights: &[f64],
    adam: &mut AdamState,
    cfg: &EsConfig,
) -> Result<()> {
    if noise.len() != weights.len() {
        return Err(NcapError::dim(noise.len(), weights.len(), "shaped weights"));
    }
    if adam.m.len() != center.len() {
        return Err(NcapError::dim(center.len(), adam.m.len(), "Adam moments"));
    }
    let scale = 1.0 / (noise.len() as f64 * cfg.sigma);
    let mut grad = vec![0.0; center.len()];
    for (eps, w) in noise.iter().zip(weights) {
        for (g, e) in grad.iter_mut().zip(eps) {
            *g += w * e;
        }
    }
    for (g, c) in grad.iter_mut().zip(center.iter()) {
        *g = *g * scale - cfg.l2_decay * c;
    }
    if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
        log::warn!("non-finite ES gradient ({bad}); generation skipped");
        return Err(NcapError::CorruptedParameter {
            value: *bad,
            context: "ES gradient estimate".into(),
        });
    }
    let delta = adam.ascend(&grad, cfg.learning_rate);
    for (c, d) in center.iter_mut().zip(delta) {
        *c += d;
    }
    Ok(())
}

/// Fitness of one candidate: its return and the environment steps spent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub fitness: f64,
    pub timesteps: u64,
}

/// Summary of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationStats {
    pub generation: u64,
    pub timesteps: u64,
    pub return_mean: f64,
    pub return_max: f64,
    pub return_min: f64,
}

/// Population-based optimizer state, independent of what is being
/// optimized.
#[derive(Debug, Clone)]
pub struct EsOptimizer {
    pub cfg: EsConfig,
    pub center: Vec<f64>,
    pub adam: AdamState,
    pub generation: u64,
    pub timesteps: u64,
}

impl EsOptimizer {
    pub fn new(cfg: EsConfig, center: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: AdamState::new(center.len()),
            cfg,
            center,
            generation: 0,
            timesteps: 0,
        })
    }

    pub fn generation_seed(&self, generation: u64) -> u64 {
        derive_seed(self.cfg.seed, generation)
    }

    /// Runs one generation. `evaluate(candidate, candidate_seed)` is called in
    /// parallel; antithetic partners share a candidate seed.
    pub fn step<F>(&mut self, evaluate: F) -> Result<GenerationStats>
    where
        F: Fn(&[f64], u64) -> Result<Evaluation> + Sync,
    {
        let generation = self.generation + 1;
        let gen_seed = self.generation_seed(generation);
        let pop = sample_perturbations(&self.center, &self.cfg, gen_seed);
        let antithetic = self.cfg.antithetic;
        let evals: Vec<Evaluation> = pop
            .candidates
            .par_iter()
            .enumerate()
            .map(|(k, cand)| {
                let slot = if antithetic { k / 2 } else { k } as u64;
                evaluate(cand, derive_seed(gen_seed, slot))
            })
            .collect::<Result<_>>()?;
        let returns: Vec<f64> = evals.iter().map(|e| e.fitness).collect();
        let weights = if self.cfg.rank_shaping {
            shape_fitness(&returns)?
        } else {
            standardize(&returns)
        };
        match es_update(&mut self.center, &pop.noise, &weights, &mut self.adam, &self.cfg) {
            Ok(()) | Err(NcapError::CorruptedParameter { .. }) => {}
            Err(e) => return Err(e),
        }
        self.generation = generation;
        self.timesteps += evals.iter().map(|e| e.timesteps).sum::<u64>();
        let n = returns.len() as f64;
        Ok(GenerationStats {
            generation,
            timesteps: self.timesteps,
            return_mean: returns.iter().sum::<f64>() / n,
            return_max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            return_min: returns.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

/// One row of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub timesteps: u64,
    pub generation: u64,
    pub return_mean: f64,
    pub return_max: f64,
    pub return_min: f64,
    pub return_center: f64,
    pub seconds: f64,
}

/// A policy that can be rebuilt from a flat trainable vector.
pub trait Trainable: Policy + Clone + Send + Sync {
    fn trainable_params(&self) -> Vec<f64>;
    fn with_trainable(&self, flat: &[f64]) -> Result<Self>;
}

/// Options for [`train`] that are not ES hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub schedule: CommandSchedule,
    /// Record wall-clock seconds; when false the column is 0 so curves are
    /// byte-reproducible.
    pub wall_clock: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            schedule: CommandSchedule::swim(),
            wall_clock: true,
        }
    }
}

/// Mean return of `policy` over `episodes` rollouts seeded from `seed`,
/// plus the environment steps used.
pub fn evaluate_policy<P: Policy + Clone>(
    policy: &P,
    env: &SwimmerConfig,
    schedule: &CommandSchedule,
    seed: u64,
    episodes: usize,
) -> Result<Evaluation> {
    let mut total = 0.0;
    let mut steps = 0;
    for e in 0..episodes {
        let mut p = policy.clone();
        let out = rollout(&mut p, env, schedule, derive_seed(seed, e as u64), false)?;
        total += out.episode_return;
        steps += out.steps;
    }
    Ok(Evaluation {
        fitness: total / episodes as f64,
        timesteps: steps,
    })
}

/// Trains `initial` with ES until the environment-step budget is spent.
///
/// The first record (generation 0, timestep 0) is the untrained center.
/// `on_generation` sees every record and the current best-guess policy.
pub fn train<P, F>(
    initial: &P,
    env: &SwimmerConfig,
    cfg: &EsConfig,
    options: &TrainOptions,
    mut on_generation: F,
) -> Result<(P, Vec<RunRecord>)>
where
    P: Trainable,
    F: FnMut(&RunRecord, &P) -> Result<()>,
{
    env.validate()?;
    cfg.validate()?;
    if initial.n_joints() != env.n_joints {
        return Err(NcapError::dim(env.n_joints, initial.n_joints(), "policy joints"));
    }
    let started = Instant::now();
    let seconds = |on: bool| if on { started.elapsed().as_secs_f64() } else { 0.0 };
    let center_seed = derive_seed(cfg.seed, u64::MAX);
    let episodes = cfg.eval_episodes_per_candidate;
    let center_return = |p: &P| -> Result<f64> {
        Ok(evaluate_policy(p, env, &options.schedule, center_seed, episodes)?.fitness)
    };

    let mut opt = EsOptimizer::new(cfg.clone(), initial.trainable_params())?;
    let mut current = initial.clone();
    let r0 = center_return(&current)?;
    let mut records = vec![RunRecord {
        timesteps: 0,
        generation: 0,
        return_mean: r0,
        return_max: r0,
        return_min: r0,
        return_center: r0,
        seconds: seconds(options.wall_clock),
    }];
    on_generation(&records[0], &current)?;

    while opt.timesteps < cfg.total_timesteps {
        let stats = opt.step(|cand, seed| {
            let policy = initial.with_trainable(cand)?;
            evaluate_policy(&policy, env, &options.schedule, seed, episodes)
        })?;
        current = initial.with_trainable(&opt.center)?;
        let record = RunRecord {
            timesteps: stats.timesteps,
            generation: stats.generation,
            return_mean: stats.return_mean,
            return_max: stats.return_max,
            return_min: stats.return_min,
            return_center: center_return(&current)?,
            seconds: seconds(options.wall_clock),
        };
        log::info!(
            "gen {} steps {} center {:.2} mean {:.2}",
            record.generation,
            record.timesteps,
            record.return_center,
            record.return_mean
        );
        on_generation(&record, &current)?;
        records.push(record);
    }
    Ok((current, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EsConfig {
        EsConfig {
            population_size: 8,
            ..EsConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(EsConfig::default().validate().is_ok());
        for bad in [
            EsConfig { population_size: 1, ..cfg() },
            EsConfig { population_size: 7, ..cfg() },
            EsConfig { sigma: 0.0, ..cfg() },
            EsConfig { learning_rate: -1.0, ..cfg() },
            EsConfig { eval_episodes_per_candidate: 0, ..cfg() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(EsConfig { population_size: 7, antithetic: false, ..cfg() }.validate().is_ok());
    }

    #[test]
    fn zero_sigma_candidates_equal_center() {
        let c = vec![0.3, -1.2, 4.0];
        let pop = sample_perturbations(&c, &EsConfig { sigma: 0.0, ..cfg() }, 5);
        assert!(pop.candidates.iter().all(|x| x == &c));
    }

    #[test]
    fn antithetic_pairs_mirror_the_center() {
        let c = vec![0.3, -1.2, 4.0, 1.0];
        let pop = sample_perturbations(&c, &cfg(), 17);
        assert_eq!(pop.candidates.len(), 8);
        for pair in pop.candidates.chunks(2) {
            for ((a, b), ci) in pair[0].iter().zip(&pair[1]).zip(&c) {
                assert!((a + b - 2.0 * ci).abs() <= 4.0 * f64::EPSILON * ci.abs().max(1.0));
            }
        }
        for pair in pop.noise.chunks(2) {
            assert!(pair[0].iter().zip(&pair[1]).all(|(a, b)| *a == -*b));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = vec![1.0; 6];
        assert_eq!(sample_perturbations(&c, &cfg(), 3), sample_perturbations(&c, &cfg(), 3));
        assert_ne!(sample_perturbations(&c, &cfg(), 3), sample_perturbations(&c, &cfg(), 4));
    }

    #[test]
    fn centered_rank_cases() {
        let w = shape_fitness(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let expected = [-0.5, -1.0 / 6.0, 1.0 / 6.0, 0.5];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(shape_fitness(&[7.0, 7.0, 7.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(shape_fitness(&[3.0, 1.0, 2.0]).unwrap(), vec![0.5, -0.5, 0.0]);
        assert!(shape_fitness(&[1.0]).is_err());
    }

    #[test]
    fn zero_weights_leave_center_without_decay() {
        let mut c = vec![1.0, -2.0];
        let pop = sample_perturbations(&c, &cfg(), 0);
        let mut adam = AdamState::new(2);
        let es = EsConfig { l2_decay: 0.0, ..cfg() };
        es_update(&mut c, &pop.noise, &[0.0; 8], &mut adam, &es).unwrap();
        assert_eq!(c, vec![1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        // A single direction with weight 1: the first Adam step is
        // lr * g / (|g| + eps), i.e. lr * sign(eps) to within eps / |g|.
        let mut c = vec![0.0, 0.0, 0.0];
        let eps = vec![vec![0.7, -1.3, 0.2]];
        let es = EsConfig { l2_decay: 0.0, learning_rate: 0.01, sigma: 0.02, ..cfg() };
        let mut adam = AdamState::new(3);
        es_update(&mut c, &eps, &[1.0], &mut adam, &es).unwrap();
        for (ci, e) in c.iter().zip(&eps[0]) {
            let g = e / 0.02;
            let expected = 0.01 * g / (g.abs() + 1e-8);
            assert!((ci - expected).abs() < 1e-15);
            assert!((ci - 0.01 * e.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn decay_shrinks_positive_center() {
        let mut c = vec![2.0, 0.5];
        let mut adam = AdamState::new(2);
        let noise = vec![vec![1.0, 1.0], vec![-1.0, -1.0]];
        es_update(&mut c, &noise, &[0.0, 0.0], &mut adam, &cfg()).unwrap();
        assert!(c[0] < 2.0 && c[1] < 0.5);
        assert!(c[0] > 0.0 && c[1] > 0.0);
    }

    #[test]
    fn non_finite_gradient_keeps_center() {
        let mut c = vec![1.0, 1.0];
        let mut adam = AdamState::new(2);
        let noise = vec![vec![f64::NAN, 0.0], vec![0.0, 0.0]];
        assert!(es_update(&mut c, &noise, &[1.0, -1.0], &mut adam, &cfg()).is_err());
        assert_eq!(c, vec![1.0, 1.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn update_ignores_return_shifts() {
        let c = vec![0.5; 4];
        let pop = sample_perturbations(&c, &cfg(), 9);
        let returns: Vec<f64> = (0..8).map(|k| (k * 37 % 11) as f64).collect();
        let shifted: Vec<f64> = returns.iter().map(|r| r + 1234.5).collect();
        let run = |r: &[f64]| {
            let mut center = c.clone();
            let mut adam = AdamState::new(4);
            es_update(&mut center, &pop.noise, &shape_fitness(r).unwrap(), &mut adam, &cfg()).unwrap();
            center
        };
        assert_eq!(run(&returns), run(&shifted));
    }

    #[test]
    fn update_is_permutation_equivariant() {
        let c = vec![0.5; 4];
        let pop = sample_perturbations(&c, &cfg(), 9);
        let returns: Vec<f64> = (0..8).map(|k| ((k * 5 + 3) % 8) as f64).collect();
        let perm = [3usize, 7, 0, 1, 6, 2, 5, 4];
        let run = |noise: &[Vec<f64>], r: &[f64]| {
            let mut center = c.clone();
            let mut adam = AdamState::new(4);
            es_update(&mut center, noise, &shape_fitness(r).unwrap(), &mut adam, &cfg()).unwrap();
            center
        };
        let a = run(&pop.noise, &returns);
        let pn: Vec<Vec<f64>> = perm.iter().map(|&k| pop.noise[k].clone()).collect();
        let pr: Vec<f64> = perm.iter().map(|&k| returns[k]).collect();
        let b = run(&pn, &pr);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shaped_weights_sum_to_zero() {
        use proptest::prelude::*;
        proptest!(|(r in prop::collection::vec(-100.0f64..100.0, 2..300))| {
            let w = shape_fitness(&r).unwrap();
            prop_assert!(w.iter().sum::<f64>().abs() < 1e-12);
            prop_assert!(w.iter().all(|x| (-0.5..=0.5).contains(x)));
        });
    }

    #[test]
    fn optimizer_counts_timesteps() {
        let mut opt = EsOptimizer::new(EsConfig { population_size: 6, ..cfg() }, vec![0.0; 3]).unwrap();
        let stats = opt
            .step(|x, _| Ok(Evaluation { fitness: -x.iter().map(|v| v * v).sum::<f64>(), timesteps: 7 }))
            .unwrap();
        assert_eq!(stats.timesteps, 42);
        assert_eq!(stats.generation, 1);
    }
}
