//! Experiment runner behind the `ncap-swim` command line: training curves,
//! evaluation, the ablation grid, zero-shot transfer and traced rollouts.
//!
//! Every command reads an [`ExperimentConfig`] and writes CSV or JSONL files
//! into its output directory. Reruns with the same config produce identical
//! files unless `wall_clock` is on.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::checkpoint::{load_checkpoint, save_checkpoint, MaskKind, PolicySpec, TrainablePolicy};
use crate::error::{NcapError, Result};
use crate::es::{derive_seed, train, EsConfig, RunRecord, TrainOptions};
use crate::ncap::{resize_policy, NcapFlags};
use crate::policy::{CommandSchedule, Policy};
use crate::swimmer::{rollout, RolloutSummary, SwimmerConfig};

/// Budget used when the config does not set `es.total_timesteps`.
pub const DESK_BUDGET: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Train,
    Eval,
    Transfer,
    Ablate,
    Rollout,
}

/// Contents of the `--config` file. Every field has a default, so `{}` is a
/// valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional guard: when set it must match the command being run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    /// Policy to train, or the family a loaded checkpoint must belong to.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicySpec>,
    /// Swimmer overrides; unspecified fields keep their defaults.
    pub env: SwimmerConfig,
    /// ES overrides; the budget defaults to [`DESK_BUDGET`]. The ES seed is
    /// replaced by each run seed.
    #[serde(deserialize_with = "es_with_desk_budget")]
    pub es: EsConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub eval_episodes: usize,
    pub nprime: Vec<usize>,
    pub schedule: CommandSchedule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Write a checkpoint every K generations (0 disables).
    pub checkpoint_every: u64,
    /// Record elapsed seconds in the curves; off keeps files reproducible.
    pub wall_clock: bool,
    pub bootstrap_resamples: usize,
}

fn desk_es() -> EsConfig {
    EsConfig {
        total_timesteps: DESK_BUDGET,
        ..EsConfig::default()
    }
}

fn es_with_desk_budget<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<EsConfig, D::Error> {
    use serde::de::Error;
    let overrides = Value::deserialize(d)?;
    let Value::Object(overrides) = overrides else {
        return Err(D::Error::custom("es must be an object"));
    };
    let mut base = serde_json::to_value(desk_es()).map_err(D::Error::custom)?;
    if let Value::Object(map) = &mut base {
        map.extend(overrides);
    }
    EsConfig::deserialize(base).map_err(D::Error::custom)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            policy: None,
            env: SwimmerConfig::default(),
            es: desk_es(),
            seeds: (0..10).collect(),
            out_dir: PathBuf::from("runs"),
            eval_episodes: 10,
            nprime: (3..=12).collect(),
            schedule: CommandSchedule::swim(),
            checkpoint: None,
            checkpoint_every: 0,
            wall_clock: false,
            bootstrap_resamples: 1000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| NcapError::Config(format!("invalid experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NcapError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn policy_spec(&self) -> PolicySpec {
        self.policy.clone().unwrap_or(PolicySpec::ncap(NcapFlags::default()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(NcapError::Config("seeds must not be empty".into()));
        }
        if self.eval_episodes == 0 {
            return Err(NcapError::Config("eval_episodes must be positive".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(NcapError::Config("bootstrap_resamples must be positive".into()));
        }
        if self.nprime.contains(&0) {
            return Err(NcapError::Config("nprime entries must be positive".into()));
        }
        self.env.validate()?;
        self.es.validate()?;
        Ok(())
    }

    fn check_kind(&self, kind: ExperimentKind) -> Result<()> {
        match self.kind {
            Some(k) if k != kind => Err(NcapError::Config(format!(
                "config is for {k:?} but the {kind:?} command was run"
            ))),
            _ => Ok(()),
        }
    }

    fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| NcapError::Config("a checkpoint is required for this command".into()))
    }
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| NcapError::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
    let probe = dir.join(".write_probe");
    File::create(&probe)
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| NcapError::Config(format!("output directory {} is not writable: {e}", dir.display())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| NcapError::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let csv_err = |e: csv::Error| NcapError::Io(std::io::Error::other(e));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn read_curve(path: &Path) -> Result<Vec<RunRecord>> {
    read_csv(path)
}

/// One generation of the across-seed learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub generation: u64,
    /// Mean over seeds of the cumulative timesteps at this generation.
    pub timesteps: u64,
    pub seeds: usize,
    pub mean: f64,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Percentile bootstrap 95% interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, rng: &mut impl Rng) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

/// Buckets the center-policy return of every seed by generation.
pub fn aggregate_curves(curves: &[Vec<RunRecord>], resamples: usize, seed: u64) -> Vec<AggregateRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xB0075));
    let generations = curves.iter().map(|c| c.len()).max().unwrap_or(0);
    (0..generations)
        .map(|g| {
            let rows: Vec<&RunRecord> = curves.iter().filter_map(|c| c.get(g)).collect();
            let returns: Vec<f64> = rows.iter().map(|r| r.return_center).collect();
            let steps = rows.iter().map(|r| r.timesteps as f64).sum::<f64>() / rows.len() as f64;
            let (ci_low, ci_high) = bootstrap_ci(&returns, resamples, &mut rng);
            AggregateRow {
                generation: rows[0].generation,
                timesteps: steps.round() as u64,
                seeds: rows.len(),
                mean: mean_std(&returns).0,
                median: median(&returns),
                ci_low,
                ci_high,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub curve_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub policy: TrainablePolicy,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub label: String,
    pub dir: PathBuf,
    pub runs: Vec<SeedRun>,
    pub aggregate: Vec<AggregateRow>,
    pub aggregate_path: PathBuf,
}

impl TrainRun {
    pub fn final_returns(&self) -> Vec<f64> {
        self.runs
            .iter()
            .map(|r| r.records.last().map_or(f64::NAN, |x| x.return_center))
            .collect()
    }
}

fn run_seeds(cfg: &ExperimentConfig, spec: &PolicySpec, dir: &Path) -> Result<TrainRun> {
    // Build every seed's policy first so a bad spec fails before any training.
    let initial: Vec<TrainablePolicy> = cfg
        .seeds
        .iter()
        .map(|&s| spec.build(cfg.env.n_joints, s))
        .collect::<Result<_>>()?;
    prepare_out_dir(dir)?;
    let options = TrainOptions {
        schedule: cfg.schedule.clone(),
        wall_clock: cfg.wall_clock,
    };
    let mut runs = Vec::new();
    for (&seed, policy) in cfg.seeds.iter().zip(initial) {
        log::info!("training {} seed {seed}", spec.label());
        let es = EsConfig { seed, ..cfg.es.clone() };
        let every = cfg.checkpoint_every;
        let (trained, records) = train(&policy, &cfg.env, &es, &options, |rec, p| {
            if every > 0 && rec.generation > 0 && rec.generation % every == 0 {
                save_checkpoint(p, &dir.join(format!("seed_{seed}.gen_{}.json", rec.generation)))?;
            }
            Ok(())
        })?;
        let curve_path = dir.join(format!("seed_{seed}.csv"));
        write_csv(&curve_path, &records)?;
        let checkpoint_path = dir.join(format!("seed_{seed}.final.json"));
        save_checkpoint(&trained, &checkpoint_path)?;
        runs.push(SeedRun {
            seed,
            records,
            curve_path,
            checkpoint_path,
            policy: trained,
        });
    }
    let curves: Vec<Vec<RunRecord>> = runs.iter().map(|r| r.records.clone()).collect();
    let aggregate = aggregate_curves(&curves, cfg.bootstrap_resamples, cfg.seeds[0]);
    let aggregate_path = dir.join("aggregate.csv");
    write_csv(&aggregate_path, &aggregate)?;
    Ok(TrainRun {
        label: spec.label(),
        dir: dir.to_path_buf(),
        runs,
        aggregate,
        aggregate_path,
    })
}

/// Trains the configured policy once per seed. Writes `seed_<s>.csv`,
/// `seed_<s>.final.json` and `aggregate.csv` into `out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainRun> {
    cfg.check_kind(ExperimentKind::Train)?;
    cfg.validate()?;
    run_seeds(cfg, &cfg.policy_spec(), &cfg.out_dir)
}

/// The eight sharing/constraint/init cells followed by the dense embedding
/// network.
pub fn ablation_cells() -> Vec<PolicySpec> {
    let mut cells = Vec::new();
    for share_weights in [true, false] {
        for sign_constraints in [true, false] {
            for unit_init in [true, false] {
                cells.push(PolicySpec::Ncap {
                    share_weights,
                    sign_constraints,
                    unit_init,
                });
            }
        }
    }
    cells.push(PolicySpec::MaskedMlp { mask: MaskKind::Dense });
    cells
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: String,
    pub policy: PolicySpec,
    pub dir: PathBuf,
    pub curves: Vec<PathBuf>,
    pub aggregate: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seeds: usize,
    pub median_initial: f64,
    pub median_final: f64,
    pub mean_final: f64,
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub cells: Vec<TrainRun>,
    pub manifest_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Runs [`ablation_cells`] (or `cells` when given) with identical seeds, one
/// subdirectory per cell, plus `manifest.json` and `ablation.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig, cells: Option<Vec<PolicySpec>>) -> Result<AblationRun> {
    cfg.check_kind(ExperimentKind::Ablate)?;
    cfg.validate()?;
    let cells = cells.unwrap_or_else(ablation_cells);
    for spec in &cells {
        spec.build(cfg.env.n_joints, cfg.seeds[0])?;
    }
    prepare_out_dir(&cfg.out_dir)?;
    let mut runs = Vec::new();
    for spec in &cells {
        runs.push(run_seeds(cfg, spec, &cfg.out_dir.join(spec.label()))?);
    }
    let manifest: Vec<ManifestEntry> = cells
        .iter()
        .zip(&runs)
        .map(|(spec, run)| ManifestEntry {
            label: run.label.clone(),
            policy: spec.clone(),
            dir: run.dir.clone(),
            curves: run.runs.iter().map(|r| r.curve_path.clone()).collect(),
            aggregate: run.aggregate_path.clone(),
            checkpoints: run.runs.iter().map(|r| r.checkpoint_path.clone()).collect(),
        })
        .collect();
    let manifest_path = cfg.out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    let summary: Vec<AblationRow> = runs
        .iter()
        .map(|run| {
            let finals = run.final_returns();
            let initial: Vec<f64> = run.runs.iter().map(|r| r.records[0].return_center).collect();
            AblationRow {
                label: run.label.clone(),
                seeds: finals.len(),
                median_initial: median(&initial),
                median_final: median(&finals),
                mean_final: mean_std(&finals).0,
            }
        })
        .collect();
    let summary_path = cfg.out_dir.join("ablation.csv");
    write_csv(&summary_path, &summary)?;
    Ok(AblationRun {
        cells: runs,
        manifest_path,
        summary_path,
    })
}

/// Per-episode returns over `episodes` rollouts seeded from `seed`.
pub fn episode_returns<P: Policy + Clone>(
    policy: &P,
    env: &SwimmerConfig,
    schedule: &CommandSchedule,
    seed: u64,
    episodes: usize,
) -> Result<Vec<f64>> {
    (0..episodes)
        .map(|e| {
            let mut p = policy.clone();
            Ok(rollout(&mut p, env, schedule, derive_seed(seed, e as u64), false)?.episode_return)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub n_joints: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub param_count: usize,
    pub return_per_param: f64,
}

fn load_for(cfg: &ExperimentConfig, path: &Path) -> Result<TrainablePolicy> {
    let policy = load_checkpoint(path, cfg.policy.as_ref())?;
    if policy.n_joints() != cfg.env.n_joints {
        return Err(NcapError::Config(format!(
            "checkpoint has {} joints but the environment has {}",
            policy.n_joints(),
            cfg.env.n_joints
        )));
    }
    Ok(policy)
}

fn policy_label(policy: &TrainablePolicy) -> String {
    match policy {
        TrainablePolicy::Ncap(p) => PolicySpec::ncap(p.flags).label(),
        TrainablePolicy::Mlp(p) => PolicySpec::Mlp {
            hidden: p.config.hidden_dims.clone(),
        }
        .label(),
        TrainablePolicy::MaskedMlp(_) => {
            let kind = if policy.matches(&PolicySpec::MaskedMlp { mask: MaskKind::Dense }) {
                MaskKind::Dense
            } else {
                MaskKind::Circuit
            };
            PolicySpec::MaskedMlp { mask: kind }.label()
        }
    }
}

/// Evaluates a policy and appends its parameter efficiency.
pub fn evaluate_row(policy: &TrainablePolicy, cfg: &ExperimentConfig) -> Result<EvalRow> {
    let returns = episode_returns(policy, &cfg.env, &cfg.schedule, cfg.seeds[0], cfg.eval_episodes)?;
    let (mean, std) = mean_std(&returns);
    let params = policy.num_trainable();
    Ok(EvalRow {
        label: policy_label(policy),
        n_joints: policy.n_joints(),
        episodes: returns.len(),
        mean_return: mean,
        std_return: std,
        param_count: params,
        return_per_param: if params == 0 || mean == 0.0 { 0.0 } else { mean / params as f64 },
    })
}

/// Evaluates the checkpoint and writes `eval.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalRow> {
    cfg.check_kind(ExperimentKind::Eval)?;
    cfg.validate()?;
    let policy = load_for(cfg, cfg.checkpoint_path()?)?;
    prepare_out_dir(&cfg.out_dir)?;
    let row = evaluate_row(&policy, cfg)?;
    write_csv(&cfg.out_dir.join("eval.csv"), std::slice::from_ref(&row))?;
    Ok(row)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub n_joints: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    /// Mean return relative to the checkpoint on its own body size.
    pub relative_return: f64,
}

/// Resizes a shared-weight circuit checkpoint to every N' in `nprime` and
/// writes `transfer.csv`.
pub fn cmd_transfer(cfg: &ExperimentConfig) -> Result<Vec<TransferRow>> {
    cfg.check_kind(ExperimentKind::Transfer)?;
    cfg.validate()?;
    if cfg.nprime.is_empty() {
        return Err(NcapError::Config("nprime must not be empty".into()));
    }
    let policy = load_for(cfg, cfg.checkpoint_path()?)?;
    let TrainablePolicy::Ncap(source) = policy else {
        return Err(NcapError::Unsupported("transfer needs a circuit checkpoint".into()));
    };
    let targets: Vec<_> = cfg
        .nprime
        .iter()
        .map(|&n| resize_policy(&source, n))
        .collect::<Result<_>>()?;
    prepare_out_dir(&cfg.out_dir)?;
    let seed = cfg.seeds[0];
    let base = episode_returns(&source, &cfg.env, &cfg.schedule, seed, cfg.eval_episodes)?;
    let base_mean = mean_std(&base).0;
    let mut rows = Vec::new();
    for (target, &n) in targets.iter().zip(&cfg.nprime) {
        let env = SwimmerConfig {
            n_joints: n,
            ..cfg.env.clone()
        };
        let returns = episode_returns(target, &env, &cfg.schedule, seed, cfg.eval_episodes)?;
        let (mean, std) = mean_std(&returns);
        log::info!("transfer N'={n}: {mean:.1}");
        rows.push(TransferRow {
            n_joints: n,
            episodes: returns.len(),
            mean_return: mean,
            std_return: std,
            relative_return: if base_mean > 0.0 { mean / base_mean } else { 0.0 },
        });
    }
    write_csv(&cfg.out_dir.join("transfer.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct RolloutRun {
    pub path: PathBuf,
    pub summary: RolloutSummary,
}

/// One traced rollout under `cfg.schedule`, written to `rollout.jsonl`. Uses
/// the checkpoint when one is given, otherwise a freshly built policy.
pub fn cmd_rollout(cfg: &ExperimentConfig) -> Result<RolloutRun> {
    cfg.check_kind(ExperimentKind::Rollout)?;
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let mut policy = match &cfg.checkpoint {
        Some(path) => load_for(cfg, path)?,
        None => cfg.policy_spec().build(cfg.env.n_joints, seed)?,
    };
    prepare_out_dir(&cfg.out_dir)?;
    let summary = rollout(&mut policy, &cfg.env, &cfg.schedule, seed, true)?;
    let path = cfg.out_dir.join("rollout.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    for rec in summary.trace.as_deref().unwrap_or_default() {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(RolloutRun { path, summary })
}

pub fn read_trajectory(path: &Path) -> Result<Vec<crate::swimmer::TrajectoryRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
