//! Planar N-link swimmer in a viscous medium.
//!
//! The chain has `N + 1` rigid links joined by `N` hinge joints. Link 0 is the
//! head; its front tip is the reference point of the body. Generalized
//! coordinates are `g = (x, y, theta_0, phi_1 .. phi_N)`: head tip position,
//! head heading and joint angles.
//!
//! Each link feels anisotropic linear drag on its center velocity,
//! `F = -(c_n v_n n + c_t v_t t)`, and a rotational drag `c_n L^2 / 12`
//! about its center. Mapped to generalized coordinates the drag becomes a
//! symmetric positive semi-definite matrix `R(g)`. The mass matrix is the
//! constant diagonal `M` of the straight chain (no inertial coupling and no
//! added mass). Joint `i` is driven by the generalized force
//! `M_i (a_i * max_joint_accel - joint_damping * phi_dot_i)`, so in the
//! absence of fluid the commanded acceleration is reached exactly.
//!
//! Velocities are advanced implicitly in the drag and damping,
//! `(M + dt (R + D)) v' = M v + dt Q`, and positions explicitly with the new
//! velocity (semi-implicit Euler). With zero actuation the implicit solve
//! can only shrink `v^T M v`, so kinetic energy never increases.
//!
//! Joints stop at `+-joint_limit`. A joint resting on its stop and driven
//! further out is held fixed for the substep (its row and column are dropped
//! from the solve), so the stop absorbs the actuation instead of the body.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NcapError, Result};
use crate::policy::{CommandSchedule, Policy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwimmerConfig {
    pub n_joints: usize,
    pub link_length: f64,
    pub link_mass: f64,
    pub joint_limit: f64,
    pub max_joint_accel: f64,
    pub drag_normal: f64,
    pub drag_tangential: f64,
    pub physics_dt: f64,
    pub action_repeat: usize,
    pub joint_damping: f64,
    pub desired_speed: f64,
    pub episode_steps: u64,
    /// Half-width of the uniform joint-angle noise applied at reset, radians.
    pub reset_noise: f64,
}

impl Default for SwimmerConfig {
    fn default() -> Self {
        Self {
            n_joints: 5,
            link_length: 0.1,
            link_mass: 1.0,
            joint_limit: std::f64::consts::FRAC_PI_3,
            max_joint_accel: 20.0,
            drag_normal: 5.0,
            drag_tangential: 0.1,
            physics_dt: 0.01,
            action_repeat: 3,
            joint_damping: 0.5,
            desired_speed: 0.4,
            episode_steps: 1000,
            reset_noise: 0.01,
        }
    }
}

impl SwimmerConfig {
    pub fn with_joints(n_joints: usize) -> Self {
        Self {
            n_joints,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(NcapError::Config(msg));
        if self.n_joints < 2 {
            return fail(format!("n_joints must be >= 2, got {}", self.n_joints));
        }
        let positive = [
            ("link_length", self.link_length),
            ("link_mass", self.link_mass),
            ("joint_limit", self.joint_limit),
            ("max_joint_accel", self.max_joint_accel),
            ("physics_dt", self.physics_dt),
            ("desired_speed", self.desired_speed),
            ("drag_tangential", self.drag_tangential),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.drag_normal.is_finite() && self.drag_normal >= self.drag_tangential) {
            return fail(format!(
                "drag_normal ({}) must be >= drag_tangential ({})",
                self.drag_normal, self.drag_tangential
            ));
        }
        if !(self.joint_damping.is_finite() && self.joint_damping >= 0.0) {
            return fail(format!("joint_damping must be >= 0, got {}", self.joint_damping));
        }
        if !(self.reset_noise.is_finite() && self.reset_noise >= 0.0) {
            return fail(format!("reset_noise must be >= 0, got {}", self.reset_noise));
        }
        if self.action_repeat == 0 {
            return fail("action_repeat must be >= 1".into());
        }
        if self.episode_steps == 0 {
            return fail("episode_steps must be >= 1".into());
        }
        Ok(())
    }
}

/// Full physical state of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwimmerState {
    pub head: [f64; 2],
    pub heading: f64,
    pub joints: Vec<f64>,
    pub head_velocity: [f64; 2],
    pub heading_rate: f64,
    pub joint_rates: Vec<f64>,
    pub physics_steps: u64,
}

impl SwimmerState {
    fn straight(n_joints: usize) -> Self {
        Self {
            head: [0.0, 0.0],
            heading: 0.0,
            joints: vec![0.0; n_joints],
            head_velocity: [0.0, 0.0],
            heading_rate: 0.0,
            joint_rates: vec![0.0; n_joints],
            physics_steps: 0,
        }
    }

    /// Reflection across the x-axis.
    pub fn mirrored(&self) -> Self {
        Self {
            head: [self.head[0], -self.head[1]],
            heading: -self.heading,
            joints: self.joints.iter().map(|p| -p).collect(),
            head_velocity: [self.head_velocity[0], -self.head_velocity[1]],
            heading_rate: -self.heading_rate,
            joint_rates: self.joint_rates.iter().map(|p| -p).collect(),
            physics_steps: self.physics_steps,
        }
    }

    fn velocity(&self) -> DVector<f64> {
        let mut v = DVector::zeros(3 + self.joints.len());
        v[0] = self.head_velocity[0];
        v[1] = self.head_velocity[1];
        v[2] = self.heading_rate;
        for (k, r) in self.joint_rates.iter().enumerate() {
            v[3 + k] = *r;
        }
        v
    }

    fn is_finite(&self) -> bool {
        self.head.iter().all(|x| x.is_finite())
            && self.heading.is_finite()
            && self.head_velocity.iter().all(|x| x.is_finite())
            && self.heading_rate.is_finite()
            && self.joints.iter().all(|x| x.is_finite())
            && self.joint_rates.iter().all(|x| x.is_finite())
    }

    /// Absolute orientation of every link, head first.
    pub fn link_angles(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.joints.len() + 1);
        let mut theta = self.heading;
        out.push(theta);
        for phi in &self.joints {
            theta += phi;
            out.push(theta);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub forward_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Swim reward: 0 when stopped or moving backwards, linear up to the
/// desired speed, 1 beyond.
pub fn reward_swim(forward_speed: f64, cfg: &SwimmerConfig) -> f64 {
    if !forward_speed.is_finite() {
        return 0.0;
    }
    (forward_speed / cfg.desired_speed).clamp(0.0, 1.0)
}

/// A stepping environment owning one swimmer.
#[derive(Debug, Clone)]
pub struct Swimmer {
    cfg: SwimmerConfig,
    state: SwimmerState,
    mass: DVector<f64>,
    control_steps: u64,
}

impl Swimmer {
    pub fn new(cfg: SwimmerConfig) -> Result<Self> {
        cfg.validate()?;
        let mass = mass_diagonal(&cfg);
        Ok(Self {
            state: SwimmerState::straight(cfg.n_joints),
            cfg,
            mass,
            control_steps: 0,
        })
    }

    pub fn config(&self) -> &SwimmerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SwimmerState {
        &self.state
    }

    pub fn control_steps(&self) -> u64 {
        self.control_steps
    }

    /// Straight body at the origin heading +x, with uniform joint-angle noise
    /// of half-width `reset_noise` drawn from `seed`.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut state = SwimmerState::straight(self.cfg.n_joints);
        if self.cfg.reset_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = self.cfg.reset_noise;
            for phi in state.joints.iter_mut() {
                *phi = rng.gen_range(-h..=h);
            }
        }
        self.state = state;
        self.control_steps = 0;
        self.observation()
    }

    /// Overwrites the physical state, e.g. to start a mirrored run.
    pub fn set_state(&mut self, state: SwimmerState) -> Result<()> {
        let n = self.cfg.n_joints;
        if state.joints.len() != n || state.joint_rates.len() != n {
            return Err(NcapError::dim(n, state.joints.len(), "swimmer state joints"));
        }
        self.state = state;
        Ok(())
    }

    pub fn observation(&self) -> Vec<f64> {
        self.state
            .joints
            .iter()
            .map(|p| (p / self.cfg.joint_limit).clamp(-1.0, 1.0))
            .collect()
    }

    /// Head velocity projected on the head's heading.
    pub fn forward_speed(&self) -> f64 {
        let (s, c) = self.state.heading.sin_cos();
        self.state.head_velocity[0] * c + self.state.head_velocity[1] * s
    }

    pub fn kinetic_energy(&self) -> f64 {
        let v = self.state.velocity();
        0.5 * v
            .iter()
            .zip(self.mass.iter())
            .map(|(vi, mi)| mi * vi * vi)
            .sum::<f64>()
    }

    /// One control step: `action_repeat` physics substeps under the same
    /// normalized joint-acceleration command.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let n = self.cfg.n_joints;
        if action.len() != n {
            return Err(NcapError::dim(n, action.len(), "swimmer action"));
        }
        let mut clipped = Vec::with_capacity(n);
        for &a in action {
            if a.is_nan() {
                return Err(NcapError::CorruptedParameter {
                    value: a,
                    context: "action".into(),
                });
            }
            let c = a.clamp(-1.0, 1.0);
            if c != a {
                log::warn!("action component {a} outside [-1, 1]; clamped");
            }
            clipped.push(c);
        }
        for _ in 0..self.cfg.action_repeat {
            self.physics_step(&clipped)?;
        }
        self.control_steps += 1;
        let forward_speed = self.forward_speed();
        Ok(StepResult {
            observation: self.observation(),
            reward: reward_swim(forward_speed, &self.cfg),
            done: self.control_steps >= self.cfg.episode_steps,
            info: StepInfo { forward_speed },
        })
    }

    /// A single semi-implicit Euler substep.
    pub fn physics_step(&mut self, action: &[f64]) -> Result<()> {
        let cfg = &self.cfg;
        let n = cfg.n_joints;
        let dim = 3 + n;
        let dt = cfg.physics_dt;

        let mut system = drag_matrix(&self.state, cfg);
        let v = self.state.velocity();
        let mut rhs = DVector::zeros(dim);
        for i in 0..dim {
            rhs[i] = self.mass[i] * v[i];
        }
        for (k, a) in action.iter().enumerate() {
            let i = 3 + k;
            system[(i, i)] += self.mass[i] * cfg.joint_damping;
            rhs[i] += dt * self.mass[i] * cfg.max_joint_accel * a;
        }
        system *= dt;
        for i in 0..dim {
            system[(i, i)] += self.mass[i];
        }
        let step = self.state.physics_steps;
        let solve = |locked: &[bool]| -> Result<DVector<f64>> {
            let mut a = system.clone();
            let mut b = rhs.clone();
            for (k, _) in locked.iter().enumerate().filter(|(_, &l)| l) {
                let i = 3 + k;
                a.row_mut(i).fill(0.0);
                a.column_mut(i).fill(0.0);
                a[(i, i)] = 1.0;
                b[i] = 0.0;
            }
            Ok(a.cholesky().ok_or(NcapError::Diverged { step })?.solve(&b))
        };

        // A joint resting on its limit and driven outward is locked, so its
        // actuation is absorbed by the stop instead of pushing the body.
        let limit = cfg.joint_limit;
        let mut locked = vec![false; n];
        let mut new_v = solve(&locked)?;
        for _ in 0..n {
            let mut changed = false;
            for k in 0..n {
                let phi = self.state.joints[k];
                let rate = new_v[3 + k];
                let outward = (phi >= limit && rate > 0.0) || (phi <= -limit && rate < 0.0);
                if outward && !locked[k] {
                    locked[k] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            new_v = solve(&locked)?;
        }

        let s = &mut self.state;
        s.head_velocity = [new_v[0], new_v[1]];
        s.heading_rate = new_v[2];
        s.head[0] += dt * new_v[0];
        s.head[1] += dt * new_v[1];
        s.heading += dt * new_v[2];
        for k in 0..n {
            let rate = new_v[3 + k];
            let mut phi = s.joints[k] + dt * rate;
            let mut rate = rate;
            if phi > limit {
                phi = limit;
                rate = 0.0;
            } else if phi < -limit {
                phi = -limit;
                rate = 0.0;
            }
            s.joints[k] = phi;
            s.joint_rates[k] = rate;
        }
        s.physics_steps += 1;
        if !s.is_finite() {
            return Err(NcapError::Diverged { step: s.physics_steps });
        }
        Ok(())
    }
}

/// Constant diagonal mass of the straight chain: total mass for the head
/// translation, chain inertia about the head tip for the heading, and distal
/// chain inertia about each joint.
fn mass_diagonal(cfg: &SwimmerConfig) -> DVector<f64> {
    let n = cfg.n_joints;
    let (m, l) = (cfg.link_mass, cfg.link_length);
    let chain_inertia = |links: usize| -> f64 {
        (0..links)
            .map(|j| {
                let d = (j as f64 + 0.5) * l;
                m * (d * d + l * l / 12.0)
            })
            .sum()
    };
    let mut out = DVector::zeros(3 + n);
    out[0] = m * (n + 1) as f64;
    out[1] = out[0];
    out[2] = chain_inertia(n + 1);
    for i in 1..=n {
        out[2 + i] = chain_inertia(n + 1 - i);
    }
    out
}

/// Viscous drag in generalized coordinates, `sum_j J_j^T C_j J_j` over links.
fn drag_matrix(state: &SwimmerState, cfg: &SwimmerConfig) -> DMatrix<f64> {
    let n = cfg.n_joints;
    let dim = 3 + n;
    let l = cfg.link_length;
    let c_rot = cfg.drag_normal * l * l / 12.0;
    let angles = state.link_angles();
    // Lever arms L * t_perp for each link, used to build center-velocity Jacobians.
    let perps: Vec<[f64; 2]> = angles
        .iter()
        .map(|th| {
            let (s, c) = th.sin_cos();
            [-s, c]
        })
        .collect();

    let mut r = DMatrix::zeros(dim, dim);
    let mut jac_x = vec![0.0; dim];
    let mut jac_y = vec![0.0; dim];
    let mut row_t = vec![0.0; dim];
    let mut row_n = vec![0.0; dim];
    for j in 0..=n {
        jac_x.iter_mut().for_each(|x| *x = 0.0);
        jac_y.iter_mut().for_each(|x| *x = 0.0);
        jac_x[0] = 1.0;
        jac_y[1] = 1.0;
        // Suffix sums of lever arms from link j back towards the head.
        let mut sx = 0.5 * l * perps[j][0];
        let mut sy = 0.5 * l * perps[j][1];
        for m in (0..=j).rev() {
            // Column for phi_m (m >= 1) or theta_0 (m == 0).
            let col = if m == 0 { 2 } else { 2 + m };
            jac_x[col] = -sx;
            jac_y[col] = -sy;
            if m > 0 {
                sx += l * perps[m - 1][0];
                sy += l * perps[m - 1][1];
            }
        }
        let (s, c) = angles[j].sin_cos();
        for k in 0..dim {
            row_t[k] = c * jac_x[k] + s * jac_y[k];
            row_n[k] = -s * jac_x[k] + c * jac_y[k];
        }
        for a in 0..dim {
            let ta = cfg.drag_tangential * row_t[a];
            let na = cfg.drag_normal * row_n[a];
            if ta == 0.0 && na == 0.0 {
                continue;
            }
            for b in 0..dim {
                r[(a, b)] += ta * row_t[b] + na * row_n[b];
            }
        }
        // Rotational drag: link j turns with theta_0 + phi_1 + ... + phi_j.
        for a in 2..=2 + j {
            for b in 2..=2 + j {
                r[(a, b)] += c_rot;
            }
        }
    }
    r
}

/// One control step of a recorded rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: u64,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub head_x: f64,
    pub head_y: f64,
    pub heading: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutSummary {
    /// Undiscounted episode return; 0 when the simulation diverged.
    pub episode_return: f64,
    /// Control steps actually executed.
    pub steps: u64,
    pub diverged: bool,
    /// Head displacement from the reset position.
    pub displacement: [f64; 2],
    pub trace: Option<Vec<TrajectoryRecord>>,
}

impl RolloutSummary {
    pub fn distance(&self) -> f64 {
        self.displacement[0].hypot(self.displacement[1])
    }
}

/// Runs one episode from a fresh reset. Policy errors propagate; simulation
/// divergence scores the episode 0 and sets `diverged`.
pub fn rollout<P: Policy + ?Sized>(
    policy: &mut P,
    cfg: &SwimmerConfig,
    schedule: &CommandSchedule,
    seed: u64,
    record: bool,
) -> Result<RolloutSummary> {
    let mut env = Swimmer::new(cfg.clone())?;
    let obs = env.reset(seed);
    rollout_from(policy, &mut env, obs, schedule, record)
}

/// Runs an episode on an environment that has already been reset (or had
/// its state set).
pub fn rollout_from<P: Policy + ?Sized>(
    policy: &mut P,
    env: &mut Swimmer,
    mut obs: Vec<f64>,
    schedule: &CommandSchedule,
    record: bool,
) -> Result<RolloutSummary> {
    let cfg = env.config().clone();
    if policy.n_joints() != cfg.n_joints {
        return Err(NcapError::dim(cfg.n_joints, policy.n_joints(), "policy joints"));
    }
    policy.reset();
    let start = env.state().head;
    let mut total = 0.0;
    let mut trace = record.then(Vec::new);
    let mut steps = 0;
    for t in 0..cfg.episode_steps {
        let action = policy.act(&obs, schedule.at(t))?;
        let result = match env.step(&action) {
            Ok(r) => r,
            Err(NcapError::Diverged { step }) => {
                log::warn!("rollout diverged at physics step {step}");
                return Ok(RolloutSummary {
                    episode_return: 0.0,
                    steps: steps + 1,
                    diverged: true,
                    displacement: [0.0, 0.0],
                    trace,
                });
            }
            Err(e) => return Err(e),
        };
        steps += 1;
        total += result.reward;
        if let Some(tr) = trace.as_mut() {
            let s = env.state();
            tr.push(TrajectoryRecord {
                t,
                obs: obs.clone(),
                action: action.clone(),
                reward: result.reward,
                head_x: s.head[0],
                head_y: s.head[1],
                heading: s.heading,
                activations: policy.activations(),
            });
        }
        obs = result.observation;
        if result.done {
            break;
        }
    }
    let end = env.state().head;
    Ok(RolloutSummary {
        episode_return: total,
        steps,
        diverged: false,
        displacement: [end[0] - start[0], end[1] - start[1]],
        trace,
    })
}
