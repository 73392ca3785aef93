//! Circuit-prior swimmer controller.
//!
//! Each joint `i` is driven by one module of four rectifier units: dorsal and
//! ventral B neurons (`b_d`, `b_v`) and dorsal and ventral muscles (`m_d`,
//! `m_v`). B neurons of module `i >= 2` sense the bending of joint `i - 1`;
//! the first module is driven by a pair of anti-phase square-wave oscillators
//! and the turn channels. Muscles receive same-side excitation and
//! opposite-side inhibition from the B neurons of their module, and the joint
//! acceleration is `min(m_d, 1) - min(m_v, 1)`.
//!
//! Raw parameters store magnitudes. When sign constraints are on, the sign of
//! each connection is imposed at forward time by [`constrain`]; when they are
//! off the raw value is used as-is.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NcapError, Result};
use crate::policy::{ControlCommand, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignConstraintMode {
    Excitatory,
    Inhibitory,
    Unconstrained,
}

/// Applies a sign constraint to a raw weight.
pub fn constrain(weight: f64, mode: SignConstraintMode) -> Result<f64> {
    if !weight.is_finite() {
        return Err(NcapError::CorruptedParameter {
            value: weight,
            context: format!("{mode:?} weight"),
        });
    }
    Ok(match mode {
        SignConstraintMode::Excitatory => weight.max(0.0),
        SignConstraintMode::Inhibitory => -weight.max(0.0),
        SignConstraintMode::Unconstrained => weight,
    })
}

/// Rectifier used by every integrator unit.
#[inline]
pub fn activation(z: f64) -> f64 {
    z.max(0.0)
}

/// Splits a normalized joint position into dorsal and ventral stretch
/// signals, both in `[0, 1]`.
pub fn split_proprioception(q: f64) -> (f64, f64) {
    let clamped = q.clamp(-1.0, 1.0);
    if clamped != q {
        log::warn!("proprioceptive input {q} outside [-1, 1]; clamped");
    }
    (clamped.max(0.0), (-clamped).max(0.0))
}

/// Anti-phase square-wave oscillator pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OscillatorConfig {
    pub period: u32,
    pub high_width: u32,
    #[serde(default)]
    pub phase_offset: u32,
}

impl Default for OscillatorConfig {
    fn default() -> Self {
        Self {
            period: 60,
            high_width: 30,
            phase_offset: 0,
        }
    }
}

impl OscillatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.high_width == 0 || self.high_width >= self.period {
            return Err(NcapError::Config(format!(
                "oscillator needs 0 < high_width < period, got width {} period {}",
                self.high_width, self.period
            )));
        }
        Ok(())
    }

    fn dorsal_high(&self, t: u64) -> bool {
        (t + self.phase_offset as u64) % (self.period as u64) < (self.high_width as u64)
    }

    /// `(o_d, o_v)` at control step `t`. The ventral wave is the dorsal wave
    /// advanced by half a period.
    pub fn output(&self, t: u64) -> Result<(f64, f64)> {
        self.validate()?;
        let d = self.dorsal_high(t);
        let v = self.dorsal_high(t + self.period as u64 / 2);
        Ok((d as u8 as f64, v as u8 as f64))
    }
}

/// Ablation switches for the circuit prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NcapFlags {
    pub share_weights: bool,
    pub sign_constraints: bool,
    pub unit_init: bool,
}

impl Default for NcapFlags {
    fn default() -> Self {
        Self {
            share_weights: true,
            sign_constraints: true,
            unit_init: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sharing {
    Shared,
    Unshared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Dorsal,
    Ventral,
}

impl Side {
    fn index(self) -> usize {
        match self {
            Side::Dorsal => 0,
            Side::Ventral => 1,
        }
    }
}

/// Raw parameters of the controller.
///
/// With [`Sharing::Shared`] each trainable table holds one value. With
/// [`Sharing::Unshared`] the tables are laid out as:
///
/// * `w_prop`: `2 (N - 1)` entries, one per (module `i >= 2`, side)
/// * `w_ipsi`, `w_contra`: `2 N` entries, one per (module, side)
/// * `w_osc`: 2 entries, one per side
///
/// `w_turn` and `w_speed` are fixed scalars outside the trainable set; the
/// swim task multiplies them by zero inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcapParams {
    pub n_joints: usize,
    pub sharing: Sharing,
    pub w_prop: Vec<f64>,
    pub w_ipsi: Vec<f64>,
    pub w_contra: Vec<f64>,
    pub w_osc: Vec<f64>,
    pub w_turn: f64,
    pub w_speed: f64,
}

impl NcapParams {
    fn table_lengths(n_joints: usize, sharing: Sharing) -> [usize; 4] {
        match sharing {
            Sharing::Shared => [1, 1, 1, 1],
            Sharing::Unshared => [2 * (n_joints - 1), 2 * n_joints, 2 * n_joints, 2],
        }
    }

    /// Module index is 1-based, matching joint numbering.
    pub fn prop(&self, module: usize, side: Side) -> f64 {
        match self.sharing {
            Sharing::Shared => self.w_prop[0],
            Sharing::Unshared => self.w_prop[2 * (module - 2) + side.index()],
        }
    }

    pub fn ipsi(&self, module: usize, side: Side) -> f64 {
        match self.sharing {
            Sharing::Shared => self.w_ipsi[0],
            Sharing::Unshared => self.w_ipsi[2 * (module - 1) + side.index()],
        }
    }

    pub fn contra(&self, module: usize, side: Side) -> f64 {
        match self.sharing {
            Sharing::Shared => self.w_contra[0],
            Sharing::Unshared => self.w_contra[2 * (module - 1) + side.index()],
        }
    }

    pub fn osc(&self, side: Side) -> f64 {
        match self.sharing {
            Sharing::Shared => self.w_osc[0],
            Sharing::Unshared => self.w_osc[side.index()],
        }
    }

    /// Trainable entries in the order prop, ipsi, contra, osc.
    pub fn to_flat(&self) -> Vec<f64> {
        self.w_prop
            .iter()
            .chain(&self.w_ipsi)
            .chain(&self.w_contra)
            .chain(&self.w_osc)
            .copied()
            .collect()
    }

    /// Returns a copy with the trainable entries replaced from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let lens = Self::table_lengths(self.n_joints, self.sharing);
        let total: usize = lens.iter().sum();
        if flat.len() != total {
            return Err(NcapError::dim(total, flat.len(), "flat ncap parameters"));
        }
        let mut out = self.clone();
        let mut rest = flat;
        for (table, len) in [
            &mut out.w_prop,
            &mut out.w_ipsi,
            &mut out.w_contra,
            &mut out.w_osc,
        ]
        .into_iter()
        .zip(lens)
        {
            let (head, tail) = rest.split_at(len);
            table.copy_from_slice(head);
            rest = tail;
        }
        Ok(out)
    }

    pub fn num_trainable(&self) -> usize {
        self.w_prop.len() + self.w_ipsi.len() + self.w_contra.len() + self.w_osc.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_joints < 2 {
            return Err(NcapError::Config(format!(
                "need at least 2 joints, got {}",
                self.n_joints
            )));
        }
        let lens = Self::table_lengths(self.n_joints, self.sharing);
        let tables = [&self.w_prop, &self.w_ipsi, &self.w_contra, &self.w_osc];
        for (name, (table, len)) in ["w_prop", "w_ipsi", "w_contra", "w_osc"]
            .iter()
            .zip(tables.iter().zip(lens))
        {
            if table.len() != len {
                return Err(NcapError::dim(len, table.len(), *name));
            }
        }
        Ok(())
    }
}

/// Number of trainable parameters for an `n_joints` body under `flags`.
pub fn count_parameters(n_joints: usize, flags: NcapFlags) -> usize {
    if flags.share_weights {
        4
    } else {
        2 * (n_joints - 1) + 2 * n_joints + 2 * n_joints + 2
    }
}

/// Draws initial parameters.
///
/// Unit init sets every magnitude to 1, otherwise magnitudes are
/// `Uniform[0, 1]`. Without sign constraints the raw value carries its own
/// sign, chosen with equal probability.
pub fn init_params(n_joints: usize, flags: NcapFlags, seed: u64) -> Result<NcapParams> {
    if n_joints < 2 {
        return Err(NcapError::Config(format!(
            "need at least 2 joints, got {n_joints}"
        )));
    }
    let sharing = if flags.share_weights {
        Sharing::Shared
    } else {
        Sharing::Unshared
    };
    let [n_prop, n_ipsi, n_contra, n_osc] = NcapParams::table_lengths(n_joints, sharing);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, correct_sign: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let magnitude = if flags.unit_init { 1.0 } else { rng.gen::<f64>() };
                if flags.sign_constraints {
                    magnitude
                } else {
                    let flip = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
                    correct_sign * flip * magnitude
                }
            })
            .collect()
    };
    let w_prop = draw(n_prop, 1.0);
    let w_ipsi = draw(n_ipsi, 1.0);
    let w_contra = draw(n_contra, -1.0);
    let w_osc = draw(n_osc, 1.0);
    // Fixed command weights keep their correct sign in every configuration.
    let (w_turn, w_speed) = if flags.sign_constraints {
        (1.0, 1.0)
    } else {
        (1.0, -1.0)
    };
    Ok(NcapParams {
        n_joints,
        sharing,
        w_prop,
        w_ipsi,
        w_contra,
        w_osc,
        w_turn,
        w_speed,
    })
}

/// Constrained (effective) weights for one module.
#[derive(Debug, Clone, Copy)]
struct ModuleWeights {
    prop: [f64; 2],
    ipsi: [f64; 2],
    contra: [f64; 2],
    osc: [f64; 2],
    turn: f64,
    speed: f64,
}

fn effective(raw: f64, mode: SignConstraintMode, constrained: bool) -> Result<f64> {
    constrain(
        raw,
        if constrained {
            mode
        } else {
            SignConstraintMode::Unconstrained
        },
    )
}

fn module_weights(params: &NcapParams, module: usize, constrained: bool) -> Result<ModuleWeights> {
    use SignConstraintMode::{Excitatory, Inhibitory};
    let sides = [Side::Dorsal, Side::Ventral];
    let mut w = ModuleWeights {
        prop: [0.0; 2],
        ipsi: [0.0; 2],
        contra: [0.0; 2],
        osc: [0.0; 2],
        turn: effective(params.w_turn, Excitatory, constrained)?,
        speed: effective(params.w_speed, Inhibitory, constrained)?,
    };
    for (k, side) in sides.into_iter().enumerate() {
        if module >= 2 {
            w.prop[k] = effective(params.prop(module, side), Excitatory, constrained)?;
        } else {
            w.osc[k] = effective(params.osc(side), Excitatory, constrained)?;
        }
        w.ipsi[k] = effective(params.ipsi(module, side), Excitatory, constrained)?;
        w.contra[k] = effective(params.contra(module, side), Inhibitory, constrained)?;
    }
    Ok(w)
}

/// Unit outputs of one module for one control step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModuleTrace {
    pub b_d: f64,
    pub b_v: f64,
    pub m_d: f64,
    pub m_v: f64,
    pub accel: f64,
}

fn muscles(w: &ModuleWeights, b_d: f64, b_v: f64) -> ModuleTrace {
    let m_d = activation(w.ipsi[0] * b_d + w.contra[0] * b_v);
    let m_v = activation(w.ipsi[1] * b_v + w.contra[1] * b_d);
    ModuleTrace {
        b_d,
        b_v,
        m_d,
        m_v,
        accel: m_d.min(1.0) - m_v.min(1.0),
    }
}

/// Forward pass of module `module >= 2`, driven by the previous joint.
pub fn module_forward(
    module: usize,
    q_prev: f64,
    cmd: ControlCommand,
    params: &NcapParams,
    flags: NcapFlags,
) -> Result<ModuleTrace> {
    if module < 2 || module > params.n_joints {
        return Err(NcapError::Config(format!(
            "module index {module} outside 2..={}",
            params.n_joints
        )));
    }
    let w = module_weights(params, module, flags.sign_constraints)?;
    Ok(module_trace(&w, q_prev, cmd))
}

fn module_trace(w: &ModuleWeights, q_prev: f64, cmd: ControlCommand) -> ModuleTrace {
    let (q_d, q_v) = split_proprioception(q_prev);
    let gate = w.speed * (1.0 - cmd.speed);
    let b_d = activation(w.prop[0] * q_d + gate);
    let b_v = activation(w.prop[1] * q_v + gate);
    muscles(w, b_d, b_v)
}

/// Forward pass of the first module, driven by the oscillators and the turn
/// channels.
pub fn first_module_forward(
    osc: (f64, f64),
    cmd: ControlCommand,
    params: &NcapParams,
    flags: NcapFlags,
) -> Result<ModuleTrace> {
    let w = module_weights(params, 1, flags.sign_constraints)?;
    Ok(first_module_trace(&w, osc, cmd))
}

fn first_module_trace(w: &ModuleWeights, osc: (f64, f64), cmd: ControlCommand) -> ModuleTrace {
    let gate = w.speed * (1.0 - cmd.speed);
    let b_d = activation(w.osc[0] * osc.0 + w.turn * cmd.turn_right + gate);
    let b_v = activation(w.osc[1] * osc.1 + w.turn * cmd.turn_left + gate);
    muscles(w, b_d, b_v)
}

/// The full controller: parameters, oscillator, ablation flags and the
/// oscillator clock.
#[derive(Debug, Clone)]
pub struct NcapPolicy {
    pub params: NcapParams,
    pub oscillator: OscillatorConfig,
    pub flags: NcapFlags,
    pub timestep: u64,
    weights: Vec<ModuleWeights>,
    last_trace: Vec<ModuleTrace>,
}

impl NcapPolicy {
    pub fn new(params: NcapParams, oscillator: OscillatorConfig, flags: NcapFlags) -> Result<Self> {
        params.validate()?;
        oscillator.validate()?;
        let shared = params.sharing == Sharing::Shared;
        if shared != flags.share_weights {
            return Err(NcapError::Config(format!(
                "parameter sharing {:?} disagrees with share_weights={}",
                params.sharing, flags.share_weights
            )));
        }
        let weights = (1..=params.n_joints)
            .map(|i| module_weights(&params, i, flags.sign_constraints))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            last_trace: Vec::new(),
            params,
            oscillator,
            flags,
            timestep: 0,
            weights,
        })
    }

    /// Freshly initialized policy with default oscillator.
    pub fn initialized(n_joints: usize, flags: NcapFlags, seed: u64) -> Result<Self> {
        Self::new(
            init_params(n_joints, flags, seed)?,
            OscillatorConfig::default(),
            flags,
        )
    }

    pub fn n_joints(&self) -> usize {
        self.params.n_joints
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        Self::new(self.params.with_flat(flat)?, self.oscillator, self.flags)
    }

    /// One control step. Module `i` reads joint `i - 1`, so the last joint
    /// position is never consumed.
    pub fn forward(&mut self, obs: &[f64], cmd: ControlCommand) -> Result<Vec<f64>> {
        let n = self.n_joints();
        if obs.len() != n {
            return Err(NcapError::dim(n, obs.len(), "ncap observation"));
        }
        let osc = self.oscillator.output(self.timestep)?;
        self.last_trace.clear();
        self.last_trace
            .push(first_module_trace(&self.weights[0], osc, cmd));
        for i in 1..n {
            self.last_trace
                .push(module_trace(&self.weights[i], obs[i - 1], cmd));
        }
        self.timestep += 1;
        Ok(self.last_trace.iter().map(|m| m.accel).collect())
    }

    pub fn last_trace(&self) -> &[ModuleTrace] {
        &self.last_trace
    }
}

impl Policy for NcapPolicy {
    fn n_joints(&self) -> usize {
        self.params.n_joints
    }

    fn reset(&mut self) {
        self.timestep = 0;
        self.last_trace.clear();
    }

    fn act(&mut self, obs: &[f64], cmd: ControlCommand) -> Result<Vec<f64>> {
        self.forward(obs, cmd)
    }

    fn activations(&self) -> Option<BTreeMap<String, f64>> {
        if self.last_trace.is_empty() {
            return None;
        }
        let mut out = BTreeMap::new();
        for (k, m) in self.last_trace.iter().enumerate() {
            let i = k + 1;
            out.insert(format!("b_d_{i}"), m.b_d);
            out.insert(format!("b_v_{i}"), m.b_v);
            out.insert(format!("m_d_{i}"), m.m_d);
            out.insert(format!("m_v_{i}"), m.m_v);
        }
        Some(out)
    }
}

/// Transplants a shared-weight policy onto a body with `n_joints` joints by
/// adding or removing modules. The clock restarts at zero.
pub fn resize_policy(policy: &NcapPolicy, n_joints: usize) -> Result<NcapPolicy> {
    if policy.params.sharing != Sharing::Shared {
        return Err(NcapError::Unsupported(
            "only shared-weight policies can be resized".into(),
        ));
    }
    if n_joints < 2 {
        return Err(NcapError::Config(format!(
            "need at least 2 joints, got {n_joints}"
        )));
    }
    let params = NcapParams {
        n_joints,
        ..policy.params.clone()
    };
    NcapPolicy::new(params, policy.oscillator, policy.flags)
}
