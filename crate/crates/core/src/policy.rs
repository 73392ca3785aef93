//! The policy interface shared by the circuit controller and the MLP
//! baselines, plus the command channels fed to every policy at each step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Descending command signals: speed `s`, right turn `r`, left turn `l`.
///
/// All three are clamped to `[0, 1]` on construction. The swim task uses
/// `s = 1, r = l = 0` throughout (see [`ControlCommand::swim`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub speed: f64,
    pub turn_right: f64,
    pub turn_left: f64,
}

impl ControlCommand {
    pub fn new(speed: f64, turn_right: f64, turn_left: f64) -> Self {
        Self {
            speed: clamp_unit(speed),
            turn_right: clamp_unit(turn_right),
            turn_left: clamp_unit(turn_left),
        }
    }

    /// Full speed, no turning.
    pub fn swim() -> Self {
        Self::new(1.0, 0.0, 0.0)
    }

    pub fn stop() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

impl Default for ControlCommand {
    fn default() -> Self {
        Self::swim()
    }
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Command schedule over control steps. Each entry takes effect from its
/// `start` step until the next entry; steps before the first entry use the
/// swim command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CommandSchedule {
    #[serde(default)]
    pub segments: Vec<ScheduleSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    pub start: u64,
    pub command: ControlCommand,
}

impl CommandSchedule {
    pub fn constant(command: ControlCommand) -> Self {
        Self {
            segments: vec![ScheduleSegment { start: 0, command }],
        }
    }

    pub fn swim() -> Self {
        Self::constant(ControlCommand::swim())
    }

    /// Builder: switch to `command` from control step `start` on.
    pub fn then(mut self, start: u64, command: ControlCommand) -> Self {
        self.segments.push(ScheduleSegment { start, command });
        self.segments.sort_by_key(|s| s.start);
        self
    }

    pub fn at(&self, t: u64) -> ControlCommand {
        self.segments
            .iter()
            .take_while(|s| s.start <= t)
            .last()
            .map(|s| s.command)
            .unwrap_or_else(ControlCommand::swim)
    }
}

/// A controller mapping normalized joint positions to normalized joint
/// accelerations, one call per control step.
pub trait Policy {
    fn n_joints(&self) -> usize;

    /// Clears any internal time state. Called at the start of each episode.
    fn reset(&mut self);

    fn act(&mut self, obs: &[f64], cmd: ControlCommand) -> Result<Vec<f64>>;

    /// Unit activations produced by the most recent [`Policy::act`] call.
    fn activations(&self) -> Option<BTreeMap<String, f64>> {
        None
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn n_joints(&self) -> usize {
        (**self).n_joints()
    }
    fn reset(&mut self) {
        (**self).reset()
    }
    fn act(&mut self, obs: &[f64], cmd: ControlCommand) -> Result<Vec<f64>> {
        (**self).act(obs, cmd)
    }
    fn activations(&self) -> Option<BTreeMap<String, f64>> {
        (**self).activations()
    }
}

/// Emits all-zero actions. Useful as a do-nothing reference controller.
#[derive(Debug, Clone)]
pub struct ZeroPolicy {
    pub n_joints: usize,
}

impl Policy for ZeroPolicy {
    fn n_joints(&self) -> usize {
        self.n_joints
    }
    fn reset(&mut self) {}
    fn act(&mut self, obs: &[f64], _cmd: ControlCommand) -> Result<Vec<f64>> {
        if obs.len() != self.n_joints {
            return Err(crate::error::NcapError::dim(self.n_joints, obs.len(), "observation"));
        }
        Ok(vec![0.0; self.n_joints])
    }
}
