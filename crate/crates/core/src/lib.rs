//! Circuit-prior swimmer: a sparse, sign-constrained, weight-shared
//! controller for a planar N-link swimmer, dense MLP baselines that embed the
//! circuit, and an evolution-strategies trainer with an experiment runner.

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod es;
pub mod experiments;
pub mod ncap;
pub mod policy;
pub mod swimmer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MaskKind, PolicySpec, TrainablePolicy};
pub use error::{NcapError, Result};
pub use es::{train, EsConfig, RunRecord, Trainable, TrainOptions};
pub use ncap::{NcapFlags, NcapParams, NcapPolicy, OscillatorConfig};
pub use policy::{CommandSchedule, ControlCommand, Policy};
pub use swimmer::{rollout, Swimmer, SwimmerConfig, SwimmerState};
