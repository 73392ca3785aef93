//! Policy families used by the trainer and their JSON checkpoint format.
//!
//! A checkpoint is a flat object of named parameters next to the
//! configuration needed to rebuild the policy:
//!
//! ```json
//! {"kind": "ncap", "n_joints": 5,
//!  "flags": {"share_weights": true, "sign_constraints": true, "unit_init": true},
//!  "oscillator": {"period": 60, "high_width": 30, "phase_offset": 0},
//!  "params": {"w_prop": 1.0, "w_ipsi": 1.0, "w_contra": 1.0, "w_osc": 1.0,
//!             "w_turn": 1.0, "w_speed": 1.0}}
//! ```
//!
//! MLP checkpoints use `layer{k}.weight` (rows of the matrix) and
//! `layer{k}.bias` entries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{
    embed_ncap, Dense, EmbeddingMask, MaskedMlpPolicy, MlpConfig, MlpParams, MlpPolicy,
};
use crate::error::{NcapError, Result};
use crate::es::Trainable;
use crate::ncap::{init_params, NcapFlags, NcapParams, NcapPolicy, OscillatorConfig, Sharing};
use crate::policy::{ControlCommand, Policy};

impl Trainable for NcapPolicy {
    fn trainable_params(&self) -> Vec<f64> {
        self.params.to_flat()
    }
    fn with_trainable(&self, flat: &[f64]) -> Result<Self> {
        self.with_flat(flat)
    }
}

impl Trainable for MlpPolicy {
    fn trainable_params(&self) -> Vec<f64> {
        self.params.to_flat()
    }
    fn with_trainable(&self, flat: &[f64]) -> Result<Self> {
        self.with_flat(flat)
    }
}

impl Trainable for MaskedMlpPolicy {
    fn trainable_params(&self) -> Vec<f64> {
        self.trainable_flat()
    }
    fn with_trainable(&self, flat: &[f64]) -> Result<Self> {
        self.with_flat(flat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Every connection of the embedding network, fan-in initialized.
    Dense,
    /// The circuit's sparse wiring, initialized from the circuit.
    Circuit,
}

/// What to build and train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Ncap {
        #[serde(default = "default_true")]
        share_weights: bool,
        #[serde(default = "default_true")]
        sign_constraints: bool,
        #[serde(default = "default_true")]
        unit_init: bool,
    },
    Mlp {
        hidden: Vec<usize>,
    },
    MaskedMlp {
        mask: MaskKind,
    },
}

fn default_true() -> bool {
    true
}

impl PolicySpec {
    pub fn ncap(flags: NcapFlags) -> Self {
        PolicySpec::Ncap {
            share_weights: flags.share_weights,
            sign_constraints: flags.sign_constraints,
            unit_init: flags.unit_init,
        }
    }

    pub fn label(&self) -> String {
        match self {
            PolicySpec::Ncap {
                share_weights,
                sign_constraints,
                unit_init,
            } => format!(
                "ncap_share{}_sign{}_init{}",
                *share_weights as u8, *sign_constraints as u8, *unit_init as u8
            ),
            PolicySpec::Mlp { hidden } => format!(
                "mlp_{}",
                hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("x")
            ),
            PolicySpec::MaskedMlp { mask: MaskKind::Dense } => "masked_mlp_dense".into(),
            PolicySpec::MaskedMlp { mask: MaskKind::Circuit } => "masked_mlp_circuit".into(),
        }
    }

    /// Builds a freshly initialized policy for an `n_joints` body.
    pub fn build(&self, n_joints: usize, seed: u64) -> Result<TrainablePolicy> {
        Ok(match self {
            PolicySpec::Ncap {
                share_weights,
                sign_constraints,
                unit_init,
            } => {
                let flags = NcapFlags {
                    share_weights: *share_weights,
                    sign_constraints: *sign_constraints,
                    unit_init: *unit_init,
                };
                TrainablePolicy::Ncap(NcapPolicy::initialized(n_joints, flags, seed)?)
            }
            PolicySpec::Mlp { hidden } => {
                TrainablePolicy::Mlp(MlpPolicy::initialized(n_joints, hidden, seed)?)
            }
            PolicySpec::MaskedMlp { mask: MaskKind::Dense } => {
                TrainablePolicy::MaskedMlp(MaskedMlpPolicy::dense(n_joints, seed)?)
            }
            PolicySpec::MaskedMlp { mask: MaskKind::Circuit } => {
                let flags = NcapFlags {
                    share_weights: false,
                    sign_constraints: false,
                    unit_init: false,
                };
                let circuit = NcapPolicy::new(
                    init_params(n_joints, flags, seed)?,
                    OscillatorConfig::default(),
                    flags,
                )?;
                let (params, mask) = embed_ncap(&circuit)?;
                TrainablePolicy::MaskedMlp(MaskedMlpPolicy::new(params, mask, circuit.oscillator)?)
            }
        })
    }
}

/// Any of the trainable policy families.
#[derive(Debug, Clone)]
pub enum TrainablePolicy {
    Ncap(NcapPolicy),
    Mlp(MlpPolicy),
    MaskedMlp(MaskedMlpPolicy),
}

impl TrainablePolicy {
    pub fn num_trainable(&self) -> usize {
        self.trainable_params().len()
    }

    pub fn as_ncap(&self) -> Option<&NcapPolicy> {
        match self {
            TrainablePolicy::Ncap(p) => Some(p),
            _ => None,
        }
    }

    /// Whether this policy was built from (or is compatible with) `spec`.
    pub fn matches(&self, spec: &PolicySpec) -> bool {
        match (self, spec) {
            (
                TrainablePolicy::Ncap(p),
                PolicySpec::Ncap {
                    share_weights,
                    sign_constraints,
                    unit_init,
                },
            ) => {
                p.flags
                    == NcapFlags {
                        share_weights: *share_weights,
                        sign_constraints: *sign_constraints,
                        unit_init: *unit_init,
                    }
            }
            (TrainablePolicy::Mlp(p), PolicySpec::Mlp { hidden }) => &p.config.hidden_dims == hidden,
            (TrainablePolicy::MaskedMlp(p), PolicySpec::MaskedMlp { mask }) => {
                let dense = p.mask == EmbeddingMask::dense(p.mask.n_joints);
                dense == (*mask == MaskKind::Dense)
            }
            _ => false,
        }
    }
}

impl Policy for TrainablePolicy {
    fn n_joints(&self) -> usize {
        match self {
            TrainablePolicy::Ncap(p) => p.n_joints(),
            TrainablePolicy::Mlp(p) => Policy::n_joints(p),
            TrainablePolicy::MaskedMlp(p) => Policy::n_joints(p),
        }
    }
    fn reset(&mut self) {
        match self {
            TrainablePolicy::Ncap(p) => p.reset(),
            TrainablePolicy::Mlp(p) => p.reset(),
            TrainablePolicy::MaskedMlp(p) => p.reset(),
        }
    }
    fn act(&mut self, obs: &[f64], cmd: ControlCommand) -> Result<Vec<f64>> {
        match self {
            TrainablePolicy::Ncap(p) => p.act(obs, cmd),
            TrainablePolicy::Mlp(p) => p.act(obs, cmd),
            TrainablePolicy::MaskedMlp(p) => p.act(obs, cmd),
        }
    }
    fn activations(&self) -> Option<BTreeMap<String, f64>> {
        match self {
            TrainablePolicy::Ncap(p) => p.activations(),
            TrainablePolicy::Mlp(p) => p.activations(),
            TrainablePolicy::MaskedMlp(p) => p.activations(),
        }
    }
}

impl Trainable for TrainablePolicy {
    fn trainable_params(&self) -> Vec<f64> {
        match self {
            TrainablePolicy::Ncap(p) => p.trainable_params(),
            TrainablePolicy::Mlp(p) => p.trainable_params(),
            TrainablePolicy::MaskedMlp(p) => p.trainable_params(),
        }
    }
    fn with_trainable(&self, flat: &[f64]) -> Result<Self> {
        Ok(match self {
            TrainablePolicy::Ncap(p) => TrainablePolicy::Ncap(p.with_trainable(flat)?),
            TrainablePolicy::Mlp(p) => TrainablePolicy::Mlp(p.with_trainable(flat)?),
            TrainablePolicy::MaskedMlp(p) => TrainablePolicy::MaskedMlp(p.with_trainable(flat)?),
        })
    }
}

/// Serialized form of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Checkpoint {
    Ncap {
        n_joints: usize,
        flags: NcapFlags,
        oscillator: OscillatorConfig,
        params: BTreeMap<String, Value>,
    },
    Mlp {
        n_joints: usize,
        config: MlpConfig,
        params: BTreeMap<String, Value>,
    },
    MaskedMlp {
        n_joints: usize,
        oscillator: OscillatorConfig,
        mask: EmbeddingMask,
        params: BTreeMap<String, Value>,
    },
}

fn table_value(table: &[f64], sharing: Sharing) -> Value {
    match sharing {
        Sharing::Shared => Value::from(table[0]),
        Sharing::Unshared => Value::from(table.to_vec()),
    }
}

fn read_table(params: &BTreeMap<String, Value>, name: &str) -> Result<Vec<f64>> {
    let v = params
        .get(name)
        .ok_or_else(|| NcapError::Checkpoint(format!("missing parameter {name}")))?;
    match v {
        Value::Number(n) => Ok(vec![n.as_f64().unwrap_or(f64::NAN)]),
        Value::Array(_) => Ok(serde_json::from_value(v.clone())?),
        _ => Err(NcapError::Checkpoint(format!("parameter {name} is not a number or array"))),
    }
}

fn read_scalar(params: &BTreeMap<String, Value>, name: &str) -> Result<f64> {
    let t = read_table(params, name)?;
    match t.as_slice() {
        [x] => Ok(*x),
        _ => Err(NcapError::Checkpoint(format!("parameter {name} must be a scalar"))),
    }
}

fn mlp_param_map(params: &MlpParams) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    for (k, layer) in params.layers.iter().enumerate() {
        let rows: Vec<Vec<f64>> = layer.weight.chunks(layer.cols.max(1)).map(|r| r.to_vec()).collect();
        out.insert(format!("layer{k}.weight"), Value::from(rows));
        out.insert(format!("layer{k}.bias"), Value::from(layer.bias.clone()));
    }
    out
}

fn read_mlp_params(map: &BTreeMap<String, Value>, cfg: &MlpConfig) -> Result<MlpParams> {
    let mut layers = Vec::new();
    for (k, (fan_in, fan_out)) in cfg.layer_shapes().into_iter().enumerate() {
        let wname = format!("layer{k}.weight");
        let rows: Vec<Vec<f64>> = serde_json::from_value(
            map.get(&wname)
                .cloned()
                .ok_or_else(|| NcapError::Checkpoint(format!("missing {wname}")))?,
        )?;
        let bias = read_table(map, &format!("layer{k}.bias"))?;
        if rows.len() != fan_out || rows.iter().any(|r| r.len() != fan_in) || bias.len() != fan_out {
            return Err(NcapError::Checkpoint(format!("layer {k} has the wrong shape")));
        }
        layers.push(Dense {
            rows: fan_out,
            cols: fan_in,
            weight: rows.concat(),
            bias,
        });
    }
    Ok(MlpParams { layers })
}

impl Checkpoint {
    pub fn from_policy(policy: &TrainablePolicy) -> Self {
        match policy {
            TrainablePolicy::Ncap(p) => {
                let s = p.params.sharing;
                let mut params = BTreeMap::new();
                params.insert("w_prop".into(), table_value(&p.params.w_prop, s));
                params.insert("w_ipsi".into(), table_value(&p.params.w_ipsi, s));
                params.insert("w_contra".into(), table_value(&p.params.w_contra, s));
                params.insert("w_osc".into(), table_value(&p.params.w_osc, s));
                params.insert("w_turn".into(), Value::from(p.params.w_turn));
                params.insert("w_speed".into(), Value::from(p.params.w_speed));
                Checkpoint::Ncap {
                    n_joints: p.n_joints(),
                    flags: p.flags,
                    oscillator: p.oscillator,
                    params,
                }
            }
            TrainablePolicy::Mlp(p) => Checkpoint::Mlp {
                n_joints: p.config.output_dim,
                config: p.config.clone(),
                params: mlp_param_map(&p.params),
            },
            TrainablePolicy::MaskedMlp(p) => Checkpoint::MaskedMlp {
                n_joints: p.mask.n_joints,
                oscillator: p.oscillator,
                mask: p.mask.clone(),
                params: mlp_param_map(&p.params),
            },
        }
    }

    pub fn n_joints(&self) -> usize {
        match self {
            Checkpoint::Ncap { n_joints, .. }
            | Checkpoint::Mlp { n_joints, .. }
            | Checkpoint::MaskedMlp { n_joints, .. } => *n_joints,
        }
    }

    pub fn into_policy(self) -> Result<TrainablePolicy> {
        match self {
            Checkpoint::Ncap {
                n_joints,
                flags,
                oscillator,
                params,
            } => {
                let sharing = if flags.share_weights {
                    Sharing::Shared
                } else {
                    Sharing::Unshared
                };
                let p = NcapParams {
                    n_joints,
                    sharing,
                    w_prop: read_table(&params, "w_prop")?,
                    w_ipsi: read_table(&params, "w_ipsi")?,
                    w_contra: read_table(&params, "w_contra")?,
                    w_osc: read_table(&params, "w_osc")?,
                    w_turn: read_scalar(&params, "w_turn")?,
                    w_speed: read_scalar(&params, "w_speed")?,
                };
                p.validate()
                    .map_err(|e| NcapError::Checkpoint(format!("inconsistent ncap tables: {e}")))?;
                Ok(TrainablePolicy::Ncap(NcapPolicy::new(p, oscillator, flags)?))
            }
            Checkpoint::Mlp {
                n_joints,
                config,
                params,
            } => {
                if config.output_dim != n_joints {
                    return Err(NcapError::Checkpoint("MLP output size differs from n_joints".into()));
                }
                let p = read_mlp_params(&params, &config)?;
                Ok(TrainablePolicy::Mlp(MlpPolicy::new(config, p)?))
            }
            Checkpoint::MaskedMlp {
                n_joints,
                oscillator,
                mask,
                params,
            } => {
                if mask.n_joints != n_joints {
                    return Err(NcapError::Checkpoint("mask size differs from n_joints".into()));
                }
                let p = read_mlp_params(&params, &mask.config())?;
                Ok(TrainablePolicy::MaskedMlp(MaskedMlpPolicy::new(p, mask, oscillator)?))
            }
        }
    }
}

pub fn save_checkpoint(policy: &TrainablePolicy, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&Checkpoint::from_policy(policy))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Loads a checkpoint; when `expected` is given, rejects checkpoints whose
/// family or flags differ.
pub fn load_checkpoint(path: &Path, expected: Option<&PolicySpec>) -> Result<TrainablePolicy> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    let policy = ckpt.into_policy()?;
    if let Some(spec) = expected {
        if !policy.matches(spec) {
            return Err(NcapError::Checkpoint(format!(
                "checkpoint {} does not match requested policy {}",
                path.display(),
                spec.label()
            )));
        }
    }
    Ok(policy)
}
