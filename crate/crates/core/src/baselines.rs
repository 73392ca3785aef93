//! Dense MLP baselines and the masked MLP into which the circuit embeds.
//!
//! The embedding network reads `x = (q_1..q_N, o_d, o_v, r, l)` and has three
//! rectifier hidden layers:
//!
//! 1. `2 (N - 1) + 4` units: `max(q_i, 0)` and `max(-q_i, 0)` for
//!    `i < N`, then pass-throughs of the oscillator and turn channels
//!    (fixed +/-1 weights);
//! 2. `2 N` B neurons, with the speed gate `w_speed (1 - s)` added as a fixed
//!    command overlay;
//! 3. `2 N` muscles;
//!
//! followed by the output `q''_i = min(m_d_i, 1) - min(m_v_i, 1)`, realized as
//! fixed +/-1 weights on the saturated muscle outputs. For `N = 5` the hidden
//! dimensions are `(12, 10, 10)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NcapError, Result};
use crate::ncap::{constrain, NcapPolicy, OscillatorConfig, Side, SignConstraintMode};
use crate::policy::{ControlCommand, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OutputStage {
    /// `tanh(W h + b)`.
    #[default]
    Tanh,
    /// `clamp(W min(h, 1) + b, -1, 1)`; with the embedding wiring this is the
    /// circuit's antagonistic muscle difference.
    MuscleDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub output: OutputStage,
}

impl MlpConfig {
    /// Free-standing baseline reading only the joint positions.
    pub fn baseline(n_joints: usize, hidden_dims: &[usize]) -> Self {
        Self {
            input_dim: n_joints,
            hidden_dims: hidden_dims.to_vec(),
            output_dim: n_joints,
            output: OutputStage::Tanh,
        }
    }

    /// The dense network with the embedding's dimensions.
    pub fn embedding(n_joints: usize) -> Self {
        Self {
            input_dim: n_joints + 4,
            hidden_dims: vec![2 * (n_joints - 1) + 4, 2 * n_joints, 2 * n_joints],
            output_dim: n_joints,
            output: OutputStage::MuscleDifference,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(NcapError::Config(format!(
                "MLP dimensions must all be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Number of weights and biases of an MLP.
pub fn count_mlp_parameters(cfg: &MlpConfig) -> usize {
    cfg.layer_shapes()
        .iter()
        .map(|(fan_in, fan_out)| fan_in * fan_out + fan_out)
        .sum()
}

/// One affine layer, row-major `weight[out * cols + in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weight.chunks_exact(self.cols).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b
        }));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    pub fn zeros(cfg: &MlpConfig) -> Self {
        Self {
            layers: cfg
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Dense::zeros(o, i))
                .collect(),
        }
    }

    /// Uniform fan-in scaled initialization, `U(-sqrt(6 / fan_in), +)`, zero
    /// biases.
    pub fn he_uniform(cfg: &MlpConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(cfg);
        for layer in &mut params.layers {
            let bound = (6.0 / layer.cols as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.gen_range(-bound..bound);
            }
        }
        params
    }

    pub fn check_shape(&self, cfg: &MlpConfig) -> Result<()> {
        let shapes = cfg.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(NcapError::dim(shapes.len(), self.layers.len(), "MLP layer count"));
        }
        for (k, ((i, o), layer)) in shapes.iter().zip(&self.layers).enumerate() {
            if layer.cols != *i || layer.rows != *o {
                return Err(NcapError::dim(i * o, layer.rows * layer.cols, format!("layer {k} shape")));
            }
            if layer.weight.len() != i * o || layer.bias.len() != *o {
                return Err(NcapError::dim(i * o + o, layer.weight.len() + layer.bias.len(), format!("layer {k} storage")));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All weights then biases, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(NcapError::dim(self.num_scalars(), flat.len(), "flat MLP parameters"));
        }
        let mut out = self.clone();
        let mut rest = flat;
        for layer in &mut out.layers {
            let (w, tail) = rest.split_at(layer.weight.len());
            layer.weight.copy_from_slice(w);
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(out)
    }
}

fn relu_in_place(h: &mut [f64]) {
    for x in h {
        *x = x.max(0.0);
    }
}

fn output_stage(stage: OutputStage, layer: &Dense, h: &mut [f64], out: &mut Vec<f64>) {
    match stage {
        OutputStage::Tanh => {
            layer.affine(h, out);
            out.iter_mut().for_each(|y| *y = y.tanh());
        }
        OutputStage::MuscleDifference => {
            h.iter_mut().for_each(|x| *x = x.min(1.0));
            layer.affine(h, out);
            out.iter_mut().for_each(|y| *y = y.clamp(-1.0, 1.0));
        }
    }
}

/// Forward pass of a dense MLP on `obs ++ aux`.
pub fn mlp_forward(params: &MlpParams, cfg: &MlpConfig, obs: &[f64], aux: &[f64]) -> Result<Vec<f64>> {
    if obs.len() + aux.len() != cfg.input_dim {
        return Err(NcapError::dim(cfg.input_dim, obs.len() + aux.len(), "MLP input"));
    }
    params.check_shape(cfg)?;
    let mut h: Vec<f64> = obs.iter().chain(aux).copied().collect();
    let mut next = Vec::new();
    let (last, hidden) = params.layers.split_last().expect("at least one layer");
    for layer in hidden {
        layer.affine(&h, &mut next);
        relu_in_place(&mut next);
        std::mem::swap(&mut h, &mut next);
    }
    output_stage(cfg.output, last, &mut h, &mut next);
    Ok(next)
}

/// Connectivity of one layer of the masked network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    pub rows: usize,
    pub cols: usize,
    /// 0/1 per weight, row-major.
    pub live: Vec<f64>,
    /// 0/1 per bias.
    pub bias_live: Vec<f64>,
    /// Values for live weights that are wired rather than trained.
    pub fixed: Vec<Option<f64>>,
}

impl LayerMask {
    fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            live: vec![0.0; rows * cols],
            bias_live: vec![0.0; rows],
            fixed: vec![None; rows * cols],
        }
    }

    fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            live: vec![1.0; rows * cols],
            bias_live: vec![1.0; rows],
            fixed: vec![None; rows * cols],
        }
    }

    fn connect(&mut self, row: usize, col: usize) {
        self.live[row * self.cols + col] = 1.0;
    }

    fn wire(&mut self, row: usize, col: usize, value: f64) {
        self.connect(row, col);
        self.fixed[row * self.cols + col] = Some(value);
    }

    fn trainable_weight(&self, k: usize) -> bool {
        self.live[k] != 0.0 && self.fixed[k].is_none()
    }
}

/// Masks and fixed overlays that carve the circuit out of the dense
/// embedding network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMask {
    pub n_joints: usize,
    pub layers: Vec<LayerMask>,
    /// Per-unit gain on `(1 - s)` added to the pre-activation of the B-neuron
    /// layer (hidden layer 2).
    pub speed_overlay: Vec<f64>,
}

const B_LAYER: usize = 1;

impl EmbeddingMask {
    pub fn config(&self) -> MlpConfig {
        MlpConfig::embedding(self.n_joints)
    }

    /// Fully connected mask: every weight and bias trainable, no speed gate.
    pub fn dense(n_joints: usize) -> Self {
        let cfg = MlpConfig::embedding(n_joints);
        Self {
            n_joints,
            layers: cfg
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| LayerMask::full(o, i))
                .collect(),
            speed_overlay: vec![0.0; 2 * n_joints],
        }
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.rows)
            .collect()
    }

    /// Count of live weights and biases.
    pub fn live_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.live.iter().filter(|m| **m != 0.0).count()
                    + l.bias_live.iter().filter(|m| **m != 0.0).count()
            })
            .sum()
    }

    /// Count of live entries that are trained (not wired).
    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                (0..l.live.len()).filter(|&k| l.trainable_weight(k)).count()
                    + l.bias_live.iter().filter(|m| **m != 0.0).count()
            })
            .sum()
    }

    /// Effective weights: masked params with fixed overlays applied.
    pub fn apply(&self, params: &MlpParams) -> Result<MlpParams> {
        params.check_shape(&self.config())?;
        let mut out = params.clone();
        for (layer, mask) in out.layers.iter_mut().zip(&self.layers) {
            for (k, w) in layer.weight.iter_mut().enumerate() {
                *w = match mask.fixed[k] {
                    Some(v) => mask.live[k] * v,
                    None => mask.live[k] * *w,
                };
            }
            for (b, m) in layer.bias.iter_mut().zip(&mask.bias_live) {
                *b *= m;
            }
        }
        Ok(out)
    }

    /// Trainable entries in layer order (weights row-major, then biases).
    pub fn trainable_flat(&self, params: &MlpParams) -> Vec<f64> {
        let mut out = Vec::new();
        for (layer, mask) in params.layers.iter().zip(&self.layers) {
            for (k, w) in layer.weight.iter().enumerate() {
                if mask.trainable_weight(k) {
                    out.push(*w);
                }
            }
            for (b, m) in layer.bias.iter().zip(&mask.bias_live) {
                if *m != 0.0 {
                    out.push(*b);
                }
            }
        }
        out
    }

    pub fn with_trainable_flat(&self, params: &MlpParams, flat: &[f64]) -> Result<MlpParams> {
        let expected = self.trainable_count();
        if flat.len() != expected {
            return Err(NcapError::dim(expected, flat.len(), "flat masked-MLP parameters"));
        }
        let mut out = params.clone();
        let mut it = flat.iter();
        for (layer, mask) in out.layers.iter_mut().zip(&self.layers) {
            for (k, w) in layer.weight.iter_mut().enumerate() {
                if mask.trainable_weight(k) {
                    *w = *it.next().expect("length checked");
                }
            }
            for (b, m) in layer.bias.iter_mut().zip(&mask.bias_live) {
                if *m != 0.0 {
                    *b = *it.next().expect("length checked");
                }
            }
        }
        Ok(out)
    }
}

/// Index helpers for the embedding layout.
struct Layout {
    n: usize,
}

impl Layout {
    fn osc_input(&self, side: Side) -> usize {
        self.n + side_index(side)
    }
    fn turn_input(&self, side: Side) -> usize {
        self.n + 2 + side_index(side)
    }
    /// Layer-1 unit carrying the rectified `side` component of `q_joint`.
    fn prop_unit(&self, joint: usize, side: Side) -> usize {
        2 * (joint - 1) + side_index(side)
    }
    fn osc_unit(&self, side: Side) -> usize {
        2 * (self.n - 1) + side_index(side)
    }
    fn turn_unit(&self, side: Side) -> usize {
        2 * (self.n - 1) + 2 + side_index(side)
    }
    /// B neuron or muscle of `module` on `side` in layers 2 and 3.
    fn module_unit(&self, module: usize, side: Side) -> usize {
        2 * (module - 1) + side_index(side)
    }
}

fn side_index(side: Side) -> usize {
    match side {
        Side::Dorsal => 0,
        Side::Ventral => 1,
    }
}

fn other(side: Side) -> Side {
    match side {
        Side::Dorsal => Side::Ventral,
        Side::Ventral => Side::Dorsal,
    }
}

const SIDES: [Side; 2] = [Side::Dorsal, Side::Ventral];

/// Builds the circuit wiring inside the `(2(N-1)+4, 2N, 2N)` network, with
/// unit-magnitude turn and speed overlays.
pub fn build_embedding_mask(n_joints: usize) -> Result<EmbeddingMask> {
    if n_joints < 2 {
        return Err(NcapError::Config(format!("need at least 2 joints, got {n_joints}")));
    }
    let n = n_joints;
    let at = Layout { n };
    let cfg = MlpConfig::embedding(n);
    let shapes = cfg.layer_shapes();
    let mut layers: Vec<LayerMask> = shapes.iter().map(|(i, o)| LayerMask::empty(*o, *i)).collect();

    // Input selection and rectification.
    for joint in 1..n {
        layers[0].wire(at.prop_unit(joint, Side::Dorsal), joint - 1, 1.0);
        layers[0].wire(at.prop_unit(joint, Side::Ventral), joint - 1, -1.0);
    }
    for side in SIDES {
        layers[0].wire(at.osc_unit(side), at.osc_input(side), 1.0);
        layers[0].wire(at.turn_unit(side), at.turn_input(side), 1.0);
    }
    // B neurons. Right turn drives the dorsal side, left turn the ventral.
    for side in SIDES {
        let b1 = at.module_unit(1, side);
        layers[1].connect(b1, at.osc_unit(side));
        layers[1].wire(b1, at.turn_unit(side), 1.0);
        for module in 2..=n {
            layers[1].connect(at.module_unit(module, side), at.prop_unit(module - 1, side));
        }
    }
    // Muscles: ipsilateral and contralateral B input.
    for module in 1..=n {
        for side in SIDES {
            let m = at.module_unit(module, side);
            layers[2].connect(m, at.module_unit(module, side));
            layers[2].connect(m, at.module_unit(module, other(side)));
        }
    }
    // Antagonistic output.
    for module in 1..=n {
        layers[3].wire(module - 1, at.module_unit(module, Side::Dorsal), 1.0);
        layers[3].wire(module - 1, at.module_unit(module, Side::Ventral), -1.0);
    }
    Ok(EmbeddingMask {
        n_joints: n,
        layers,
        speed_overlay: vec![-1.0; 2 * n],
    })
}

/// Copies a circuit policy's effective (sign-constrained where applicable)
/// weights into the embedding network. The returned mask carries the
/// policy's turn and speed weights as overlays.
pub fn embed_ncap(policy: &NcapPolicy) -> Result<(MlpParams, EmbeddingMask)> {
    let n = policy.n_joints();
    let at = Layout { n };
    let mut mask = build_embedding_mask(n)?;
    let mut params = MlpParams::zeros(&mask.config());
    let p = &policy.params;
    let mode = |m: SignConstraintMode| {
        if policy.flags.sign_constraints {
            m
        } else {
            SignConstraintMode::Unconstrained
        }
    };
    let exc = |w: f64| constrain(w, mode(SignConstraintMode::Excitatory));
    let inh = |w: f64| constrain(w, mode(SignConstraintMode::Inhibitory));

    let turn = exc(p.w_turn)?;
    let speed = inh(p.w_speed)?;
    mask.speed_overlay = vec![speed; 2 * n];
    let b_layer = &mut params.layers[B_LAYER];
    for side in SIDES {
        let b1 = at.module_unit(1, side);
        b_layer.weight[b1 * b_layer.cols + at.osc_unit(side)] = exc(p.osc(side))?;
        mask.layers[B_LAYER].fixed[b1 * b_layer.cols + at.turn_unit(side)] = Some(turn);
        for module in 2..=n {
            let row = at.module_unit(module, side);
            b_layer.weight[row * b_layer.cols + at.prop_unit(module - 1, side)] = exc(p.prop(module, side))?;
        }
    }
    let m_layer = &mut params.layers[2];
    for module in 1..=n {
        for side in SIDES {
            let row = at.module_unit(module, side);
            m_layer.weight[row * m_layer.cols + at.module_unit(module, side)] = exc(p.ipsi(module, side))?;
            m_layer.weight[row * m_layer.cols + at.module_unit(module, other(side))] =
                inh(p.contra(module, side))?;
        }
    }
    Ok((params, mask))
}

/// Forward pass of the masked embedding network.
pub fn masked_mlp_forward(
    params: &MlpParams,
    mask: &EmbeddingMask,
    obs: &[f64],
    osc: (f64, f64),
    cmd: ControlCommand,
) -> Result<Vec<f64>> {
    let effective = mask.apply(params)?;
    masked_forward_effective(&effective, mask, obs, osc, cmd)
}

fn masked_forward_effective(
    effective: &MlpParams,
    mask: &EmbeddingMask,
    obs: &[f64],
    osc: (f64, f64),
    cmd: ControlCommand,
) -> Result<Vec<f64>> {
    let n = mask.n_joints;
    if obs.len() != n {
        return Err(NcapError::dim(n, obs.len(), "masked MLP observation"));
    }
    let mut h: Vec<f64> = obs.to_vec();
    h.extend([osc.0, osc.1, cmd.turn_right, cmd.turn_left]);
    let mut next = Vec::new();
    let (last, hidden) = effective.layers.split_last().expect("embedding has layers");
    let gate = 1.0 - cmd.speed;
    for (k, layer) in hidden.iter().enumerate() {
        layer.affine(&h, &mut next);
        if k == B_LAYER {
            for (z, g) in next.iter_mut().zip(&mask.speed_overlay) {
                *z += g * gate;
            }
        }
        relu_in_place(&mut next);
        std::mem::swap(&mut h, &mut next);
    }
    output_stage(OutputStage::MuscleDifference, last, &mut h, &mut next);
    Ok(next)
}

/// Free-standing dense MLP policy on joint positions.
#[derive(Debug, Clone)]
pub struct MlpPolicy {
    pub config: MlpConfig,
    pub params: MlpParams,
}

impl MlpPolicy {
    pub fn new(config: MlpConfig, params: MlpParams) -> Result<Self> {
        config.validate()?;
        params.check_shape(&config)?;
        if config.input_dim != config.output_dim {
            return Err(NcapError::Config(format!(
                "baseline MLP must read N joint positions and emit N actions, got {} -> {}",
                config.input_dim, config.output_dim
            )));
        }
        Ok(Self { config, params })
    }

    pub fn initialized(n_joints: usize, hidden_dims: &[usize], seed: u64) -> Result<Self> {
        let cfg = MlpConfig::baseline(n_joints, hidden_dims);
        cfg.validate()?;
        let params = MlpParams::he_uniform(&cfg, seed);
        Self::new(cfg, params)
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: self.params.with_flat(flat)?,
        })
    }
}

impl Policy for MlpPolicy {
    fn n_joints(&self) -> usize {
        self.config.output_dim
    }
    fn reset(&mut self) {}
    fn act(&mut self, obs: &[f64], _cmd: ControlCommand) -> Result<Vec<f64>> {
        mlp_forward(&self.params, &self.config, obs, &[])
    }
}

/// Masked embedding network driven by its own oscillator clock. With the
/// circuit mask it reproduces [`NcapPolicy`]; with [`EmbeddingMask::dense`]
/// it is the densified ablation.
#[derive(Debug, Clone)]
pub struct MaskedMlpPolicy {
    pub params: MlpParams,
    pub mask: EmbeddingMask,
    pub oscillator: OscillatorConfig,
    pub timestep: u64,
    effective: MlpParams,
    last_hidden: Vec<Vec<f64>>,
}

impl MaskedMlpPolicy {
    pub fn new(params: MlpParams, mask: EmbeddingMask, oscillator: OscillatorConfig) -> Result<Self> {
        oscillator.validate()?;
        let effective = mask.apply(&params)?;
        Ok(Self {
            params,
            mask,
            oscillator,
            timestep: 0,
            effective,
            last_hidden: Vec::new(),
        })
    }

    /// Dense embedding-shaped network with fan-in scaled initialization.
    pub fn dense(n_joints: usize, seed: u64) -> Result<Self> {
        let mask = EmbeddingMask::dense(n_joints);
        let params = MlpParams::he_uniform(&mask.config(), seed);
        Self::new(params, mask, OscillatorConfig::default())
    }

    pub fn trainable_flat(&self) -> Vec<f64> {
        self.mask.trainable_flat(&self.params)
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let params = self.mask.with_trainable_flat(&self.params, flat)?;
        Self::new(params, self.mask.clone(), self.oscillator)
    }
}

impl Policy for MaskedMlpPolicy {
    fn n_joints(&self) -> usize {
        self.mask.n_joints
    }
    fn reset(&mut self) {
        self.timestep = 0;
        self.last_hidden.clear();
    }
    fn act(&mut self, obs: &[f64], cmd: ControlCommand) -> Result<Vec<f64>> {
        let osc = self.oscillator.output(self.timestep)?;
        self.timestep += 1;
        masked_forward_effective(&self.effective, &self.mask, obs, osc, cmd)
    }
    fn activations(&self) -> Option<BTreeMap<String, f64>> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ncap::{init_params, NcapFlags};
    use proptest::prelude::*;

    #[test]
    fn parameter_count_examples() {
        assert_eq!(count_mlp_parameters(&MlpConfig::baseline(5, &[2, 2])), 33);
        assert_eq!(count_mlp_parameters(&MlpConfig::baseline(5, &[12, 10, 10])), 367);
        assert_eq!(count_mlp_parameters(&MlpConfig::baseline(1, &[])), 2);
    }

    #[test]
    fn parameter_count_matches_allocation() {
        for hidden in [vec![], vec![3], vec![256, 256], vec![12, 10, 10]] {
            let cfg = MlpConfig::baseline(5, &hidden);
            assert_eq!(MlpParams::zeros(&cfg).num_scalars(), count_mlp_parameters(&cfg));
            assert_eq!(MlpParams::zeros(&cfg).to_flat().len(), count_mlp_parameters(&cfg));
        }
    }

    #[test]
    fn zero_params_give_zero_action() {
        let cfg = MlpConfig::baseline(5, &[16, 16]);
        let p = MlpParams::zeros(&cfg);
        assert_eq!(mlp_forward(&p, &cfg, &[0.3, -0.2, 0.9, 0.0, 1.0], &[]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn one_by_one_network_by_hand() {
        // 1 -> 1 -> 1: h = relu(2 x + 0.1), y = tanh(-1.5 h + 0.2)
        let cfg = MlpConfig::baseline(1, &[1]);
        let p = MlpParams {
            layers: vec![
                Dense { rows: 1, cols: 1, weight: vec![2.0], bias: vec![0.1] },
                Dense { rows: 1, cols: 1, weight: vec![-1.5], bias: vec![0.2] },
            ],
        };
        let y = mlp_forward(&p, &cfg, &[0.5], &[]).unwrap()[0];
        assert!((y - (-1.45f64).tanh()).abs() < 1e-15);
        let y = mlp_forward(&p, &cfg, &[-0.5], &[]).unwrap()[0];
        assert!((y - 0.2f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let cfg = MlpConfig::baseline(3, &[4]);
        let p = MlpParams::zeros(&cfg);
        assert!(mlp_forward(&p, &cfg, &[0.0; 2], &[]).is_err());
        let other = MlpConfig::baseline(3, &[5]);
        assert!(mlp_forward(&p, &other, &[0.0; 3], &[]).is_err());
        assert!(MlpConfig::baseline(3, &[0]).validate().is_err());
    }

    #[test]
    fn embedding_dims() {
        assert_eq!(build_embedding_mask(5).unwrap().hidden_dims(), vec![12, 10, 10]);
        assert_eq!(build_embedding_mask(2).unwrap().hidden_dims(), vec![6, 4, 4]);
        assert!(build_embedding_mask(1).is_err());
    }

    #[test]
    fn embedding_live_counts() {
        let unshared = NcapFlags { share_weights: false, ..NcapFlags::default() };
        for n in 2..=8 {
            let mask = build_embedding_mask(n).unwrap();
            assert_eq!(mask.trainable_count(), crate::ncap::count_parameters(n, unshared));
            // Fixed wiring: rectified inputs, oscillator and turn pass-throughs,
            // the two turn synapses and the antagonistic output pairs.
            let fixed = 2 * (n - 1) + 4 + 2 + 2 * n;
            assert_eq!(mask.live_count(), mask.trainable_count() + fixed);
        }
        assert_eq!(build_embedding_mask(5).unwrap().live_count(), 30 + 24);
    }

    #[test]
    fn unit_circuit_embeds_exactly() {
        let flags = NcapFlags { share_weights: false, ..NcapFlags::default() };
        let mut policy = NcapPolicy::initialized(5, flags, 0).unwrap();
        let (params, mask) = embed_ncap(&policy).unwrap();
        let y = masked_mlp_forward(&params, &mask, &[0.0; 5], (1.0, 0.0), ControlCommand::swim()).unwrap();
        assert_eq!(y, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(y, policy.forward(&[0.0; 5], ControlCommand::swim()).unwrap());
    }

    #[test]
    fn trainable_flat_round_trip() {
        let flags = NcapFlags { share_weights: false, sign_constraints: false, unit_init: false };
        let policy = NcapPolicy::new(init_params(5, flags, 4).unwrap(), OscillatorConfig::default(), flags).unwrap();
        let (params, mask) = embed_ncap(&policy).unwrap();
        let flat = mask.trainable_flat(&params);
        assert_eq!(flat.len(), 30);
        let back = mask.with_trainable_flat(&params, &flat).unwrap();
        assert_eq!(mask.apply(&back).unwrap(), mask.apply(&params).unwrap());
        assert!(mask.with_trainable_flat(&params, &flat[1..]).is_err());
    }

    #[test]
    fn all_ones_mask_is_plain_mlp() {
        let mask = EmbeddingMask::dense(4);
        let cfg = mask.config();
        let params = MlpParams::he_uniform(&cfg, 9);
        let obs = [0.1, -0.7, 0.4, 0.9];
        let cmd = ControlCommand::new(0.3, 0.6, 0.2);
        let y = masked_mlp_forward(&params, &mask, &obs, (0.0, 1.0), cmd).unwrap();
        let z = mlp_forward(&params, &cfg, &obs, &[0.0, 1.0, 0.6, 0.2]).unwrap();
        assert_eq!(y, z);
        assert_eq!(mask.trainable_count(), count_mlp_parameters(&cfg));
    }

    #[test]
    fn dense_policy_flat_covers_everything() {
        let p = MaskedMlpPolicy::dense(5, 1).unwrap();
        assert_eq!(p.trainable_flat().len(), count_mlp_parameters(&MlpConfig::embedding(5)));
        assert_eq!(count_mlp_parameters(&MlpConfig::embedding(5)), 415);
    }

    proptest! {
        #[test]
        fn masked_is_a_subset_of_dense(seed in 0u64..1000, q in prop::collection::vec(-1.0f64..=1.0, 3)) {
            // Any masked network is reproduced by the dense network with the
            // effective weights injected.
            let flags = NcapFlags { share_weights: false, sign_constraints: false, unit_init: false };
            let policy = NcapPolicy::new(init_params(3, flags, seed).unwrap(), OscillatorConfig::default(), flags).unwrap();
            let (params, mask) = embed_ncap(&policy).unwrap();
            let injected = mask.apply(&params).unwrap();
            let dense = EmbeddingMask::dense(3);
            let cmd = ControlCommand::swim();
            let a = masked_mlp_forward(&params, &mask, &q, (1.0, 0.0), cmd).unwrap();
            let b = masked_mlp_forward(&injected, &dense, &q, (1.0, 0.0), cmd).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn tanh_outputs_are_open_interval(seed in 0u64..500, obs in prop::collection::vec(-1.0f64..=1.0, 5)) {
            let p = MlpPolicy::initialized(5, &[8, 8], seed).unwrap();
            let y = mlp_forward(&p.params, &p.config, &obs, &[]).unwrap();
            prop_assert!(y.iter().all(|v| v.abs() < 1.0));
        }
    }
}
