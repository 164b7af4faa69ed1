//! Gated minimum residual stacking units and the stacks built from them.
//!
//! A unit maps `z` to `z + alpha * f(z) + beta`, where `f` is a small
//! feature mapper and `alpha`, `beta` are learnable gates. Units compose in
//! two fashions:
//!
//! * **flow**: `z_{i+1} = z_i + alpha_i f_i(z_i) + beta_i`, `i = 0..L`;
//! * **U-shaped**: a read-in (encoder) pass without skip,
//!   `s_{i+1} = alpha^l_i f^l_i(s_i) + beta^l_i`, followed by a read-out
//!   (decoder) pass that pairs each encoder state with the decoder state one
//!   level deeper, `d_i = s_i + alpha^r_i f^r_i(d_{i+1}) + beta^r_i`, starting
//!   from `d_{L-1} = s_{L-1}`. A U-shaped stack of depth `L` therefore owns
//!   `L - 1` read-in units and `L - 1` read-out units.
//!
//! Every stack is also available under the five residual [`Variant`]s.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Seed;
use crate::tensor::Tensor;

/// Residual update rule. With skip `x`, mapper input `u` and gates `a`, `b`:
///
/// | variant | update |
/// |---|---|
/// | `V0` | `x + a f(u) + b` |
/// | `V1` | `x + f(a u + b)` |
/// | `V2` | `a x + f(u) + b` |
/// | `V3` | `x + f(u)` |
/// | `V4` | `x + a f(u)` |
///
/// For flow units `x = u = z`. Read-in units of a U-shaped stack have no
/// skip, so `x` is dropped from the formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V0,
    V1,
    V2,
    V3,
    V4,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::V0, Variant::V1, Variant::V2, Variant::V3, Variant::V4];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::V0 => "v0",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v0" => Ok(Variant::V0),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "v4" => Ok(Variant::V4),
            _ => Err(Error::invalid(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fashion {
    Flow,
    #[serde(rename = "u")]
    UShaped,
}

/// Which gate pair a [`GateParams`] is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Unified,
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// One scalar gate per unit, shape `[1]`.
    Scalar,
    /// One gate per channel, shape `[width]`.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapperKind {
    /// `f(u) = u A + b`.
    Affine,
    /// `f(u) = act(u W1 + b1) W2 + b2`.
    Mlp2,
    /// `f(u) = a u` with a single learnable scalar `a`.
    LinearScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

/// How the time embedding `e` enters a mapper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeConditioning {
    None,
    /// Concatenated to the mapper input (realised as an extra weight block
    /// `e E` added to the first pre-activation).
    Concat,
    /// Feature-wise modulation of the first pre-activation:
    /// `h <- h * (1 + e G) + e H`.
    Film,
}

/// What the stack output estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Score,
    Epsilon,
}

/// Architecture descriptor; stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fashion: Fashion,
    pub depth: usize,
    /// State width (data dimensionality).
    pub width: usize,
    /// Hidden width of `mlp2` mappers.
    pub hidden: usize,
    pub mapper: MapperKind,
    pub activation: Activation,
    pub time_cond: TimeConditioning,
    pub embed_dim: usize,
    /// Multiplier on `t` inside the sinusoidal embedding.
    pub time_scale: f64,
    pub gates: GateMode,
    pub variant: Variant,
    pub alpha_init: f64,
    pub beta_init: f64,
    /// Multiplier on the initial weights of each mapper's output layer.
    pub init_scale: f64,
    /// Initial coefficient of `linear-scalar` mappers.
    pub linear_init: f64,
    pub output: OutputKind,
    /// Number of classes for class-conditional models, 0 for unconditional.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fashion: Fashion::Flow,
            depth: 8,
            width: 2,
            hidden: 64,
            mapper: MapperKind::Mlp2,
            activation: Activation::Silu,
            time_cond: TimeConditioning::Concat,
            embed_dim: 32,
            time_scale: TIME_SCALE,
            gates: GateMode::Scalar,
            variant: Variant::V0,
            alpha_init: 1.0,
            beta_init: 0.0,
            init_scale: 1.0,
            linear_init: 0.0,
            output: OutputKind::Score,
            num_classes: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("depth must be positive"));
        }
        if self.fashion == Fashion::UShaped && self.depth < 2 {
            return Err(Error::invalid(format!(
                "U-shaped stacks need depth >= 2, got {}",
                self.depth
            )));
        }
        if self.width == 0 || self.hidden == 0 {
            return Err(Error::invalid("width and hidden must be positive"));
        }
        if self.time_cond != TimeConditioning::None && (self.embed_dim < 2 || self.embed_dim % 2 != 0) {
            return Err(Error::invalid("time embedding dimension must be even and >= 2"));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(Error::invalid("time_scale must be positive and finite"));
        }
        if self.num_classes > 0 && self.time_cond == TimeConditioning::None {
            return Err(Error::invalid("class conditioning needs a time embedding to attach to"));
        }
        Ok(())
    }

    /// Number of gated units the stack owns.
    pub fn num_units(&self) -> usize {
        match self.fashion {
            Fashion::Flow => self.depth,
            Fashion::UShaped => 2 * (self.depth - 1),
        }
    }
}

/// Gate pair of one unit.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub branch: Branch,
}

impl GateParams {
    pub fn scalar(alpha: f64, beta: f64) -> Self {
        GateParams {
            alpha: Tensor::scalar(alpha),
            beta: Tensor::scalar(beta),
            branch: Branch::Unified,
        }
    }

    fn check(&self, width: usize) -> Result<()> {
        let ok = |t: &Tensor| t.rank() == 1 && (t.numel() == 1 || t.numel() == width);
        if self.alpha.shape() != self.beta.shape() || !ok(&self.alpha) {
            return Err(Error::ShapeMismatch {
                op: "gates",
                lhs: self.alpha.shape().to_vec(),
                rhs: self.beta.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Applies one residual update on the tape. `skip` is `None` for read-in
/// units, which carry no identity path.
pub fn gated_residual(
    tape: &mut Tape,
    variant: Variant,
    skip: Option<Var>,
    input: Var,
    alpha: Var,
    beta: Var,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let with_skip = |tape: &mut Tape, v: Var| match skip {
        Some(x) => tape.add(x, v),
        None => Ok(v),
    };
    match variant {
        Variant::V0 => {
            let fu = f(tape, input)?;
            let scaled = tape.mul(alpha, fu)?;
            let r = with_skip(tape, scaled)?;
            tape.add(r, beta)
        }
        Variant::V1 => {
            let au = tape.mul(alpha, input)?;
            let shifted = tape.add(au, beta)?;
            let fu = f(tape, shifted)?;
            with_skip(tape, fu)
        }
        Variant::V2 => {
            let fu = f(tape, input)?;
            let r = match skip {
                Some(x) => {
                    let ax = tape.mul(alpha, x)?;
                    tape.add(ax, fu)?
                }
                None => fu,
            };
            tape.add(r, beta)
        }
        Variant::V3 => {
            let fu = f(tape, input)?;
            with_skip(tape, fu)
        }
        Variant::V4 => {
            let fu = f(tape, input)?;
            let scaled = tape.mul(alpha, fu)?;
            with_skip(tape, scaled)
        }
    }
}

fn as_batch(z: &Tensor) -> Result<Tensor> {
    match z.rank() {
        1 => z.clone().reshape(vec![1, z.numel()]),
        2 => Ok(z.clone()),
        _ => Err(Error::invalid(format!("state must be [width] or [batch, width], got {:?}", z.shape()))),
    }
}

/// Value-level residual update under `variant`, with `x = u = z`.
pub fn variant_forward(
    z: &Tensor,
    gates: &GateParams,
    variant: Variant,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Tensor> {
    gates.check(z.cols())?;
    let mut tape = Tape::new();
    let zv = tape.constant(as_batch(z)?);
    let a = tape.constant(gates.alpha.clone());
    let b = tape.constant(gates.beta.clone());
    let out = gated_residual(&mut tape, variant, Some(zv), zv, a, b, f)?;
    let out = tape.value(out).clone();
    if out.shape()[1] != z.cols() {
        return Err(Error::ShapeMismatch {
            op: "residual",
            lhs: z.shape().to_vec(),
            rhs: out.shape().to_vec(),
        });
    }
    out.reshape(z.shape().to_vec())
}

/// `z + alpha * f(z) + beta`.
///
/// ```
/// use nrdm::residual::{mrs_forward, GateParams};
/// use nrdm::Tensor;
///
/// let z = Tensor::from_vec(vec![0.5]);
/// let out = mrs_forward(&z, &GateParams::scalar(2.0, 0.1), |t, u| t.square(u)).unwrap();
/// assert!((out.item() - 1.1).abs() < 1e-15);
/// ```
pub fn mrs_forward(z: &Tensor, gates: &GateParams, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    variant_forward(z, gates, Variant::V0, f)
}

/// Right-hand side of the continuous-depth gated residual dynamics,
/// `alpha(t) * F(z, t) + beta(t)`.
pub fn gating_residual_ode_rhs(
    z: &Tensor,
    t: f64,
    alpha: &Tensor,
    beta: &Tensor,
    field: impl FnOnce(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    let f = field(z, t)?;
    f.mul(alpha)?.add(beta)
}

/// Default multiplier applied to `t` before the sinusoidal embedding.
pub const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal embedding of `scale * t` with `dim` features: `dim / 2` sines
/// followed by `dim / 2` cosines at geometric frequencies from 1 to 1e-4.
pub fn time_embedding(ts: &[f64], dim: usize, scale: f64) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let pos = scale * t;
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let phases: Vec<f64> = freqs.map(|fr| pos * fr).collect();
        data.extend(phases.iter().map(|p| p.sin()));
        data.extend(phases.iter().map(|p| p.cos()));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("embedding shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    /// Mapper weights.
    Theta,
    /// Gates `alpha`, `beta`.
    Gate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub role: ParamRole,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
struct MapperSlots {
    main_w: usize,
    main_b: Option<usize>,
    out_w: Option<usize>,
    out_b: Option<usize>,
    embed_w: Option<usize>,
    film_scale: Option<usize>,
    film_shift: Option<usize>,
}

#[derive(Clone, Debug)]
struct UnitSlots {
    mapper: MapperSlots,
    alpha: usize,
    beta: usize,
    branch: Branch,
}

/// Parameters of a model bound as leaves on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Tape handles for every intermediate state of one forward pass.
#[derive(Clone, Debug)]
pub struct StackStates {
    pub output: Var,
    /// Flow: `z_0..=z_L`. U-shaped: encoder states `s_0..=s_{L-1}`.
    pub states: Vec<Var>,
    /// U-shaped decoder states `d_0..=d_{L-1}`; empty for flow stacks.
    pub decoder: Vec<Var>,
    /// Input of each unit's mapper, indexed like the units.
    pub unit_inputs: Vec<Var>,
}

/// A depth-`L` composition of gated residual units: the score network.
#[derive(Clone, Debug)]
pub struct StackModel {
    config: ModelConfig,
    params: Vec<Tensor>,
    info: Vec<ParamInfo>,
    units: Vec<UnitSlots>,
    class_table: Option<usize>,
}

struct Builder<'a, R: Rng> {
    rng: &'a mut R,
    params: Vec<Tensor>,
    info: Vec<ParamInfo>,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, role: ParamRole, t: Tensor) -> usize {
        self.params.push(t);
        self.info.push(ParamInfo {
            name,
            role,
            frozen: false,
        });
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("param shape");
        self.push(name, ParamRole::Theta, t)
    }
}

impl StackModel {
    /// Builds a model with seeded initial weights and gates at
    /// `(alpha_init, beta_init)`. Variant `V3` pins the gates at `(1, 0)` and
    /// `V4` pins `beta` at 0; pinned gates are frozen.
    pub fn new(config: ModelConfig, seed: Seed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.stream(0x6d6f_64656c);
        let mut b = Builder {
            rng: &mut rng,
            params: Vec::new(),
            info: Vec::new(),
        };
        let w = config.width;
        let gate_shape = match config.gates {
            GateMode::Scalar => vec![1],
            GateMode::Channel => vec![w],
        };
        let d = config.embed_dim;
        let mut units = Vec::new();
        for u in 0..config.num_units() {
            let branch = match config.fashion {
                Fashion::Flow => Branch::Unified,
                Fashion::UShaped if u < config.depth - 1 => Branch::Left,
                Fashion::UShaped => Branch::Right,
            };
            let p = |s: &str| format!("unit{u}.{s}");
            let inner = match config.mapper {
                MapperKind::Mlp2 => config.hidden,
                _ => w,
            };
            let mapper = match config.mapper {
                MapperKind::LinearScalar => {
                    let a = b.push(p("a"), ParamRole::Theta, Tensor::scalar(config.linear_init));
                    MapperSlots {
                        main_w: a,
                        main_b: None,
                        out_w: None,
                        out_b: None,
                        embed_w: None,
                        film_scale: None,
                        film_shift: None,
                    }
                }
                kind => {
                    let fan_in = w + if config.time_cond == TimeConditioning::Concat { d } else { 0 };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let main_scale = if kind == MapperKind::Affine { config.init_scale } else { 1.0 };
                    let main_w = b.uniform(p("w1"), &[w, inner], bound * main_scale);
                    let main_b = Some(b.uniform(p("b1"), &[inner], bound * main_scale));
                    let embed_w = (config.time_cond == TimeConditioning::Concat)
                        .then(|| b.uniform(p("w1_embed"), &[d, inner], bound * main_scale));
                    let (film_scale, film_shift) = if config.time_cond == TimeConditioning::Film {
                        let fb = 1.0 / (d as f64).sqrt();
                        (
                            Some(b.uniform(p("film_scale"), &[d, inner], 0.1 * fb)),
                            Some(b.uniform(p("film_shift"), &[d, inner], 0.1 * fb)),
                        )
                    } else {
                        (None, None)
                    };
                    let (out_w, out_b) = if kind == MapperKind::Mlp2 {
                        let ob = config.init_scale / (inner as f64).sqrt();
                        (Some(b.uniform(p("w2"), &[inner, w], ob)), Some(b.uniform(p("b2"), &[w], ob)))
                    } else {
                        (None, None)
                    };
                    MapperSlots {
                        main_w,
                        main_b,
                        out_w,
                        out_b,
                        embed_w,
                        film_scale,
                        film_shift,
                    }
                }
            };
            let (a0, b0) = match config.variant {
                Variant::V3 => (1.0, 0.0),
                Variant::V4 => (config.alpha_init, 0.0),
                _ => (config.alpha_init, config.beta_init),
            };
            let alpha = b.push(p("alpha"), ParamRole::Gate, Tensor::full(&gate_shape, a0));
            let beta = b.push(p("beta"), ParamRole::Gate, Tensor::full(&gate_shape, b0));
            match config.variant {
                Variant::V3 => {
                    b.info[alpha].frozen = true;
                    b.info[beta].frozen = true;
                }
                Variant::V4 => b.info[beta].frozen = true,
                _ => {}
            }
            units.push(UnitSlots {
                mapper,
                alpha,
                beta,
                branch,
            });
        }
        let class_table = (config.num_classes > 0).then(|| {
            let bound = 1.0 / (d as f64).sqrt();
            b.uniform("class_embed".into(), &[config.num_classes, d], bound)
        });
        let Builder { params, info, .. } = b;
        Ok(StackModel {
            config,
            params,
            info,
            units,
            class_table,
        })
    }

    /// Rebuilds a model from stored parameters (e.g. from a checkpoint).
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>, info: Vec<ParamInfo>) -> Result<Self> {
        let mut model = StackModel::new(config, Seed(0))?;
        if params.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != model.params[i].shape() || info[i].name != model.info[i].name {
                return Err(Error::invalid(format!("parameter {} does not match the architecture", info[i].name)));
            }
        }
        model.params = params;
        model.info = info;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn gates(&self, unit: usize) -> GateParams {
        let u = &self.units[unit];
        GateParams {
            alpha: self.params[u.alpha].clone(),
            beta: self.params[u.beta].clone(),
            branch: u.branch,
        }
    }

    /// Parameter indices of a unit's `(alpha, beta)`.
    pub fn gate_indices(&self, unit: usize) -> (usize, usize) {
        (self.units[unit].alpha, self.units[unit].beta)
    }

    /// Overwrites a unit's gates; values must match the gate shape.
    pub fn set_gates(&mut self, unit: usize, alpha: f64, beta: f64) {
        let u = &self.units[unit];
        let shape = self.params[u.alpha].shape().to_vec();
        self.params[u.alpha] = Tensor::full(&shape, alpha);
        self.params[u.beta] = Tensor::full(&shape, beta);
    }

    /// Sets every gate to `(alpha, beta)` and marks all gates frozen.
    pub fn freeze_gates_at(&mut self, alpha: f64, beta: f64) {
        for u in 0..self.units.len() {
            self.set_gates(u, alpha, beta);
        }
        self.set_frozen(ParamRole::Gate, true);
    }

    pub fn set_frozen(&mut self, role: ParamRole, frozen: bool) {
        let pinned = self.pinned_gates();
        for (i, info) in self.info.iter_mut().enumerate() {
            if info.role == role {
                info.frozen = frozen || pinned.contains(&i);
            }
        }
    }

    /// Restores frozen flags previously read from [`param_info`](Self::param_info).
    pub fn restore_frozen(&mut self, frozen: &[bool]) {
        for (info, &f) in self.info.iter_mut().zip(frozen) {
            info.frozen = f;
        }
    }

    fn pinned_gates(&self) -> Vec<usize> {
        match self.config.variant {
            Variant::V3 => self.units.iter().flat_map(|u| [u.alpha, u.beta]).collect(),
            Variant::V4 => self.units.iter().map(|u| u.beta).collect(),
            _ => Vec::new(),
        }
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.info.iter().map(|i| !i.frozen).collect()
    }

    /// SHA-256 over the raw bits of every mapper weight tensor.
    pub fn theta_digest(&self) -> String {
        let mut h = Sha256::new();
        for (p, info) in self.params.iter().zip(&self.info) {
            if info.role == ParamRole::Theta {
                h.update(info.name.as_bytes());
                for v in p.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    /// Gradients of all parameters, in parameter order.
    pub fn collect_grads(&self, grads: &Gradients, bound: &Bound) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.wrt(v)).collect()
    }

    /// Time (and class) embedding rows for a batch; `None` when unconditioned.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, ts: &[f64], labels: Option<&[usize]>) -> Result<Option<Var>> {
        if self.config.time_cond == TimeConditioning::None {
            return Ok(None);
        }
        let e = tape.constant(time_embedding(ts, self.config.embed_dim, self.config.time_scale));
        match (self.class_table, labels) {
            (Some(table), Some(labels)) => {
                let k = self.config.num_classes;
                if labels.len() != ts.len() {
                    return Err(Error::invalid("one label per row required"));
                }
                let mut onehot = vec![0.0; labels.len() * k];
                for (r, &l) in labels.iter().enumerate() {
                    if l >= k {
                        return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
                    }
                    onehot[r * k + l] = 1.0;
                }
                let oh = tape.constant(Tensor::new(vec![labels.len(), k], onehot)?);
                let ce = tape.matmul(oh, bound.vars[table])?;
                Ok(Some(tape.add(e, ce)?))
            }
            _ => Ok(Some(e)),
        }
    }

    /// Applies the feature mapper of `unit` to `u` (`[batch, width]`).
    pub fn mapper_apply(&self, tape: &mut Tape, bound: &Bound, unit: usize, u: Var, emb: Option<Var>) -> Result<Var> {
        let s = &self.units[unit].mapper;
        let v = |i: usize| bound.vars[i];
        let width = tape.value(u).cols();
        if width != self.config.width {
            return Err(Error::ShapeMismatch {
                op: "mapper",
                lhs: tape.value(u).shape().to_vec(),
                rhs: vec![self.config.width],
            });
        }
        if self.config.mapper == MapperKind::LinearScalar {
            return tape.mul(u, v(s.main_w));
        }
        let mut h = tape.affine(u, v(s.main_w), v(s.main_b.expect("bias")))?;
        if let Some(e) = emb {
            if let Some(ew) = s.embed_w {
                let he = tape.matmul(e, v(ew))?;
                h = tape.add(h, he)?;
            }
            if let (Some(g), Some(sh)) = (s.film_scale, s.film_shift) {
                let gain = tape.matmul(e, v(g))?;
                let h_gain = tape.mul(h, gain)?;
                h = tape.add(h, h_gain)?;
                let shift = tape.matmul(e, v(sh))?;
                h = tape.add(h, shift)?;
            }
        }
        match self.config.mapper {
            MapperKind::Affine => Ok(h),
            _ => {
                let a = match self.config.activation {
                    Activation::Tanh => tape.tanh(h)?,
                    Activation::Silu => tape.silu(h)?,
                };
                tape.affine(a, v(s.out_w.expect("w2")), v(s.out_b.expect("b2")))
            }
        }
    }

    /// One gated residual update of `unit`.
    pub fn unit_apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        unit: usize,
        skip: Option<Var>,
        input: Var,
        emb: Option<Var>,
    ) -> Result<Var> {
        let slots = &self.units[unit];
        let (a, b) = (bound.vars[slots.alpha], bound.vars[slots.beta]);
        gated_residual(tape, self.config.variant, skip, input, a, b, |tape, x| {
            self.mapper_apply(tape, bound, unit, x, emb)
        })
    }

    /// Full forward pass of the stack on the tape; `z` is `[batch, width]`.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, z: Var, emb: Option<Var>) -> Result<StackStates> {
        let l = self.config.depth;
        match self.config.fashion {
            Fashion::Flow => {
                let mut states = vec![z];
                for i in 0..l {
                    let cur = states[i];
                    let next = self.unit_apply(tape, bound, i, Some(cur), cur, emb)?;
                    states.push(next);
                }
                Ok(StackStates {
                    output: states[l],
                    unit_inputs: states[..l].to_vec(),
                    states,
                    decoder: Vec::new(),
                })
            }
            Fashion::UShaped => {
                let mut enc = vec![z];
                for i in 0..l - 1 {
                    let cur = enc[i];
                    let next = self.unit_apply(tape, bound, i, None, cur, emb)?;
                    enc.push(next);
                }
                let mut dec = vec![enc[l - 1]; l];
                for i in (0..l - 1).rev() {
                    let deeper = dec[i + 1];
                    dec[i] = self.unit_apply(tape, bound, l - 1 + i, Some(enc[i]), deeper, emb)?;
                }
                let mut unit_inputs = enc[..l - 1].to_vec();
                unit_inputs.extend_from_slice(&dec[1..]);
                Ok(StackStates {
                    output: dec[0],
                    states: enc,
                    decoder: dec,
                    unit_inputs,
                })
            }
        }
    }

    fn run(&self, z0: &Tensor, ts: &[f64], labels: Option<&[usize]>) -> Result<(Tape, StackStates)> {
        let z = as_batch(z0)?;
        // a single shared time embeds as one row and broadcasts
        let ts = if ts.len() == 1 && labels.is_none() {
            ts.to_vec()
        } else {
            broadcast_times(ts, z.rows())?
        };
        let mut tape = Tape::new();
        let bound = Bound {
            vars: self.params.iter().map(|p| tape.constant(p.clone())).collect(),
        };
        let zv = tape.constant(z);
        let emb = self.embed(&mut tape, &bound, &ts, labels)?;
        let states = self.forward_tape(&mut tape, &bound, zv, emb)?;
        Ok((tape, states))
    }

    /// Evaluates the network `F(z, t)`; `ts` holds one time per row or a
    /// single shared time.
    pub fn forward(&self, z0: &Tensor, ts: &[f64]) -> Result<Tensor> {
        self.forward_labeled(z0, ts, None)
    }

    /// [`forward`](Self::forward) with one class label per row.
    pub fn forward_labeled(&self, z0: &Tensor, ts: &[f64], labels: Option<&[usize]>) -> Result<Tensor> {
        let (tape, st) = self.run(z0, ts, labels)?;
        tape.value(st.output).clone().reshape(z0.shape().to_vec())
    }

    /// Flow stack: final state and all `L + 1` states.
    pub fn flow_stack_forward(&self, z0: &Tensor, ts: &[f64]) -> Result<(Tensor, Vec<Tensor>)> {
        if self.config.fashion != Fashion::Flow {
            return Err(Error::invalid("flow_stack_forward on a U-shaped model"));
        }
        let (tape, st) = self.run(z0, ts, None)?;
        let states = st
            .states
            .iter()
            .map(|&v| tape.value(v).clone().reshape(z0.shape().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((states[states.len() - 1].clone(), states))
    }

    /// U-shaped stack: output `d_0`, encoder states and decoder states.
    pub fn u_stack_forward(&self, z0: &Tensor, ts: &[f64]) -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>)> {
        if self.config.fashion != Fashion::UShaped {
            return Err(Error::invalid("u_stack_forward on a flow model"));
        }
        let (tape, st) = self.run(z0, ts, None)?;
        let grab = |vs: &[Var]| {
            vs.iter()
                .map(|&v| tape.value(v).clone().reshape(z0.shape().to_vec()))
                .collect::<Result<Vec<_>>>()
        };
        let enc = grab(&st.states)?;
        let dec = grab(&st.decoder)?;
        Ok((dec[0].clone(), enc, dec))
    }
}

pub(crate) fn broadcast_times(ts: &[f64], rows: usize) -> Result<Vec<f64>> {
    match ts.len() {
        n if n == rows => Ok(ts.to_vec()),
        1 => Ok(vec![ts[0]; rows]),
        n => Err(Error::invalid(format!("{n} times for {rows} rows"))),
    }
}
