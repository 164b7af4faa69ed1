//! Losses, optimizers, EMA, training loops and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dynamics::{analytic_score_t, Schedule, ScoreOracle};
use crate::error::{Error, Result};
use crate::residual::{Bound, ModelConfig, OutputKind, ParamInfo, ParamRole, StackModel};
use crate::rng::{normal_vec, rademacher_vec, Seed};
use crate::sensitivity::{sensitivity_report, SensitivityReport};
use crate::tensor::Tensor;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64
}

/// Mean squared error between true and predicted noise.
///
/// ```
/// use nrdm::training::loss_simple;
/// use nrdm::Tensor;
///
/// let l = loss_simple(&Tensor::from_vec(vec![1.0, 0.0]), &Tensor::from_vec(vec![0.0, 0.0])).unwrap();
/// assert_eq!(l, 0.5);
/// ```
pub fn loss_simple(eps: &Tensor, eps_pred: &Tensor) -> Result<f64> {
    check_same("loss_simple", eps, eps_pred)?;
    Ok(mse(eps, eps_pred))
}

/// Mean squared error between network output and score target.
pub fn loss_score_matching(output: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("loss_score_matching", output, target)?;
    Ok(mse(output, target))
}

/// `mean((a - b)^2)` on the tape.
pub fn mse_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// How the diagonal of a mapper Jacobian is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JacobianMode {
    /// Exact for widths up to 8, Hutchinson otherwise.
    Auto,
    /// One vector-Jacobian product per channel.
    Exact,
    /// One Rademacher probe `v`, estimate `v * (v^T J)`.
    Hutchinson,
}

/// Diagonal of `df/du` for every row of `input`, as `[batch, width]`.
/// The result carries no gradient.
pub fn mapper_jacobian_diag(
    model: &StackModel,
    unit: usize,
    input: &Tensor,
    emb: Option<&Tensor>,
    mode: JacobianMode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let w = input.cols();
    let mut tape = Tape::new();
    let bound = Bound {
        vars: model.params().iter().map(|p| tape.constant(p.clone())).collect(),
    };
    let u = tape.leaf(input.clone());
    let e = emb.map(|e| tape.constant(e.clone()));
    let out = model.mapper_apply(&mut tape, &bound, unit, u, e)?;
    let pull = |tape: &mut Tape, probe: Tensor| -> Result<Tensor> {
        let p = tape.constant(probe);
        let prod = tape.mul(out, p)?;
        let l = tape.sum(prod)?;
        Ok(tape.backward(l)?.wrt(u))
    };
    let exact = match mode {
        JacobianMode::Auto => w <= 8,
        JacobianMode::Exact => true,
        JacobianMode::Hutchinson => false,
    };
    if exact {
        let mut diag = Tensor::zeros(input.shape());
        for j in 0..w {
            let probe = Tensor::new(input.shape().to_vec(), (0..input.numel()).map(|i| f64::from(i % w == j)).collect())?;
            let g = pull(&mut tape, probe)?;
            for (i, d) in diag.data_mut().iter_mut().enumerate() {
                if i % w == j {
                    *d = g.data()[i];
                }
            }
        }
        Ok(diag)
    } else {
        let v = Tensor::new(input.shape().to_vec(), rademacher_vec(rng, input.numel()))?;
        let g = pull(&mut tape, v.clone())?;
        g.mul(&v)
    }
}

/// `sum_units mean((alpha * J_diag - beta)^2)` on the tape, with the
/// Jacobian diagonals supplied as constants.
pub fn sensitivity_reg_tape(tape: &mut Tape, model: &StackModel, bound: &Bound, jdiags: &[Tensor]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (unit, j) in jdiags.iter().enumerate() {
        let (ai, bi) = model.gate_indices(unit);
        let jv = tape.constant(j.clone());
        let aj = tape.mul(bound.vars[ai], jv)?;
        let d = tape.sub(aj, bound.vars[bi])?;
        let sq = tape.square(d)?;
        let m = tape.mean(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::invalid("model has no units"))
}

/// Value of the sensitivity regularizer (without `gamma`) at the given
/// per-unit mapper inputs.
pub fn loss_sensitivity_reg(
    model: &StackModel,
    unit_inputs: &[Tensor],
    emb: Option<&Tensor>,
    mode: JacobianMode,
    seed: Seed,
) -> Result<f64> {
    let mut rng = seed.rng();
    let mut total = 0.0;
    for (unit, input) in unit_inputs.iter().enumerate() {
        let j = mapper_jacobian_diag(model, unit, input, emb, mode, &mut rng)?;
        let g = model.gates(unit);
        let r = j.mul(&g.alpha)?.sub(&g.beta)?;
        total += r.data().iter().map(|v| v * v).sum::<f64>() / r.numel() as f64;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimMethod {
    Sgd,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub method: OptimMethod,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            method: OptimMethod::Adamw,
            lr: 5e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(config: OptimConfig, params: &[Tensor]) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", config.lr)));
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Ok(OptimState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        })
    }
}

/// One optimizer update of the parameters whose `mask` entry is true.
pub fn optimizer_step(
    state: &mut OptimState,
    params: &mut [Tensor],
    grads: &[Tensor],
    info: &[ParamInfo],
    mask: &[bool],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != mask.len() {
        return Err(Error::invalid("parameters, gradients and mask must align"));
    }
    for (i, g) in grads.iter().enumerate() {
        if mask[i] && !g.is_finite() {
            let name = info.get(i).map_or_else(|| format!("#{i}"), |p| p.name.clone());
            return Err(Error::NonFiniteGradient(name));
        }
        check_same("optimizer", &params[i], g)?;
    }
    state.step += 1;
    let c = state.config.clone();
    for i in 0..params.len() {
        if !mask[i] {
            continue;
        }
        let g = grads[i].data();
        match c.method {
            OptimMethod::Sgd => {
                for (p, gv) in params[i].data_mut().iter_mut().zip(g) {
                    *p -= c.lr * (gv + c.weight_decay * *p);
                }
            }
            OptimMethod::Adamw => {
                let bc1 = 1.0 - c.beta1.powi(state.step as i32);
                let bc2 = 1.0 - c.beta2.powi(state.step as i32);
                let m = state.m[i].data_mut();
                let v = state.v[i].data_mut();
                for (k, p) in params[i].data_mut().iter_mut().enumerate() {
                    m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                    v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                    let mh = m[k] / bc1;
                    let vh = v[k] / bc2;
                    *p -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *p);
                }
            }
        }
    }
    Ok(())
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(decay: f64, params: &[Tensor]) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        Ok(EmaState {
            decay,
            shadow: params.to_vec(),
        })
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update(ema: &mut EmaState, params: &[Tensor]) -> Result<()> {
    if ema.shadow.len() != params.len() {
        return Err(Error::invalid("EMA shadow and parameters differ in count"));
    }
    for (s, p) in ema.shadow.iter_mut().zip(params) {
        check_same("ema", s, p)?;
        let d = ema.decay;
        for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = d * *sv + (1.0 - d) * pv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    ScoreMatching,
    EpsPrediction,
    SensitivityRegularized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreTarget {
    /// Exact perturbed score of a known mixture.
    AnalyticOracle,
    /// `-eps / sqrt(var(t))`.
    DenoisingEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimMethod,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub gamma: f64,
    pub objective: Objective,
    pub target: ScoreTarget,
    /// Training times are drawn uniformly from `[t_min, 1]`.
    pub t_min: f64,
    pub jacobian: JacobianMode,
    /// Emit a sensitivity report every this many steps (0 disables).
    pub report_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 128,
            lr: 5e-4,
            optimizer: OptimMethod::Adamw,
            weight_decay: 0.0,
            ema_decay: 0.999,
            gamma: 0.35,
            objective: Objective::SensitivityRegularized,
            target: ScoreTarget::AnalyticOracle,
            t_min: 1e-3,
            jacobian: JacobianMode::Auto,
            report_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.t_min) {
            return Err(Error::invalid("t_min must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            method: self.optimizer,
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..OptimConfig::default()
        }
    }

    fn uses_reg(&self) -> bool {
        self.objective == Objective::SensitivityRegularized && self.gamma > 0.0
    }
}

/// Where training batches come from.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    /// Fresh draws from a known mixture (labels are component indices).
    Oracle(&'a ScoreOracle),
    /// Rows of a fixed dataset, drawn with replacement.
    Samples { x: &'a Tensor, labels: Option<&'a [usize]> },
}

impl TrainData<'_> {
    fn batch(&self, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        match self {
            TrainData::Oracle(o) => o.sample(n, rng),
            TrainData::Samples { x, labels } => {
                let d = x.cols();
                let mut data = Vec::with_capacity(n * d);
                let mut ls = Vec::with_capacity(n);
                for _ in 0..n {
                    let r = rng.gen_range(0..x.rows());
                    data.extend_from_slice(x.row(r));
                    ls.push(labels.map_or(0, |l| l[r]));
                }
                Ok((Tensor::new(vec![n, d], data)?, ls))
            }
        }
    }

    fn oracle(&self) -> Option<&ScoreOracle> {
        match self {
            TrainData::Oracle(o) => Some(o),
            TrainData::Samples { .. } => None,
        }
    }
}

/// One row of the per-step metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub score_term: f64,
    pub gamma_term: f64,
    pub lr: f64,
    pub ema_decay: f64,
}

pub const LOG_HEADER: &str = "step,loss,score_term,gamma_term,lr,ema_decay";

/// Metric log as CSV (`{:e}` formatting round-trips every value exactly).
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, r.loss, r.score_term, r.gamma_term, r.lr, r.ema_decay
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub optim: OptimState,
    pub ema: EmaState,
    pub reports: Vec<SensitivityReport>,
}

/// A perturbed training batch.
#[derive(Clone, Debug)]
pub struct NoisyBatch {
    pub x0: Tensor,
    pub labels: Option<Vec<usize>>,
    pub ts: Vec<f64>,
    pub eps: Tensor,
    pub zt: Tensor,
    /// Regression target for the network output.
    pub target: Tensor,
}

/// Draws `x_0`, `t ~ U[t_min, 1]` and `eps`, forms
/// `z_t = s(t) x_0 + sqrt(var(t)) eps` and the target selected by `cfg`.
pub fn noisy_batch(
    model: &StackModel,
    cfg: &TrainConfig,
    schedule: &Schedule,
    data: &TrainData,
    n: usize,
    rng: &mut impl Rng,
) -> Result<NoisyBatch> {
    let (x0, labels) = data.batch(n, rng)?;
    let d = x0.cols();
    let ts: Vec<f64> = (0..n).map(|_| rng.gen_range(cfg.t_min..=1.0)).collect();
    let eps = Tensor::new(vec![n, d], normal_vec(rng, n * d))?;
    let mut zt = x0.clone();
    let mut target = Tensor::zeros(x0.shape());
    let oracle = data.oracle();
    for (r, &t) in ts.iter().enumerate() {
        let s = schedule.mean_scale(t);
        let sd = schedule.added_variance(t).sqrt();
        for j in 0..d {
            let i = r * d + j;
            zt.data_mut()[i] = s * x0.data()[i] + sd * eps.data()[i];
        }
        let output = model.config().output;
        let row_target: Vec<f64> = match (cfg.objective, cfg.target, oracle) {
            (Objective::EpsPrediction, _, _) => eps.row(r).to_vec(),
            (_, ScoreTarget::AnalyticOracle, Some(o)) => {
                let zr = Tensor::new(vec![1, d], zt.row(r).to_vec())?;
                let score = analytic_score_t(o, &zr, t, schedule)?.into_data();
                match output {
                    OutputKind::Score => score,
                    // E[eps | z_t] = -sd * score
                    OutputKind::Epsilon => score.iter().map(|v| -sd * v).collect(),
                }
            }
            (_, ScoreTarget::AnalyticOracle, None) => {
                return Err(Error::invalid("analytic-oracle targets need mixture data"))
            }
            (_, ScoreTarget::DenoisingEstimate, _) => match output {
                OutputKind::Score => eps.row(r).iter().map(|e| -e / sd).collect(),
                OutputKind::Epsilon => eps.row(r).to_vec(),
            },
        };
        target.data_mut()[r * d..(r + 1) * d].copy_from_slice(&row_target);
    }
    let labels = (model.config().num_classes > 0).then_some(labels);
    Ok(NoisyBatch {
        x0,
        labels,
        ts,
        eps,
        zt,
        target,
    })
}

/// Loss value and parameter gradients on one batch.
pub struct LossEval {
    pub loss: f64,
    pub score_term: f64,
    pub gamma_term: f64,
    pub grads: Vec<Tensor>,
}

/// Evaluates the configured objective on `batch` and its gradients.
pub fn loss_and_grads(
    model: &StackModel,
    cfg: &TrainConfig,
    batch: &NoisyBatch,
    rng: &mut impl Rng,
) -> Result<LossEval> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let zv = tape.constant(batch.zt.clone());
    let emb = model.embed(&mut tape, &bound, &batch.ts, batch.labels.as_deref())?;
    let st = model.forward_tape(&mut tape, &bound, zv, emb)?;
    let tv = tape.constant(batch.target.clone());
    let score = mse_tape(&mut tape, st.output, tv)?;
    let (total, reg) = if cfg.uses_reg() {
        let emb_val = emb.map(|e| tape.value(e).clone());
        let jdiags = st
            .unit_inputs
            .iter()
            .enumerate()
            .map(|(u, &v)| {
                let input = tape.value(v).clone();
                mapper_jacobian_diag(model, u, &input, emb_val.as_ref(), cfg.jacobian, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let reg = sensitivity_reg_tape(&mut tape, model, &bound, &jdiags)?;
        let scaled = tape.scale(reg, cfg.gamma)?;
        (tape.add(score, scaled)?, Some(scaled))
    } else {
        (score, None)
    };
    let grads = tape.backward(total)?;
    Ok(LossEval {
        loss: tape.value(total).item(),
        score_term: tape.value(score).item(),
        gamma_term: reg.map_or(0.0, |r| tape.value(r).item()),
        grads: model.collect_grads(&grads, &bound),
    })
}

/// Losses above this abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Trains `model` in place. Each step draws a batch, perturbs it, evaluates
/// the objective, takes an optimizer step on the unfrozen parameters and
/// updates the EMA. The log row of step `k` holds the loss before update `k`.
pub fn train_score_model(
    model: &mut StackModel,
    cfg: &TrainConfig,
    schedule: &Schedule,
    data: TrainData,
    seed: Seed,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    schedule.validate()?;
    let mut optim = OptimState::new(cfg.optim(), model.params())?;
    let mut ema = EmaState::new(cfg.ema_decay, model.params())?;
    let mut batch_rng = seed.stream(1);
    let mut probe_rng = seed.stream(2);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut reports = Vec::new();
    let mask = model.trainable_mask();
    for step in 0..cfg.steps {
        let batch = noisy_batch(model, cfg, schedule, &data, cfg.batch_size, &mut batch_rng)?;
        if cfg.report_every > 0 && step % cfg.report_every == 0 {
            let target = batch.target.clone();
            let loss = move |t: &mut Tape, out: Var| {
                let tv = t.constant(target.clone());
                mse_tape(t, out, tv)
            };
            reports.push(sensitivity_report(model, &batch.zt, &batch.ts, batch.labels.as_deref(), &loss, step)?);
        }
        let ev = match loss_and_grads(model, cfg, &batch, &mut probe_rng) {
            Ok(ev) => ev,
            Err(e) if e.is_numerical() => {
                return Err(Error::Divergence {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !ev.loss.is_finite() || ev.loss > DIVERGENCE_THRESHOLD {
            return Err(Error::Divergence { step, loss: ev.loss });
        }
        let info = model.param_info().to_vec();
        optimizer_step(&mut optim, model.params_mut(), &ev.grads, &info, &mask)?;
        ema_update(&mut ema, model.params())?;
        log.push(LogRow {
            step,
            loss: ev.loss,
            score_term: ev.score_term,
            gamma_term: ev.gamma_term,
            lr: cfg.lr,
            ema_decay: cfg.ema_decay,
        });
    }
    Ok(TrainOutcome {
        log,
        optim,
        ema,
        reports,
    })
}

/// Trains only the gates with the regularized objective; mapper weights are
/// frozen for the duration and their frozen flags restored afterwards.
pub fn finetune_gates(
    model: &mut StackModel,
    cfg: &TrainConfig,
    schedule: &Schedule,
    data: TrainData,
    seed: Seed,
) -> Result<TrainOutcome> {
    let saved: Vec<bool> = model.param_info().iter().map(|p| p.frozen).collect();
    model.set_frozen(ParamRole::Theta, true);
    let cfg = TrainConfig {
        objective: Objective::SensitivityRegularized,
        ..cfg.clone()
    };
    let out = train_score_model(model, &cfg, schedule, data, seed);
    model.restore_frozen(&saved);
    out
}

/// Mean objective on a fixed batch of `n` draws.
pub fn eval_loss(
    model: &StackModel,
    cfg: &TrainConfig,
    schedule: &Schedule,
    data: TrainData,
    n: usize,
    seed: Seed,
) -> Result<LossEval> {
    let mut rng = seed.stream(11);
    let batch = noisy_batch(model, cfg, schedule, &data, n, &mut rng)?;
    loss_and_grads(model, cfg, &batch, &mut seed.stream(12))
}

/// Score estimate of a trained model: the raw output for score models,
/// `-F / sqrt(var(t))` for noise-prediction models.
pub fn model_score(model: &StackModel, schedule: &Schedule, z: &Tensor, t: f64) -> Result<Tensor> {
    let f = model.forward(z, &[t])?;
    match model.config().output {
        OutputKind::Score => Ok(f),
        OutputKind::Epsilon => Ok(f.scale(-1.0 / schedule.added_variance(t).max(1e-12).sqrt())),
    }
}

const MAGIC: &[u8; 5] = b"NRDM1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: Vec<Tensor>,
    pub info: Vec<ParamInfo>,
    pub optim: Option<OptimState>,
    pub ema: Option<EmaState>,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &StackModel, optim: Option<OptimState>, ema: Option<EmaState>, seed: u64, step: u64) -> Self {
        Checkpoint {
            model: model.config().clone(),
            params: model.params().to_vec(),
            info: model.param_info().to_vec(),
            optim,
            ema,
            seed,
            step,
        }
    }

    pub fn to_model(&self) -> Result<StackModel> {
        StackModel::from_parts(self.model.clone(), self.params.clone(), self.info.clone())
    }

    /// The model with EMA weights substituted, when present.
    pub fn to_ema_model(&self) -> Result<StackModel> {
        let params = self.ema.as_ref().map_or_else(|| self.params.clone(), |e| e.shadow.clone());
        StackModel::from_parts(self.model.clone(), params, self.info.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    index: usize,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    info: Vec<ParamInfo>,
    optim: Option<(OptimConfig, u64)>,
    ema_decay: Option<f64>,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

/// Writes `ckpt` in the binary checkpoint format: magic `NRDM1`, `u32` LE
/// version, `u32` LE header length, JSON header, then little-endian `f64`
/// values of every tensor in header order.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut groups: Vec<(&str, &[Tensor])> = vec![("param", &ckpt.params)];
    if let Some(o) = &ckpt.optim {
        groups.push(("adam_m", &o.m));
        groups.push(("adam_v", &o.v));
    }
    if let Some(e) = &ckpt.ema {
        groups.push(("ema", &e.shadow));
    }
    let tensors = groups
        .iter()
        .flat_map(|(g, ts)| {
            ts.iter().enumerate().map(move |(i, t)| TensorEntry {
                group: g.to_string(),
                index: i,
                shape: t.shape().to_vec(),
            })
        })
        .collect();
    let header = Header {
        model: ckpt.model.clone(),
        info: ckpt.info.clone(),
        optim: ckpt.optim.as_ref().map(|o| (o.config.clone(), o.step)),
        ema_decay: ckpt.ema.as_ref().map(|e| e.decay),
        seed: ckpt.seed,
        step: ckpt.step,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, ts) in &groups {
        for t in ts.iter() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Format {
        path: path.to_path_buf(),
        message: m,
    };
    if bytes.len() < 13 || &bytes[..5] != MAGIC {
        return Err(bad(format!("not a checkpoint: expected magic `{}`", String::from_utf8_lossy(MAGIC))));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = bytes.get(13..13 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
    let mut data = &bytes[13 + hlen..];
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if data.len() != expected * 8 {
        return Err(bad(format!(
            "truncated or oversized payload: {} bytes for {} values",
            data.len(),
            expected
        )));
    }
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut shadow = Vec::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let vals = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[n * 8..];
        let t = Tensor::new(entry.shape.clone(), vals).map_err(|e| bad(e.to_string()))?;
        match entry.group.as_str() {
            "param" => params.push(t),
            "adam_m" => m.push(t),
            "adam_v" => v.push(t),
            "ema" => shadow.push(t),
            g => return Err(bad(format!("unknown tensor group `{g}`"))),
        }
    }
    Ok(Checkpoint {
        model: header.model,
        params,
        info: header.info,
        optim: header.optim.map(|(config, step)| OptimState { config, m, v, step }),
        ema: header.ema_decay.map(|decay| EmaState { decay, shadow }),
        seed: header.seed,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual::{Fashion, MapperKind, TimeConditioning};

    #[test]
    fn loss_examples() {
        let a = Tensor::from_vec(vec![0.3, -0.2]);
        assert_eq!(loss_simple(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_simple(&Tensor::scalar(2.0), &Tensor::scalar(-1.0)).unwrap(), 9.0);
        assert_eq!(loss_score_matching(&Tensor::from_vec(vec![1.0, 1.0]), &Tensor::from_vec(vec![0.0, 0.0])).unwrap(), 1.0);
        assert!(loss_simple(&a, &Tensor::scalar(1.0)).is_err());
    }

    fn scalar_unit(coeff: f64, alpha: f64, beta: f64) -> StackModel {
        let mut m = StackModel::new(
            ModelConfig {
                fashion: Fashion::Flow,
                depth: 1,
                width: 1,
                mapper: MapperKind::LinearScalar,
                time_cond: TimeConditioning::None,
                linear_init: coeff,
                ..ModelConfig::default()
            },
            Seed(0),
        )
        .unwrap();
        m.set_gates(0, alpha, beta);
        m
    }

    #[test]
    fn regularizer_examples() {
        let z = vec![Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap()];
        let reg = |m: &StackModel| loss_sensitivity_reg(m, &z, None, JacobianMode::Exact, Seed(0)).unwrap();
        assert_eq!(reg(&scalar_unit(1.0, 0.0, 0.0)), 0.0);
        assert_eq!(reg(&scalar_unit(1.0, 1.0, 1.0)), 0.0);
        assert_eq!(reg(&scalar_unit(2.0, 1.0, 0.0)), 4.0);
    }

    #[test]
    fn optimizer_examples() {
        let info = vec![ParamInfo {
            name: "w".into(),
            role: ParamRole::Theta,
            frozen: false,
        }];
        let sgd = OptimConfig {
            method: OptimMethod::Sgd,
            lr: 0.1,
            ..OptimConfig::default()
        };
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = OptimState::new(sgd, &p).unwrap();
        optimizer_step(&mut st, &mut p, &[Tensor::scalar(2.0)], &info, &[true]).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-15);

        let adam = OptimConfig {
            lr: 0.1,
            ..OptimConfig::default()
        };
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = OptimState::new(adam.clone(), &p).unwrap();
        optimizer_step(&mut st, &mut p, &[Tensor::scalar(3.0)], &info, &[true]).unwrap();
        assert!((p[0].item() - 0.9).abs() < 1e-8);

        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = OptimState::new(adam, &p).unwrap();
        optimizer_step(&mut st, &mut p, &[Tensor::scalar(0.0)], &info, &[true]).unwrap();
        assert_eq!(p[0].item(), 1.0);

        let err = optimizer_step(&mut st, &mut p, &[Tensor::scalar(f64::NAN)], &info, &[true]).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn ema_examples() {
        let p = vec![Tensor::scalar(1.0)];
        let mut e = EmaState::new(1.0, &[Tensor::scalar(0.0)]).unwrap();
        ema_update(&mut e, &p).unwrap();
        assert_eq!(e.shadow[0].item(), 0.0);
        e.decay = 0.0;
        ema_update(&mut e, &p).unwrap();
        assert_eq!(e.shadow[0].item(), 1.0);
        let mut e = EmaState::new(0.999, &[Tensor::scalar(0.0)]).unwrap();
        ema_update(&mut e, &p).unwrap();
        assert!((e.shadow[0].item() - 0.001).abs() < 1e-15);
        assert!(ema_update(&mut e, &[Tensor::from_vec(vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let p = vec![Tensor::scalar(1.0)];
        let mut e = EmaState::new(0.9, &[Tensor::scalar(0.0)]).unwrap();
        let mut prev = 1.0;
        for _ in 0..20 {
            ema_update(&mut e, &p).unwrap();
            let gap = 1.0 - e.shadow[0].item();
            assert!((gap / prev - 0.9).abs() < 1e-12);
            prev = gap;
        }
    }

    #[test]
    fn hutchinson_is_exact_for_diagonal_jacobians() {
        let m = scalar_unit(1.7, 1.0, 0.0);
        let z = Tensor::new(vec![4, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = Seed(1).rng();
        let h = mapper_jacobian_diag(&m, 0, &z, None, JacobianMode::Hutchinson, &mut rng).unwrap();
        assert!(h.data().iter().all(|&v| (v - 1.7).abs() < 1e-15));
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        fs::write(&p, b"XXXXX\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let e = load_checkpoint(&p).unwrap_err();
        assert!(e.to_string().contains("NRDM1"));
        fs::write(&p, b"NRDM1\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::UnsupportedVersion { found: 0, .. })));
    }
}
