//! Forward noising processes, the probability-flow ODE and its solvers.
//!
//! Time runs over `[0, 1]` with data at `t = 0` and noise at `t = 1`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::residual::{time_embedding, TIME_SCALE};
use crate::rng::{normal_vec, Seed};
use crate::tensor::Tensor;

/// A forward process `dz = mu(z, t) dt + sigma(t) dw`.
pub trait NoiseProcess {
    fn drift(&self, z: &Tensor, t: f64) -> Result<Tensor>;
    /// `sigma(t)`, either shape `[1]` or one value per channel.
    fn diffusion(&self, t: f64) -> Result<Tensor>;
}

/// Closed-form schedules. All have linear drift `mu = -lambda(t) z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    /// Variance preserving, `beta(t)` linear from `beta_min` to `beta_max`.
    Vp { beta_min: f64, beta_max: f64 },
    /// Variance exploding, geometric `sigma_min -> sigma_max`.
    Ve { sigma_min: f64, sigma_max: f64 },
    /// Ornstein-Uhlenbeck, `dz = -theta z dt + sigma dw`.
    Ou { theta: f64, sigma: f64 },
    /// Variance preserving process whose `alpha_bar(t)` interpolates a
    /// discrete table log-linearly.
    Table { table: DiscreteSchedule },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Vp {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Schedule::Vp { beta_min, beta_max } => *beta_min >= 0.0 && beta_max >= beta_min,
            Schedule::Ve { sigma_min, sigma_max } => *sigma_min > 0.0 && sigma_max > sigma_min,
            Schedule::Ou { theta, sigma } => *theta >= 0.0 && *sigma >= 0.0,
            Schedule::Table { table } => table.validate().is_ok(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid schedule parameters: {self:?}")))
        }
    }

    /// `lambda(t)` in `mu = -lambda(t) z`.
    pub fn drift_rate(&self, t: f64) -> f64 {
        match self {
            Schedule::Vp { beta_min, beta_max } => 0.5 * (beta_min + t * (beta_max - beta_min)),
            Schedule::Ve { .. } => 0.0,
            Schedule::Ou { theta, .. } => *theta,
            Schedule::Table { table } => -0.5 * table.log_alpha_bar_slope(t),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            Schedule::Vp { beta_min, beta_max } => (beta_min + t * (beta_max - beta_min)).sqrt(),
            Schedule::Ve { sigma_min, sigma_max } => {
                let r = sigma_max / sigma_min;
                sigma_min * r.powf(t) * (2.0 * r.ln()).sqrt()
            }
            Schedule::Ou { sigma, .. } => *sigma,
            Schedule::Table { .. } => (2.0 * self.drift_rate(t)).sqrt(),
        }
    }

    /// Mean scale `s(t)`: `E[z_t | z_0] = s(t) z_0`.
    pub fn mean_scale(&self, t: f64) -> f64 {
        match self {
            Schedule::Vp { beta_min, beta_max } => {
                (-0.5 * (beta_min * t + 0.5 * (beta_max - beta_min) * t * t)).exp()
            }
            Schedule::Ve { .. } => 1.0,
            Schedule::Ou { theta, .. } => (-theta * t).exp(),
            Schedule::Table { table } => (0.5 * table.log_alpha_bar_at(t)).exp(),
        }
    }

    /// Conditional variance `Var[z_t | z_0]`.
    pub fn added_variance(&self, t: f64) -> f64 {
        match self {
            Schedule::Vp { .. } | Schedule::Table { .. } => {
                let s = self.mean_scale(t);
                1.0 - s * s
            }
            Schedule::Ve { sigma_min, sigma_max } => {
                let r = sigma_max / sigma_min;
                sigma_min * sigma_min * (r.powf(2.0 * t) - 1.0)
            }
            Schedule::Ou { theta, sigma } => {
                if *theta == 0.0 {
                    sigma * sigma * t
                } else {
                    sigma * sigma / (2.0 * theta) * (1.0 - (-2.0 * theta * t).exp())
                }
            }
        }
    }
}

impl NoiseProcess for Schedule {
    fn drift(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        Ok(z.scale(-self.drift_rate(t)))
    }

    fn diffusion(&self, t: f64) -> Result<Tensor> {
        Ok(Tensor::scalar(self.sigma(t)))
    }
}

/// Learnable scheduler: `alpha_hat(t) = -softplus(a(t))` and
/// `beta_hat(t) = b(t)`, optionally plus `m(t) * z` (drift-composed mode).
/// Each head is a two-layer SiLU network over the sinusoidal time embedding.
///
/// As a forward process this is `sigma^2 = -2 alpha_hat` and `mu = beta_hat`,
/// so the probability-flow right-hand side is `alpha_hat F + beta_hat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamScheduler {
    pub width: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub drift_composed: bool,
    /// `[w1, b1, w2, b2]` per head: `a`, `b`, then `m` when drift-composed.
    pub params: Vec<Tensor>,
}

/// Scheduler outputs on a tape, each `[batch, width]`.
pub struct SchedulerVars {
    pub alpha_hat: Var,
    pub beta_hat: Var,
    pub drift_gain: Option<Var>,
}

impl ParamScheduler {
    pub fn new(width: usize, drift_composed: bool, seed: Seed) -> Self {
        let (hidden, embed_dim) = (32, 32);
        let mut rng = seed.stream(0x7363_6865_64);
        let heads = if drift_composed { 3 } else { 2 };
        let mut params = Vec::new();
        for _ in 0..heads {
            let b1 = 1.0 / (embed_dim as f64).sqrt();
            let b2 = 1.0 / (hidden as f64).sqrt();
            let mut uni = |shape: &[usize], bound: f64| {
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).unwrap()
            };
            params.push(uni(&[embed_dim, hidden], b1));
            params.push(uni(&[hidden], b1));
            params.push(uni(&[hidden, width], b2));
            params.push(uni(&[width], b2));
        }
        ParamScheduler {
            width,
            hidden,
            embed_dim,
            drift_composed,
            params,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    fn head(tape: &mut Tape, vars: &[Var], e: Var) -> Result<Var> {
        let h = tape.affine(e, vars[0], vars[1])?;
        let h = tape.silu(h)?;
        tape.affine(h, vars[2], vars[3])
    }

    /// Evaluates all heads at the given times.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], ts: &[f64]) -> Result<SchedulerVars> {
        let e = tape.constant(time_embedding(ts, self.embed_dim, TIME_SCALE));
        let a = Self::head(tape, &vars[0..4], e)?;
        let sp = tape.softplus(a)?;
        let alpha_hat = tape.scale(sp, -1.0)?;
        let beta_hat = Self::head(tape, &vars[4..8], e)?;
        let drift_gain = if self.drift_composed {
            Some(Self::head(tape, &vars[8..12], e)?)
        } else {
            None
        };
        Ok(SchedulerVars {
            alpha_hat,
            beta_hat,
            drift_gain,
        })
    }

    fn eval(&self, t: f64) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = self.forward_tape(&mut tape, &vars, &[t])?;
        let flat = |v: Var| tape.value(v).clone().reshape(vec![self.width]);
        Ok((
            flat(out.alpha_hat)?,
            flat(out.beta_hat)?,
            out.drift_gain.map(flat).transpose()?,
        ))
    }

    pub fn alpha_hat(&self, t: f64) -> Result<Tensor> {
        Ok(self.eval(t)?.0)
    }

    /// `beta_hat(t)`, plus `m(t) * z` in drift-composed mode.
    pub fn beta_hat(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let (_, b, m) = self.eval(t)?;
        match m {
            Some(m) => z.mul(&m)?.add(&b),
            None => Ok(b),
        }
    }
}

impl NoiseProcess for ParamScheduler {
    fn drift(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let b = self.beta_hat(z, t)?;
        // broadcast a per-channel drift over the batch
        z.scale(0.0).add(&b)
    }

    fn diffusion(&self, t: f64) -> Result<Tensor> {
        Ok(self.alpha_hat(t)?.map(|a| (-2.0 * a).sqrt()))
    }
}

/// One Euler-Maruyama step `z + mu dt + sigma sqrt(dt) eps`.
pub fn forward_sde_step(z: &Tensor, t: f64, dt: f64, process: &impl NoiseProcess, noise: &Tensor) -> Result<Tensor> {
    if !(dt >= 0.0) {
        return Err(Error::invalid(format!("dt must be non-negative, got {dt}")));
    }
    let mu = process.drift(z, t)?;
    let sigma = process.diffusion(t)?;
    let kick = noise.mul(&sigma)?.scale(dt.sqrt());
    z.axpy(dt, &mu)?.add(&kick)
}

/// Probability-flow right-hand side `mu - sigma^2 / 2 * score`.
pub fn pf_ode_rhs(
    z: &Tensor,
    t: f64,
    process: &impl NoiseProcess,
    score: impl FnOnce(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    let mu = process.drift(z, t)?;
    let half_var = process.diffusion(t)?.map(|s| -0.5 * s * s);
    let sc = score(z, t)?;
    mu.add(&sc.mul(&half_var)?)
}

/// Table of cumulative signal levels `alpha_bar_k`, `k = 0..T`, for the
/// discrete forward process `x_k = sqrt(ab_k) x_0 + sqrt(1 - ab_k) eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSchedule {
    pub alpha_bar: Vec<f64>,
}

impl DiscreteSchedule {
    /// `T`-step table with `ab = exp(-(0.1 tau + 9.95 tau^2))`, `tau = (k+1)/T`,
    /// clipped to `[1e-5, 0.9999]`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("discrete schedule needs at least one step"));
        }
        let (bmin, bmax) = (0.1, 20.0);
        let alpha_bar = (0..steps)
            .map(|k| {
                let tau = (k + 1) as f64 / steps as f64;
                (-(bmin * tau + 0.5 * (bmax - bmin) * tau * tau)).exp().clamp(1e-5, 0.9999)
            })
            .collect();
        Ok(DiscreteSchedule { alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.is_empty() {
            return Err(Error::invalid("empty alpha_bar table"));
        }
        if self.alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("alpha_bar values must lie in (0, 1]"));
        }
        if self.alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("alpha_bar must be non-increasing"));
        }
        Ok(())
    }

    /// Reads a `t,alpha_bar` CSV with strictly decreasing `alpha_bar`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let fmt = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
        let headers = rdr.headers().map_err(|e| fmt(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "alpha_bar"] {
            return Err(fmt(format!("expected header `t,alpha_bar`, found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
        }
        let mut alpha_bar = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| fmt(e.to_string()))?;
            let v: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| fmt(format!("row {}: bad alpha_bar `{}`", i + 1, &rec[1])))?;
            alpha_bar.push(v);
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(fmt("alpha_bar must be strictly decreasing".into()));
        }
        let s = DiscreteSchedule { alpha_bar };
        s.validate().map_err(|e| fmt(e.to_string()))?;
        Ok(s)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("t,alpha_bar\n");
        for (k, a) in self.alpha_bar.iter().enumerate() {
            out.push_str(&format!("{k},{a:e}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// `ln alpha_bar` at continuous time `t`, linear between grid points
    /// `tau_k = (k+1)/T` and anchored at `alpha_bar(0) = 1`.
    pub fn log_alpha_bar_at(&self, t: f64) -> f64 {
        let n = self.alpha_bar.len() as f64;
        let x = (t.clamp(0.0, 1.0) * n).min(n);
        let k = (x.floor() as usize).min(self.alpha_bar.len() - 1);
        let lo = if k == 0 { 0.0 } else { self.alpha_bar[k - 1].ln() };
        let hi = self.alpha_bar[k].ln();
        lo + (x - k as f64) * (hi - lo)
    }

    fn log_alpha_bar_slope(&self, t: f64) -> f64 {
        let n = self.alpha_bar.len();
        let k = ((t.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n - 1);
        let lo = if k == 0 { 0.0 } else { self.alpha_bar[k - 1].ln() };
        (self.alpha_bar[k].ln() - lo) * n as f64
    }
}

/// `sqrt(ab_k) x0 + sqrt(1 - ab_k) eps`.
pub fn ddpm_forward(x0: &Tensor, k: usize, schedule: &DiscreteSchedule, eps: &Tensor) -> Result<Tensor> {
    let ab = *schedule.alpha_bar.get(k).ok_or_else(|| {
        Error::invalid(format!("step {k} out of range for a {}-step schedule", schedule.len()))
    })?;
    x0.scale(ab.sqrt()).axpy((1.0 - ab).sqrt(), eps)
}

/// States of an ODE or SDE path with times stored in increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
    /// Whether the path was integrated from the last time to the first.
    pub reversed: bool,
    pub seed: Option<u64>,
}

impl Trajectory {
    /// The state at the integration end point.
    pub fn end(&self) -> &Tensor {
        if self.reversed {
            &self.states[0]
        } else {
            &self.states[self.states.len() - 1]
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn fixed_step<F>(mut rhs: F, z0: &Tensor, t0: f64, t1: f64, steps: usize, heun: bool) -> Result<Trajectory>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps < 1 {
        return Err(Error::invalid("solver needs at least one step"));
    }
    if t0 == t1 {
        return Err(Error::invalid("empty integration interval"));
    }
    let dt = (t1 - t0) / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut z = z0.clone();
    times.push(t0);
    states.push(z.clone());
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let tn = if k + 1 == steps { t1 } else { t0 + (k + 1) as f64 * dt };
        let k1 = rhs(&z, t)?;
        z = if heun {
            let pred = z.axpy(dt, &k1)?;
            let k2 = rhs(&pred, tn)?;
            z.axpy(0.5 * dt, &k1.add(&k2)?)?
        } else {
            z.axpy(dt, &k1)?
        };
        z.check_finite("solver state")?;
        times.push(tn);
        states.push(z.clone());
    }
    let reversed = t1 < t0;
    if reversed {
        times.reverse();
        states.reverse();
    }
    Ok(Trajectory {
        times,
        states,
        reversed,
        seed: None,
    })
}

/// Fixed-step explicit Euler from `t0` to `t1` (either direction).
///
/// ```
/// use nrdm::dynamics::euler_solve;
/// use nrdm::Tensor;
///
/// let path = euler_solve(|z, _| Ok(z.scale(-1.0)), &Tensor::scalar(1.0), 0.0, 1.0, 100).unwrap();
/// assert!((path.end().item() - 0.99f64.powi(100)).abs() < 1e-12);
/// ```
pub fn euler_solve(
    rhs: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<Trajectory> {
    fixed_step(rhs, z0, t0, t1, steps, false)
}

/// Fixed-step Heun (explicit trapezoidal) predictor-corrector.
pub fn heun_solve(
    rhs: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<Trajectory> {
    fixed_step(rhs, z0, t0, t1, steps, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Heun,
}

impl std::str::FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            _ => Err(Error::invalid(format!("unknown solver `{s}` (expected euler or heun)"))),
        }
    }
}

impl Solver {
    pub fn solve(
        self,
        rhs: impl FnMut(&Tensor, f64) -> Result<Tensor>,
        z0: &Tensor,
        t0: f64,
        t1: f64,
        steps: usize,
    ) -> Result<Trajectory> {
        fixed_step(rhs, z0, t0, t1, steps, self == Solver::Heun)
    }
}

/// Gaussian mixture with diagonal covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOracle {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl ScoreOracle {
    pub fn gaussian(mean: Vec<f64>, variance: Vec<f64>) -> Self {
        ScoreOracle {
            weights: vec![1.0],
            means: vec![mean],
            variances: vec![variance],
        }
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], vec![1.0; dim])
    }

    /// Equal-weight isotropic mixture.
    pub fn mixture(means: Vec<Vec<f64>>, variance: f64) -> Self {
        let k = means.len();
        let d = means.first().map_or(0, Vec::len);
        ScoreOracle {
            weights: vec![1.0 / k as f64; k],
            variances: vec![vec![variance; d]; k],
            means,
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::invalid("mixture needs matching weights, means and variances"));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().chain(&self.variances).any(|v| v.len() != d) {
            return Err(Error::invalid("mixture components must share one positive dimension"));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mixture weights must be positive and sum to 1"));
        }
        if self.variances.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("mixture variances must be positive"));
        }
        Ok(())
    }

    /// The mixture of `s z_0 + sqrt(var) eps` for `z_0` from `self`.
    pub fn pushforward(&self, s: f64, var: f64) -> ScoreOracle {
        ScoreOracle {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().map(|x| s * x).collect()).collect(),
            variances: self
                .variances
                .iter()
                .map(|v| v.iter().map(|x| s * s * x + var).collect())
                .collect(),
        }
    }

    /// Per-component log of `w_k N(z; mu_k, v_k)` for one point.
    fn component_logs(&self, z: &[f64]) -> Vec<f64> {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        (0..self.weights.len())
            .map(|k| {
                let mut acc = self.weights[k].ln();
                for ((&x, &m), &v) in z.iter().zip(&self.means[k]).zip(&self.variances[k]) {
                    acc -= 0.5 * ((x - m) * (x - m) / v + v.ln() + ln2pi);
                }
                acc
            })
            .collect()
    }

    fn responsibilities(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let logs = self.component_logs(z);
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
        let tot: f64 = ex.iter().sum();
        (ex.iter().map(|e| e / tot).collect(), mx + tot.ln())
    }

    /// Sum of the log-density over all rows.
    pub fn log_density(&self, z: &Tensor) -> Result<f64> {
        self.check_dim(z)?;
        Ok((0..z.rows()).map(|r| self.responsibilities(z.row(r)).1).sum())
    }

    fn check_dim(&self, z: &Tensor) -> Result<()> {
        if z.cols() != self.dim() || z.rank() > 2 {
            return Err(Error::ShapeMismatch {
                op: "score",
                lhs: z.shape().to_vec(),
                rhs: vec![self.dim()],
            });
        }
        Ok(())
    }

    /// Draws `n` points and their component indices.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        self.validate()?;
        if n == 0 {
            return Err(Error::invalid("sample size must be positive"));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut k = 0;
            let mut acc = self.weights[0];
            while u >= acc && k + 1 < self.weights.len() {
                k += 1;
                acc += self.weights[k];
            }
            let eps = normal_vec(rng, d);
            for j in 0..d {
                data.push(self.means[k][j] + self.variances[k][j].sqrt() * eps[j]);
            }
            labels.push(k);
        }
        Ok((Tensor::new(vec![n, d], data)?, labels))
    }

    /// Mixture mean and (full) covariance, row-major `d x d`.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for j in 0..d {
                mean[j] += w * m[j];
            }
        }
        let mut cov = vec![0.0; d * d];
        for ((w, m), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for i in 0..d {
                for j in 0..d {
                    let diag = if i == j { v[i] } else { 0.0 };
                    cov[i * d + j] += w * (diag + (m[i] - mean[i]) * (m[j] - mean[j]));
                }
            }
        }
        (mean, cov)
    }
}

/// Exact score of a Gaussian mixture, row by row.
///
/// ```
/// use nrdm::dynamics::{analytic_score, ScoreOracle};
/// use nrdm::Tensor;
///
/// let s = analytic_score(&ScoreOracle::standard_normal(1), &Tensor::scalar(2.0)).unwrap();
/// assert_eq!(s.item(), -2.0);
/// ```
pub fn analytic_score(oracle: &ScoreOracle, z: &Tensor) -> Result<Tensor> {
    oracle.check_dim(z)?;
    let d = oracle.dim();
    let mut out = vec![0.0; z.numel()];
    for r in 0..z.rows() {
        let row = z.row(r);
        let (resp, _) = oracle.responsibilities(row);
        for (k, rk) in resp.iter().enumerate() {
            for j in 0..d {
                out[r * d + j] -= rk * (row[j] - oracle.means[k][j]) / oracle.variances[k][j];
            }
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Exact score of the perturbed density `p_t` under a linear-drift schedule.
pub fn analytic_score_t(oracle: &ScoreOracle, z: &Tensor, t: f64, schedule: &Schedule) -> Result<Tensor> {
    if t == 0.0 {
        return analytic_score(oracle, z);
    }
    analytic_score(&oracle.pushforward(schedule.mean_scale(t), schedule.added_variance(t)), z)
}

/// Per-time comparison between forward-SDE and probability-flow marginals.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalRow {
    pub t: f64,
    /// `max_j |mean_sde - mean_ode|`.
    pub mean_diff: f64,
    /// `max_ij |cov_sde - cov_ode|`.
    pub cov_diff: f64,
    /// Deviation of the SDE sample moments from the closed-form moments.
    pub sde_err: f64,
    /// Deviation of the ODE sample moments from the closed-form moments.
    pub ode_err: f64,
    /// `sde_err + ode_err`, the triangle bound on the discrepancies.
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalReport {
    pub rows: Vec<MarginalRow>,
    pub n: usize,
    pub seed: u64,
}

impl MarginalReport {
    pub fn max_mean_diff(&self) -> f64 {
        self.rows.iter().map(|r| r.mean_diff).fold(0.0, f64::max)
    }

    pub fn max_cov_diff(&self) -> f64 {
        self.rows.iter().map(|r| r.cov_diff).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mean_diff,cov_diff,sde_err,ode_err,tolerance\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e}\n",
                r.t, r.mean_diff, r.cov_diff, r.sde_err, r.ode_err, r.tolerance
            ));
        }
        s
    }
}

/// Sample mean and covariance (divisor `n`), row-major.
pub fn sample_moments(z: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (z.rows(), z.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = z.row(r);
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    (mean, cov)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Simulates `n` forward-SDE paths (Euler-Maruyama) and `n` probability-flow
/// paths (`solver`, exact score) from the same `p_0` draws over `[0, 1]` in
/// `steps` steps, and compares the sample moments at each time of `t_grid`.
/// Grid times are snapped to the nearest step.
pub fn sde_vs_pfode_marginal_check(
    oracle: &ScoreOracle,
    schedule: &Schedule,
    n: usize,
    t_grid: &[f64],
    steps: usize,
    solver: Solver,
    seed: Seed,
) -> Result<MarginalReport> {
    oracle.validate()?;
    schedule.validate()?;
    if steps == 0 || t_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("marginal check needs steps >= 1 and grid times in [0, 1]"));
    }
    let (z0, _) = oracle.sample(n, &mut seed.stream(1))?;
    let mut noise_rng = seed.stream(2);
    let marks: Vec<usize> = t_grid.iter().map(|t| (t * steps as f64).round() as usize).collect();
    let dt = 1.0 / steps as f64;
    let d = oracle.dim();

    let mut sde = z0.clone();
    let mut ode = z0;
    let mut rows = Vec::new();
    let record = |k: usize, sde: &Tensor, ode: &Tensor, rows: &mut Vec<MarginalRow>| {
        for (gi, _) in marks.iter().enumerate().filter(|(_, &m)| m == k) {
            let t = t_grid[gi];
            let (ms, cs) = sample_moments(sde);
            let (mo, co) = sample_moments(ode);
            let (ma, ca) = oracle
                .pushforward(schedule.mean_scale(t), schedule.added_variance(t))
                .moments();
            let sde_err = max_abs_diff(&ms, &ma).max(max_abs_diff(&cs, &ca));
            let ode_err = max_abs_diff(&mo, &ma).max(max_abs_diff(&co, &ca));
            rows.push(MarginalRow {
                t,
                mean_diff: max_abs_diff(&ms, &mo),
                cov_diff: max_abs_diff(&cs, &co),
                sde_err,
                ode_err,
                tolerance: sde_err + ode_err,
            });
        }
    };
    record(0, &sde, &ode, &mut rows);
    let rhs = |z: &Tensor, t: f64| pf_ode_rhs(z, t, schedule, |z, t| analytic_score_t(oracle, z, t, schedule));
    for k in 0..steps {
        let t = k as f64 * dt;
        let eps = Tensor::new(vec![n, d], normal_vec(&mut noise_rng, n * d))?;
        sde = forward_sde_step(&sde, t, dt, schedule, &eps)?;
        ode = solver.solve(rhs, &ode, t, t + dt, 1)?.end().clone();
        record(k + 1, &sde, &ode, &mut rows);
    }
    rows.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(MarginalReport {
        rows,
        n,
        seed: seed.0,
    })
}
