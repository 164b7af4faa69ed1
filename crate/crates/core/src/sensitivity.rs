//! Residual sensitivity: how `dL/dz` evolves through a stack.
//!
//! The continuous equations are integrated along a stored state trajectory
//! with explicit Euler:
//!
//! * vanilla: `ds/dt = -s J_f(z, t)`;
//! * gated: `ds/dt = -(alpha s) J_f(z, t) - beta s`.
//!
//! Both products `s J` are vector-Jacobian products taken on a tape, so the
//! Jacobian is never formed. For discrete stacks the exact per-unit chain
//! rule (the discrete adjoint) is compared against a full reverse sweep.

use std::fmt::Write as _;

use serde::Serialize;

use crate::autodiff::{relative_error, Tape, Var};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::residual::{Bound, Fashion, StackModel};
use crate::tensor::Tensor;

/// A (possibly time-dependent) feature mapper built on a tape.
pub type Mapper<'a> = dyn Fn(&mut Tape, Var, f64) -> Result<Var> + 'a;

/// A scalar loss of the stack output.
pub type LossFn<'a> = dyn Fn(&mut Tape, Var) -> Result<Var> + 'a;

/// `c^T J_f(z)`, the vector-Jacobian product of `f` at `z`.
pub fn vjp(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, z: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let out = f(&mut tape, zv)?;
    if tape.value(out).shape() != cotangent.shape() {
        return Err(Error::ShapeMismatch {
            op: "vjp",
            lhs: tape.value(out).shape().to_vec(),
            rhs: cotangent.shape().to_vec(),
        });
    }
    let c = tape.constant(cotangent.clone());
    let prod = tape.mul(out, c)?;
    let loss = tape.sum(prod)?;
    Ok(tape.backward(loss)?.wrt(zv))
}

/// `-s J_f(z, t)`.
///
/// ```
/// use nrdm::sensitivity::sensitivity_ode_rhs_vanilla;
/// use nrdm::Tensor;
///
/// // f(z) = z^2 at z = 3, s = 2
/// let r = sensitivity_ode_rhs_vanilla(&Tensor::scalar(2.0), &Tensor::scalar(3.0), 0.0, &|t, z, _| t.square(z)).unwrap();
/// assert_eq!(r.item(), -12.0);
/// ```
pub fn sensitivity_ode_rhs_vanilla(s: &Tensor, z: &Tensor, t: f64, f: &Mapper) -> Result<Tensor> {
    Ok(vjp(|tape, v| f(tape, v, t), z, s)?.scale(-1.0))
}

/// `-(alpha s) J_f(z, t) - beta s`.
pub fn sensitivity_ode_rhs_gated(
    s: &Tensor,
    z: &Tensor,
    t: f64,
    f: &Mapper,
    alpha: &Tensor,
    beta: &Tensor,
) -> Result<Tensor> {
    let gated = s.mul(alpha)?;
    let pulled = vjp(|tape, v| f(tape, v, t), z, &gated)?.scale(-1.0);
    pulled.sub(&s.mul(beta)?)
}

/// Which end of the trajectory the initial sensitivity sits at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Start at the first time and step toward the last.
    Forward,
    /// Start at the last time and step toward the first (adjoint order).
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SensitivityKind {
    /// `dL/dz_t`.
    State,
    /// `dL/dtheta`.
    Parameter,
}

/// Sensitivities at every node of a trajectory, in increasing time order.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityTrace {
    pub times: Vec<f64>,
    pub values: Vec<Tensor>,
    pub kind: SensitivityKind,
    pub gated: bool,
}

fn integrate(
    s0: &Tensor,
    traj: &Trajectory,
    direction: Direction,
    gated: bool,
    mut rhs: impl FnMut(&Tensor, &Tensor, f64) -> Result<Tensor>,
) -> Result<SensitivityTrace> {
    let n = traj.times.len();
    if n < 2 || traj.states.len() != n {
        return Err(Error::invalid(format!(
            "trajectory needs >= 2 aligned nodes, got {} times and {} states",
            n,
            traj.states.len()
        )));
    }
    let mut values = vec![s0.clone(); n];
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    for w in order.windows(2) {
        let (k, next) = (w[0], w[1]);
        let dt = traj.times[next] - traj.times[k];
        let ds = rhs(&values[k], &traj.states[k], traj.times[k])?;
        values[next] = values[k].axpy(dt, &ds)?;
    }
    Ok(SensitivityTrace {
        times: traj.times.clone(),
        values,
        kind: SensitivityKind::State,
        gated,
    })
}

/// Euler integration of the vanilla sensitivity ODE along `traj`.
pub fn integrate_sensitivity_vanilla(
    s0: &Tensor,
    traj: &Trajectory,
    f: &Mapper,
    direction: Direction,
) -> Result<SensitivityTrace> {
    integrate(s0, traj, direction, false, |s, z, t| sensitivity_ode_rhs_vanilla(s, z, t, f))
}

/// Euler integration of the gated sensitivity ODE; `gates(t)` returns
/// `(alpha, beta)`.
pub fn integrate_sensitivity_gated(
    s0: &Tensor,
    traj: &Trajectory,
    f: &Mapper,
    gates: impl Fn(f64) -> (Tensor, Tensor),
    direction: Direction,
) -> Result<SensitivityTrace> {
    integrate(s0, traj, direction, true, |s, z, t| {
        let (a, b) = gates(t);
        sensitivity_ode_rhs_gated(s, z, t, f, &a, &b)
    })
}

fn as_batch(z: &Tensor) -> Result<Tensor> {
    if z.rank() == 1 {
        z.clone().reshape(vec![1, z.numel()])
    } else {
        Ok(z.clone())
    }
}

/// Gradients of a loss through a stack, by full reverse sweep.
#[derive(Clone, Debug)]
pub struct TapeGradients {
    pub output: Tensor,
    pub grad_z0: Tensor,
    pub params: Vec<Tensor>,
    /// `dL/dz_i` for every stored state (flow: `z_0..=z_L`; U-shaped:
    /// encoder states).
    pub states: Vec<Tensor>,
    pub loss: f64,
}

/// Reverse-mode gradients of `loss(F(z0))` with respect to the input, the
/// intermediate states and every parameter.
pub fn tape_gradients(
    model: &StackModel,
    z0: &Tensor,
    ts: &[f64],
    labels: Option<&[usize]>,
    loss: &LossFn,
) -> Result<TapeGradients> {
    let z = as_batch(z0)?;
    let ts = crate::residual::broadcast_times(ts, z.rows())?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let zv = tape.leaf(z);
    let emb = model.embed(&mut tape, &bound, &ts, labels)?;
    let st = model.forward_tape(&mut tape, &bound, zv, emb)?;
    let l = loss(&mut tape, st.output)?;
    let grads = tape.backward(l)?;
    Ok(TapeGradients {
        output: tape.value(st.output).clone(),
        grad_z0: grads.wrt(zv),
        params: model.collect_grads(&grads, &bound),
        states: st.states.iter().map(|&v| grads.wrt(v)).collect(),
        loss: tape.value(l).item(),
    })
}

/// Gradients assembled by the discrete adjoint recursion
/// `s_i = s_{i+1} dz_{i+1}/dz_i`, one unit at a time.
#[derive(Clone, Debug)]
pub struct AdjointGradients {
    pub grad_z0: Tensor,
    pub params: Vec<Tensor>,
    /// Same layout as [`TapeGradients::states`].
    pub states: Vec<Tensor>,
}

struct UnitPullback {
    skip: Option<Tensor>,
    input: Tensor,
    params: Vec<Tensor>,
}

fn unit_pullback(
    model: &StackModel,
    unit: usize,
    skip: Option<&Tensor>,
    input: &Tensor,
    ts: &[f64],
    labels: Option<&[usize]>,
    cot: &Tensor,
) -> Result<UnitPullback> {
    let mut tape = Tape::new();
    let bound: Bound = model.bind(&mut tape);
    let emb = model.embed(&mut tape, &bound, ts, labels)?;
    let sv = skip.map(|s| tape.leaf(s.clone()));
    let iv = tape.leaf(input.clone());
    let out = model.unit_apply(&mut tape, &bound, unit, sv, iv, emb)?;
    let c = tape.constant(cot.clone());
    let prod = tape.mul(out, c)?;
    let l = tape.sum(prod)?;
    let g = tape.backward(l)?;
    Ok(UnitPullback {
        skip: sv.map(|v| g.wrt(v)),
        input: g.wrt(iv),
        params: model.collect_grads(&g, &bound),
    })
}

fn accumulate(acc: &mut [Tensor], add: &[Tensor]) -> Result<()> {
    for (a, b) in acc.iter_mut().zip(add) {
        *a = a.add(b)?;
    }
    Ok(())
}

/// Runs the discrete adjoint through `model`.
pub fn discrete_adjoint(
    model: &StackModel,
    z0: &Tensor,
    ts: &[f64],
    labels: Option<&[usize]>,
    loss: &LossFn,
) -> Result<AdjointGradients> {
    let z = as_batch(z0)?;
    let ts = crate::residual::broadcast_times(ts, z.rows())?;
    // forward values of every state
    let mut tape = Tape::new();
    let consts = Bound {
        vars: model.params().iter().map(|p| tape.constant(p.clone())).collect(),
    };
    let zv = tape.constant(z.clone());
    let emb = model.embed(&mut tape, &consts, &ts, labels)?;
    let st = model.forward_tape(&mut tape, &consts, zv, emb)?;
    let val = |v: Var| tape.value(v).clone();

    // dL/d(output)
    let out_val = val(st.output);
    let mut lt = Tape::new();
    let ov = lt.leaf(out_val);
    let lv = loss(&mut lt, ov)?;
    let s_out = lt.backward(lv)?.wrt(ov);

    let mut params: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let l = model.depth();
    match model.config().fashion {
        Fashion::Flow => {
            let mut sens = vec![s_out.clone(); l + 1];
            for i in (0..l).rev() {
                let zi = val(st.states[i]);
                let pb = unit_pullback(model, i, Some(&zi), &zi, &ts, labels, &sens[i + 1])?;
                sens[i] = pb.input.add(&pb.skip.expect("flow units have a skip"))?;
                accumulate(&mut params, &pb.params)?;
            }
            Ok(AdjointGradients {
                grad_z0: sens[0].clone(),
                params,
                states: sens,
            })
        }
        Fashion::UShaped => {
            let enc: Vec<Tensor> = st.states.iter().map(|&v| val(v)).collect();
            let dec: Vec<Tensor> = st.decoder.iter().map(|&v| val(v)).collect();
            let mut adj_enc: Vec<Tensor> = enc.iter().map(|s| Tensor::zeros(s.shape())).collect();
            let mut adj_dec: Vec<Tensor> = dec.iter().map(|s| Tensor::zeros(s.shape())).collect();
            adj_dec[0] = s_out;
            // read-out unit i: (s_i, d_{i+1}) -> d_i; d_i is complete once
            // all shallower units are processed
            for i in 0..l - 1 {
                let pb = unit_pullback(model, l - 1 + i, Some(&enc[i]), &dec[i + 1], &ts, labels, &adj_dec[i])?;
                adj_enc[i] = adj_enc[i].add(&pb.skip.expect("read-out units have a skip"))?;
                adj_dec[i + 1] = adj_dec[i + 1].add(&pb.input)?;
                accumulate(&mut params, &pb.params)?;
            }
            // d_{L-1} = s_{L-1}
            adj_enc[l - 1] = adj_enc[l - 1].add(&adj_dec[l - 1])?;
            for i in (0..l - 1).rev() {
                let pb = unit_pullback(model, i, None, &enc[i], &ts, labels, &adj_enc[i + 1])?;
                adj_enc[i] = adj_enc[i].add(&pb.input)?;
                accumulate(&mut params, &pb.params)?;
            }
            Ok(AdjointGradients {
                grad_z0: adj_enc[0].clone(),
                params,
                states: adj_enc,
            })
        }
    }
}

/// Result of comparing the discrete adjoint against a full reverse sweep.
#[derive(Clone, Debug)]
pub struct AdjointCheck {
    pub tape: TapeGradients,
    pub adjoint: AdjointGradients,
    /// Normwise relative error of `dL/dz_0`.
    pub state_error: f64,
    /// Largest normwise relative error over parameter tensors.
    pub param_error: f64,
}

impl AdjointCheck {
    pub fn max_error(&self) -> f64 {
        self.state_error.max(self.param_error)
    }
}

/// Gradient tensors whose entries are all below this are compared in
/// absolute terms.
const REL_FLOOR: f64 = 1e-10;

/// Computes `dL/dz_0` and `dL/dtheta` both ways and reports the discrepancy.
pub fn adjoint_vs_autodiff_check(
    model: &StackModel,
    z0: &Tensor,
    ts: &[f64],
    labels: Option<&[usize]>,
    loss: &LossFn,
) -> Result<AdjointCheck> {
    let tape = tape_gradients(model, z0, ts, labels, loss)?;
    let adjoint = discrete_adjoint(model, z0, ts, labels, loss)?;
    let state_error = relative_error(&adjoint.grad_z0, &tape.grad_z0, REL_FLOOR);
    let param_error = adjoint
        .params
        .iter()
        .zip(&tape.params)
        .map(|(a, b)| relative_error(a, b, REL_FLOOR))
        .fold(0.0, f64::max);
    Ok(AdjointCheck {
        tape,
        adjoint,
        state_error,
        param_error,
    })
}

/// One depth of a [`SensitivityReport`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthSensitivity {
    pub depth: usize,
    /// Mean of the gate entries of the unit reading this state.
    pub alpha: f64,
    pub beta: f64,
    /// `||dL/dz_depth||_2`.
    pub norm: f64,
    /// `norm / max_depth norm` (0 when every norm is 0).
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub step: usize,
    pub rows: Vec<DepthSensitivity>,
}

impl SensitivityReport {
    pub const CSV_HEADER: &'static str = "step,depth,alpha,beta,sensitivity_norm,normalized";

    pub fn min_normalized(&self) -> f64 {
        self.rows.iter().map(|r| r.normalized).fold(f64::INFINITY, f64::min)
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.normalized).collect()
    }

    /// CSV rows without header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e}",
                self.step, r.depth, r.alpha, r.beta, r.norm, r.normalized
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows())
    }
}

/// Per-depth `||dL/dz_i||` for a batch, normalized by the maximum over depth
/// and paired with the gates of the unit that reads `z_i`.
///
/// Flow stacks report depths `0..L`; U-shaped stacks report the encoder
/// states `0..L-1` with their read-in gates.
pub fn sensitivity_report(
    model: &StackModel,
    z: &Tensor,
    ts: &[f64],
    labels: Option<&[usize]>,
    loss: &LossFn,
    step: usize,
) -> Result<SensitivityReport> {
    let g = tape_gradients(model, z, ts, labels, loss)?;
    let depths = match model.config().fashion {
        Fashion::Flow => model.depth(),
        Fashion::UShaped => model.depth() - 1,
    };
    let norms: Vec<f64> = g.states[..depths].iter().map(Tensor::norm_l2).collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let rows = norms
        .iter()
        .enumerate()
        .map(|(i, &norm)| {
            let gates = model.gates(i);
            DepthSensitivity {
                depth: i,
                alpha: gates.alpha.mean(),
                beta: gates.beta.mean(),
                norm,
                normalized: if max > 0.0 { norm / max } else { 0.0 },
            }
        })
        .collect();
    Ok(SensitivityReport { step, rows })
}
