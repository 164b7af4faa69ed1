use nrdm::autodiff::{finite_difference_grad, relative_error, Tape, Var};
use nrdm::residual::{Fashion, MapperKind, ModelConfig, StackModel, TimeConditioning, Variant};
use nrdm::rng::{normal_vec, Seed};
use nrdm::sensitivity::tape_gradients;
use nrdm::training::{loss_sensitivity_reg, mse_tape, sensitivity_reg_tape, JacobianMode};
use nrdm::{Result, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// Five-point central differences. Deep stacks have gradient entries many
/// orders below the loss, where the two-point rounding floor is too coarse.
fn fd5(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor) -> Tensor {
    let h = 1e-3;
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = x0 + d;
            f(&probe).unwrap()
        };
        let near = at(h) - at(-h);
        let far = at(2.0 * h) - at(-2.0 * h);
        let v = (8.0 * near - far) / (12.0 * h);
        probe.data_mut()[i] = x0;
        g.data_mut()[i] = v;
    }
    g
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut Seed(seed).rng(), n)).unwrap()
}

/// Relative error between the tape gradient of `sum(w * op(x))` and central
/// differences, for a fixed random weighting `w`.
fn check_unary(op: impl Fn(&mut Tape, Var) -> Result<Var> + Copy, x: &Tensor, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = op(&mut tape, xv).unwrap();
    let w = randn(tape.value(y).shape(), seed);
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv).unwrap();
    let l = tape.sum(p).unwrap();
    let g = tape.backward(l).unwrap().wrt(xv);
    let fd = finite_difference_grad(
        |x| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = op(&mut t, xv)?;
            Ok(t.value(y).mul(&w)?.sum())
        },
        x,
        H,
    )
    .unwrap();
    relative_error(&g, &fd, 1e-10)
}

/// Same for binary ops, checking both operands.
fn check_binary(op: impl Fn(&mut Tape, Var, Var) -> Result<Var> + Copy, a: &Tensor, b: &Tensor, seed: u64) -> f64 {
    let ea = check_unary(
        |t, x| {
            let bv = t.constant(b.clone());
            op(t, x, bv)
        },
        a,
        seed,
    );
    let eb = check_unary(
        |t, x| {
            let av = t.constant(a.clone());
            op(t, av, x)
        },
        b,
        seed,
    );
    ea.max(eb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn elementwise_ops_match_finite_differences(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..5) {
        let x = randn(&[rows, cols], seed);
        let y = randn(&[rows, cols], seed + 1);
        prop_assert!(check_unary(|t, v| t.tanh(v), &x, seed) < TOL);
        prop_assert!(check_unary(|t, v| t.silu(v), &x, seed) < TOL);
        prop_assert!(check_unary(|t, v| t.square(v), &x, seed) < TOL);
        prop_assert!(check_unary(|t, v| t.softplus(v), &x, seed) < TOL);
        prop_assert!(check_unary(|t, v| t.scale(v, -1.7), &x, seed) < TOL);
        prop_assert!(check_unary(|t, v| t.sum(v), &x, seed) < TOL);
        prop_assert!(check_unary(|t, v| t.mean(v), &x, seed) < TOL);
        prop_assert!(check_binary(|t, a, b| t.add(a, b), &x, &y, seed) < TOL);
        prop_assert!(check_binary(|t, a, b| t.sub(a, b), &x, &y, seed) < TOL);
        prop_assert!(check_binary(|t, a, b| t.mul(a, b), &x, &y, seed) < TOL);
    }

    #[test]
    fn broadcasting_ops_match_finite_differences(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..5) {
        let x = randn(&[rows, cols], seed);
        let row = randn(&[cols], seed + 2);
        let one = randn(&[1], seed + 3);
        prop_assert!(check_binary(|t, a, b| t.add(a, b), &x, &row, seed) < TOL);
        prop_assert!(check_binary(|t, a, b| t.mul(a, b), &x, &one, seed) < TOL);
        prop_assert!(check_binary(|t, a, b| t.sub(a, b), &x, &row, seed) < TOL);
        prop_assert!(check_binary(|t, a, b| t.broadcast_add(a, b), &x, &row, seed) < TOL);
    }

    #[test]
    fn matmul_and_affine_match_finite_differences(seed in 0u64..10_000, n in 1usize..4, k in 1usize..5, m in 1usize..4) {
        let a = randn(&[n, k], seed);
        let w = randn(&[k, m], seed + 1);
        let b = randn(&[m], seed + 2);
        prop_assert!(check_binary(|t, x, y| t.matmul(x, y), &a, &w, seed) < TOL);
        let bias = b.clone();
        let affine_xw = move |t: &mut Tape, x: Var, y: Var| {
            let bv = t.constant(bias.clone());
            t.affine(x, y, bv)
        };
        prop_assert!(check_binary(&affine_xw, &a, &w, seed) < TOL);
        let wc = w.clone();
        let affine_b = move |t: &mut Tape, bv: Var| {
            let xv = t.constant(a.clone());
            let wv = t.constant(wc.clone());
            t.affine(xv, wv, bv)
        };
        prop_assert!(check_unary(&affine_b, &b, seed) < TOL);
    }
}

fn config(fashion: Fashion, depth: usize, mapper: MapperKind, variant: Variant) -> ModelConfig {
    ModelConfig {
        fashion,
        depth,
        width: 2,
        hidden: 6,
        mapper,
        embed_dim: 4,
        variant,
        alpha_init: 0.8,
        beta_init: 0.1,
        init_scale: 0.5,
        linear_init: -0.3,
        time_cond: if mapper == MapperKind::Mlp2 {
            TimeConditioning::Concat
        } else {
            TimeConditioning::None
        },
        ..ModelConfig::default()
    }
}

/// Initial scales that keep each unit's gain near one, so that no parameter's
/// gradient sinks below what central differences can resolve at L = 32.
fn deep_config(fashion: Fashion, depth: usize, mapper: MapperKind, variant: Variant) -> ModelConfig {
    let (init_scale, linear_init) = match (fashion, mapper) {
        (Fashion::Flow, MapperKind::Affine) => (1.5, 0.0),
        (Fashion::UShaped, MapperKind::Affine) => (2.0, 0.0),
        (Fashion::Flow, MapperKind::Mlp2) => (2.0, 0.0),
        // v2 and v3 leave the read-in output ungated
        (Fashion::UShaped, MapperKind::Mlp2) if matches!(variant, Variant::V2 | Variant::V3) => (8.0, 0.0),
        (Fashion::UShaped, MapperKind::Mlp2) => (10.0, 0.0),
        (Fashion::Flow, MapperKind::LinearScalar) => (1.0, 0.1),
        (Fashion::UShaped, MapperKind::LinearScalar) => (1.0, 1.25),
    };
    ModelConfig {
        init_scale,
        linear_init,
        ..config(fashion, depth, mapper, variant)
    }
}

/// Largest relative error over the input and every parameter tensor.
fn stack_gradient_error(model: &StackModel, seed: u64) -> f64 {
    let z = randn(&[3, 2], seed);
    let target = randn(&[3, 2], seed + 1);
    let ts = [0.2, 0.5, 0.9];
    let loss = |t: &mut Tape, out: Var| {
        let tv = t.constant(target.clone());
        mse_tape(t, out, tv)
    };
    let g = tape_gradients(model, &z, &ts, None, &loss).unwrap();
    let value = |m: &StackModel, z: &Tensor| -> Result<f64> {
        let diff = m.forward(z, &ts)?.sub(&target)?;
        Ok(diff.mul(&diff)?.sum() / diff.numel() as f64)
    };
    let fd_z = fd5(|z| value(model, z), &z);
    let mut worst = relative_error(&g.grad_z0, &fd_z, 1e-10);
    for (i, p) in model.params().iter().enumerate() {
        let fd = fd5(
            |p| {
                let mut m = model.clone();
                m.params_mut()[i] = p.clone();
                value(&m, &z)
            },
            p,
        );
        worst = worst.max(relative_error(&g.params[i], &fd, 1e-10));
    }
    worst
}

#[test]
fn stacks_match_finite_differences() {
    for fashion in [Fashion::Flow, Fashion::UShaped] {
        for mapper in [MapperKind::Affine, MapperKind::Mlp2, MapperKind::LinearScalar] {
            for variant in Variant::ALL {
                for depth in [2, 8, 32] {
                    let model = StackModel::new(deep_config(fashion, depth, mapper, variant), Seed(depth as u64)).unwrap();
                    let err = stack_gradient_error(&model, 11);
                    assert!(err < TOL, "{fashion:?} {mapper:?} {variant} L={depth}: {err:e}");
                }
            }
        }
    }
}

#[test]
fn film_and_class_conditioning_match_finite_differences() {
    let cfg = ModelConfig {
        time_cond: TimeConditioning::Film,
        ..config(Fashion::Flow, 3, MapperKind::Mlp2, Variant::V0)
    };
    let model = StackModel::new(cfg, Seed(5)).unwrap();
    assert!(stack_gradient_error(&model, 3) < TOL);

    let cfg = ModelConfig {
        num_classes: 3,
        ..config(Fashion::UShaped, 3, MapperKind::Mlp2, Variant::V0)
    };
    let model = StackModel::new(cfg, Seed(6)).unwrap();
    let z = randn(&[3, 2], 1);
    let labels = [2, 0, 1];
    let loss = |t: &mut Tape, out: Var| {
        let sq = t.square(out)?;
        t.mean(sq)
    };
    let g = tape_gradients(&model, &z, &[0.3], Some(&labels), &loss).unwrap();
    for (i, p) in model.params().iter().enumerate() {
        let fd = fd5(
            |p| {
                let mut m = model.clone();
                m.params_mut()[i] = p.clone();
                Ok(tape_gradients(&m, &z, &[0.3], Some(&labels), &loss)?.loss)
            },
            p,
        );
        assert!(relative_error(&g.params[i], &fd, 1e-10) < TOL, "{}", model.param_info()[i].name);
    }
}

#[test]
fn regularizer_gate_gradients_match_finite_differences() {
    let model = StackModel::new(config(Fashion::Flow, 4, MapperKind::Mlp2, Variant::V0), Seed(2)).unwrap();
    let inputs: Vec<Tensor> = (0..4).map(|u| randn(&[3, 2], 40 + u)).collect();
    let jdiags: Vec<Tensor> = inputs.iter().map(|_| randn(&[3, 2], 7)).collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let reg = sensitivity_reg_tape(&mut tape, &model, &bound, &jdiags).unwrap();
    let grads = model.collect_grads(&tape.backward(reg).unwrap(), &bound);
    // the Jacobians are held fixed, so the regularizer is a function of the
    // gates alone
    let value = |m: &StackModel| {
        let mut t = Tape::new();
        let b = m.bind(&mut t);
        let r = sensitivity_reg_tape(&mut t, m, &b, &jdiags)?;
        Ok(t.value(r).item())
    };
    for unit in 0..4 {
        let (ai, bi) = model.gate_indices(unit);
        for i in [ai, bi] {
            let fd = finite_difference_grad(
                |p| {
                    let mut m = model.clone();
                    m.params_mut()[i] = p.clone();
                    value(&m)
                },
                &model.params()[i],
                H,
            )
            .unwrap();
            assert!(relative_error(&grads[i], &fd, 1e-10) < TOL);
        }
    }
    // with exact Jacobians the tape and value paths agree
    let exact: Vec<Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(u, x)| {
            nrdm::training::mapper_jacobian_diag(&model, u, x, None, JacobianMode::Exact, &mut Seed(0).rng()).unwrap()
        })
        .collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let reg = sensitivity_reg_tape(&mut tape, &model, &bound, &exact).unwrap();
    let direct = loss_sensitivity_reg(&model, &inputs, None, JacobianMode::Exact, Seed(0)).unwrap();
    assert!((tape.value(reg).item() - direct).abs() < 1e-12);
}

