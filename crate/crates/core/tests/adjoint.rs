use nrdm::autodiff::{Tape, Var};
use nrdm::residual::{Fashion, ModelConfig, StackModel, TimeConditioning, Variant};
use nrdm::rng::{normal_vec, Seed};
use nrdm::sensitivity::{adjoint_vs_autodiff_check, sensitivity_report};
use nrdm::training::mse_tape;
use nrdm::{Result, Tensor};
use proptest::prelude::*;

fn batch(seed: u64, rows: usize, width: usize) -> Tensor {
    Tensor::new(vec![rows, width], normal_vec(&mut Seed(seed).rng(), rows * width)).unwrap()
}

fn model(fashion: Fashion, depth: usize, variant: Variant, seed: u64) -> StackModel {
    let cfg = ModelConfig {
        fashion,
        depth,
        width: 3,
        hidden: 16,
        embed_dim: 8,
        variant,
        alpha_init: 0.7,
        beta_init: 0.05,
        init_scale: 0.3,
        ..ModelConfig::default()
    };
    StackModel::new(cfg, Seed(seed)).unwrap()
}

fn mse_to(target: Tensor) -> impl Fn(&mut Tape, Var) -> Result<Var> {
    move |t, out| {
        let tv = t.constant(target.clone());
        mse_tape(t, out, tv)
    }
}

#[test]
fn adjoint_matches_reverse_sweep_across_the_matrix() {
    let z = batch(1, 4, 3);
    let loss = mse_to(batch(2, 4, 3));
    for fashion in [Fashion::Flow, Fashion::UShaped] {
        for depth in [2, 8, 32] {
            for variant in Variant::ALL {
                let m = model(fashion, depth, variant, depth as u64);
                let c = adjoint_vs_autodiff_check(&m, &z, &[0.1, 0.3, 0.6, 0.9], None, &loss).unwrap();
                assert!(c.max_error() < 1e-7, "{fashion:?} L={depth} {variant}: {:e}", c.max_error());
                for (a, b) in c.adjoint.states.iter().zip(&c.tape.states) {
                    assert!(nrdm::autodiff::relative_error(a, b, 1e-10) < 1e-7);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adjoint_agrees_for_random_models(
        seed in 0u64..10_000,
        depth in 2usize..12,
        u_shaped in any::<bool>(),
        film in any::<bool>(),
        v in 0usize..5,
    ) {
        let fashion = if u_shaped { Fashion::UShaped } else { Fashion::Flow };
        let mut m = model(fashion, depth, Variant::ALL[v], seed);
        if film {
            let cfg = ModelConfig { time_cond: TimeConditioning::Film, ..m.config().clone() };
            m = StackModel::new(cfg, Seed(seed)).unwrap();
        }
        let z = batch(seed, 3, 3);
        let loss = mse_to(batch(seed + 1, 3, 3));
        let c = adjoint_vs_autodiff_check(&m, &z, &[0.25], None, &loss).unwrap();
        prop_assert!(c.max_error() < 1e-7);
    }
}

#[test]
fn class_conditional_adjoint_matches() {
    let cfg = ModelConfig {
        num_classes: 4,
        ..model(Fashion::UShaped, 5, Variant::V0, 0).config().clone()
    };
    let m = StackModel::new(cfg, Seed(3)).unwrap();
    let z = batch(3, 4, 3);
    let loss = mse_to(batch(4, 4, 3));
    let c = adjoint_vs_autodiff_check(&m, &z, &[0.5], Some(&[0, 1, 2, 3]), &loss).unwrap();
    assert!(c.max_error() < 1e-7);
}

#[test]
fn report_covers_every_depth() {
    let z = batch(1, 4, 3);
    let loss = mse_to(batch(2, 4, 3));
    let flow = model(Fashion::Flow, 6, Variant::V0, 1);
    let r = sensitivity_report(&flow, &z, &[0.5], None, &loss, 0).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert!((r.normalized().iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-15);
    let u = model(Fashion::UShaped, 6, Variant::V0, 1);
    let r = sensitivity_report(&u, &z, &[0.5], None, &loss, 0).unwrap();
    assert_eq!(r.rows.len(), 5);
    assert_eq!(r.to_csv().lines().count(), 6);
}
