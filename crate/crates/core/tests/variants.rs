use nrdm::residual::{
    mrs_forward, variant_forward, Fashion, GateMode, GateParams, MapperKind, ModelConfig, StackModel, Variant,
};
use nrdm::rng::{normal_vec, Seed};
use nrdm::Tensor;
use proptest::prelude::*;

fn batch(seed: u64, rows: usize, width: usize) -> Tensor {
    Tensor::new(vec![rows, width], normal_vec(&mut Seed(seed).rng(), rows * width)).unwrap()
}

fn config(fashion: Fashion, depth: usize, variant: Variant, alpha: f64, beta: f64) -> ModelConfig {
    ModelConfig {
        fashion,
        depth,
        width: 3,
        hidden: 8,
        embed_dim: 8,
        variant,
        alpha_init: alpha,
        beta_init: beta,
        ..ModelConfig::default()
    }
}

fn fashion() -> impl Strategy<Value = Fashion> {
    prop_oneof![Just(Fashion::Flow), Just(Fashion::UShaped)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unit_gates_reduce_v0_to_v3(seed in 0u64..1000, fashion in fashion(), depth in 2usize..10) {
        let z = batch(seed, 4, 3);
        let a = StackModel::new(config(fashion, depth, Variant::V0, 1.0, 0.0), Seed(seed)).unwrap();
        let b = StackModel::new(config(fashion, depth, Variant::V3, 1.0, 0.0), Seed(seed)).unwrap();
        let ts = [0.1, 0.4, 0.7, 1.0];
        prop_assert!(a.forward(&z, &ts).unwrap().bit_eq(&b.forward(&z, &ts).unwrap()));
    }

    #[test]
    fn zero_shift_reduces_v0_to_v4(seed in 0u64..1000, fashion in fashion(), depth in 2usize..10, alpha in -2.0f64..2.0) {
        let z = batch(seed, 4, 3);
        let a = StackModel::new(config(fashion, depth, Variant::V0, alpha, 0.0), Seed(seed)).unwrap();
        let b = StackModel::new(config(fashion, depth, Variant::V4, alpha, 0.0), Seed(seed)).unwrap();
        prop_assert!(a.forward(&z, &[0.3]).unwrap().bit_eq(&b.forward(&z, &[0.3]).unwrap()));
    }

    #[test]
    fn closed_gates_give_the_identity(seed in 0u64..1000, fashion in fashion(), depth in 2usize..10, channel in any::<bool>()) {
        let z = batch(seed, 5, 3);
        for variant in [Variant::V0, Variant::V4] {
            let cfg = ModelConfig {
                gates: if channel { GateMode::Channel } else { GateMode::Scalar },
                ..config(fashion, depth, variant, 0.0, 0.0)
            };
            let m = StackModel::new(cfg, Seed(seed)).unwrap();
            prop_assert!(m.forward(&z, &[0.5]).unwrap().bit_eq(&z));
        }
    }

    #[test]
    fn unit_level_formulas(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -1.0f64..1.0) {
        let z = batch(seed, 3, 2);
        let g = GateParams::scalar(alpha, beta);
        let f = |t: &mut nrdm::autodiff::Tape, u| t.tanh(u);
        let fz = z.map(f64::tanh);
        let v0 = mrs_forward(&z, &g, f).unwrap();
        let want = z.add(&fz.scale(alpha)).unwrap().map(|v| v + beta);
        prop_assert!(v0.sub(&want).unwrap().max_abs() < 1e-14);
        let v1 = variant_forward(&z, &g, Variant::V1, f).unwrap();
        let want = z.add(&z.map(|v| (alpha * v + beta).tanh())).unwrap();
        prop_assert!(v1.sub(&want).unwrap().max_abs() < 1e-14);
        let v2 = variant_forward(&z, &g, Variant::V2, f).unwrap();
        let want = z.scale(alpha).add(&fz).unwrap().map(|v| v + beta);
        prop_assert!(v2.sub(&want).unwrap().max_abs() < 1e-14);
    }
}

#[test]
fn linear_mapper_stacks_compose_geometrically() {
    // z_{i+1} = z_i + alpha * a * z_i + beta, so z_L = r^L z_0 + beta (r^L - 1) / (r - 1)
    let (a, alpha, beta, depth) = (-0.4, 0.5, 0.1, 6);
    let cfg = ModelConfig {
        depth,
        width: 2,
        mapper: MapperKind::LinearScalar,
        time_cond: nrdm::residual::TimeConditioning::None,
        linear_init: a,
        alpha_init: alpha,
        beta_init: beta,
        ..ModelConfig::default()
    };
    let m = StackModel::new(cfg, Seed(0)).unwrap();
    let z = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
    let out = m.forward(&z, &[0.0]).unwrap();
    let r: f64 = 1.0 + alpha * a;
    let geo = beta * (r.powi(depth as i32) - 1.0) / (r - 1.0);
    for (o, z0) in out.data().iter().zip(z.data()) {
        assert!((o - (r.powi(depth as i32) * z0 + geo)).abs() < 1e-13);
    }
}
