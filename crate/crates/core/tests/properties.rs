use approx::assert_relative_eq;
use proptest::prelude::*;

use nflows::data::io::{decode, encode, Dataset};
use nflows::data::{gen_tpp, rng_for, TppKind};
use nflows::flows::{matrix_exp, split_times, Architecture, FlowSpec, FlowStack, InverseConfig};
use nflows::{ParamSet, Tensor};

fn arch() -> impl Strategy<Value = Architecture> {
    prop_oneof![
        Just(Architecture::Resnet),
        Just(Architecture::Gru),
        Just(Architecture::Coupling),
        Just(Architecture::Linear),
    ]
}

fn build(arch: Architecture, dim: usize, seed: u64) -> (ParamSet, FlowStack) {
    let mut ps = ParamSet::new();
    let spec = FlowSpec::new(arch, dim, 2).hidden(vec![8, 8]);
    let flow = FlowStack::new(&mut ps, "f", &spec, &mut rng_for(seed, 10)).unwrap();
    (ps, flow)
}

fn points(dim: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::collection::vec(-0.99f64..0.99, dim), 1..8)
        .prop_map(|rows| Tensor::from_rows(&rows).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_at_time_zero(arch in arch(), seed in 0u64..1000, x in points(2)) {
        let (ps, flow) = build(arch, 2, seed);
        let y = flow.eval(&ps, &vec![0.0; x.rows()], &x).unwrap();
        prop_assert!(y.sub(&x).max_abs() < 1e-12);
    }

    #[test]
    fn inverse_undoes_forward(arch in arch(), seed in 0u64..1000, x in points(3), t in 0.0f64..5.0) {
        let (ps, flow) = build(arch, 3, seed);
        let times = vec![t; x.rows()];
        let y = flow.eval(&ps, &times, &x).unwrap();
        let cfg = InverseConfig { tol: 1e-12, max_iter: 1000 };
        let back = flow.eval_inverse(&ps, &times, &y, cfg).unwrap();
        prop_assert!(back.sub(&x).max_abs() < 1e-8);
    }

    #[test]
    fn det_of_exp_is_exp_of_trace(v in prop::collection::vec(-2.0f64..2.0, 9)) {
        let a = Tensor::new(vec![3, 3], v).unwrap();
        assert_relative_eq!(matrix_exp(&a).unwrap().det(), a.trace().exp(), max_relative = 1e-10);
    }

    #[test]
    fn exp_of_sum_of_commuting_terms(s in -2.0f64..2.0, t in -2.0f64..2.0, v in prop::collection::vec(-1.0f64..1.0, 4)) {
        let a = Tensor::new(vec![2, 2], v).unwrap();
        let lhs = matrix_exp(&a.scale(s + t)).unwrap();
        let rhs = matrix_exp(&a.scale(s)).unwrap().matmul(&matrix_exp(&a.scale(t)).unwrap());
        prop_assert!(lhs.sub(&rhs).max_abs() < 1e-10 * lhs.max_abs().max(1.0));
    }

    #[test]
    fn time_splits_add_up(times in prop::collection::vec(0.0f64..50.0, 1..20), seed in 0u64..100) {
        let (a, b) = split_times(&times, &mut rng_for(seed, 0));
        for ((t, x), y) in times.iter().zip(&a).zip(&b) {
            prop_assert!(*x >= 0.0 && *y >= -1e-12 && *x <= *t);
            assert_relative_eq!(x + y, *t, epsilon = 1e-12);
        }
    }

    #[test]
    fn event_datasets_survive_the_file_format(seed in 0u64..50, n in 1usize..6, len in 1usize..20) {
        let ds = Dataset::Events(gen_tpp(&TppKind::poisson(), n, len, seed).unwrap());
        let back = decode(&encode(&ds)).unwrap();
        prop_assert_eq!(encode(&back), encode(&ds));
        prop_assert_eq!(back.row_count(), n * len);
    }
}
