use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::Activation;
use crate::params::ParamSet;
use crate::tensor::Tensor;

fn small(arch: Architecture, dim: usize, layers: usize) -> FlowSpec {
    FlowSpec::new(arch, dim, layers).hidden(vec![16, 16])
}

fn build(spec: &FlowSpec, seed: u64) -> (ParamSet, FlowStack) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let stack = FlowStack::new(&mut ps, "flow", spec, &mut rng).unwrap();
    (ps, stack)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, lo: f64, hi: f64) -> Tensor {
    let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

fn sup_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).max_abs()
}

#[test]
fn identity_at_zero_for_every_architecture() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for arch in [
        Architecture::Resnet,
        Architecture::Gru,
        Architecture::Coupling,
        Architecture::Linear,
    ] {
        for seed in 0..5 {
            let (ps, stack) = build(&small(arch, 3, 2), seed);
            let x = random_batch(&mut rng, 20, 3, -0.99, 0.99);
            let y = stack.eval(&ps, &[0.0; 20], &x).unwrap();
            assert!(sup_diff(&y, &x) < 1e-12, "{arch:?}");
        }
    }
}

#[test]
fn zero_initialized_coupling_is_identity() {
    let spec = small(Architecture::Coupling, 2, 2).zero_init(true);
    let (ps, stack) = build(&spec, 3);
    let x = Tensor::from_rows(&[vec![0.4, -2.0], vec![3.0, 1.0]]).unwrap();
    for t in [0.5, 3.0, 17.0] {
        assert_eq!(stack.eval(&ps, &[t, t], &x).unwrap(), x);
    }
}

#[test]
fn coupling_inverse_example() {
    // One coordinate, u·φ_u = ln 2 and v·φ_v = 3 at t = 1.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = ParamSet::new();
    let layer = CouplingFlow::new(
        &mut ps,
        "c",
        1,
        vec![0],
        &[4],
        Activation::Tanh,
        EmbeddingKind::Linear,
        true,
        &mut rng,
    )
    .unwrap();
    *ps.get_mut(layer.u.layers[1].bias) = Tensor::scalar(2f64.ln());
    *ps.get_mut(layer.v.layers[1].bias) = Tensor::scalar(3.0);
    *ps.get_mut(layer.phi_u.alpha) = Tensor::scalar(1.0);
    *ps.get_mut(layer.phi_v.alpha) = Tensor::scalar(1.0);
    let stack = FlowStack::from_layers(vec![FlowLayer::Coupling(layer)]).unwrap();
    let x = stack
        .eval_inverse(&ps, &[1.0], &Tensor::scalar(5.0), InverseConfig::default())
        .unwrap();
    assert!((x.data()[0] - 1.0).abs() < 1e-14);
    let y = stack.eval(&ps, &[1.0], &x).unwrap();
    assert!((y.data()[0] - 5.0).abs() < 1e-14);
}

#[test]
fn round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (arch, tol) in [
        (Architecture::Resnet, 1e-6),
        (Architecture::Gru, 1e-6),
        (Architecture::Coupling, 1e-10),
        (Architecture::Linear, 1e-10),
    ] {
        let (ps, stack) = build(&small(arch, 2, 3), 7);
        let x = random_batch(&mut rng, 30, 2, -0.99, 0.99);
        let times: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..10.0)).collect();
        let y = stack.eval(&ps, &times, &x).unwrap();
        let back = stack.eval_inverse(&ps, &times, &y, InverseConfig::default()).unwrap();
        assert!(sup_diff(&back, &x) < tol, "{arch:?}: {}", sup_diff(&back, &x));
    }
}

#[test]
fn resnet_inverse_converges_quickly() {
    let (ps, stack) = build(&small(Architecture::Resnet, 3, 1), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_batch(&mut rng, 10, 3, -3.0, 3.0);
    let y = stack.eval(&ps, &[4.0; 10], &x).unwrap();
    let cfg = InverseConfig {
        tol: 1e-9,
        max_iter: 100,
    };
    let back = stack.eval_inverse(&ps, &[4.0; 10], &y, cfg).unwrap();
    assert!(sup_diff(&back, &x) < 1e-6);
}

#[test]
fn non_convergence_reports_last_iterate() {
    let (ps, stack) = build(&small(Architecture::Resnet, 2, 1), 2);
    let y = Tensor::row(&[0.5, 0.5]);
    let cfg = InverseConfig {
        tol: 1e-300,
        max_iter: 3,
    };
    match stack.eval_inverse(&ps, &[2.0], &y, cfg) {
        Err(Error::NoConvergence {
            iterations,
            last_iterate,
            ..
        }) => {
            assert_eq!(iterations, 3);
            assert_eq!(last_iterate.len(), 2);
        }
        other => panic!("expected NoConvergence, got {other:?}"),
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let (ps, stack) = build(&small(Architecture::Coupling, 3, 2), 0);
    let x = Tensor::zeros(4, 2);
    assert!(stack.eval(&ps, &[1.0; 4], &x).is_err());
    assert!(stack.eval(&ps, &[1.0; 3], &Tensor::zeros(4, 3)).is_err());
}

#[test]
fn spec_validation() {
    let bad = FlowSpec::new(Architecture::Resnet, 2, 1).embedding(EmbeddingKind::Linear);
    assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    let bad = FlowSpec {
        spectral_coeff: 1.2,
        ..FlowSpec::new(Architecture::Gru, 2, 1)
    };
    assert!(bad.validate().is_err());
    let json = r#"{"architecture":"coupling","dim":2,"layers":1,"colour":3}"#;
    assert!(serde_json::from_str::<FlowSpec>(json).is_err());
}

#[test]
fn gru_residual_is_contractive_and_state_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = 3;
    for seed in 0..3 {
        let (ps, stack) = build(&small(Architecture::Gru, d, 1), seed);
        let FlowLayer::Gru(layer) = &stack.layers[0] else {
            unreachable!()
        };
        let n = 500;
        let x = random_batch(&mut rng, n, d, -1.0, 1.0);
        let y = random_batch(&mut rng, n, d, -1.0, 1.0);
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
        let mut g = Tape::no_grad(&ps);
        let t = g.constant(Tensor::column(&times));
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let rx = layer.residual(&mut g, t, xv);
        let ry = layer.residual(&mut g, t, yv);
        let fx = g.add(xv, rx);
        let fy = g.add(yv, ry);
        for i in 0..n {
            let dist = |a: &Tensor, b: &Tensor| {
                a.row_slice(i)
                    .iter()
                    .zip(b.row_slice(i))
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let dx = dist(&x, &y);
            assert!(dist(g.value(rx), g.value(ry)) < dx);
            assert!(dist(g.value(fx), g.value(fy)) <= 2.0 * dx);
            assert!(g.value(fx).row_slice(i).iter().all(|v| v.abs() < 1.0));
        }
    }
}

#[test]
fn gru_matches_gate_relabelled_formula() {
    // With z̃ = 1 − z the update reads h + φ (1 − z̃) (c − h).
    let (ps, stack) = build(&small(Architecture::Gru, 2, 1), 4);
    let FlowLayer::Gru(layer) = &stack.layers[0] else {
        unreachable!()
    };
    let h = Tensor::from_rows(&[vec![0.3, -0.7], vec![-0.1, 0.9]]).unwrap();
    let mut g = Tape::no_grad(&ps);
    let t = g.constant(Tensor::column(&[0.8, 5.0]));
    let hv = g.constant(h.clone());
    let gates = gru::GruFlow::gates(layer, &mut g, t, hv);
    let f = layer.forward(&mut g, t, hv);
    for i in 0..2 {
        for j in 0..2 {
            let z_tilde = 1.0 - g.value(gates.z).get(i, j);
            let c = g.value(gates.c).get(i, j);
            let phi = g.value(gates.phi).get(i, j);
            let hij = h.get(i, j);
            let want = hij + phi * (1.0 - z_tilde) * (c - hij);
            assert!((g.value(f).get(i, j) - want).abs() < 1e-15);
            let z = g.value(gates.z).get(i, j);
            assert!(z > 0.0 && z < gru::ALPHA);
            let r = g.value(gates.r).get(i, j);
            assert!(r > 0.0 && r < gru::BETA);
            assert!((0.0..1.0).contains(&phi));
        }
    }
}

/// Central-difference Jacobian of a single-row map.
fn numerical_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Tensor {
    let d = x.len();
    let mut j = Tensor::zeros(d, d);
    for k in 0..d {
        let mut p = x.to_vec();
        p[k] += h;
        let mut m = x.to_vec();
        m[k] -= h;
        let (fp, fm) = (f(&p), f(&m));
        for i in 0..d {
            j.set(i, k, (fp[i] - fm[i]) / (2.0 * h));
        }
    }
    j
}

#[test]
fn coupling_log_det_matches_numerical_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for d in 1..=4 {
        let (ps, stack) = build(&small(Architecture::Coupling, d, 3), d as u64);
        for _ in 0..5 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = rng.random_range(0.1..2.0);
            let f = |p: &[f64]| stack.eval(&ps, &[t], &Tensor::row(p)).unwrap().into_data();
            let jac = numerical_jacobian(f, &x, 1e-5);
            let numeric = jac.det().abs().ln();
            let mut g = Tape::no_grad(&ps);
            let tv = g.constant(Tensor::scalar(t));
            let xv = g.constant(Tensor::row(&x));
            let (_, ld) = stack.forward_log_det(&mut g, tv, xv).unwrap();
            let analytic = g.scalar(ld);
            assert!(
                (analytic - numeric).abs() <= 1e-6 * analytic.abs().max(1.0),
                "d={d}: {analytic} vs {numeric}"
            );
            // Inverse log-determinant is the negative at the image point.
            let yv = stack.forward(&mut g, tv, xv);
            let y = g.value(yv).clone();
            let yv = g.constant(y);
            let (back, inv_ld) = stack.inverse_log_det(&mut g, tv, yv).unwrap();
            assert!((g.scalar(inv_ld) + analytic).abs() < 1e-10);
            assert!(sup_diff(g.value(back), &Tensor::row(&x)) < 1e-10);
        }
    }
}

#[test]
fn det_exp_equals_exp_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for d in [2, 3] {
        for _ in 0..50 {
            let a = random_batch(&mut rng, d, d, -2.0, 2.0);
            let lhs = matrix_exp(&a).unwrap().det();
            let rhs = a.trace().exp();
            assert!(((lhs - rhs) / rhs).abs() < 1e-8);
        }
    }
}

#[test]
fn linear_semigroup_and_solve_ivp() {
    let mut ps = ParamSet::new();
    let a = Tensor::from_rows(&[vec![-0.4, 1.0], vec![-0.3, 0.2]]).unwrap();
    let flow = LinearFlow::with_matrix(&mut ps, "lin", a.clone()).unwrap();
    let stack = FlowStack::from_layers(vec![FlowLayer::Linear(flow)]).unwrap();
    let x = Tensor::row(&[0.7, -1.2]);
    let two = stack.eval(&ps, &[1.3], &stack.eval(&ps, &[0.4], &x).unwrap()).unwrap();
    let one = stack.eval(&ps, &[1.7], &x).unwrap();
    assert!(sup_diff(&one, &two) < 1e-9);

    let (t0, t) = (2.5, 0.9);
    let out = stack
        .solve_ivp(&ps, t0, x.data(), &[t, t0], InverseConfig::default())
        .unwrap();
    let want = x.matmul_t(false, &matrix_exp(&a.scale(t - t0)).unwrap(), true);
    assert!(sup_diff(&Tensor::row(&out[0]), &want) < 1e-12);
    assert!(sup_diff(&Tensor::row(&out[1]), &x) < 1e-12);
}

#[test]
fn solve_ivp_from_origin_is_forward() {
    let (ps, stack) = build(&small(Architecture::Resnet, 2, 2), 1);
    let x0 = [0.2, -0.4];
    let targets = [0.0, 1.0, 3.0];
    let out = stack.solve_ivp(&ps, 0.0, &x0, &targets, InverseConfig::default()).unwrap();
    for (row, &t) in out.iter().zip(&targets) {
        let f = stack.eval(&ps, &[t], &Tensor::row(&x0)).unwrap();
        assert_eq!(row.as_slice(), f.data());
    }
}

#[test]
fn autonomous_penalty_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_batch(&mut rng, 16, 2, -2.0, 2.0);
    let times: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..5.0)).collect();

    let (ps, lin) = build(&small(Architecture::Linear, 2, 1), 3);
    let mut g = Tape::no_grad(&ps);
    let xv = g.constant(x.clone());
    let p = lin.autonomous_penalty(&mut g, &times, xv, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(g.scalar(p).abs() < 1e-9);

    let (ps, res) = build(&small(Architecture::Resnet, 2, 2), 3);
    let mut g = Tape::no_grad(&ps);
    let xv = g.constant(x.clone());
    let p = res.autonomous_penalty(&mut g, &[0.0; 16], xv, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(g.scalar(p), 0.0);

    let p = res.autonomous_penalty(&mut g, &times, xv, &mut ChaCha8Rng::seed_from_u64(5));
    let got = g.scalar(p);
    assert!(got > 0.0);
    // Re-evaluate with the same split.
    let (first, second) = split_times(&times, &mut ChaCha8Rng::seed_from_u64(5));
    let direct = res.eval(&ps, &times, &x).unwrap();
    let mid = res.eval(&ps, &first, &x).unwrap();
    let composed = res.eval(&ps, &second, &mid).unwrap();
    let want = direct.sub(&composed).map(|v| v * v).sum() / 16.0;
    assert!((got - want).abs() < 1e-14 * want.max(1.0));
}

#[test]
fn fixed_point_inverse_is_differentiable() {
    let (ps, stack) = build(&small(Architecture::Resnet, 2, 1), 6);
    let y = Tensor::from_rows(&[vec![0.4, -0.3], vec![1.0, 0.2]]).unwrap();
    let id = ps.trainable_ids()[0];
    let loss = |ps: &ParamSet| {
        let mut g = Tape::new(ps);
        let t = g.constant(Tensor::column(&[1.5, 3.0]));
        let yv = g.constant(y.clone());
        let cfg = InverseConfig {
            tol: 1e-14,
            max_iter: 500,
        };
        let x = stack.inverse(&mut g, t, yv, cfg).unwrap();
        let s = g.sum(x);
        (g.scalar(s), g.backward(s).unwrap().param(id).cloned().unwrap())
    };
    let (_, grad) = loss(&ps);
    let h = 1e-6;
    for k in [0, 3, 7] {
        let mut p = ps.clone();
        p.get_mut(id).data_mut()[k] += h;
        let mut m = ps.clone();
        m.get_mut(id).data_mut()[k] -= h;
        let fd = (loss(&p).0 - loss(&m).0) / (2.0 * h);
        assert!((fd - grad.data()[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad.data()[k]);
    }
}

#[test]
fn mixed_stacks_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ps = ParamSet::new();
    let d = 2;
    let layers = vec![
        FlowLayer::Coupling(
            CouplingFlow::new(
                &mut ps,
                "a",
                d,
                vec![0],
                &[8],
                Activation::Tanh,
                EmbeddingKind::Linear,
                false,
                &mut rng,
            )
            .unwrap(),
        ),
        FlowLayer::ResNet(
            ResNetFlow::new(&mut ps, "b", d, &[8], EmbeddingKind::TanhLinear, 0.9, &mut rng).unwrap(),
        ),
        FlowLayer::Linear(LinearFlow::new(&mut ps, "c", d, &mut rng).unwrap()),
        FlowLayer::Gru(
            GruFlow::new(
                &mut ps,
                "d",
                d,
                &[8],
                EmbeddingKind::Fourier {
                    features: 4,
                    bounded: true,
                },
                0.9,
                &mut rng,
            )
            .unwrap(),
        ),
    ];
    let stack = FlowStack::from_layers(layers).unwrap();
    let x = random_batch(&mut rng, 10, d, -0.5, 0.5);
    assert!(sup_diff(&stack.eval(&ps, &[0.0; 10], &x).unwrap(), &x) < 1e-12);
    let y = stack.eval(&ps, &[0.6; 10], &x).unwrap();
    let back = stack.eval_inverse(&ps, &[0.6; 10], &y, InverseConfig::default()).unwrap();
    assert!(sup_diff(&back, &x) < 1e-6);
}
