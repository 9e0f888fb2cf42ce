use egip_core::model::ModelConfig;
use egip_core::tensor::{huber_slope, huber_value, GradCheckConfig, Graph, Tensor};
use egip_core::verify::{op_suite, predictor_check};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 1usize..6)
}

#[test]
fn op_suite_clears_tolerance_on_fresh_seeds() {
    let cases = op_suite(101, 6, GradCheckConfig::default()).unwrap();
    assert!(cases.len() >= 100, "only {} cases", cases.len());
    for c in &cases {
        assert!(c.report.passed, "{} rel err {}", c.name, c.report.max_rel_err);
    }
}

#[test]
fn predictor_gradients_with_split_pathways() {
    let cfg = ModelConfig {
        share_pathway_parameters: true,
        positions_enabled: false,
        ..ModelConfig::tiny()
    };
    let r = predictor_check(12, cfg, GradCheckConfig::default()).unwrap();
    assert!(r.passed, "max rel err {}", r.max_rel_err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in dims().prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let s = g.softmax(v, 1).unwrap();
        let d = g.data(s);
        for row in d.chunks(x.cols()) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_by_identity_is_exact(x in dims().prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::new();
        let a = g.leaf(x.clone());
        let i = g.leaf(Tensor::eye(x.cols()));
        let y = g.matmul(a, i).unwrap();
        prop_assert_eq!(g.data(y), x.data());
    }

    #[test]
    fn backward_is_bit_deterministic(x in dims().prop_flat_map(|(r, c)| matrix(r, c))) {
        let run = || {
            let mut g = Graph::new();
            let a = g.leaf(x.clone().with_grad(true));
            let s = g.softmax(a, 1).unwrap();
            let t = g.tanh(s);
            let m = g.mul(t, a).unwrap();
            let out = g.sum(m);
            g.backward(out).unwrap().get(a).unwrap().to_vec()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn huber_is_c1_at_the_kink(delta in 0.01f64..50.0) {
        let eps = delta * 1e-9;
        for sign in [1.0, -1.0] {
            let e = sign * delta;
            let inner = huber_value(e - sign * eps, delta);
            let outer = huber_value(e + sign * eps, delta);
            prop_assert!((inner - outer).abs() <= 4.0 * eps * delta);
            let si = huber_slope(e - sign * eps, delta);
            let so = huber_slope(e + sign * eps, delta);
            prop_assert!((si - so).abs() <= 1e-8 * delta.max(1.0));
            prop_assert!((huber_value(e, delta) - 0.5 * delta * delta).abs() < 1e-12 * delta * delta);
        }
    }

    #[test]
    fn huber_matches_half_mse_inside(e in -1e3f64..1e3) {
        let delta = 1e3 + 1.0;
        prop_assert_eq!(huber_value(e, delta), 0.5 * e * e);
    }
}
