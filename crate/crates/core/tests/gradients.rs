use arconv::arconv::KernelSpec;
use arconv::autodiff::{Graph, ParamStore, Var};
use arconv::gradcheck::{find, registry, run_case, run_suite, CheckConfig, GradCase, Probe};
use arconv::tensor::{Shape, Tensor};
use arconv::Result;
use rand_chacha::ChaCha8Rng;

#[test]
fn wrong_sign_is_reported_under_the_op_name() {
    for op in ["sampling_map", "conv2d", "sigmoid"] {
        let cfg = CheckConfig {
            fault: Some(op.to_string()),
            ..Default::default()
        };
        let report = run_case(find(op).unwrap().as_ref(), &cfg).unwrap();
        assert!(!report.passed, "{op} passed with a negated gradient");
        assert_eq!(report.op, op);
        assert!(report.max_rel_err > 1.0);
    }
}

#[test]
fn fault_spreads_to_composite_checks() {
    let cfg = CheckConfig {
        fault: Some("sampling_map".into()),
        ..Default::default()
    };
    let report = run_suite(&cfg).unwrap();
    let failures = report.failures();
    assert!(failures.contains(&"sampling_map"));
    assert!(failures.contains(&"arconv"));
    assert!(!failures.contains(&"conv2d"));
}

#[test]
fn unknown_fault_is_a_config_error() {
    let cfg = CheckConfig {
        fault: Some("softmax".into()),
        ..Default::default()
    };
    assert!(run_suite(&cfg).is_err());
}

#[test]
fn registry_names_are_unique() {
    let mut names: Vec<_> = registry().iter().map(|c| c.op()).collect();
    let n = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), n);
}

/// Integer extents on a 3-point kernel put every outer sample exactly on a
/// grid line, where the interpolation is not differentiable.
struct OnGrid;

impl GradCase for OnGrid {
    fn op(&self) -> &'static str {
        "on_grid"
    }

    fn probe(&self, _: &mut ChaCha8Rng) -> Result<Probe> {
        let field = Shape::new(1, 1, 5, 5);
        Ok(Probe {
            inputs: vec![
                Tensor::from_fn(Shape::new(1, 2, 5, 5), |_, c, h, w| ((c * 7 + h * 3 + w * w) % 5) as f64 * 0.3 - 0.6),
                Tensor::full(field, 3.0),
                Tensor::full(field, 3.0),
            ],
            store: ParamStore::new(),
        })
    }

    fn forward(&self, g: &mut Graph<f64>, _: &ParamStore<f64>, x: &[Var]) -> Result<Var> {
        g.sampling_columns(x[0], x[1], x[2], KernelSpec::new(3, 3))
    }
}

#[test]
fn grid_line_probes_are_screened() {
    let cfg = CheckConfig {
        per_tensor: 25,
        ..Default::default()
    };
    let r = run_case(&OnGrid, &cfg).unwrap();
    assert!(r.screened > 0, "{r:?}");
    assert!(r.checked > 0, "{r:?}");
    assert!(r.passed, "{r:?}");
}
