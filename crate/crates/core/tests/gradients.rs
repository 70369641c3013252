use hyperadapt::gradcheck::{op_cases, pipeline_reports, run_case, Case, DEFAULT_STEP};
use hyperadapt::tensor::ElementwiseFn;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases() {
        let r = run_case(&case, SEEDS, DEFAULT_STEP).unwrap();
        assert!(r.passed(TOL), "{r:?}");
    }
}

#[test]
fn pipelines_match_finite_differences() {
    let reports = pipeline_reports(SEEDS, DEFAULT_STEP).unwrap();
    assert_eq!(reports.len(), 5);
    for r in reports {
        assert!(r.passed(TOL), "{r:?}");
    }
}

#[test]
fn wrong_derivative_is_flagged() {
    let bad = ElementwiseFn {
        name: "bad_sin",
        f: f64::sin,
        df: |x| 1.1 * x.cos(),
    };
    let case = Case::new("bad_sin", &[&[3, 3]], move |x| Ok(x[0].map(bad)));
    let r = run_case(&case, 3, DEFAULT_STEP).unwrap();
    assert!(!r.passed(TOL), "{r:?}");
    assert!(r.max_rel_err > 0.05);
}
