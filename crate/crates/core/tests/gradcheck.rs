mod support;

use proptest::prelude::*;
use support::gradcheck::{max_rel_error, op_cases, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    for case in op_cases(1) {
        let e = max_rel_error(&case).unwrap();
        assert!(e < TOLERANCE, "{}: relative error {e:e}", case.name);
    }
}

#[test]
fn cases_cover_every_graph_op() {
    let names: Vec<&str> = op_cases(0).iter().map(|c| c.name).collect();
    for op in [
        "add",
        "sub",
        "mul",
        "scale",
        "matmul",
        "add_bias",
        "conv2d",
        "relu",
        "avg_pool2d",
        "upsample_nearest2d",
        "reshape",
        "flatten",
        "sum",
        "mean",
        "l2_norm",
        "normalize_rows",
        "sq_l2_distance",
        "l1_distance",
        "cross_entropy",
        "elementwise_blend",
        "clamp",
    ] {
        assert!(names.contains(&op), "{op} has no gradient check");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_inputs_match_finite_differences(seed in 2u64..10_000) {
        for case in op_cases(seed) {
            let e = max_rel_error(&case).unwrap();
            prop_assert!(e < TOLERANCE, "{}: relative error {:e}", case.name, e);
        }
    }
}
