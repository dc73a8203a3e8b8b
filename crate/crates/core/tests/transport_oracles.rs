use gst_core::experiment::{pushforward_identity_oracle, sinkhorn_1d_oracle};
use gst_core::losses::{check_pushforward_equivalence, nw_corner_plan, sinkhorn, CostMatrix, Metric, SinkhornConfig};
use gst_core::AnnotationTarget;
use proptest::prelude::*;

#[test]
fn push_forward_identity_with_exact_plans() {
    let report = pushforward_identity_oracle(300, 3).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn sinkhorn_agrees_with_sorted_matching() {
    let report = sinkhorn_1d_oracle(10, 4).unwrap();
    assert!(report.passed(), "{report:?}");
}

fn simplex(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nw_corner_plans_have_exact_marginals(
        a in prop::collection::vec(0.01f64..1.0, 1..40),
        b in prop::collection::vec(0.01f64..1.0, 1..12),
        d_mass in 0.0f64..50.0,
        g_mass in 0.0f64..50.0,
    ) {
        let (p_x, p_y) = (simplex(&a), simplex(&b));
        let plan = nw_corner_plan(&p_x, &p_y);
        for (r, p) in plan.row_sums().iter().zip(&p_x) {
            prop_assert!((r - p).abs() < 1e-12);
        }
        for (c, p) in plan.col_sums().iter().zip(&p_y) {
            prop_assert!((c - p).abs() < 1e-12);
        }
        let target = AnnotationTarget::from_values(p_y.iter().map(|p| p * g_mass).collect()).unwrap();
        let (lhs, rhs) = check_pushforward_equivalence(&plan, d_mass, &target).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_columns_are_exact_and_plan_nonnegative(
        pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0), 1..25),
        tgts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..6),
    ) {
        let src: Vec<[f64; 2]> = pts.iter().map(|&(r, c, _)| [r, c]).collect();
        let dst: Vec<[f64; 2]> = tgts.iter().map(|&(r, c)| [r, c]).collect();
        let p_x = simplex(&pts.iter().map(|p| p.2).collect::<Vec<_>>());
        let p_y = vec![1.0 / dst.len() as f64; dst.len()];
        let c = CostMatrix::from_points(&src, &dst, Metric::SquaredEuclidean, 1.0);
        let out = sinkhorn(&p_x, &p_y, &c, &SinkhornConfig::default()).unwrap();
        prop_assert!(out.plan.entries().iter().all(|&v| v >= 0.0));
        for (s, p) in out.plan.col_sums().iter().zip(&p_y) {
            prop_assert!((s - p).abs() < 1e-9);
        }
        prop_assert!(out.iterations >= 1 && out.iterations <= 100);
    }
}
