mod common;

use common::gradients::check;
use nplf::ray_aggregation::AggregationMode;
use nplf::scene_io::RunConfig;

#[test]
fn finite_differences_match_in_every_group() {
    let cfg = RunConfig {
        ray_batch: 16,
        ..common::tiny_config()
    };
    let worst = check(&cfg, 10);
    let groups: Vec<&str> = worst.keys().map(|s| s.as_str()).collect();
    assert_eq!(groups, ["attn", "encoder", "key", "l_inf", "lf", "query", "value"]);
    for (g, e) in &worst {
        assert!(*e < 1e-3, "group {g}: relative error {e}");
    }
}

#[test]
fn finite_differences_match_for_baselines() {
    for (mode, k) in [(AggregationMode::Heuristic, 4), (AggregationMode::NaiveSum, 4), (AggregationMode::Attention, 0)] {
        let cfg = RunConfig {
            aggregation: mode,
            k_closest: k,
            ..common::tiny_config()
        };
        for (g, e) in check(&cfg, 4) {
            assert!(e < 1e-3, "{mode:?} K={k} group {g}: relative error {e}");
        }
    }
}
