use dore_core::stats::{paired_ttest, welch_ttest, SIGNIFICANCE_LEVEL};
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    kind: String,
    a: Vec<f64>,
    b: Vec<f64>,
    statistic: f64,
    p_value: f64,
}

#[derive(Deserialize)]
struct Fixture {
    cases: Vec<Case>,
}

#[test]
fn matches_reference_values() {
    let text = include_str!("fixtures/ttest_reference.json");
    let fixture: Fixture = serde_json::from_str(text).unwrap();
    assert!(fixture.cases.len() >= 100);
    for (i, c) in fixture.cases.iter().enumerate() {
        let t = match c.kind.as_str() {
            "paired" => paired_ttest(&c.a, &c.b),
            "welch" => welch_ttest(&c.a, &c.b),
            other => panic!("unknown kind {other}"),
        }
        .unwrap();
        assert!(!t.degenerate, "case {i}");
        assert!((t.statistic - c.statistic).abs() < 1e-6, "case {i}: {} vs {}", t.statistic, c.statistic);
        assert!((t.p_value - c.p_value).abs() < 1e-6, "case {i}: {} vs {}", t.p_value, c.p_value);
        assert_eq!(t.significant, c.p_value < SIGNIFICANCE_LEVEL, "case {i}");
    }
}
