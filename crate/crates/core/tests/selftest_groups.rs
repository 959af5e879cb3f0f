use gdc_core::selftest;

#[test]
fn gradient_suite_twenty_trials() {
    for group in selftest::gradient_suite(20, 11).unwrap() {
        println!("{} worst {:.2e}", group.name, group.worst);
        assert!(group.passed(), "{group:?}");
    }
}

#[test]
fn factorization_identity_both_precisions() {
    let g64 = selftest::factorization_identity::<f64>(120, 3).unwrap();
    assert!(g64.passed(), "{g64:?}");
    let g32 = selftest::factorization_identity::<f32>(120, 3).unwrap();
    assert!(g32.passed(), "{g32:?}");
}

#[test]
fn depthwise_reduction_and_cost_example() {
    let d = selftest::depthwise_reduction(5).unwrap();
    assert!(d.passed(), "{d:?}");
    let c = selftest::cost_example();
    assert!(c.passed(), "{c:?}");
}
