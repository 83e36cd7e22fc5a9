mod support;

use support::scenarios::{crash_case, crash_matrix, offline_burst};

#[test]
fn every_crash_point_recovers_exactly_once() {
    let cases = crash_matrix();
    assert_eq!(cases.len(), 11);
    let failures: Vec<String> = cases
        .into_iter()
        .filter_map(|(point, kind)| crash_case(point, kind).err().map(|e| format!("{point:?}/{kind:?}: {e}")))
        .collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn small_offline_burst_converges() {
    let spent = offline_burst(6, 1, 64 * 1024, 11).unwrap();
    assert!(spent.as_secs() <= 120, "{spent:?}");
}
