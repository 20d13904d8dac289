mod common;

use amalgam::engine::OpKind;

#[test]
fn every_op_kind_matches_central_differences() {
    for (kind, err) in common::op_suite() {
        assert!(err <= 1e-4, "{}: max relative error {err:e}", kind.name());
    }
}

#[test]
fn every_op_kind_is_covered() {
    assert_eq!(OpKind::ALL.len(), 15);
    for k in OpKind::ALL {
        let c = common::check_op(k, 99);
        assert!(c.entries > 0, "{}", k.name());
    }
}
