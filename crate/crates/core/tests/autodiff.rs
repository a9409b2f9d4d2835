use glmamba::audit::{op_audit, OP_EPS, OP_TOL};

#[test]
fn every_op_passes_gradient_audit() {
    let results = op_audit(OP_EPS).unwrap();
    assert!(results.len() > 50);
    let mut failed = Vec::new();
    for (name, r) in &results {
        println!("{name:28} checked {:4} max rel {:.2e}", r.checked, r.max_rel_err);
        if !r.passes(OP_TOL) {
            failed.push(format!("{name}: {r:?}"));
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}
