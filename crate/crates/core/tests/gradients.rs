use std::time::Instant;

use plvm::gradcheck::audit;

#[test]
fn finite_differences_match_the_tape() {
    let t = Instant::now();
    let r = audit(5);
    let worst = r.worst();
    eprintln!(
        "{} checks over {} tensors, worst {} = {:.2e}, {:.1}s",
        r.checks.len(),
        r.tensors,
        worst.name,
        worst.rel_err,
        t.elapsed().as_secs_f64()
    );
    let bad = r.failures(1e-4);
    assert!(bad.is_empty(), "{bad:#?}");
    assert!(t.elapsed().as_secs() < 120);
}

#[test]
fn audit_catches_a_wrong_gradient() {
    // the comparison itself: a 1% error must register
    assert!(plvm::gradcheck::rel_err(1.0, 1.01) > 1e-4);
    assert!(plvm::gradcheck::rel_err(1e-11, 0.0) < 1e-4);
}
