use arc_core::analysis::{gradcheck, GradCheckTarget};
use std::time::Instant;

#[test]
fn targets() {
    for t in [GradCheckTarget::Rotation, GradCheckTarget::Routing, GradCheckTarget::ArcLayer] {
        let t0 = Instant::now();
        let r = gradcheck(t, 42, 1e-5, 1e-5).unwrap();
        eprintln!("{}: worst={:.3e} pass={} ({:.1}s)", r.config, r.metric, r.passed, t0.elapsed().as_secs_f64());
    }
}
