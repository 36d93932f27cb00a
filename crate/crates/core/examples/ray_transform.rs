//! The broken ray transform of f₀ + α on a curved chart: one sinogram row,
//! the transport equation for the primitive, and the dual-flow relation.

use twistray::config::RunConfig;
use twistray::dynamics::TraceOptions;
use twistray::geometry::{BoundaryParam, Component, PhasePoint};
use twistray::suite::CURVED;
use twistray::transform::{dual_relation_check, sinogram, transport_residual};

fn main() {
    let cfg = RunConfig::from_json(CURVED).expect("shipped config");
    let chart = cfg.chart().expect("valid chart");
    let lam = cfg.lambda().expect("valid twist");
    let f = cfg.transform.integrand().expect("valid integrand");
    let opts = TraceOptions::default();

    let param = BoundaryParam::new(&chart, Component::Emitter, [0.0, 0.0]).expect("emitter present");
    let rows = sinogram(&chart, &lam, &f, &param, 4, 9, &opts).expect("traceable rays");
    for r in rows.iter().take(9) {
        println!("s = {:.3}, angle = {:+.3}: If = {:+.6} ({:?})", r.s, r.angle, r.value, r.status);
    }

    let p = PhasePoint::new(0.1, 0.7, 0.4);
    for delta in [2e-3, 1e-3] {
        let r = transport_residual(&chart, &lam, &f, &p, delta, &opts).expect("interior point");
        println!("transport residual at δ = {delta:.0e}: {r:.3e}");
    }
    let d = dual_relation_check(&chart, &lam, &f, &p, &opts).expect("exiting rays");
    println!("u + u⁻(−v) − If = {:.2e}", d.defect);
}
