//! Pestov identity residuals on boundary-fitted phase-space grids, showing
//! second-order convergence, and the reflector boundary-term splitting.

use twistray::config::RunConfig;
use twistray::expr::ScalarField;
use twistray::geometry::{Component, PhasePoint};
use twistray::pestov::SmGrid;
use twistray::suite::CURVED;

fn main() {
    let cfg = RunConfig::from_json(CURVED).expect("shipped config");
    let chart = cfg.chart().expect("valid chart");
    let lam = cfg.lambda().expect("valid twist");
    let u = ScalarField::parse("exp(-x^2)*cos(theta - y)").expect("valid expression");
    let sample = |p: &PhasePoint| u.value([p.x, p.y, p.theta]);
    let mut prev: Option<f64> = None;
    for n in [16, 32, 64] {
        let g = SmGrid::annulus(&chart, &lam, cfg.grid.center, n + 1, n, n).expect("valid grid");
        let r = g.pestov_identity(&g.sample(&sample)).expect("identity terms");
        let order = prev.map_or(String::new(), |p| format!(", order {:.2}", (p / r.relative_residual).log2()));
        println!("n = {n}: lhs {:.6}, rhs {:.6}, relative residual {:.2e}{order}", r.lhs, r.rhs, r.relative_residual);
        prev = Some(r.relative_residual);
    }
    let g = SmGrid::annulus(&chart, &lam, cfg.grid.center, 33, 32, 32).expect("valid grid");
    let b = g.boundary_decomposition(Component::Reflector, &g.sample(&sample)).expect("reflector ring");
    println!("reflector pairing {:.6}, ring-only {:.6}, even/odd split {:.6}", b.lhs, b.lhs_tangential, b.split_rhs);
}
