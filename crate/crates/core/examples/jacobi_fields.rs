//! Propagates a Jacobi frame along a reflecting ray and compares it with a
//! central-difference flow differential at the middle of every segment.

use twistray::dynamics::{trace_broken_ray, TraceOptions};
use twistray::geometry::{ConformalChart, PhasePoint};
use twistray::jacobi::{flow_differential_fd, frame_to_vector, growth_bound_check, propagate_frame, relative_error, JacobiFrame};
use twistray::lambda::LambdaField;

fn main() {
    let chart = ConformalChart::flat_annulus(0.4, 1.0);
    let lam = LambdaField::from_expr("0.6 + 0.3*sin(theta) + 0.2*x").expect("valid expression");
    let opts = TraceOptions::with_step(2e-3);
    let start = PhasePoint::new(0.9, 0.1, 3.0);
    let frame = JacobiFrame::new(0.3, -0.7, 0.5);

    let ray = trace_broken_ray(&chart, &lam, &start, &opts).expect("interior start");
    let track = propagate_frame(&chart, &lam, &ray, frame, opts.tan_eps).expect("transversal reflections");
    for j in &track.jumps {
        println!("jump at t = {:.4}: β = {:?}, ⟨v, ν⟩ = {:+.4}", j.t, j.beta, j.normal_component);
    }
    let xi = frame_to_vector(&chart, &lam, &start, &frame);
    for (k, seg) in ray.segments.iter().enumerate() {
        let t = 0.5 * (seg[0].t + seg[seg.len() - 1].t);
        let s = track.sample_before(t, 1.0).expect("sample on the ray");
        let fd = flow_differential_fd(&chart, &lam, &start, &xi, s.t, 1e-5, &opts).expect("same reflection pattern");
        println!(
            "segment {k}, t = {:.4}: J = ({:+.5}, {:+.5}), relative error vs FD {:.2e}",
            s.t,
            s.vector.j[0],
            s.vector.j[1],
            relative_error(&chart, &s.point, &s.vector, &fd)
        );
    }
    println!("{:?}", growth_bound_check(&chart, &track));
}
