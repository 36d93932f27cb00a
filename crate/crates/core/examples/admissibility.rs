//! Admissibility of the flat annulus for two twists: λ = 0 passes, the
//! constant λ = 0.5 fails the curvature sign condition K_λ = λ² > 0.

use twistray::admissibility::{check_admissible, AdmissibilityOptions};
use twistray::dynamics::TraceOptions;
use twistray::geometry::ConformalChart;
use twistray::lambda::LambdaField;

fn main() {
    let chart = ConformalChart::flat_annulus(0.5, 1.0);
    let opts = AdmissibilityOptions {
        rays: 2000,
        ..Default::default()
    };
    for lam in [LambdaField::constant(0.0), LambdaField::constant(0.5)] {
        let r = check_admissible(&chart, &lam, &opts, &TraceOptions::default()).expect("both boundary curves present");
        println!("λ = {}", lam.source());
        println!("  emitter margin {:.6}", r.emitter_convex.value);
        println!("  reflector curvature {:?}", r.reflector_curvature.map(|w| w.value));
        println!("  max K_λ {:.6}", r.curvature_sign.value);
        println!("  trapped {} of {}, a* = {:.4}", r.nontrapping.trapped, r.nontrapping.rays, r.transversality.a_star);
        println!("  {:?}", r.verdict);
    }
}
