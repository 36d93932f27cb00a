//! The acceptance suite: ten oracle- and property-based checks at desk scale,
//! shared by `twistray selftest` and the `acceptance` test target.

use crate::admissibility::{check_admissible, curvature_identities, emitter_starts, interior_points, AdmissibilityOptions};
use crate::cli;
use crate::config::RunConfig;
use crate::dynamics::{check_time_reversal, flow, rk4_step, trace_broken_ray, trace_backward, TraceOptions};
use crate::expr::ScalarField;
use crate::geometry::{Component, ConformalChart, PhasePoint};
use crate::inversion::{data_on_rays, kernel_analysis, reconstruct, reconstruction_errors, BasisSpec, ForwardSystem};
use crate::jacobi::{flow_differential_fd, frame_to_vector, propagate_frame, relative_error, JacobiFrame};
use crate::lambda::LambdaField;
use crate::pestov::SmGrid;
use crate::transform::{broken_transform, dual_relation_check, transport_residual, GaugeField, IntegrandField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::time::Instant;

pub const FLAT_ANNULUS: &str = include_str!("../../../configs/flat_annulus.json");
pub const CURVED: &str = include_str!("../../../configs/curved.json");
pub const ECCENTRIC: &str = include_str!("../../../configs/eccentric.json");

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    /// wall-clock budget; None when the criterion has none
    pub budget: Option<f64>,
}

impl Check {
    pub fn line(&self) -> String {
        let budget = self.budget.map_or(String::new(), |b| format!(" / {b:.0}s"));
        format!(
            "{} {:>2} {:<28} [{:.2}s{}] {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            budget,
            self.detail
        )
    }
}

type Outcome = Result<(bool, String), String>;

fn timed(id: usize, name: &'static str, budget: Option<f64>, f: impl FnOnce() -> Outcome) -> Check {
    let t0 = Instant::now();
    let out = f();
    let seconds = t0.elapsed().as_secs_f64();
    let (ok, detail) = out.unwrap_or_else(|e| (false, format!("error: {e}")));
    let in_time = budget.map_or(true, |b| seconds < b);
    let detail = if in_time { detail } else { format!("{detail}; over time budget") };
    Check {
        id,
        name,
        passed: ok && in_time,
        detail,
        seconds,
        budget,
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn config(src: &str) -> Result<RunConfig, String> {
    RunConfig::from_json(src).map_err(err)
}

/// Runs every check; `scratch` receives the determinism run outputs.
pub fn run_all(scratch: &Path) -> Vec<Check> {
    vec![
        integrator_order(),
        dual_flow(),
        jacobi_oracle(),
        gauge_annihilation(),
        pestov_identity(),
        curvature_identities_check(),
        admissibility_regression(),
        inversion(),
        transport(),
        determinism(scratch),
    ]
}

const FLAT_PHI: &str = "0.1*(x^2 - y^2)";

/// Endpoint error of RK4 after one period of the λ = 1 circle, n steps.
/// With φ = 0 the fiber angle is exactly linear in t and RK4 reduces to
/// Simpson's rule on a periodic integrand, exact at the period for n ≥ 2. The
/// harmonic φ = 0.1(x² − y²) is a flat metric too, its circles still close
/// after t = 2π, and RK4 shows its generic fourth order there.
fn circle_error(phi: &str, n: usize) -> f64 {
    let chart = ConformalChart::new(ScalarField::parse(phi).expect("valid expression"), None, None);
    let lam = LambdaField::constant(1.0);
    let h = TAU / n as f64;
    let mut s = [0.0, 0.0, 0.0];
    for _ in 0..n {
        s = rk4_step(&chart, &lam, s, h);
    }
    s[0].hypot(s[1])
}

pub fn integrator_order() -> Check {
    timed(1, "integrator order", Some(1.0), || {
        let fine_n = (TAU / 1e-3).round() as usize;
        let errs: Vec<f64> = [32, 64, 128].iter().map(|&n| circle_error(FLAT_PHI, n)).collect();
        let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
        let fine = circle_error(FLAT_PHI, fine_n);
        let plain = circle_error("0", fine_n);
        let ok = ratios.iter().all(|r| (12.0..=20.0).contains(r)) && fine <= 1e-8 && plain <= 1e-8;
        Ok((
            ok,
            format!(
                "halving ratios {:.2}, {:.2}; error at h=1e-3 {fine:.2e} (φ=0 chart: {plain:.2e})",
                ratios[0], ratios[1]
            ),
        ))
    })
}

pub fn dual_flow() -> Check {
    timed(2, "dual flow law", Some(10.0), || {
        let cfg = config(CURVED)?;
        let (chart, lam) = (cfg.chart().map_err(err)?, cfg.lambda().map_err(err)?);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = interior_points(&chart, 100, &mut rng).map_err(err)?;
        let starts: Vec<PhasePoint> = pts.iter().map(|q| PhasePoint::new(q[0], q[1], rng.gen_range(0.0..TAU))).collect();
        let opts = TraceOptions::default();
        let devs: Vec<f64> = starts
            .par_iter()
            .map(|p| check_time_reversal(&chart, &lam, p, &opts).map(|d| d.max()))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let worst = devs.iter().copied().fold(0.0, f64::max);
        Ok((worst <= 1e-6, format!("max deviation {worst:.2e} over {} starts", devs.len())))
    })
}

/// Flow time from the emitter to the start of the Jacobi comparison rays.
pub const JACOBI_LEAD: f64 = 0.05;

/// Largest Jacobi-vs-FD error at the segment midpoints of one ray, or None if
/// the ray is not a transversal broken ray with one or two reflections.
fn jacobi_ray(chart: &ConformalChart, lam: &LambdaField, emitted: &PhasePoint, frame: JacobiFrame, opts: &TraceOptions) -> Option<f64> {
    // start a little inside so the perturbed starts stay in the domain
    let p = &flow(chart, lam, emitted, JACOBI_LEAD, opts.step);
    let ray = trace_broken_ray(chart, lam, p, opts).ok()?;
    let n = ray.reflection_count();
    if !ray.exited() || !(1..=2).contains(&n) || ray.events.iter().any(|e| e.normal_component.abs() < 0.1) {
        return None;
    }
    let track = propagate_frame(chart, lam, &ray, frame, opts.tan_eps).ok()?;
    let xi = frame_to_vector(chart, lam, p, &frame);
    let mut worst: f64 = 0.0;
    for seg in &ray.segments {
        let s = track.sample_before(0.5 * (seg[0].t + seg[seg.len() - 1].t), 1.0)?;
        let fd = flow_differential_fd(chart, lam, p, &xi, s.t, 1e-5, opts).ok()?;
        worst = worst.max(relative_error(chart, &s.point, &s.vector, &fd));
    }
    Some(worst)
}

pub fn jacobi_oracle() -> Check {
    timed(3, "Jacobi vs finite differences", Some(30.0), || {
        let cfg = config(CURVED)?;
        let (chart, lam) = (cfg.chart().map_err(err)?, cfg.lambda().map_err(err)?);
        let opts = TraceOptions::with_step(2e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut errors = Vec::new();
        let mut drawn = 0;
        while errors.len() < 100 && drawn < 2000 {
            let starts = emitter_starts(&chart, 100, 0.05, &mut rng).map_err(err)?;
            let frames: Vec<JacobiFrame> = (0..starts.len())
                .map(|_| JacobiFrame::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            drawn += starts.len();
            let batch: Vec<Option<f64>> = starts
                .par_iter()
                .zip(&frames)
                .map(|(p, f)| jacobi_ray(&chart, &lam, p, *f, &opts))
                .collect();
            errors.extend(batch.into_iter().flatten());
        }
        errors.truncate(100);
        let worst = errors.iter().copied().fold(0.0, f64::max);
        let ok = errors.len() == 100 && worst <= 1e-4;
        Ok((ok, format!("max relative error {worst:.2e} on {} rays ({drawn} drawn)", errors.len())))
    })
}

pub fn gauge_annihilation() -> Check {
    timed(4, "gauge annihilation", Some(10.0), || {
        let cfg = config(CURVED)?;
        let (chart, lam) = (cfg.chart().map_err(err)?, cfg.lambda().map_err(err)?);
        let gauge = GaugeField::new(ScalarField::parse("sin(x + 2*y) + 0.5*x*y").map_err(err)?);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let starts = emitter_starts(&chart, 200, 0.05, &mut rng).map_err(err)?;
        let h_sup = interior_points(&chart, 2000, &mut rng)
            .map_err(err)?
            .iter()
            .map(|q| gauge.potential(&chart, q[0], q[1]).abs())
            .fold(0.0, f64::max);
        let opts = TraceOptions::default();
        let vals: Vec<f64> = starts
            .par_iter()
            .map(|p| broken_transform(&chart, &lam, &gauge, p, &opts))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let worst = vals.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let tol = 1e-6 * (1.0 + h_sup);
        Ok((worst <= tol, format!("max |I(dh)| {worst:.2e}, tolerance {tol:.2e}")))
    })
}

/// G(x, y, θ) + G(x, y, 2θ_n + π − θ), invariant under the reflection at a circle about `center`.
fn symmetrized(center: [f64; 2]) -> impl Fn(&PhasePoint) -> f64 + Sync {
    move |p: &PhasePoint| {
        let g = |t: f64| (p.x + 2.0 * p.y).sin() * t.cos() + p.x * (2.0 * t).sin() + 0.4 * (3.0 * t - p.y).cos();
        let n = (p.y - center[1]).atan2(p.x - center[0]);
        g(p.theta) + g(2.0 * n + PI - p.theta)
    }
}

pub fn pestov_identity() -> Check {
    timed(5, "Pestov identity", Some(300.0), || {
        let mut worst_fine: f64 = 0.0;
        let mut min_order = f64::INFINITY;
        let mut worst_pairing: f64 = 0.0;
        let mut worst_reduction: f64 = 0.0;
        for src in [ECCENTRIC, CURVED] {
            let cfg = config(src)?;
            let (chart, lam) = (cfg.chart().map_err(err)?, cfg.lambda().map_err(err)?);
            let center = cfg.grid.center;
            let grids: Vec<SmGrid> = [32, 64]
                .iter()
                .map(|&n| SmGrid::annulus(&chart, &lam, center, n + 1, n, n))
                .collect::<Result<_, _>>()
                .map_err(err)?;
            for f in &cfg.grid.functions {
                let f = ScalarField::parse(f).map_err(err)?;
                let u = |p: &PhasePoint| f.value([p.x, p.y, p.theta]);
                let r: Vec<f64> = grids
                    .iter()
                    .map(|g| g.pestov_identity(&g.sample(&u)).map(|r| r.relative_residual))
                    .collect::<Result<_, _>>()
                    .map_err(err)?;
                worst_fine = worst_fine.max(r[1]);
                min_order = min_order.min((r[0] / r[1]).log2());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let g = &grids[0];
            let a: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for c in [Component::Reflector, Component::Emitter] {
                worst_pairing = worst_pairing.max(g.even_odd_pairing(c, &a, &b).map_err(err)?.abs());
            }
            let rc = chart.defining(Component::Reflector).and_then(|d| d.center()).unwrap_or(center);
            for g in &grids {
                let b = g.boundary_decomposition(Component::Reflector, &g.sample(&symmetrized(rc))).map_err(err)?;
                worst_reduction = worst_reduction.max((b.lhs - b.reduced_rhs).abs() / b.lhs.abs());
            }
        }
        let ok = worst_fine <= 2e-2 && min_order >= 1.5 && worst_pairing <= 1e-12 && worst_reduction <= 2e-2;
        Ok((
            ok,
            format!(
                "residual at 64 {worst_fine:.2e}, min order {min_order:.2}, even/odd pairing {worst_pairing:.1e}, boundary reduction {worst_reduction:.1e}"
            ),
        ))
    })
}

pub fn curvature_identities_check() -> Check {
    timed(6, "curvature and dual identities", Some(5.0), || {
        let cfg = config(CURVED)?;
        let (chart, lam) = (cfg.chart().map_err(err)?, cfg.lambda().map_err(err)?);
        let ids = curvature_identities(&chart, &lam, 1000, 6).map_err(err)?;
        let worst = ids.max();
        Ok((worst <= 1e-8, format!("max identity defect {worst:.2e} over {} samples", ids.samples)))
    })
}

pub fn admissibility_regression() -> Check {
    timed(7, "admissibility regression", Some(30.0), || {
        let cfg = config(FLAT_ANNULUS)?;
        let chart = cfg.chart().map_err(err)?;
        let opts = AdmissibilityOptions {
            rays: 10_000,
            ..cfg.admissibility
        };
        let trace = cfg.integrator.trace_options();
        let r = check_admissible(&chart, &LambdaField::constant(0.0), &opts, &trace).map_err(err)?;
        let refl = r.reflector_curvature.map_or(f64::NAN, |w| w.value);
        let good = r.verdict.admissible
            && (r.emitter_convex.value - 1.0).abs() <= 1e-9
            && (refl + 2.0).abs() <= 1e-9
            && r.nontrapping.trapped == 0
            && r.transversality.max_reflections <= 1;
        let twisted = check_admissible(&chart, &LambdaField::constant(0.5), &opts, &trace).map_err(err)?;
        let rejected = !twisted.verdict.admissible
            && !twisted.verdict.curvature_sign
            && (twisted.curvature_sign.value - 0.25).abs() <= 1e-9;
        Ok((
            good && rejected,
            format!(
                "λ=0: margin {:.12}, reflector {refl:.12}, trapped {}, max reflections {}; λ=0.5: K_λ {:.6}, admissible {}",
                r.emitter_convex.value,
                r.nontrapping.trapped,
                r.transversality.max_reflections,
                twisted.curvature_sign.value,
                twisted.verdict.admissible
            ),
        ))
    })
}

pub fn inversion() -> Check {
    timed(8, "inversion modulo gauge", Some(120.0), || {
        let cfg = config(FLAT_ANNULUS)?;
        let (chart, lam) = (cfg.chart().map_err(err)?, cfg.lambda().map_err(err)?);
        let spec = &cfg.inversion;
        let trace = cfg.integrator.trace_options();
        let basis = BasisSpec::for_chart(&chart, spec.degree).map_err(err)?;
        let m0 = basis.scalar_dim();
        let system = ForwardSystem::assemble(&chart, &lam, basis, &spec.sampling, &trace, spec.quadrature).map_err(err)?;
        let analysis = kernel_analysis(&system).map_err(err)?;
        let rep = analysis.report();
        let truth = IntegrandField::parse(&spec.f0, "0.3*y + 0.1", "-0.2*x").map_err(err)?;
        let data = data_on_rays(&chart, &lam, &truth, &system.rays, &trace);
        let rec = reconstruct(&system, &analysis, &data, spec.regularization).map_err(err)?;
        let f0 = |x: f64, y: f64| truth.f0.value([x, y, 0.0]);
        let alpha = |x: f64, y: f64| [truth.alpha[0].value([x, y, 0.0]), truth.alpha[1].value([x, y, 0.0])];
        let e = reconstruction_errors(&system, &analysis, &chart, &rec, &f0, &alpha).map_err(err)?;
        let ok = m0 == 25
            && system.rays.len() + system.dropped == 2000
            && rep.max_gauge_rayleigh <= 1e-5
            && rep.margin >= 1e-3
            && e.f0_error <= 1e-2
            && e.alpha_error <= 1e-2;
        Ok((
            ok,
            format!(
                "m0 {m0}, {} rays, gauge Rayleigh {:.1e}·σmax, margin {:.2e}, f0 error {:.2e}, α error {:.2e}",
                system.rays.len(),
                rep.max_gauge_rayleigh,
                rep.margin,
                e.f0_error,
                e.alpha_error
            ),
        ))
    })
}

/// Interior phase points whose forward and backward rays reflect and exit transversally.
fn non_glancing_points(chart: &ConformalChart, lam: &LambdaField, n: usize, opts: &TraceOptions, rng: &mut ChaCha8Rng) -> Result<Vec<PhasePoint>, String> {
    let transversal = |ray: &crate::dynamics::BrokenRay| {
        ray.exited()
            && ray.events.iter().all(|e| e.normal_component.abs() >= 0.1)
            && chart
                .normal_component(Component::Emitter, &ray.end)
                .map_or(false, |c| c.abs() >= 0.1)
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..100 {
        if out.len() >= n {
            break;
        }
        let pts = interior_points(chart, n, rng).map_err(err)?;
        let cands: Vec<PhasePoint> = pts.iter().map(|q| PhasePoint::new(q[0], q[1], rng.gen_range(0.0..TAU))).collect();
        let keep: Vec<bool> = cands
            .par_iter()
            .map(|p| {
                let fwd = trace_broken_ray(chart, lam, p, opts);
                let back = trace_backward(chart, lam, p, opts);
                matches!((fwd, back), (Ok(f), Ok(b)) if transversal(&f) && transversal(&b))
            })
            .collect();
        out.extend(cands.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p));
    }
    out.truncate(n);
    Ok(out)
}

pub fn transport() -> Check {
    timed(9, "transport equation", Some(30.0), || {
        let cfg = config(CURVED)?;
        let (chart, lam) = (cfg.chart().map_err(err)?, cfg.lambda().map_err(err)?);
        let f = cfg.transform.integrand().map_err(err)?;
        let opts = TraceOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let delta = 1e-3;
        let mut pts = Vec::new();
        let mut res: Vec<[f64; 2]> = Vec::new();
        for _ in 0..20 {
            if pts.len() >= 100 {
                break;
            }
            let cands = non_glancing_points(&chart, &lam, 100, &opts, &mut rng)?;
            // points whose ±2δ flow leaves the interior are redrawn
            let r: Vec<Option<[f64; 2]>> = cands
                .par_iter()
                .map(|p| {
                    let a = transport_residual(&chart, &lam, &f, p, delta, &opts).ok()?;
                    let b = transport_residual(&chart, &lam, &f, p, 2.0 * delta, &opts).ok()?;
                    Some([a, b])
                })
                .collect();
            for (p, r) in cands.into_iter().zip(r) {
                if let Some(r) = r {
                    pts.push(p);
                    res.push(r);
                }
            }
        }
        pts.truncate(100);
        res.truncate(100);
        let worst = res.iter().map(|r| r[0].abs()).fold(0.0, f64::max);
        let rms = |k: usize| (res.iter().map(|r| r[k] * r[k]).sum::<f64>() / res.len() as f64).sqrt();
        let ratio = rms(1) / rms(0);
        let defects: Vec<f64> = pts
            .par_iter()
            .map(|p| dual_relation_check(&chart, &lam, &f, p, &opts).map(|d| d.defect.abs()))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let dual = defects.iter().copied().fold(0.0, f64::max);
        let ok = pts.len() == 100 && worst <= 1e-5 && (3.0..=5.0).contains(&ratio) && dual <= 1e-6;
        Ok((
            ok,
            format!(
                "max residual {worst:.2e} at δ=1e-3 on {} points, Richardson ratio {ratio:.2}, dual defect {dual:.2e}",
                pts.len()
            ),
        ))
    })
}

/// A reduced copy of a shipped config so every command runs in seconds.
fn small_config(src: &str) -> Result<String, String> {
    let mut v: serde_json::Value = serde_json::from_str(src).map_err(err)?;
    let set = |v: &mut serde_json::Value, path: &[&str], x: serde_json::Value| {
        let mut cur = v;
        for k in &path[..path.len() - 1] {
            cur = cur
                .as_object_mut()
                .expect("config sections are objects")
                .entry(*k)
                .or_insert_with(|| serde_json::json!({}));
        }
        cur[path[path.len() - 1]] = x;
    };
    set(&mut v, &["rays", "count"], 24.into());
    set(&mut v, &["grid", "sizes"], serde_json::json!([12, 16]));
    set(&mut v, &["transform", "arclength"], 12.into());
    set(&mut v, &["transform", "angles"], 8.into());
    set(&mut v, &["admissibility", "rays"], 200.into());
    set(&mut v, &["admissibility", "interior_rays"], 100.into());
    set(&mut v, &["admissibility", "interior_samples"], 200.into());
    set(&mut v, &["inversion", "degree"], 2.into());
    set(&mut v, &["inversion", "sampling", "arclength"], 16.into());
    set(&mut v, &["inversion", "sampling", "angles"], 10.into());
    set(&mut v, &["inversion", "quadrature"], serde_json::json!([8, 48]));
    set(&mut v, &["inversion", "noise"], 0.01.into());
    serde_json::to_string_pretty(&v).map_err(err)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(err)?
        .map(|e| -> Result<_, String> {
            let e = e.map_err(err)?;
            Ok((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).map_err(err)?))
        })
        .collect::<Result<_, _>>()?;
    files.sort();
    Ok(files)
}

pub fn determinism(scratch: &Path) -> Check {
    timed(10, "determinism", None, || {
        std::fs::create_dir_all(scratch).map_err(err)?;
        let cfg_path = scratch.join("curved_small.json");
        std::fs::write(&cfg_path, small_config(CURVED)?).map_err(err)?;
        let commands = ["trace", "jacobi", "transform", "pestov", "admissible", "invert"];
        let mut mismatches = Vec::new();
        let mut files = 0;
        for cmd in commands {
            let mut runs = Vec::new();
            for (k, threads) in ["1", "1", "4"].iter().enumerate() {
                let out = scratch.join(format!("{cmd}-{k}"));
                let code = cli::run_in(cmd, &cfg_path, &out, &["--threads", threads, "--seed", "11", "--quiet"]);
                if code != 0 {
                    return Err(format!("{cmd} exited with {code}"));
                }
                runs.push(read_dir_sorted(&out)?);
            }
            files += runs[0].len();
            if runs[0] != runs[1] {
                mismatches.push(format!("{cmd} rerun"));
            }
            if runs[0] != runs[2] {
                mismatches.push(format!("{cmd} threads 1 vs 4"));
            }
        }
        let ok = mismatches.is_empty();
        let detail = if ok {
            format!("{files} files from {} commands byte-identical across reruns and 1/4 threads", commands.len())
        } else {
            format!("differences: {}", mismatches.join(", "))
        };
        Ok((ok, detail))
    })
}
