//! The `twistray` command line: config ingestion, one subcommand per capability,
//! file outputs, and exit codes (0 success, 2 config error, 3 numerical failure).

use crate::admissibility::{
    check_admissible, curvature_identities, dual_admissibility_crosscheck, dynamic_convexity_check, emitter_starts,
};
use crate::config::{ConfigError, RunConfig};
use crate::dynamics::{flow, trace_broken_ray, BrokenRay, RayStatus};
use crate::expr::ScalarField;
use crate::geometry::{BoundaryParam, Component, PhasePoint};
use crate::inversion::{
    add_noise, data_on_rays, kernel_analysis, reconstruct, reconstruction_errors, write_matrix, BasisSpec, ForwardSystem,
};
use crate::jacobi::{flow_differential_fd, frame_to_vector, growth_bound_check, propagate_frame, relative_error, JacobiFrame};
use crate::output::{finite_or_null, svg_overlay, OutputDir};
use crate::pestov::SmGrid;
use crate::suite;
use crate::transform::sinogram;
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "twistray", version, about = "Broken twisted-geodesic ray transforms on planar conformal surfaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// output directory (overrides the config's `output`)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// seed for all sampling (overrides the config)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// worker threads
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Pestov grid sizes, e.g. 32,64
    #[arg(long, global = true, value_delimiter = ',')]
    pub grids: Option<Vec<usize>>,
    /// do not list the written files
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// trace broken rays from the emitter: ray CSV, events, index, SVG
    Trace,
    /// Jacobi fields along broken rays against the finite-difference flow differential
    Jacobi,
    /// sinogram of the configured integrand
    Transform,
    /// Pestov identity and boundary-term checks on phase-space grids
    Pestov,
    /// admissibility conditions of the configured system
    Admissible,
    /// assemble, analyze and invert the discretized transform
    Invert,
    /// run the built-in acceptance suite
    Selftest,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Other(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    fn json(&self) -> String {
        let (kind, msg) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Numerical(m) => ("numerical", m),
            CliError::Other(m) => ("io", m),
        };
        json!({ "error": kind, "message": msg, "exit_code": self.code() }).to_string()
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

fn numerical<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numerical(e.to_string())
}

/// Parses arguments, runs the command, prints errors as JSON on stderr, returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = e.print();
            } else {
                eprintln!("{}", json!({ "error": "usage", "message": e.to_string(), "exit_code": 2 }));
            }
            return code;
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(CliError::Other(e.to_string())),
        },
        None => execute(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.json());
            e.code()
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if cli.command == Command::Selftest {
        return selftest();
    }
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.rays.seed = seed;
        cfg.admissibility.seed = seed;
    }
    if let Some(g) = &cli.grids {
        cfg.grid.sizes = g.clone();
        cfg.validate()?;
    }
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output));
    let mut out = OutputDir::create(&out_dir)?;
    let res = match cli.command {
        Command::Trace => trace(&cfg, &mut out),
        Command::Jacobi => jacobi(&cfg, &mut out),
        Command::Transform => transform(&cfg, &mut out),
        Command::Pestov => pestov(&cfg, &mut out),
        Command::Admissible => admissible(&cfg, &mut out),
        Command::Invert => invert(&cfg, &mut out),
        Command::Selftest => unreachable!(),
    };
    let mut stdout = std::io::stdout().lock();
    for p in out.written().iter().filter(|_| !cli.quiet) {
        let _ = writeln!(stdout, "wrote {}", p.display());
    }
    res
}

fn starts(cfg: &RunConfig) -> Result<Vec<PhasePoint>, CliError> {
    let chart = cfg.chart()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rays.seed);
    emitter_starts(&chart, cfg.rays.count, cfg.rays.glancing_margin, &mut rng).map_err(numerical)
}

#[derive(Serialize)]
struct SampleRow {
    ray_id: usize,
    t: f64,
    x: f64,
    y: f64,
    theta: f64,
    segment_id: usize,
}

#[derive(Serialize)]
struct EventRow {
    ray_id: usize,
    t: f64,
    x: f64,
    y: f64,
    theta_in: f64,
    theta_out: f64,
    normal_component: f64,
}

#[derive(Serialize)]
struct IndexRow {
    ray_id: usize,
    x0: f64,
    y0: f64,
    theta0: f64,
    status: &'static str,
    reflections: usize,
    total_time: f64,
    exit_x: f64,
    exit_y: f64,
    exit_theta: f64,
    rho_exit: f64,
}

fn status_name(s: RayStatus) -> &'static str {
    match s {
        RayStatus::Exited => "exited",
        RayStatus::Tangential => "tangential",
        RayStatus::Trapped => "trapped",
    }
}

fn trace(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let chart = cfg.chart()?;
    let lam = cfg.lambda()?;
    let opts = cfg.integrator.trace_options();
    let starts = starts(cfg)?;
    let rays: Vec<BrokenRay> = starts
        .par_iter()
        .map(|p| trace_broken_ray(&chart, &lam, p, &opts))
        .collect::<Result<_, _>>()
        .map_err(numerical)?;

    out.csv(
        "rays.csv",
        rays.iter().enumerate().flat_map(|(id, r)| {
            r.samples().map(move |(seg, s)| SampleRow {
                ray_id: id,
                t: s.t,
                x: s.point.x,
                y: s.point.y,
                theta: s.point.theta,
                segment_id: seg,
            })
        }),
    )?;
    out.csv(
        "events.csv",
        rays.iter().enumerate().flat_map(|(id, r)| {
            r.events.iter().map(move |e| EventRow {
                ray_id: id,
                t: e.t,
                x: e.x,
                y: e.y,
                theta_in: e.theta_in,
                theta_out: e.theta_out,
                normal_component: e.normal_component,
            })
        }),
    )?;
    let index: Vec<IndexRow> = rays
        .iter()
        .enumerate()
        .map(|(id, r)| {
            let s = r.start();
            IndexRow {
                ray_id: id,
                x0: s.x,
                y0: s.y,
                theta0: s.theta,
                status: status_name(r.status),
                reflections: r.reflection_count(),
                total_time: r.total_time,
                exit_x: r.end.x,
                exit_y: r.end.y,
                exit_theta: r.end.theta,
                rho_exit: if r.exited() { chart.rho(Component::Emitter, r.end.x, r.end.y) } else { f64::NAN },
            }
        })
        .collect();
    let max_rho = index.iter().map(|r| r.rho_exit).filter(|v| v.is_finite()).fold(0.0, |a: f64, b| a.max(b.abs()));
    let failures = rays.iter().filter(|r| !r.exited()).count();
    out.csv("rays_index.csv", &index)?;
    out.bytes("rays.svg", svg_overlay(&chart, &rays, 10).as_bytes())?;
    out.json(
        "trace_summary.json",
        &json!({
            "seed": cfg.rays.seed,
            "rays": rays.len(),
            "exited": rays.len() - failures,
            "trapped": rays.iter().filter(|r| r.status == RayStatus::Trapped).count(),
            "tangential": rays.iter().filter(|r| r.status == RayStatus::Tangential).count(),
            "max_reflections": rays.iter().map(|r| r.reflection_count()).max().unwrap_or(0),
            "max_abs_rho_exit": max_rho,
            "rho_tol": cfg.integrator.rho_tol,
        }),
    )?;
    if failures > cfg.rays.failure_budget {
        return Err(CliError::Numerical(format!(
            "{failures} rays trapped or tangential, budget {}",
            cfg.rays.failure_budget
        )));
    }
    if max_rho > cfg.integrator.rho_tol {
        return Err(CliError::Numerical(format!("exit points off the emitter by {max_rho:e}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct JacobiRow {
    ray_id: usize,
    t: f64,
    segment_id: usize,
    x: f64,
    y: f64,
    theta: f64,
    a: f64,
    b: f64,
    c: f64,
    j1: f64,
    j2: f64,
    dj1: f64,
    dj2: f64,
}

#[derive(Serialize)]
struct Comparison {
    t: f64,
    segment: usize,
    relative_error: Option<f64>,
    skipped: Option<String>,
}

fn jacobi(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let chart = cfg.chart()?;
    let lam = cfg.lambda()?;
    let opts = cfg.integrator.trace_options();
    let [a, b, c] = cfg.jacobi.frame;
    let frame = JacobiFrame::new(a, b, c);
    let starts = starts(cfg)?;
    let results: Vec<_> = starts
        .par_iter()
        .map(|emitted| -> Result<_, CliError> {
            // start a little inside so the perturbed starts stay in the domain
            let p = &flow(&chart, &lam, emitted, suite::JACOBI_LEAD, opts.step);
            let ray = trace_broken_ray(&chart, &lam, p, &opts).map_err(numerical)?;
            if !ray.exited() {
                return Ok((ray, None, Vec::new()));
            }
            let track = propagate_frame(&chart, &lam, &ray, frame, opts.tan_eps).map_err(numerical)?;
            let xi = frame_to_vector(&chart, &lam, p, &frame);
            let mut cmp = Vec::new();
            for (k, seg) in ray.segments.iter().enumerate() {
                let t_mid = 0.5 * (seg[0].t + seg[seg.len() - 1].t);
                let Some(s) = track.sample_before(t_mid, 1.0) else { continue };
                match flow_differential_fd(&chart, &lam, p, &xi, s.t, cfg.jacobi.fd_step, &opts) {
                    Ok(fd) => cmp.push(Comparison {
                        t: s.t,
                        segment: k,
                        relative_error: Some(relative_error(&chart, &s.point, &s.vector, &fd)),
                        skipped: None,
                    }),
                    Err(e) => cmp.push(Comparison {
                        t: s.t,
                        segment: k,
                        relative_error: None,
                        skipped: Some(e.to_string()),
                    }),
                }
            }
            Ok((ray, Some(track), cmp))
        })
        .collect::<Result<_, _>>()?;

    out.csv(
        "jacobi.csv",
        results.iter().enumerate().flat_map(|(id, (_, track, _))| {
            track.iter().flat_map(move |t| {
                t.samples.iter().map(move |s| JacobiRow {
                    ray_id: id,
                    t: s.t,
                    segment_id: s.segment,
                    x: s.point.x,
                    y: s.point.y,
                    theta: s.point.theta,
                    a: s.frame.a,
                    b: s.frame.b,
                    c: s.frame.c,
                    j1: s.vector.j[0],
                    j2: s.vector.j[1],
                    dj1: s.vector.dj[0],
                    dj2: s.vector.dj[1],
                })
            })
        }),
    )?;
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let per_ray: Vec<_> = results
        .iter()
        .enumerate()
        .map(|(id, (ray, track, cmp))| {
            for c in cmp {
                match c.relative_error {
                    Some(e) => worst = worst.max(e),
                    None => skipped += 1,
                }
            }
            json!({
                "ray_id": id,
                "status": status_name(ray.status),
                "reflections": ray.reflection_count(),
                "normal_components": ray.events.iter().map(|e| e.normal_component).collect::<Vec<_>>(),
                "jumps": track.as_ref().map(|t| &t.jumps),
                "growth": track.as_ref().map(|t| growth_bound_check(&chart, t)),
                "comparisons": cmp,
            })
        })
        .collect();
    let failures = results.iter().filter(|(r, _, _)| !r.exited()).count();
    out.json(
        "jacobi_report.json",
        &json!({
            "seed": cfg.rays.seed,
            "frame": cfg.jacobi.frame,
            "fd_step": cfg.jacobi.fd_step,
            "max_relative_error": worst,
            "skipped_comparisons": skipped,
            "rays": per_ray,
        }),
    )?;
    if failures > cfg.rays.failure_budget {
        return Err(CliError::Numerical(format!("{failures} rays did not exit")));
    }
    Ok(())
}

#[derive(Serialize)]
struct SinogramCsvRow {
    s: f64,
    angle: f64,
    value: f64,
    status: &'static str,
}

fn emitter_param(cfg: &RunConfig) -> Result<BoundaryParam, CliError> {
    let chart = cfg.chart()?;
    let center = chart
        .defining(Component::Emitter)
        .and_then(|d| d.center())
        .unwrap_or([0.0, 0.0]);
    BoundaryParam::new(&chart, Component::Emitter, center).map_err(numerical)
}

fn transform(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let chart = cfg.chart()?;
    let lam = cfg.lambda()?;
    let f = cfg.transform.integrand()?;
    let param = emitter_param(cfg)?;
    let opts = cfg.integrator.trace_options();
    let rows = sinogram(&chart, &lam, &f, &param, cfg.transform.arclength, cfg.transform.angles, &opts).map_err(numerical)?;
    let failures = rows.iter().filter(|r| r.status != RayStatus::Exited).count();
    out.csv(
        "sinogram.csv",
        rows.iter().map(|r| SinogramCsvRow {
            s: r.s,
            angle: r.angle,
            value: r.value,
            status: status_name(r.status),
        }),
    )?;
    out.json(
        "transform_summary.json",
        &json!({
            "f0": cfg.transform.f0,
            "alpha": cfg.transform.alpha,
            "arclength": cfg.transform.arclength,
            "angles": cfg.transform.angles,
            "emitter_length": param.length(),
            "not_exited": failures,
        }),
    )?;
    if failures > cfg.rays.failure_budget {
        return Err(CliError::Numerical(format!("{failures} sinogram rays did not exit")));
    }
    Ok(())
}

fn pestov(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let chart = cfg.chart()?;
    let lam = cfg.lambda()?;
    let funcs: Vec<ScalarField> = cfg
        .grid
        .functions
        .iter()
        .map(|s| ScalarField::parse(s).map_err(|e| CliError::Config(e.to_string())))
        .collect::<Result<_, _>>()?;
    let mut sizes = cfg.grid.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut functions = Vec::new();
    let mut min_order = f64::INFINITY;
    for (fi, f) in funcs.iter().enumerate() {
        let u = |p: &PhasePoint| f.value([p.x, p.y, p.theta]);
        let mut reports = Vec::new();
        let mut prev: Option<(usize, f64)> = None;
        let mut orders = Vec::new();
        for &n in &sizes {
            let g = SmGrid::annulus(&chart, &lam, cfg.grid.center, n + 1, n, n).map_err(numerical)?;
            let r = g.pestov_identity(&g.sample(&u)).map_err(numerical)?;
            if let Some((m, rp)) = prev {
                let order = (rp / r.relative_residual).ln() / (n as f64 / m as f64).ln();
                min_order = min_order.min(order);
                orders.push(order);
            }
            prev = Some((n, r.relative_residual));
            reports.push(r);
        }
        functions.push(json!({
            "index": fi,
            "u": cfg.grid.functions[fi],
            "reports": reports,
            "orders": orders,
        }));
    }
    let n = sizes[0];
    let g = SmGrid::annulus(&chart, &lam, cfg.grid.center, n + 1, n, n).map_err(numerical)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rays.seed);
    let a: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut pairing = serde_json::Map::new();
    let mut boundary = serde_json::Map::new();
    let u0 = g.sample(&|p: &PhasePoint| funcs[0].value([p.x, p.y, p.theta]));
    for c in [Component::Reflector, Component::Emitter] {
        pairing.insert(c.name().into(), json!(g.even_odd_pairing(c, &a, &b).map_err(numerical)?));
        boundary.insert(c.name().into(), json!(g.boundary_decomposition(c, &u0).map_err(numerical)?));
    }
    out.json(
        "pestov_report.json",
        &json!({
            "sizes": sizes,
            "center": cfg.grid.center,
            "functions": functions,
            "min_order": finite_or_null(min_order),
            "even_odd_pairing": pairing,
            "odd_curvature_defect": g.odd_curvature_defect(Component::Reflector),
            "boundary_decomposition": boundary,
        }),
    )?;
    Ok(())
}

fn admissible(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let chart = cfg.chart()?;
    let lam = cfg.lambda()?;
    let opts = &cfg.admissibility;
    let report = check_admissible(&chart, &lam, opts, &cfg.integrator.trace_options()).map_err(numerical)?;
    let dual = match chart.defining(Component::Reflector) {
        Some(_) => Some(dual_admissibility_crosscheck(&chart, &lam, opts.boundary_nodes, opts.fiber_nodes).map_err(numerical)?),
        None => None,
    };
    let identities = match chart.defining(Component::Reflector) {
        Some(_) => Some(curvature_identities(&chart, &lam, 1000, opts.seed).map_err(numerical)?),
        None => None,
    };
    let dynamic = dynamic_convexity_check(&chart, &lam, opts.boundary_nodes, 1e-4).map_err(numerical)?;
    out.json(
        "admissibility_report.json",
        &json!({
            "options": opts,
            "report": report,
            "dual_crosscheck": dual,
            "curvature_identities": identities,
            "dynamic_convexity": dynamic,
        }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct SingularRow {
    index: usize,
    complement: Option<f64>,
    full: f64,
}

fn invert(cfg: &RunConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let chart = cfg.chart()?;
    let lam = cfg.lambda()?;
    let spec = &cfg.inversion;
    let opts = cfg.integrator.trace_options();
    let basis = BasisSpec::for_chart(&chart, spec.degree).map_err(numerical)?;
    let system = ForwardSystem::assemble(&chart, &lam, basis, &spec.sampling, &opts, spec.quadrature).map_err(numerical)?;
    let analysis = kernel_analysis(&system).map_err(numerical)?;
    let spectrum = analysis.report();

    let truth = cfg.inversion_truth()?;
    let clean = data_on_rays(&chart, &lam, &truth, &system.rays, &opts);
    let data = if spec.noise > 0.0 { add_noise(&clean, spec.noise, cfg.rays.seed) } else { clean };
    let rec = reconstruct(&system, &analysis, &data, spec.regularization).map_err(numerical)?;
    let f0 = |x: f64, y: f64| truth.f0.value([x, y, 0.0]);
    let alpha = |x: f64, y: f64| [truth.alpha[0].value([x, y, 0.0]), truth.alpha[1].value([x, y, 0.0])];
    let errors = reconstruction_errors(&system, &analysis, &chart, &rec, &f0, &alpha).map_err(numerical)?;

    out.json("system.json", &json!({ "summary": system.summary(), "seed": cfg.rays.seed, "rays": system.rays }))?;
    let mut bin = Vec::new();
    write_matrix(&mut bin, &system.matrix)?;
    out.bytes("matrix.bin", &bin)?;
    out.csv(
        "singular_values.csv",
        spectrum.full_singular_values.iter().enumerate().map(|(i, s)| SingularRow {
            index: i,
            complement: spectrum.singular_values.get(i).copied(),
            full: *s,
        }),
    )?;
    out.json("spectrum.json", &spectrum)?;
    let names = system.basis.column_names();
    out.json(
        "reconstruction.json",
        &json!({
            "regularization": spec.regularization,
            "noise": spec.noise,
            "rank": rec.rank,
            "relative_residual": rec.relative_residual,
            "coefficients": names.iter().zip(&rec.coefficients).map(|(n, c)| json!({"column": n, "value": c})).collect::<Vec<_>>(),
        }),
    )?;
    out.json("error_report.json", &errors)?;
    Ok(())
}

fn selftest() -> Result<(), CliError> {
    let scratch = std::env::temp_dir().join(format!("twistray-selftest-{}", std::process::id()));
    let checks = suite::run_all(&scratch);
    let _ = std::fs::remove_dir_all(&scratch);
    let mut failed = 0;
    for c in &checks {
        println!("{}", c.line());
        if !c.passed {
            failed += 1;
        }
    }
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} selftest checks failed")));
    }
    Ok(())
}

/// Runs the binary's argument list in-process with an explicit output directory.
pub fn run_in(command: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args: Vec<OsString> = vec!["twistray".into(), command.into(), "--config".into(), config.into(), "--out".into(), out.into()];
    args.extend(extra.iter().map(OsString::from));
    run(args)
}
