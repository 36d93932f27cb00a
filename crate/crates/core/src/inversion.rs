//! Discretized forward operator on a finite basis of (f₀, α), its gauge kernel
//! {dh : h|_𝓔 = 0}, the singular spectrum on the gauge complement, and
//! regularized reconstruction.

use crate::dynamics::{trace_broken_ray, TraceOptions};
use crate::geometry::{BoundaryParam, Component, ConformalChart, DefiningFunction, GeometryError, PhasePoint};
use crate::lambda::LambdaField;
use crate::transform::{emitter_point, integrate_ray, ray_quadrature, PhaseFunction};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, TAU};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InversionError {
    #[error("only {exited} rays exited, need at least {needed}")]
    TooFewRays { exited: usize, needed: usize },
    #[error("regularization parameter must be positive, got {0}")]
    BadRegularization(f64),
    #[error("basis degree must be at least 2, got {0}")]
    BadDegree(usize),
    #[error("data has {got} entries for {expected} rays")]
    Length { expected: usize, got: usize },
    #[error("the {0} Gram matrix is not positive definite")]
    Gram(&'static str),
    #[error("malformed matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// P_0..P_n at t, and their derivatives.
pub fn legendre(n: usize, t: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n + 1];
    let mut dp = vec![0.0; n + 1];
    p[0] = 1.0;
    if n >= 1 {
        p[1] = t;
        dp[1] = 1.0;
    }
    for k in 1..n {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * t * p[k] - kf * p[k - 1]) / (kf + 1.0);
        dp[k + 1] = dp[k - 1] + (2.0 * kf + 1.0) * p[k];
    }
    (p, dp)
}

/// Gauss–Legendre nodes and weights on [0, 1] by Golub–Welsch.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let b = kf / (4.0 * kf * kf - 1.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut out: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (0.5 * (eig.eigenvalues[k] + 1.0), v0 * v0)
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Tensor Legendre basis P_a(u) P_b(w) on the emitter's bounding box, a, b ≤ degree.
/// f₀ and each component of α use the same scalar basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BasisSpec {
    pub degree: usize,
    /// x_min, x_max, y_min, y_max
    pub bbox: [f64; 4],
}

impl BasisSpec {
    pub fn for_chart(chart: &ConformalChart, degree: usize) -> Result<BasisSpec, InversionError> {
        if degree < 2 {
            return Err(InversionError::BadDegree(degree));
        }
        let c = Component::Emitter;
        let center = chart.defining(c).and_then(|d| d.center()).unwrap_or([0.0, 0.0]);
        let param = BoundaryParam::new(chart, c, center)?;
        let mut bbox = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for k in 0..1024 {
            let q = param.point(chart, TAU * k as f64 / 1024.0)?;
            bbox = [bbox[0].min(q[0]), bbox[1].max(q[0]), bbox[2].min(q[1]), bbox[3].max(q[1])];
        }
        Ok(BasisSpec { degree, bbox })
    }

    /// m₀
    pub fn scalar_dim(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }

    pub fn columns(&self) -> usize {
        3 * self.scalar_dim()
    }

    fn scale(&self) -> [f64; 2] {
        [2.0 / (self.bbox[1] - self.bbox[0]), 2.0 / (self.bbox[3] - self.bbox[2])]
    }

    fn local(&self, x: f64, y: f64) -> [f64; 2] {
        let s = self.scale();
        [
            (x - self.bbox[0]) * s[0] - 1.0,
            (y - self.bbox[2]) * s[1] - 1.0,
        ]
    }

    fn index(&self, a: usize, b: usize) -> usize {
        a * (self.degree + 1) + b
    }

    /// φ_p(x, y) for all p.
    pub fn scalar_values(&self, x: f64, y: f64, out: &mut [f64]) {
        let [u, w] = self.local(x, y);
        let (pu, _) = legendre(self.degree, u);
        let (pw, _) = legendre(self.degree, w);
        for a in 0..=self.degree {
            for b in 0..=self.degree {
                out[self.index(a, b)] = pu[a] * pw[b];
            }
        }
    }

    /// One basis function with its chart gradient.
    pub fn scalar_jet(&self, a: usize, b: usize, x: f64, y: f64) -> (f64, [f64; 2]) {
        let [u, w] = self.local(x, y);
        let s = self.scale();
        let (pu, du) = legendre(a.max(1), u);
        let (pw, dw) = legendre(b.max(1), w);
        (pu[a] * pw[b], [du[a] * s[0] * pw[b], pu[a] * dw[b] * s[1]])
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.columns());
        for part in ["f0", "a1", "a2"] {
            for a in 0..=self.degree {
                for b in 0..=self.degree {
                    names.push(format!("{part}:P{a}(x)P{b}(y)"));
                }
            }
        }
        names
    }

    /// The integrand of one column as a function on SM.
    pub fn column(&self, j: usize) -> Column<'_> {
        Column { basis: self, j }
    }
}

pub struct Column<'a> {
    basis: &'a BasisSpec,
    j: usize,
}

impl PhaseFunction for Column<'_> {
    fn eval(&self, chart: &ConformalChart, p: &PhasePoint) -> f64 {
        let m = self.basis.scalar_dim();
        let mut phi = vec![0.0; m];
        self.basis.scalar_values(p.x, p.y, &mut phi);
        let v = chart.unit_vector(p);
        match self.j / m {
            0 => phi[self.j % m],
            1 => phi[self.j % m] * v[0],
            _ => phi[self.j % m] * v[1],
        }
    }
}

/// Quadrature on M in polar-like coordinates (s, ψ) between the curves; weights are
/// for dx dy (the conformal factor is applied by callers).
#[derive(Debug, Clone)]
pub struct DomainQuadrature {
    pub nodes: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl DomainQuadrature {
    /// Gauss–Legendre in s, trapezoid in ψ. Needs both curves star-shaped about the
    /// reflector's center (the emitter's if there is no reflector).
    pub fn new(chart: &ConformalChart, n_s: usize, n_psi: usize) -> Result<DomainQuadrature, InversionError> {
        let center = chart
            .defining(Component::Reflector)
            .or(chart.defining(Component::Emitter))
            .and_then(|d| d.center())
            .unwrap_or([0.0, 0.0]);
        let outer = BoundaryParam::new(chart, Component::Emitter, center)?;
        let inner = match chart.defining(Component::Reflector) {
            Some(_) => Some(BoundaryParam::new(chart, Component::Reflector, center)?),
            None => None,
        };
        let gauss = gauss_legendre_unit(n_s);
        let dpsi = TAU / n_psi as f64;
        let mut nodes = Vec::with_capacity(n_s * n_psi);
        let mut weights = Vec::with_capacity(n_s * n_psi);
        for j in 0..n_psi {
            let psi = dpsi * j as f64;
            let r_out = outer.radius(chart, psi)?;
            let r_in = match &inner {
                Some(p) => p.radius(chart, psi)?,
                None => 0.0,
            };
            for &(s, w) in &gauss {
                let r = r_in + s * (r_out - r_in);
                nodes.push([center[0] + r * psi.cos(), center[1] + r * psi.sin()]);
                weights.push(w * dpsi * r * (r_out - r_in));
            }
        }
        Ok(DomainQuadrature { nodes, weights })
    }

    pub fn area(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Polynomial-friendly function vanishing on the emitter, with its gradient.
fn emitter_weight(d: &DefiningFunction, x: f64, y: f64) -> (f64, [f64; 2]) {
    let sign = |side| if side == crate::geometry::Side::Inside { 1.0 } else { -1.0 };
    match d {
        DefiningFunction::Circle { center, radius, side } => {
            let (dx, dy) = ((x - center[0]) / radius, (y - center[1]) / radius);
            let s = sign(*side);
            (s * (1.0 - dx * dx - dy * dy), [-2.0 * s * dx / radius, -2.0 * s * dy / radius])
        }
        DefiningFunction::Ellipse { center, semi_axes, side } => {
            let (dx, dy) = ((x - center[0]) / semi_axes[0], (y - center[1]) / semi_axes[1]);
            let s = sign(*side);
            (
                s * (1.0 - dx * dx - dy * dy),
                [-2.0 * s * dx / semi_axes[0], -2.0 * s * dy / semi_axes[1]],
            )
        }
        DefiningFunction::Expr(_) => (d.value(x, y), d.grad(x, y)),
    }
}

/// Gauge potentials h_r = w_E · P_a(u) P_b(w) with w_E quadratic and zero on 𝓔.
/// The index set keeps dh_r inside the tensor form basis.
#[derive(Debug, Clone, Serialize)]
pub struct GaugeSpace {
    pub potentials: Vec<(usize, usize)>,
    /// coefficient vectors (columns) of the L² projections of dh_r
    #[serde(skip)]
    pub coefficients: DMatrix<f64>,
    /// max over r of ‖dh_r − Π dh_r‖ / ‖dh_r‖
    pub projection_residual: f64,
}

impl GaugeSpace {
    pub fn index_set(degree: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..=degree - 2 {
            for b in 0..=degree - 2 {
                out.push((a, b));
            }
        }
        out.push((degree - 1, 0));
        out.push((0, degree - 1));
        out
    }

    /// Chart components of dh_r at (x, y).
    pub fn differential(chart: &ConformalChart, basis: &BasisSpec, ab: (usize, usize), x: f64, y: f64) -> [f64; 2] {
        let Some(d) = chart.defining(Component::Emitter) else {
            return [0.0, 0.0];
        };
        let (w, gw) = emitter_weight(d, x, y);
        let (q, gq) = basis.scalar_jet(ab.0, ab.1, x, y);
        [gw[0] * q + w * gq[0], gw[1] * q + w * gq[1]]
    }

    pub fn potential(chart: &ConformalChart, basis: &BasisSpec, ab: (usize, usize), x: f64, y: f64) -> f64 {
        let Some(d) = chart.defining(Component::Emitter) else {
            return 0.0;
        };
        emitter_weight(d, x, y).0 * basis.scalar_jet(ab.0, ab.1, x, y).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaySampling {
    /// uniform emitter arclength positions
    pub arclength: usize,
    /// uniform inward fiber angles
    pub angles: usize,
    /// angles within this many radians of tangency are excluded
    pub glancing_margin: f64,
    /// fraction of the emitter (from arclength 0) that carries data
    pub arc_fraction: f64,
}

impl Default for RaySampling {
    fn default() -> Self {
        RaySampling {
            arclength: 50,
            angles: 40,
            glancing_margin: 0.05,
            arc_fraction: 1.0,
        }
    }
}

impl RaySampling {
    pub fn starts(&self, chart: &ConformalChart) -> Result<Vec<PhasePoint>, GeometryError> {
        let c = Component::Emitter;
        let center = chart.defining(c).and_then(|d| d.center()).unwrap_or([0.0, 0.0]);
        let param = BoundaryParam::new(chart, c, center)?;
        let len = param.length() * self.arc_fraction;
        let half = FRAC_PI_2 - self.glancing_margin;
        let mut out = Vec::with_capacity(self.arclength * self.angles);
        for i in 0..self.arclength {
            let s = len * (i as f64 + 0.5) / self.arclength as f64;
            for k in 0..self.angles {
                let a = -half + 2.0 * half * (k as f64 + 0.5) / self.angles as f64;
                out.push(emitter_point(chart, &param, s, a)?);
            }
        }
        Ok(out)
    }
}

pub struct ForwardSystem {
    pub basis: BasisSpec,
    /// emitter phase points of the rows (rays that exited)
    pub rays: Vec<PhasePoint>,
    /// sampled rays dropped because they did not exit
    pub dropped: usize,
    /// rows I(column) along each ray
    pub matrix: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub gauge: GaugeSpace,
    pub quadrature: DomainQuadrature,
}

#[derive(Debug, Clone, Serialize)]
pub struct SystemSummary {
    pub rays: usize,
    pub dropped: usize,
    pub columns: usize,
    pub scalar_dim: usize,
    pub degree: usize,
    pub bbox: [f64; 4],
    pub column_names: Vec<String>,
    pub gauge_dim: usize,
    pub gauge_potentials: Vec<(usize, usize)>,
    pub gauge_projection_residual: f64,
}

fn gram_block(q: &DomainQuadrature, basis: &BasisSpec, weight: impl Fn([f64; 2]) -> f64) -> DMatrix<f64> {
    let m = basis.scalar_dim();
    let mut g = DMatrix::<f64>::zeros(m, m);
    let mut phi = vec![0.0; m];
    for (x, w) in q.nodes.iter().zip(&q.weights) {
        basis.scalar_values(x[0], x[1], &mut phi);
        let w = w * weight(*x);
        for a in 0..m {
            let wa = w * phi[a];
            for b in 0..m {
                g[(a, b)] += wa * phi[b];
            }
        }
    }
    g
}

/// I along one traced ray for every column.
fn row(chart: &ConformalChart, basis: &BasisSpec, nodes: &[(PhasePoint, f64)]) -> Vec<f64> {
    let m = basis.scalar_dim();
    let mut out = vec![0.0; 3 * m];
    let mut phi = vec![0.0; m];
    for (p, w) in nodes {
        basis.scalar_values(p.x, p.y, &mut phi);
        let v = chart.unit_vector(p);
        for j in 0..m {
            let wf = w * phi[j];
            out[j] += wf;
            out[m + j] += wf * v[0];
            out[2 * m + j] += wf * v[1];
        }
    }
    out
}

impl ForwardSystem {
    pub fn assemble(
        chart: &ConformalChart,
        lambda: &LambdaField,
        basis: BasisSpec,
        sampling: &RaySampling,
        trace: &TraceOptions,
        quad_nodes: [usize; 2],
    ) -> Result<ForwardSystem, InversionError> {
        let starts = sampling.starts(chart)?;
        let rows: Vec<Option<Vec<f64>>> = starts
            .par_iter()
            .map(|p| match trace_broken_ray(chart, lambda, p, trace) {
                Ok(ray) if ray.exited() => Some(row(chart, &basis, &ray_quadrature(&ray))),
                _ => None,
            })
            .collect();
        let mut rays = Vec::new();
        let mut data = Vec::new();
        for (p, r) in starts.iter().zip(rows) {
            if let Some(r) = r {
                rays.push(*p);
                data.extend(r);
            }
        }
        let n = basis.columns();
        if rays.len() < 3 * n {
            return Err(InversionError::TooFewRays {
                exited: rays.len(),
                needed: 3 * n,
            });
        }
        let matrix = DMatrix::from_row_slice(rays.len(), n, &data);

        let quadrature = DomainQuadrature::new(chart, quad_nodes[0], quad_nodes[1])?;
        let m = basis.scalar_dim();
        let g0 = gram_block(&quadrature, &basis, |x| (2.0 * chart.phi(x[0], x[1])).exp());
        let g1 = gram_block(&quadrature, &basis, |_| 1.0);
        let mut gram = DMatrix::<f64>::zeros(n, n);
        gram.view_mut((0, 0), (m, m)).copy_from(&g0);
        gram.view_mut((m, m), (m, m)).copy_from(&g1);
        gram.view_mut((2 * m, 2 * m), (m, m)).copy_from(&g1);
        let gauge = Self::gauge_space(chart, &basis, &quadrature, &g1)?;
        Ok(ForwardSystem {
            basis,
            dropped: starts.len() - rays.len(),
            rays,
            matrix,
            gram,
            gauge,
            quadrature,
        })
    }

    fn gauge_space(
        chart: &ConformalChart,
        basis: &BasisSpec,
        q: &DomainQuadrature,
        g1: &DMatrix<f64>,
    ) -> Result<GaugeSpace, InversionError> {
        let m = basis.scalar_dim();
        let chol = g1.clone().cholesky().ok_or(InversionError::Gram("form"))?;
        let potentials = GaugeSpace::index_set(basis.degree);
        let mut coefficients = DMatrix::<f64>::zeros(3 * m, potentials.len());
        let mut residual: f64 = 0.0;
        let mut phi = vec![0.0; m];
        for (r, ab) in potentials.iter().enumerate() {
            let mut rhs = [DVector::<f64>::zeros(m), DVector::<f64>::zeros(m)];
            let mut norm = 0.0;
            for (x, w) in q.nodes.iter().zip(&q.weights) {
                basis.scalar_values(x[0], x[1], &mut phi);
                let dh = GaugeSpace::differential(chart, basis, *ab, x[0], x[1]);
                norm += w * (dh[0] * dh[0] + dh[1] * dh[1]);
                for k in 0..2 {
                    for p in 0..m {
                        rhs[k][p] += w * phi[p] * dh[k];
                    }
                }
            }
            let c = [chol.solve(&rhs[0]), chol.solve(&rhs[1])];
            for k in 0..2 {
                coefficients.view_mut(((k + 1) * m, r), (m, 1)).copy_from(&c[k]);
            }
            let mut err = 0.0;
            for (x, w) in q.nodes.iter().zip(&q.weights) {
                basis.scalar_values(x[0], x[1], &mut phi);
                let dh = GaugeSpace::differential(chart, basis, *ab, x[0], x[1]);
                for k in 0..2 {
                    let proj: f64 = phi.iter().zip(c[k].iter()).map(|(a, b)| a * b).sum();
                    err += w * (dh[k] - proj).powi(2);
                }
            }
            let rel = (err / norm).sqrt();
            residual = residual.max(rel);
        }
        Ok(GaugeSpace {
            potentials,
            coefficients,
            projection_residual: residual,
        })
    }

    pub fn summary(&self) -> SystemSummary {
        SystemSummary {
            rays: self.rays.len(),
            dropped: self.dropped,
            columns: self.basis.columns(),
            scalar_dim: self.basis.scalar_dim(),
            degree: self.basis.degree,
            bbox: self.basis.bbox,
            column_names: self.basis.column_names(),
            gauge_dim: self.gauge.potentials.len(),
            gauge_potentials: self.gauge.potentials.clone(),
            gauge_projection_residual: self.gauge.projection_residual,
        }
    }

    /// L² norms of coefficient vectors: ∫ f₀² dV + ∫ |α|²_g dV.
    pub fn norm(&self, c: &DVector<f64>) -> f64 {
        c.dot(&(&self.gram * c)).max(0.0).sqrt()
    }
}

/// If on the system's rays by direct tracing, for synthetic data.
pub fn data_on_rays<F: PhaseFunction + ?Sized>(
    chart: &ConformalChart,
    lambda: &LambdaField,
    f: &F,
    rays: &[PhasePoint],
    trace: &TraceOptions,
) -> Vec<f64> {
    rays.par_iter()
        .map(|p| match trace_broken_ray(chart, lambda, p, trace) {
            Ok(ray) if ray.exited() => integrate_ray(chart, f, &ray),
            _ => f64::NAN,
        })
        .collect()
}

/// Whitened factorization: coefficient c = L⁻ᵀ z with G = LLᵀ, so ‖field‖ = |z|.
pub struct KernelAnalysis {
    /// singular values of the normalized matrix on the gauge complement, descending
    pub singular_values: Vec<f64>,
    /// singular values of the full normalized matrix, descending
    pub full_singular_values: Vec<f64>,
    /// σ_min / σ_max on the gauge complement
    pub margin: f64,
    /// |A q| / σ_max for an orthonormal basis q of the gauge subspace
    pub gauge_rayleigh: Vec<f64>,
    l: DMatrix<f64>,
    complement: DMatrix<f64>,
    gauge: DMatrix<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    scale: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub full_singular_values: Vec<f64>,
    pub margin: f64,
    pub sigma_max: f64,
    pub max_gauge_rayleigh: f64,
    pub gauge_rayleigh: Vec<f64>,
    /// numerically rank deficient beyond the gauge (margin below 1e-8)
    pub rank_deficient: bool,
}

fn sorted_svd(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let s: Vec<f64> = idx.iter().map(|&k| svd.singular_values[k]).collect();
    let u = DMatrix::from_columns(&idx.iter().map(|&k| u.column(k).into_owned()).collect::<Vec<_>>());
    let v = DMatrix::from_columns(&idx.iter().map(|&k| vt.row(k).transpose()).collect::<Vec<_>>());
    (s, u, v)
}

pub fn kernel_analysis(system: &ForwardSystem) -> Result<KernelAnalysis, InversionError> {
    let n = system.basis.columns();
    let chol = system.gram.clone().cholesky().ok_or(InversionError::Gram("coefficient"))?;
    let l = chol.l();
    let scale = 1.0 / (system.rays.len() as f64).sqrt();
    // A L⁻ᵀ, by solving L Y = Aᵀ
    let at = system.matrix.transpose();
    let y = l.solve_lower_triangular(&at).ok_or(InversionError::Gram("coefficient"))?;
    let aw = y.transpose() * scale;

    let zg = l.transpose() * &system.gauge.coefficients;
    let r = zg.ncols();
    let mut stacked = DMatrix::<f64>::zeros(n, r + n);
    stacked.view_mut((0, 0), (n, r)).copy_from(&zg);
    stacked.view_mut((0, r), (n, n)).copy_from(&DMatrix::identity(n, n));
    let q = stacked.qr().q();
    let gauge = q.columns(0, r).into_owned();
    let complement = q.columns(r, n - r).into_owned();

    let full: Vec<f64> = {
        let mut s: Vec<f64> = aw.clone().singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    };
    let sigma_max = full[0];
    let gauge_rayleigh = (0..r).map(|k| (&aw * gauge.column(k)).norm() / sigma_max).collect();
    let (s, u, v) = sorted_svd(&aw * &complement);
    let margin = s.last().copied().unwrap_or(0.0) / s[0];
    Ok(KernelAnalysis {
        singular_values: s,
        full_singular_values: full,
        margin,
        gauge_rayleigh,
        l,
        complement,
        gauge,
        u,
        v,
        scale,
    })
}

impl KernelAnalysis {
    pub fn report(&self) -> SpectrumReport {
        let max_gauge_rayleigh = self.gauge_rayleigh.iter().copied().fold(0.0, f64::max);
        SpectrumReport {
            singular_values: self.singular_values.clone(),
            full_singular_values: self.full_singular_values.clone(),
            margin: self.margin,
            sigma_max: self.full_singular_values[0],
            max_gauge_rayleigh,
            gauge_rayleigh: self.gauge_rayleigh.clone(),
            rank_deficient: self.margin < 1e-8,
        }
    }

    /// Whitened coordinates of a coefficient vector.
    fn whiten(&self, c: &DVector<f64>) -> DVector<f64> {
        self.l.transpose() * c
    }

    fn unwhiten(&self, z: &DVector<f64>) -> DVector<f64> {
        self.l
            .transpose()
            .solve_upper_triangular(z)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// Coefficients with the best L² gauge fit removed.
    pub fn gauge_normalize(&self, c: &DVector<f64>) -> DVector<f64> {
        let z = self.whiten(c);
        let fit = &self.gauge * (self.gauge.transpose() * &z);
        self.unwhiten(&(z - fit))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularization {
    /// keep singular values ≥ rel_tol · σ_max
    Truncated { rel_tol: f64 },
    /// filter factors σ² / (σ² + α²)
    Tikhonov { alpha: f64 },
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization::Truncated { rel_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Reconstruction {
    pub coefficients: Vec<f64>,
    /// singular values used (truncation) or all (Tikhonov)
    pub rank: usize,
    /// ‖A c − d‖ / ‖d‖
    pub relative_residual: f64,
}

/// Least-squares solution on the gauge complement, so α comes out gauge normalized.
pub fn reconstruct(
    system: &ForwardSystem,
    analysis: &KernelAnalysis,
    data: &[f64],
    reg: Regularization,
) -> Result<Reconstruction, InversionError> {
    let param = match reg {
        Regularization::Truncated { rel_tol } => rel_tol,
        Regularization::Tikhonov { alpha } => alpha,
    };
    if !(param > 0.0) {
        return Err(InversionError::BadRegularization(param));
    }
    if data.len() != system.rays.len() {
        return Err(InversionError::Length {
            expected: system.rays.len(),
            got: data.len(),
        });
    }
    let d = DVector::from_column_slice(data) * analysis.scale;
    let utd = analysis.u.transpose() * &d;
    let s = &analysis.singular_values;
    let mut w = DVector::<f64>::zeros(s.len());
    let mut rank = 0;
    for k in 0..s.len() {
        let f = match reg {
            Regularization::Truncated { rel_tol } => {
                if s[k] >= rel_tol * s[0] {
                    rank += 1;
                    1.0 / s[k]
                } else {
                    0.0
                }
            }
            Regularization::Tikhonov { alpha } => {
                rank += 1;
                s[k] / (s[k] * s[k] + alpha * alpha)
            }
        };
        w[k] = f * utd[k];
    }
    let z = &analysis.complement * (&analysis.v * w);
    let c = analysis.unwhiten(&z);
    let fit = &system.matrix * &c;
    let raw = DVector::from_column_slice(data);
    let relative_residual = (fit - &raw).norm() / raw.norm().max(f64::MIN_POSITIVE);
    Ok(Reconstruction {
        coefficients: c.iter().copied().collect(),
        rank,
        relative_residual,
    })
}

/// Reconstruction errors in L²(M) by domain quadrature.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErrorReport {
    /// ‖f₀ − f₀_true‖ / ‖truth‖
    pub f0_error: f64,
    /// ‖α − Πα_true‖ / ‖truth‖ after removing the gauge fit from the difference
    pub alpha_error: f64,
    /// ‖α‖ of the reconstruction after gauge normalization
    pub alpha_normalized_norm: f64,
    /// ‖truth‖ = (‖f₀‖² + ‖α‖²)^½, or 1 when the truth is modulo-gauge zero
    pub truth_norm: f64,
}

/// Projects chart fields (f₀, α₁, α₂) onto the basis in L².
pub fn project(system: &ForwardSystem, chart: &ConformalChart, f0: &dyn Fn(f64, f64) -> f64, alpha: &dyn Fn(f64, f64) -> [f64; 2]) -> Result<DVector<f64>, InversionError> {
    let b = &system.basis;
    let m = b.scalar_dim();
    let mut rhs = DVector::<f64>::zeros(3 * m);
    let mut phi = vec![0.0; m];
    for (x, w) in system.quadrature.nodes.iter().zip(&system.quadrature.weights) {
        b.scalar_values(x[0], x[1], &mut phi);
        let e = (2.0 * chart.phi(x[0], x[1])).exp();
        let f = f0(x[0], x[1]);
        let a = alpha(x[0], x[1]);
        for p in 0..m {
            rhs[p] += w * e * phi[p] * f;
            rhs[m + p] += w * phi[p] * a[0];
            rhs[2 * m + p] += w * phi[p] * a[1];
        }
    }
    let chol = system.gram.clone().cholesky().ok_or(InversionError::Gram("coefficient"))?;
    Ok(chol.solve(&rhs))
}

pub fn reconstruction_errors(
    system: &ForwardSystem,
    analysis: &KernelAnalysis,
    chart: &ConformalChart,
    rec: &Reconstruction,
    f0: &dyn Fn(f64, f64) -> f64,
    alpha: &dyn Fn(f64, f64) -> [f64; 2],
) -> Result<ErrorReport, InversionError> {
    let m = system.basis.scalar_dim();
    let c = DVector::from_column_slice(&rec.coefficients);
    let mut phi = vec![0.0; m];
    let (mut e0, mut t0, mut ta) = (0.0, 0.0, 0.0);
    for (x, w) in system.quadrature.nodes.iter().zip(&system.quadrature.weights) {
        system.basis.scalar_values(x[0], x[1], &mut phi);
        let vol = w * (2.0 * chart.phi(x[0], x[1])).exp();
        let rec0: f64 = phi.iter().zip(c.rows(0, m).iter()).map(|(a, b)| a * b).sum();
        let t = f0(x[0], x[1]);
        let a = alpha(x[0], x[1]);
        e0 += vol * (rec0 - t) * (rec0 - t);
        t0 += vol * t * t;
        ta += w * (a[0] * a[0] + a[1] * a[1]);
    }
    let only_alpha = |v: &DVector<f64>| {
        let mut v = v.clone();
        v.rows_mut(0, m).fill(0.0);
        v
    };
    let truth = project(system, chart, f0, alpha)?;
    let diff = analysis.gauge_normalize(&only_alpha(&(&c - &truth)));
    let normalized = analysis.gauge_normalize(&only_alpha(&c));
    let truth_alpha = analysis.gauge_normalize(&only_alpha(&truth));
    let truth_norm = (t0 + system.norm(&truth_alpha).powi(2)).sqrt();
    let truth_norm = if truth_norm > 1e-12 * (t0 + ta).sqrt().max(1.0) { truth_norm } else { 1.0 };
    Ok(ErrorReport {
        f0_error: e0.sqrt() / truth_norm,
        alpha_error: system.norm(&diff) / truth_norm,
        alpha_normalized_norm: system.norm(&normalized),
        truth_norm,
    })
}

/// Adds seeded Gaussian noise with standard deviation `level` times the data RMS.
pub fn add_noise(data: &[f64], level: f64, seed: u64) -> Vec<f64> {
    let rms = (data.iter().map(|d| d * d).sum::<f64>() / data.len().max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter()
        .map(|d| d + level * rms * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Row-major f64 matrix: u64 rows, u64 cols (little endian), then the entries.
pub fn write_matrix<W: Write>(mut w: W, m: &DMatrix<f64>) -> std::io::Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<DMatrix<f64>, InversionError> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let cols = u64::from_le_bytes(b8) as usize;
    let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 28));
    for _ in 0..rows * cols {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(InversionError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn legendre_values_and_derivatives() {
        let (p, dp) = legendre(4, 0.3);
        let t: f64 = 0.3;
        assert!((p[2] - 0.5 * (3.0 * t * t - 1.0)).abs() < 1e-15);
        assert!((p[4] - (35.0 * t.powi(4) - 30.0 * t * t + 3.0) / 8.0).abs() < 1e-15);
        assert!((dp[3] - 0.5 * (15.0 * t * t - 3.0)).abs() < 1e-14);
        assert!((dp[4] - (140.0 * t.powi(3) - 60.0 * t) / 8.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_rule_is_exact_to_degree_2n_minus_1() {
        let g = gauss_legendre_unit(5);
        for k in 0..10 {
            let s: f64 = g.iter().map(|(x, w)| w * x.powi(k)).sum();
            assert!((s - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "{k}");
        }
    }

    #[test]
    fn domain_quadrature_area() {
        let chart = ConformalChart::flat_annulus(0.5, 1.0);
        let q = DomainQuadrature::new(&chart, 8, 64).unwrap();
        assert!((q.area() - PI * 0.75).abs() < 1e-12);
        let m: f64 = q.nodes.iter().zip(&q.weights).map(|(x, w)| w * x[0] * x[0] * x[1] * x[1]).sum();
        // ∫ x²y² over the annulus = (π/24)(r₂⁶ − r₁⁶)
        assert!((m - PI / 24.0 * (1.0 - 0.5f64.powi(6))).abs() < 1e-12);
    }

    #[test]
    fn matrix_file_roundtrip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0, 1e-300, f64::MAX, 0.0]);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 16 + 48);
        assert_eq!(&buf[0..8], &2u64.to_le_bytes());
        assert_eq!(read_matrix(&buf[..]).unwrap(), m);
        assert!(read_matrix(&buf[..20]).is_err());
    }

    #[test]
    fn gauge_index_set_size() {
        assert_eq!(GaugeSpace::index_set(4).len(), 11);
        assert_eq!(GaugeSpace::index_set(2).len(), 3);
    }
}
