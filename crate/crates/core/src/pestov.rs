//! Discrete calculus on SM over an annulus and numerical checks of the
//! Pestov identity with boundary terms.
//!
//! The grid is boundary fitted. With c a center for both boundary curves,
//! base nodes are c + r(s, ψ) e(ψ), r = R_R(ψ) + s (R_E(ψ) − R_R(ψ)), so s = 0
//! is the reflector and s = 1 the emitter. Fiber nodes are θ = θ₀(s, ψ) + ϑ_k
//! with ϑ_k = 2π(k + ½)/n, where θ₀ blends the reflector normal angle into the
//! outward emitter normal angle. On both rings the mirror law then sends
//! node k to node n/2 − k − 1 exactly.
//!
//! ψ and ϑ are differentiated spectrally, s with second-order stencils
//! (one-sided at the rings). Quadrature is trapezoidal in every direction.

use crate::geometry::{angle_diff, rotate90, BoundaryParam, Component, ConformalChart, GeometryError, PhasePoint};
use crate::lambda::{Frame, LambdaField};
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PestovError {
    #[error("grid axis {axis} needs at least 4 nodes, got {n}")]
    TooSmall { axis: &'static str, n: usize },
    #[error("fiber node count must be even for the reflection to permute nodes, got {0}")]
    OddFiber(usize),
    #[error("grid points must match the grid size: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    X,
    Xperp,
    V,
    F,
}

#[derive(Debug, Clone, Copy)]
struct BaseNode {
    x: f64,
    y: f64,
    // inverse of [[x_s, y_s], [x_ψ, y_ψ]]
    inv: [[f64; 2]; 2],
    theta0: f64,
    theta0_s: f64,
    theta0_psi: f64,
    // e^{2φ}|det| · trapezoid weights in s and ψ
    area: f64,
    // e^{φ}|x_ψ| dψ on the rings, 0 elsewhere
    arc: f64,
    x_psi: [f64; 2],
}

/// Frame coefficients and twist data at one node.
#[derive(Debug, Clone, Copy, Default)]
struct NodeData {
    ax: f64,
    ay: f64,
    at: f64,
    bx: f64,
    by: f64,
    bt: f64,
    lam: f64,
    vlam: f64,
    k_lambda: f64,
    k_jacobi: f64,
    gauss: f64,
}

/// Values at a ring node that the boundary terms need.
#[derive(Debug, Clone, Copy, Default)]
struct RingNode {
    mu: f64,
    /// ⟨iv, ν⟩_g
    iv_nu: f64,
    kappa: f64,
    /// κ_λ + η_λ
    twist_curv: f64,
    /// (κ_λ)_o + (η_λ)_o is computed from these through the node pairing
    kappa_l: f64,
    eta_l: f64,
    /// ∇_T = σ ∂_ψ + τ V on the ring
    sigma: f64,
    tau: f64,
}

/// A discretized SM over an annulus, bound to a chart and a twist.
pub struct SmGrid<'a> {
    pub chart: &'a ConformalChart,
    pub lambda: &'a LambdaField,
    pub ns: usize,
    pub npsi: usize,
    pub ntheta: usize,
    pub center: [f64; 2],
    ds: f64,
    dtheta: f64,
    base: Vec<BaseNode>,
    nodes: Vec<NodeData>,
    rings: [Vec<RingNode>; 2],
    dpsi_matrix: Vec<f64>,
    dtheta_matrix: Vec<f64>,
}

/// Spectral derivative matrix on n equispaced nodes of a 2π-periodic grid (n even).
fn periodic_derivative(n: usize) -> Vec<f64> {
    let h = TAU / n as f64;
    let mut d = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            if j != k {
                let m = j as i64 - k as i64;
                let sign = if m.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                d[j * n + k] = 0.5 * sign / (0.5 * m as f64 * h).tan();
            }
        }
    }
    d
}

/// Normal angle lifted to within π of `near`, and its derivative along ψ.
fn normal_angle_and_rate(
    chart: &ConformalChart,
    c: Component,
    p: [f64; 2],
    tangent: [f64; 2],
    near: f64,
) -> Result<(f64, f64), GeometryError> {
    let d = chart.defining(c).ok_or(GeometryError::MissingComponent(c.name()))?;
    let g = d.grad(p[0], p[1]);
    let h = d.hessian(p[0], p[1]);
    let dg = [
        h[0][0] * tangent[0] + h[0][1] * tangent[1],
        h[1][0] * tangent[0] + h[1][1] * tangent[1],
    ];
    let a = g[1].atan2(g[0]);
    let rate = (g[0] * dg[1] - g[1] * dg[0]) / (g[0] * g[0] + g[1] * g[1]);
    Ok((near + angle_diff(a, near), rate))
}

impl<'a> SmGrid<'a> {
    /// Builds the grid on the region between the reflector and the emitter,
    /// both star-shaped about `center`.
    pub fn annulus(
        chart: &'a ConformalChart,
        lambda: &'a LambdaField,
        center: [f64; 2],
        ns: usize,
        npsi: usize,
        ntheta: usize,
    ) -> Result<SmGrid<'a>, PestovError> {
        for (axis, n) in [("s", ns), ("psi", npsi), ("theta", ntheta)] {
            if n < 4 {
                return Err(PestovError::TooSmall { axis, n });
            }
        }
        if ntheta % 2 == 1 {
            return Err(PestovError::OddFiber(ntheta));
        }
        if npsi % 2 == 1 {
            return Err(PestovError::OddFiber(npsi));
        }
        let inner = BoundaryParam::new(chart, Component::Reflector, center)?;
        let outer = BoundaryParam::new(chart, Component::Emitter, center)?;
        let ds = 1.0 / (ns - 1) as f64;
        let dpsi = TAU / npsi as f64;
        let dtheta = TAU / ntheta as f64;

        let mut base = Vec::with_capacity(ns * npsi);
        let mut ring_geom = Vec::with_capacity(npsi);
        for j in 0..npsi {
            let psi = j as f64 * dpsi;
            let (ri, ro) = (inner.radius(chart, psi)?, outer.radius(chart, psi)?);
            let (ri_p, ro_p) = (
                inner.radius_derivative(chart, psi, ri)?,
                outer.radius_derivative(chart, psi, ro)?,
            );
            let e = [psi.cos(), psi.sin()];
            let ep = [-e[1], e[0]];
            let pi_ = [center[0] + ri * e[0], center[1] + ri * e[1]];
            let po = [center[0] + ro * e[0], center[1] + ro * e[1]];
            let ti = [ri_p * e[0] + ri * ep[0], ri_p * e[1] + ri * ep[1]];
            let to = [ro_p * e[0] + ro * ep[0], ro_p * e[1] + ro * ep[1]];
            let (ar, ar_p) = normal_angle_and_rate(chart, Component::Reflector, pi_, ti, psi)?;
            let (ae, ae_p) = normal_angle_and_rate(chart, Component::Emitter, po, to, psi + PI)?;
            ring_geom.push((ri, ro, ri_p, ro_p, ar, ar_p, ae - PI, ae_p));
        }
        for i in 0..ns {
            let s = i as f64 * ds;
            let ws = if i == 0 || i == ns - 1 { 0.5 * ds } else { ds };
            for (j, &(ri, ro, ri_p, ro_p, ar, ar_p, ae, ae_p)) in ring_geom.iter().enumerate() {
                let psi = j as f64 * dpsi;
                let e = [psi.cos(), psi.sin()];
                let ep = [-e[1], e[0]];
                let r = ri + s * (ro - ri);
                let r_psi = ri_p + s * (ro_p - ri_p);
                let x = center[0] + r * e[0];
                let y = center[1] + r * e[1];
                let x_s = [(ro - ri) * e[0], (ro - ri) * e[1]];
                let x_psi = [r_psi * e[0] + r * ep[0], r_psi * e[1] + r * ep[1]];
                let det = x_s[0] * x_psi[1] - x_s[1] * x_psi[0];
                let inv = [[x_psi[1] / det, -x_s[1] / det], [-x_psi[0] / det, x_s[0] / det]];
                let phi = chart.phi(x, y);
                let on_ring = i == 0 || i == ns - 1;
                base.push(BaseNode {
                    x,
                    y,
                    inv,
                    theta0: ar + s * (ae - ar),
                    theta0_s: ae - ar,
                    theta0_psi: ar_p + s * (ae_p - ar_p),
                    area: (2.0 * phi).exp() * det.abs() * ws * dpsi,
                    arc: if on_ring { phi.exp() * x_psi[0].hypot(x_psi[1]) * dpsi } else { 0.0 },
                    x_psi,
                });
            }
        }

        let mut grid = SmGrid {
            chart,
            lambda,
            ns,
            npsi,
            ntheta,
            center,
            ds,
            dtheta,
            base,
            nodes: Vec::new(),
            rings: [Vec::new(), Vec::new()],
            dpsi_matrix: periodic_derivative(npsi),
            dtheta_matrix: periodic_derivative(ntheta),
        };
        grid.nodes = grid
            .base
            .par_iter()
            .flat_map_iter(|b| {
                (0..ntheta).map(move |k| {
                    let p = PhasePoint {
                        x: b.x,
                        y: b.y,
                        theta: b.theta0 + (k as f64 + 0.5) * dtheta,
                    };
                    let fr = Frame::at(chart, &p);
                    NodeData {
                        ax: fr.scale * fr.cos,
                        ay: fr.scale * fr.sin,
                        at: fr.x_turn(),
                        bx: fr.scale * fr.sin,
                        by: -fr.scale * fr.cos,
                        bt: fr.xperp_turn(),
                        lam: lambda.value(&p),
                        vlam: lambda.vertical_derivative(&p),
                        k_lambda: lambda.lambda_curvature(chart, &p),
                        k_jacobi: lambda.jacobi_curvature(chart, &p),
                        gauss: chart.gaussian_curvature(p.x, p.y),
                    }
                })
            })
            .collect();
        for (r, comp) in [(0usize, Component::Reflector), (1, Component::Emitter)] {
            let i = if r == 0 { 0 } else { ns - 1 };
            let mut ring = Vec::with_capacity(npsi * ntheta);
            for j in 0..npsi {
                for k in 0..ntheta {
                    ring.push(grid.ring_node(comp, i, j, k)?);
                }
            }
            grid.rings[r] = ring;
        }
        Ok(grid)
    }

    fn ring_node(&self, c: Component, i: usize, j: usize, k: usize) -> Result<RingNode, GeometryError> {
        let chart = self.chart;
        let b = &self.base[i * self.npsi + j];
        let p = self.point(i, j, k);
        let n = &self.nodes[self.index(i, j, k)];
        let nu = chart.normal_field(c, p.x, p.y)?;
        let v = chart.unit_vector(&p);
        let iv = rotate90(v);
        let mu = chart.dot(p.x, p.y, v, nu);
        let iv_nu = chart.dot(p.x, p.y, iv, nu);
        let kappa = chart.signed_curvature(c, p.x, p.y)?;
        let kappa_l = kappa - n.lam * iv_nu;
        let eta_l = n.vlam * mu;
        // ∇_T = ⟨iv, ν⟩X + μX_⊥, tangent to the ring
        let bx = iv_nu * n.ax + mu * n.bx;
        let by = iv_nu * n.ay + mu * n.by;
        let bt = iv_nu * n.at + mu * n.bt;
        let t = b.x_psi;
        let sigma = (bx * t[0] + by * t[1]) / (t[0] * t[0] + t[1] * t[1]);
        Ok(RingNode {
            mu,
            iv_nu,
            kappa,
            twist_curv: kappa_l + eta_l,
            kappa_l,
            eta_l,
            sigma,
            tau: bt - sigma * b.theta0_psi,
        })
    }

    pub fn len(&self) -> usize {
        self.ns * self.npsi * self.ntheta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.npsi + j) * self.ntheta + k
    }

    /// Phase point of node (i, j, k).
    pub fn point(&self, i: usize, j: usize, k: usize) -> PhasePoint {
        let b = &self.base[i * self.npsi + j];
        PhasePoint {
            x: b.x,
            y: b.y,
            theta: b.theta0 + (k as f64 + 0.5) * self.dtheta,
        }
    }

    /// Index of the fiber node that the reflection sends k to, on either ring.
    pub fn reflected_fiber(&self, k: usize) -> usize {
        (self.ntheta / 2 + self.ntheta - 1 - k) % self.ntheta
    }

    pub fn sample(&self, f: &(dyn Fn(&PhasePoint) -> f64 + Sync)) -> Vec<f64> {
        let nt = self.ntheta;
        (0..self.ns * self.npsi)
            .into_par_iter()
            .flat_map_iter(|b| {
                let i = b / self.npsi;
                let j = b % self.npsi;
                (0..nt).map(move |k| f(&self.point(i, j, k)))
            })
            .collect()
    }

    fn check(&self, u: &[f64]) -> Result<(), PestovError> {
        if u.len() != self.len() {
            return Err(PestovError::Length {
                expected: self.len(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// ∂_ϑ, which is V.
    pub fn d_theta(&self, u: &[f64]) -> Vec<f64> {
        let nt = self.ntheta;
        let d = &self.dtheta_matrix;
        u.par_chunks(nt)
            .flat_map_iter(|fiber| {
                (0..nt).map(move |k| {
                    let row = &d[k * nt..(k + 1) * nt];
                    row.iter().zip(fiber).map(|(a, b)| a * b).sum::<f64>()
                })
            })
            .collect()
    }

    /// ∂_ψ at fixed (s, ϑ).
    pub fn d_psi(&self, u: &[f64]) -> Vec<f64> {
        let (np, nt) = (self.npsi, self.ntheta);
        let d = &self.dpsi_matrix;
        u.par_chunks(np * nt)
            .flat_map_iter(|slab| {
                (0..np).flat_map(move |j| {
                    let row = &d[j * np..(j + 1) * np];
                    (0..nt).map(move |k| (0..np).map(|m| row[m] * slab[m * nt + k]).sum::<f64>())
                })
            })
            .collect()
    }

    /// ∂_s at fixed (ψ, ϑ).
    pub fn d_s(&self, u: &[f64]) -> Vec<f64> {
        let stride = self.npsi * self.ntheta;
        let ns = self.ns;
        let h = self.ds;
        (0..ns)
            .into_par_iter()
            .flat_map_iter(|i| {
                (0..stride).map(move |q| {
                    let at = |m: usize| u[m * stride + q];
                    if i == 0 {
                        (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
                    } else if i == ns - 1 {
                        (3.0 * at(ns - 1) - 4.0 * at(ns - 2) + at(ns - 3)) / (2.0 * h)
                    } else {
                        (at(i + 1) - at(i - 1)) / (2.0 * h)
                    }
                })
            })
            .collect()
    }

    /// (Xu, X_⊥u, Vu) in one pass.
    pub fn frame_derivatives(&self, u: &[f64]) -> Result<[Vec<f64>; 3], PestovError> {
        self.check(u)?;
        let vu = self.d_theta(u);
        let us = self.d_s(u);
        let up = self.d_psi(u);
        let nt = self.ntheta;
        let (xu, xpu): (Vec<f64>, Vec<f64>) = (0..self.len())
            .into_par_iter()
            .map(|q| {
                let b = &self.base[q / nt];
                let n = &self.nodes[q];
                let r1 = us[q] - b.theta0_s * vu[q];
                let r2 = up[q] - b.theta0_psi * vu[q];
                let ux = b.inv[0][0] * r1 + b.inv[0][1] * r2;
                let uy = b.inv[1][0] * r1 + b.inv[1][1] * r2;
                (
                    n.ax * ux + n.ay * uy + n.at * vu[q],
                    n.bx * ux + n.by * uy + n.bt * vu[q],
                )
            })
            .unzip();
        Ok([xu, xpu, vu])
    }

    pub fn apply(&self, which: FieldKind, u: &[f64]) -> Result<Vec<f64>, PestovError> {
        self.check(u)?;
        if which == FieldKind::V {
            return Ok(self.d_theta(u));
        }
        let [xu, xpu, vu] = self.frame_derivatives(u)?;
        Ok(match which {
            FieldKind::X => xu,
            FieldKind::Xperp => xpu,
            FieldKind::F => self.add_twist(&xu, &vu),
            FieldKind::V => unreachable!(),
        })
    }

    fn add_twist(&self, xu: &[f64], vu: &[f64]) -> Vec<f64> {
        xu.iter()
            .zip(vu)
            .zip(&self.nodes)
            .map(|((a, b), n)| a + n.lam * b)
            .collect()
    }

    /// Node-wise combination Σ c_i(node) · u_i.
    fn combine(&self, terms: &[(&dyn Fn(&NodeData) -> f64, &[f64])]) -> Vec<f64> {
        (0..self.len())
            .map(|q| terms.iter().map(|(c, u)| c(&self.nodes[q]) * u[q]).sum())
            .collect()
    }

    /// Sum over slices in index order, so results do not depend on the thread count.
    fn ordered_sum(&self, term: impl Fn(usize) -> f64 + Sync) -> f64 {
        let nt = self.ntheta;
        let partial: Vec<f64> = (0..self.ns * self.npsi)
            .into_par_iter()
            .map(|b| (b * nt..(b + 1) * nt).map(&term).sum::<f64>())
            .collect();
        partial.iter().sum()
    }

    /// (u, w)_{SM} with the Liouville measure.
    pub fn inner(&self, u: &[f64], w: &[f64]) -> f64 {
        let nt = self.ntheta;
        let dt = self.dtheta;
        self.ordered_sum(|q| self.base[q / nt].area * dt * u[q] * w[q])
    }

    pub fn norm_sq(&self, u: &[f64]) -> f64 {
        self.inner(u, u)
    }

    /// Σ_q weight(q) u_q w_q over one ring with the measure dS dθ.
    fn ring_sum(&self, ring: usize, f: impl Fn(usize, usize) -> f64) -> f64 {
        let i = if ring == 0 { 0 } else { self.ns - 1 };
        let mut total = 0.0;
        for j in 0..self.npsi {
            let b = &self.base[i * self.npsi + j];
            let mut acc = 0.0;
            for k in 0..self.ntheta {
                acc += f(j, k);
            }
            total += b.arc * self.dtheta * acc;
        }
        total
    }

    /// g-area of the base, by the same quadrature.
    pub fn area(&self) -> f64 {
        self.base.iter().map(|b| b.area).sum()
    }

    /// Liouville volume; equals 2π times the area.
    pub fn volume(&self) -> f64 {
        self.ordered_sum(|q| self.base[q / self.ntheta].area * self.dtheta)
    }

    /// g-length of a ring.
    pub fn ring_length(&self, c: Component) -> f64 {
        let i = if c == Component::Reflector { 0 } else { self.ns - 1 };
        (0..self.npsi).map(|j| self.base[i * self.npsi + j].arc).sum()
    }

    fn interior_norm(&self, u: &[f64]) -> f64 {
        let stride = self.npsi * self.ntheta;
        let nt = self.ntheta;
        let lo = 2 * stride;
        let hi = (self.ns - 2) * stride;
        (lo..hi)
            .map(|q| self.base[q / nt].area * self.dtheta * u[q] * u[q])
            .sum::<f64>()
            .sqrt()
    }

    /// Interior L² norms of the six commutator residuals.
    pub fn structure_residuals(&self, u: &[f64]) -> Result<StructureResiduals, PestovError> {
        let [xu, xpu, vu] = self.frame_derivatives(u)?;
        let fu = self.add_twist(&xu, &vu);
        let [x_vu, xp_vu, v_vu] = self.frame_derivatives(&vu)?;
        let [x_xpu, _, v_xpu] = self.frame_derivatives(&xpu)?;
        let [_, xp_xu, v_xu] = self.frame_derivatives(&xu)?;
        let f_vu = self.add_twist(&x_vu, &v_vu);
        let [_, xp_fu, v_fu] = self.frame_derivatives(&fu)?;
        let f_xpu = self.add_twist(&x_xpu, &v_xpu);
        let one: &dyn Fn(&NodeData) -> f64 = &|_| 1.0;
        let neg: &dyn Fn(&NodeData) -> f64 = &|_| -1.0;
        let lam: &dyn Fn(&NodeData) -> f64 = &|n| n.lam;
        let nlam: &dyn Fn(&NodeData) -> f64 = &|n| -n.lam;
        let gauss: &dyn Fn(&NodeData) -> f64 = &|n| n.gauss;
        let nvlam: &dyn Fn(&NodeData) -> f64 = &|n| -n.vlam;
        let kj: &dyn Fn(&NodeData) -> f64 = &|n| n.k_jacobi;
        // [X, V]u − X_⊥u
        let xv = self.combine(&[(one, &x_vu), (neg, &v_xu), (neg, &xpu)]);
        // [X_⊥, V]u + Xu
        let xpv = self.combine(&[(one, &xp_vu), (neg, &v_xpu), (one, &xu)]);
        // [X, X_⊥]u + K Vu
        let xxp = self.combine(&[(one, &x_xpu), (neg, &xp_xu), (gauss, &vu)]);
        // [V, F]u + X_⊥u − V(λ)Vu
        let vf = self.combine(&[(one, &v_fu), (neg, &f_vu), (one, &xpu), (nvlam, &vu)]);
        // [V, X_⊥]u − Fu + λVu
        let vxp = self.combine(&[(one, &v_xpu), (neg, &xp_vu), (neg, &fu), (lam, &vu)]);
        // [F, X_⊥]u − λFu + (K + X_⊥λ + λ²)Vu
        let fxp = self.combine(&[(one, &f_xpu), (neg, &xp_fu), (nlam, &fu), (kj, &vu)]);
        Ok(StructureResiduals {
            x_v: self.interior_norm(&xv),
            xperp_v: self.interior_norm(&xpv),
            x_xperp: self.interior_norm(&xxp),
            v_f: self.interior_norm(&vf),
            v_xperp: self.interior_norm(&vxp),
            f_xperp: self.interior_norm(&fxp),
            u_norm: self.interior_norm(u),
        })
    }

    /// Vertical Fourier coefficients per base node.
    pub fn vertical_fourier(&self, u: &[f64]) -> Result<FiberModes, PestovError> {
        self.check(u)?;
        let nt = self.ntheta;
        let table: Vec<(f64, f64)> = (0..nt)
            .map(|k| {
                let a = TAU * k as f64 / nt as f64;
                (a.cos(), a.sin())
            })
            .collect();
        let coeffs: Vec<[f64; 2]> = u
            .par_chunks(nt)
            .flat_map_iter(|fiber| {
                let table = &table;
                (0..nt).map(move |m| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (k, &val) in fiber.iter().enumerate() {
                        let (c, s) = table[(m * k) % nt];
                        re += val * c;
                        im -= val * s;
                    }
                    [re / nt as f64, im / nt as f64]
                })
            })
            .collect();
        Ok(FiberModes { ntheta: nt, coeffs })
    }

    /// ∥u_m∥² for each mode index m = 0..n, by the same measure as `norm_sq`.
    pub fn mode_energies(&self, modes: &FiberModes) -> Vec<f64> {
        let nt = self.ntheta;
        let mut out = vec![0.0; nt];
        for (b, base) in self.base.iter().enumerate() {
            for (m, e) in out.iter_mut().enumerate() {
                let c = modes.coeffs[b * nt + m];
                *e += base.area * TAU * (c[0] * c[0] + c[1] * c[1]);
            }
        }
        out
    }

    /// Evaluates every term of the Pestov identity for u.
    pub fn pestov_identity(&self, u: &[f64]) -> Result<PestovReport, PestovError> {
        let [xu, xpu, vu] = self.frame_derivatives(u)?;
        let fu = self.add_twist(&xu, &vu);
        let pu = self.d_theta(&fu);
        let [x_vu, _, v_vu] = self.frame_derivatives(&vu)?;
        let ptu = self.add_twist(&x_vu, &v_vu);
        let nt = self.ntheta;
        let dt = self.dtheta;
        let p_norm = self.norm_sq(&pu);
        let pt_norm = self.norm_sq(&ptu);
        let curv = self.ordered_sum(|q| self.base[q / nt].area * dt * self.nodes[q].k_lambda * vu[q] * vu[q]);
        let f_norm = self.norm_sq(&fu);
        let mut boundary = [0.0; 2];
        for (r, b) in boundary.iter_mut().enumerate() {
            let i = if r == 0 { 0 } else { self.ns - 1 };
            *b = self.ring_sum(r, |j, k| {
                let q = self.index(i, j, k);
                let n = &self.nodes[q];
                let rn = &self.rings[r][j * nt + k];
                let grad = rn.iv_nu * fu[q] - rn.mu * n.vlam * vu[q] + rn.mu * xpu[q];
                grad * vu[q]
            });
        }
        let bsum = boundary[0] + boundary[1];
        let lhs = p_norm;
        let rhs = pt_norm - curv + f_norm + bsum;
        let scale = p_norm.abs() + pt_norm.abs() + curv.abs() + f_norm.abs() + bsum.abs();
        Ok(PestovReport {
            grid: [self.ns, self.npsi, self.ntheta],
            p_norm_sq: p_norm,
            ptilde_norm_sq: pt_norm,
            curvature_term: curv,
            f_norm_sq: f_norm,
            boundary_term: bsum,
            boundary_reflector: boundary[0],
            boundary_emitter: boundary[1],
            lhs,
            rhs,
            relative_residual: if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 },
        })
    }

    /// Even and odd parts of a ring function under the fiber reflection.
    fn even_odd(&self, ring_vals: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nt = self.ntheta;
        let mut e = vec![0.0; ring_vals.len()];
        let mut o = vec![0.0; ring_vals.len()];
        for j in 0..self.npsi {
            for k in 0..nt {
                let a = ring_vals[j * nt + k];
                let b = ring_vals[j * nt + self.reflected_fiber(k)];
                e[j * nt + k] = 0.5 * (a + b);
                o[j * nt + k] = 0.5 * (a - b);
            }
        }
        (e, o)
    }

    fn ring_values(&self, ring: usize, u: &[f64]) -> Vec<f64> {
        let i = if ring == 0 { 0 } else { self.ns - 1 };
        let stride = self.npsi * self.ntheta;
        u[i * stride..(i + 1) * stride].to_vec()
    }

    fn ring_inner(&self, ring: usize, a: &[f64], b: &[f64]) -> f64 {
        let nt = self.ntheta;
        self.ring_sum(ring, |j, k| a[j * nt + k] * b[j * nt + k])
    }

    /// ∂_ψ and V of a function given only on a ring.
    fn ring_derivatives(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (np, nt) = (self.npsi, self.ntheta);
        let mut dp = vec![0.0; w.len()];
        let mut dv = vec![0.0; w.len()];
        for j in 0..np {
            for k in 0..nt {
                let rp = &self.dpsi_matrix[j * np..(j + 1) * np];
                dp[j * nt + k] = (0..np).map(|m| rp[m] * w[m * nt + k]).sum();
                let rt = &self.dtheta_matrix[k * nt..(k + 1) * nt];
                dv[j * nt + k] = (0..nt).map(|m| rt[m] * w[j * nt + m]).sum();
            }
        }
        (dp, dv)
    }

    /// (a_e, b_o) + (a_o, b_e) over a ring; zero up to roundoff.
    pub fn even_odd_pairing(&self, c: Component, a: &[f64], b: &[f64]) -> Result<f64, PestovError> {
        self.check(a)?;
        self.check(b)?;
        let r = ring_of(c);
        let (ae, ao) = self.even_odd(&self.ring_values(r, a));
        let (be, bo) = self.even_odd(&self.ring_values(r, b));
        Ok(self.ring_inner(r, &ae, &bo) + self.ring_inner(r, &ao, &be))
    }

    /// max |(κ_λ)_o + (η_λ)_o| over a ring.
    pub fn odd_curvature_defect(&self, c: Component) -> f64 {
        let r = ring_of(c);
        let kap: Vec<f64> = self.rings[r].iter().map(|n| n.kappa_l).collect();
        let eta: Vec<f64> = self.rings[r].iter().map(|n| n.eta_l).collect();
        let (_, ko) = self.even_odd(&kap);
        let (_, eo) = self.even_odd(&eta);
        ko.iter().zip(&eo).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max)
    }

    /// Both sides of the even/odd splitting of the boundary term on one ring.
    pub fn boundary_decomposition(&self, c: Component, u: &[f64]) -> Result<BoundaryReport, PestovError> {
        let [xu, xpu, vu] = self.frame_derivatives(u)?;
        let r = ring_of(c);
        let nt = self.ntheta;
        let ring = &self.rings[r];
        let i = if r == 0 { 0 } else { self.ns - 1 };
        let stride = self.npsi * nt;
        let node = |q: usize| &self.nodes[i * stride + q];
        let uu = self.ring_values(r, u);
        let vur = self.ring_values(r, &vu);
        let xur = self.ring_values(r, &xu);
        let xpur = self.ring_values(r, &xpu);

        let full: Vec<f64> = (0..stride)
            .map(|q| {
                let n = node(q);
                let rn = &ring[q];
                rn.iv_nu * (xur[q] + n.lam * vur[q]) - rn.mu * n.vlam * vur[q] + rn.mu * xpur[q]
            })
            .collect();
        let lhs = self.ring_inner(r, &full, &vur);

        // ring-only operators: ∇_T = σ∂_ψ + τV and ∇_{T,λ} = ∇_T + (⟨iv,ν⟩λ − μV(λ))V
        let nabla_t = |w: &[f64]| {
            let (dp, dv) = self.ring_derivatives(w);
            (0..stride).map(|q| ring[q].sigma * dp[q] + ring[q].tau * dv[q]).collect::<Vec<f64>>()
        };
        let (_, vu_ring) = self.ring_derivatives(&uu);
        let tu = nabla_t(&uu);
        let tangential: Vec<f64> = (0..stride)
            .map(|q| {
                let n = node(q);
                tu[q] + (ring[q].iv_nu * n.lam - ring[q].mu * n.vlam) * vu_ring[q]
            })
            .collect();
        let lhs_tangential = self.ring_inner(r, &tangential, &vu_ring);

        let (ue, uo) = self.even_odd(&uu);
        let (_, vue) = self.ring_derivatives(&ue);
        let (_, vuo) = self.ring_derivatives(&uo);
        let t_ue = nabla_t(&ue);
        let t_uo = nabla_t(&uo);
        let lam_vu: Vec<f64> = (0..stride).map(|q| node(q).lam * vu_ring[q]).collect();
        let vlam_vu: Vec<f64> = (0..stride).map(|q| node(q).vlam * vu_ring[q]).collect();
        let (lv_e, lv_o) = self.even_odd(&lam_vu);
        let (vv_e, vv_o) = self.even_odd(&vlam_vu);
        let kvu: Vec<f64> = (0..stride).map(|q| ring[q].kappa * vu_ring[q]).collect();
        // ⟨v_⊥, ν⟩ = −⟨iv, ν⟩ plays the role of V(μ) in the splitting
        let vperp: Vec<f64> = ring.iter().map(|n| -n.iv_nu).collect();
        let mu: Vec<f64> = ring.iter().map(|n| n.mu).collect();
        let a: Vec<f64> = (0..stride).map(|q| vperp[q] * lv_e[q] + mu[q] * vv_o[q]).collect();
        let b: Vec<f64> = (0..stride).map(|q| vperp[q] * lv_o[q] + mu[q] * vv_e[q]).collect();
        let split_rhs = self.ring_inner(r, &t_ue, &vuo) + self.ring_inner(r, &t_uo, &vue)
            - self.ring_inner(r, &kvu, &vu_ring)
            - self.ring_inner(r, &a, &vuo)
            - self.ring_inner(r, &b, &vue);

        let tc: Vec<f64> = ring.iter().map(|n| n.twist_curv).collect();
        let (tc_e, _) = self.even_odd(&tc);
        let weighted: Vec<f64> = (0..stride).map(|q| tc_e[q] * vur[q]).collect();
        let reduced_rhs = -self.ring_inner(r, &weighted, &vur);
        let symmetry_defect = uo.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(BoundaryReport {
            component: c,
            lhs,
            lhs_tangential,
            split_rhs,
            reduced_rhs,
            symmetry_defect,
        })
    }
}

fn ring_of(c: Component) -> usize {
    match c {
        Component::Reflector => 0,
        Component::Emitter => 1,
    }
}

#[derive(Debug, Clone)]
pub struct FiberModes {
    pub ntheta: usize,
    /// c_m at each base node, m = 0..n; m > n/2 are the negative frequencies
    pub coeffs: Vec<[f64; 2]>,
}

impl FiberModes {
    /// Signed frequency of mode index m.
    pub fn frequency(&self, m: usize) -> i64 {
        if m <= self.ntheta / 2 {
            m as i64
        } else {
            m as i64 - self.ntheta as i64
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StructureResiduals {
    pub x_v: f64,
    pub xperp_v: f64,
    pub x_xperp: f64,
    pub v_f: f64,
    pub v_xperp: f64,
    pub f_xperp: f64,
    /// interior norm of u, for scale
    pub u_norm: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PestovReport {
    pub grid: [usize; 3],
    pub p_norm_sq: f64,
    pub ptilde_norm_sq: f64,
    /// (K_λ Vu, Vu)
    pub curvature_term: f64,
    pub f_norm_sq: f64,
    pub boundary_term: f64,
    pub boundary_reflector: f64,
    pub boundary_emitter: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// |lhs − rhs| over the sum of the absolute terms
    pub relative_residual: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundaryReport {
    pub component: Component,
    /// (∇_{T,λ}u, Vu) with volume stencils
    pub lhs: f64,
    /// the same pairing with ring-only stencils
    pub lhs_tangential: f64,
    /// even/odd splitting of the pairing
    pub split_rhs: f64,
    /// −((κ_λ + η_λ)_e Vu, Vu), valid when u∘ρ = u on the ring
    pub reduced_rhs: f64,
    /// max |u_o| on the ring
    pub symmetry_defect: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ScalarField;

    fn annulus() -> ConformalChart {
        ConformalChart::flat_annulus(0.5, 1.0)
    }

    #[test]
    fn spectral_matrix_is_skew_and_exact_on_harmonics() {
        let n = 16;
        let d = periodic_derivative(n);
        for j in 0..n {
            for k in 0..n {
                assert!((d[j * n + k] + d[k * n + j]).abs() < 1e-13);
            }
        }
        let h = TAU / n as f64;
        for j in 0..n {
            let got: f64 = (0..n).map(|k| d[j * n + k] * (3.0 * k as f64 * h).sin()).sum();
            assert!((got - 3.0 * (3.0 * j as f64 * h).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_measures() {
        let chart = annulus();
        let lam = LambdaField::constant(0.0);
        let g = SmGrid::annulus(&chart, &lam, [0.0, 0.0], 33, 32, 8).unwrap();
        let area = 0.75 * PI;
        assert!((g.area() - area).abs() < 1e-12, "{}", g.area());
        assert!((g.volume() - TAU * area).abs() < 1e-11);
        assert!((g.ring_length(Component::Emitter) - TAU).abs() < 1e-12);
        assert!((g.ring_length(Component::Reflector) - PI).abs() < 1e-12);
    }

    #[test]
    fn fiber_reflection_permutes_nodes() {
        let chart = ConformalChart::new(
            ScalarField::parse("0.2*(x^2+y^2)").unwrap(),
            annulus().defining(Component::Emitter).cloned(),
            Some(crate::geometry::DefiningFunction::ellipse([0.0, 0.0], [0.5, 0.35], crate::geometry::Side::Outside)),
        );
        let lam = LambdaField::constant(0.0);
        let g = SmGrid::annulus(&chart, &lam, [0.0, 0.0], 8, 16, 12).unwrap();
        for (i, c) in [(0, Component::Reflector), (7, Component::Emitter)] {
            for j in 0..16 {
                for k in 0..12 {
                    let p = g.point(i, j, k);
                    let r = chart.reflect_on(c, &p).unwrap();
                    let q = g.point(i, j, g.reflected_fiber(k));
                    assert!(angle_diff(r.theta, q.theta).abs() < 1e-12, "{c:?} {j} {k}");
                }
            }
        }
        assert_eq!(g.reflected_fiber(0), 5);
        assert_eq!(g.reflected_fiber(5), 0);
        assert_eq!(g.reflected_fiber(6), 11);
    }

    #[test]
    fn frame_fields_on_linear_function() {
        let chart = annulus();
        let lam = LambdaField::constant(0.0);
        let g = SmGrid::annulus(&chart, &lam, [0.0, 0.0], 9, 16, 8).unwrap();
        let u = g.sample(&|p| 2.0 * p.x - p.y);
        let [xu, xpu, vu] = g.frame_derivatives(&u).unwrap();
        for i in 0..9 {
            for j in 0..16 {
                for k in 0..8 {
                    let q = g.index(i, j, k);
                    let p = g.point(i, j, k);
                    assert!((xu[q] - (2.0 * p.theta.cos() - p.theta.sin())).abs() < 1e-11);
                    assert!((xpu[q] - (2.0 * p.theta.sin() + p.theta.cos())).abs() < 1e-11);
                    assert!(vu[q].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parseval_and_mode_content() {
        let chart = annulus();
        let lam = LambdaField::constant(0.0);
        let g = SmGrid::annulus(&chart, &lam, [0.0, 0.0], 9, 16, 16).unwrap();
        let u = g.sample(&|p| p.x * p.theta.cos() + p.y * p.y * p.theta.sin());
        let modes = g.vertical_fourier(&u).unwrap();
        let e = g.mode_energies(&modes);
        let total: f64 = e.iter().sum();
        assert!((total - g.norm_sq(&u)).abs() < 1e-12 * total);
        for (m, en) in e.iter().enumerate() {
            if modes.frequency(m).abs() != 1 {
                assert!(*en < 1e-24 * total, "mode {m}: {en}");
            }
        }
    }

    #[test]
    fn rejects_small_or_odd_grids() {
        let chart = annulus();
        let lam = LambdaField::constant(0.0);
        assert!(matches!(SmGrid::annulus(&chart, &lam, [0.0, 0.0], 3, 8, 8), Err(PestovError::TooSmall { .. })));
        assert!(matches!(SmGrid::annulus(&chart, &lam, [0.0, 0.0], 8, 8, 9), Err(PestovError::OddFiber(9))));
    }

    #[test]
    fn zero_function_has_zero_terms() {
        let chart = annulus();
        let lam = LambdaField::constant(0.3);
        let g = SmGrid::annulus(&chart, &lam, [0.0, 0.0], 8, 8, 8).unwrap();
        let r = g.pestov_identity(&vec![0.0; g.len()]).unwrap();
        assert_eq!((r.lhs, r.rhs, r.relative_residual), (0.0, 0.0, 0.0));
    }
}
