//! JSON run configuration with a strict schema.

use crate::admissibility::AdmissibilityOptions;
use crate::dynamics::TraceOptions;
use crate::expr::{ParseError, ScalarField, Var};
use crate::geometry::{ConformalChart, DefiningFunction, Side};
use crate::inversion::{RaySampling, Regularization};
use crate::lambda::LambdaField;
use crate::transform::IntegrandField;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expression in {field}: {source}")]
    Expr { field: String, source: ParseError },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveSpec {
    Circle { center: [f64; 2], radius: f64 },
    Ellipse { center: [f64; 2], semi_axes: [f64; 2] },
    /// defining function, positive on the domain side
    Expr { expr: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    #[serde(default = "zero_expr")]
    pub phi: String,
    pub emitter: CurveSpec,
    #[serde(default)]
    pub reflector: Option<CurveSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSpec {
    /// λ(x, y, θ)
    Expr { expr: String },
    /// λ(x, y), no θ dependence
    Magnetic { expr: String },
    /// λ = ⟨E, iv⟩_g with E = (e1, e2) in chart components
    Thermostat { e1: String, e2: String },
}

impl Default for LambdaSpec {
    fn default() -> Self {
        LambdaSpec::Expr { expr: "0".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSpec {
    pub step: f64,
    /// bound on |ρ_E| at reported exit points
    pub rho_tol: f64,
    pub tan_eps: f64,
    pub max_time: f64,
    pub max_reflections: usize,
    pub event_tol: f64,
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        let t = TraceOptions::default();
        IntegratorSpec {
            step: t.step,
            rho_tol: 1e-10,
            tan_eps: t.tan_eps,
            max_time: t.max_time,
            max_reflections: t.max_reflections,
            event_tol: t.event_tol,
        }
    }
}

impl IntegratorSpec {
    pub fn trace_options(&self) -> TraceOptions {
        TraceOptions {
            step: self.step,
            max_time: self.max_time,
            max_reflections: self.max_reflections,
            tan_eps: self.tan_eps,
            event_tol: self.event_tol,
        }
    }
}

/// Boundary-fitted phase-space grid for the Pestov checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// radial nodes are n + 1, angular and fiber nodes n, for each n
    pub sizes: Vec<usize>,
    /// common center of the two boundary curves
    pub center: [f64; 2],
    /// test functions u(x, y, theta)
    pub functions: Vec<String>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            sizes: vec![32, 64],
            center: [0.0, 0.0],
            functions: vec![
                "(x*cos(theta) - y*sin(theta))*(1 + 0.5*y) + 0.3*sin(x + 2*theta)".into(),
                "exp(-x^2)*cos(theta - y)".into(),
                "exp(0.5*x*cos(theta) + 0.3*y)".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaysSpec {
    /// random emitter rays for trace and jacobi
    pub count: usize,
    pub seed: u64,
    /// inward angles within this many radians of tangency are not sampled
    pub glancing_margin: f64,
    /// rays allowed to end trapped or tangential before trace fails
    pub failure_budget: usize,
}

impl Default for RaysSpec {
    fn default() -> Self {
        RaysSpec {
            count: 100,
            seed: 1,
            glancing_margin: 0.05,
            failure_budget: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSpec {
    pub f0: String,
    pub alpha: [String; 2],
    pub arclength: usize,
    pub angles: usize,
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec {
            f0: "1".into(),
            alpha: ["0".into(), "0".into()],
            arclength: 64,
            angles: 32,
        }
    }
}

impl TransformSpec {
    pub fn integrand(&self) -> Result<IntegrandField, ConfigError> {
        Ok(IntegrandField::new(
            parse_field("transform.f0", &self.f0)?,
            [
                parse_field("transform.alpha[0]", &self.alpha[0])?,
                parse_field("transform.alpha[1]", &self.alpha[1])?,
            ],
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JacobiSpec {
    /// central-difference step of the finite-difference oracle
    pub fd_step: f64,
    /// initial frame (a, b, c)
    pub frame: [f64; 3],
}

impl Default for JacobiSpec {
    fn default() -> Self {
        JacobiSpec {
            fd_step: 1e-5,
            frame: [0.3, -0.7, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSpec {
    /// Legendre degree per variable; m₀ = (degree + 1)²
    pub degree: usize,
    pub sampling: RaySampling,
    /// domain quadrature nodes (radial Gauss, angular trapezoid)
    pub quadrature: [usize; 2],
    pub regularization: Regularization,
    /// synthetic truth
    pub f0: String,
    pub alpha: [String; 2],
    /// relative Gaussian noise level added to the synthetic data
    pub noise: f64,
}

impl Default for InversionSpec {
    fn default() -> Self {
        InversionSpec {
            degree: 4,
            sampling: RaySampling::default(),
            quadrature: [24, 160],
            regularization: Regularization::default(),
            f0: "exp(-((x-0.2)^2 + (y+0.1)^2))".into(),
            alpha: ["0".into(), "0".into()],
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub chart: ChartSpec,
    #[serde(default)]
    pub lambda: LambdaSpec,
    #[serde(default)]
    pub integrator: IntegratorSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub rays: RaysSpec,
    #[serde(default)]
    pub transform: TransformSpec,
    #[serde(default)]
    pub jacobi: JacobiSpec,
    #[serde(default)]
    pub admissibility: AdmissibilityOptions,
    #[serde(default)]
    pub inversion: InversionSpec,
    #[serde(default = "default_output")]
    pub output: String,
}

fn zero_expr() -> String {
    "0".into()
}

fn default_output() -> String {
    "out".into()
}

fn parse_field(field: &str, src: &str) -> Result<ScalarField, ConfigError> {
    ScalarField::parse(src).map_err(|source| ConfigError::Expr {
        field: field.into(),
        source,
    })
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<(), ConfigError> {
    if v >= min {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be at least {min}, got {v}")))
    }
}

impl RunConfig {
    pub fn from_json(src: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(src)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::from_json(&src)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let i = &self.integrator;
        for (n, v) in [
            ("integrator.step", i.step),
            ("integrator.rho_tol", i.rho_tol),
            ("integrator.tan_eps", i.tan_eps),
            ("integrator.max_time", i.max_time),
            ("integrator.event_tol", i.event_tol),
            ("rays.glancing_margin", self.rays.glancing_margin),
            ("jacobi.fd_step", self.jacobi.fd_step),
            ("admissibility.a", self.admissibility.a),
            ("admissibility.glancing_margin", self.admissibility.glancing_margin),
            ("inversion.sampling.glancing_margin", self.inversion.sampling.glancing_margin),
            ("inversion.sampling.arc_fraction", self.inversion.sampling.arc_fraction),
        ] {
            positive(n, v)?;
        }
        match self.inversion.regularization {
            Regularization::Truncated { rel_tol } => positive("inversion.regularization.rel_tol", rel_tol)?,
            Regularization::Tikhonov { alpha } => positive("inversion.regularization.alpha", alpha)?,
        }
        if !(self.inversion.noise >= 0.0) {
            return Err(ConfigError::Invalid("inversion.noise must be non-negative".into()));
        }
        if self.grid.sizes.is_empty() {
            return Err(ConfigError::Invalid("grid.sizes must not be empty".into()));
        }
        for n in &self.grid.sizes {
            at_least("grid.sizes entries", *n, 8)?;
        }
        at_least("transform.arclength", self.transform.arclength, 1)?;
        at_least("transform.angles", self.transform.angles, 1)?;
        at_least("admissibility.boundary_nodes", self.admissibility.boundary_nodes, 8)?;
        at_least("admissibility.fiber_nodes", self.admissibility.fiber_nodes, 8)?;
        at_least("inversion.degree", self.inversion.degree, 2)?;
        at_least("inversion.quadrature[0]", self.inversion.quadrature[0], 8)?;
        at_least("inversion.quadrature[1]", self.inversion.quadrature[1], 8)?;
        // parse everything up front so errors surface as config errors
        self.chart()?;
        let lam = self.lambda()?;
        if let LambdaSpec::Magnetic { .. } = self.lambda {
            if lam.field().depends_on(Var::Theta) {
                return Err(ConfigError::Invalid("a magnetic twist cannot depend on theta".into()));
            }
        }
        self.transform.integrand()?;
        self.inversion_truth()?;
        for (k, f) in self.grid.functions.iter().enumerate() {
            parse_field(&format!("grid.functions[{k}]"), f)?;
        }
        Ok(())
    }

    pub fn chart(&self) -> Result<ConformalChart, ConfigError> {
        let curve = |name: &str, c: &CurveSpec, side: Side| -> Result<DefiningFunction, ConfigError> {
            Ok(match c {
                CurveSpec::Circle { center, radius } => {
                    positive(&format!("chart.{name}.radius"), *radius)?;
                    DefiningFunction::circle(*center, *radius, side)
                }
                CurveSpec::Ellipse { center, semi_axes } => {
                    positive(&format!("chart.{name}.semi_axes[0]"), semi_axes[0])?;
                    positive(&format!("chart.{name}.semi_axes[1]"), semi_axes[1])?;
                    DefiningFunction::ellipse(*center, *semi_axes, side)
                }
                CurveSpec::Expr { expr } => DefiningFunction::Expr(parse_field(&format!("chart.{name}.expr"), expr)?),
            })
        };
        let emitter = curve("emitter", &self.chart.emitter, Side::Inside)?;
        let reflector = match &self.chart.reflector {
            Some(c) => Some(curve("reflector", c, Side::Outside)?),
            None => None,
        };
        Ok(ConformalChart::new(parse_field("chart.phi", &self.chart.phi)?, Some(emitter), reflector))
    }

    pub fn lambda(&self) -> Result<LambdaField, ConfigError> {
        fn wrap(field: &'static str) -> impl Fn(ParseError) -> ConfigError {
            move |source| ConfigError::Expr { field: field.into(), source }
        }
        match &self.lambda {
            LambdaSpec::Expr { expr } => LambdaField::from_expr(expr).map_err(wrap("lambda.expr")),
            LambdaSpec::Magnetic { expr } => LambdaField::magnetic(expr).map_err(wrap("lambda.expr")),
            LambdaSpec::Thermostat { e1, e2 } => {
                LambdaField::thermostat(&self.chart()?, e1, e2).map_err(wrap("lambda.e1/e2"))
            }
        }
    }

    pub fn inversion_truth(&self) -> Result<IntegrandField, ConfigError> {
        let s = &self.inversion;
        Ok(IntegrandField::new(
            parse_field("inversion.f0", &s.f0)?,
            [
                parse_field("inversion.alpha[0]", &s.alpha[0])?,
                parse_field("inversion.alpha[1]", &s.alpha[1])?,
            ],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"{"chart": {"emitter": {"kind": "circle", "center": [0, 0], "radius": 1}}}"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_json(MIN).unwrap();
        assert_eq!(c.integrator.step, 1e-3);
        assert_eq!(c.grid.sizes, vec![32, 64]);
        assert!(c.chart().unwrap().defining(crate::geometry::Component::Reflector).is_none());
        assert!(c.lambda().unwrap().is_zero());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MIN.replace(r#""radius": 1"#, r#""radius": 1, "colour": 3"#);
        assert!(matches!(RunConfig::from_json(&bad), Err(ConfigError::Json(_))));
        let bad = r#"{"chart": {"emitter": {"kind": "circle", "center": [0, 0], "radius": 1}}, "extra": 1}"#;
        assert!(RunConfig::from_json(bad).is_err());
        let bad = r#"{"chart": {"emitter": {"kind": "circle", "center": [0, 0], "radius": 1}}, "integrator": {"stepp": 1}}"#;
        assert!(RunConfig::from_json(bad).is_err());
    }

    #[test]
    fn tolerances_and_sizes_are_checked() {
        let bad = r#"{"chart": {"emitter": {"kind": "circle", "center": [0, 0], "radius": 1}}, "integrator": {"step": 0}}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(ConfigError::Invalid(_))));
        let bad = r#"{"chart": {"emitter": {"kind": "circle", "center": [0, 0], "radius": 1}}, "grid": {"sizes": [4]}}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn expressions_are_parsed_eagerly() {
        let bad = r#"{"chart": {"phi": "x +", "emitter": {"kind": "circle", "center": [0, 0], "radius": 1}}}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(ConfigError::Expr { .. })));
        let bad = r#"{"chart": {"emitter": {"kind": "circle", "center": [0, 0], "radius": 1}}, "lambda": {"kind": "magnetic", "expr": "sin(theta)"}}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn shipped_configs_load() {
        for src in [include_str!("../../../configs/flat_annulus.json"), include_str!("../../../configs/curved.json"), include_str!("../../../configs/eccentric.json")] {
            let c = RunConfig::from_json(src).unwrap();
            assert!(c.chart().unwrap().defining(crate::geometry::Component::Reflector).is_some());
        }
    }
}
