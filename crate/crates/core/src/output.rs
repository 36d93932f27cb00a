//! File outputs: CSV tables, pretty JSON reports, and an SVG overlay of rays.

use crate::dynamics::BrokenRay;
use crate::geometry::{BoundaryParam, Component, ConformalChart};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// An output directory that records the files written to it, in order.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> std::io::Result<OutputDir> {
        fs::create_dir_all(root)?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> std::io::Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.written.push(path);
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.bytes(name, s.as_bytes())
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> std::io::Result<()> {
        let path = self.path(name);
        fs::write(&path, data)?;
        self.written.push(path);
        Ok(())
    }
}

/// JSON with NaN and infinities mapped to null, for reports that may carry them.
pub fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn polyline(out: &mut String, pts: impl Iterator<Item = [f64; 2]>, class: &str) {
    let mut first = true;
    let _ = write!(out, r#"<polyline class="{class}" points=""#);
    for p in pts {
        if !first {
            out.push(' ');
        }
        first = false;
        // y flipped so the picture has the usual orientation
        let _ = write!(out, "{:.5},{:.5}", p[0], -p[1]);
    }
    out.push_str("\"/>\n");
}

/// SVG 1.1 picture of the boundary curves with the rays drawn on top.
/// Every `stride`-th sample is drawn, plus segment endpoints.
pub fn svg_overlay(chart: &ConformalChart, rays: &[BrokenRay], stride: usize) -> String {
    let stride = stride.max(1);
    let mut curves = Vec::new();
    let mut bbox = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for c in [Component::Emitter, Component::Reflector] {
        let Some(d) = chart.defining(c) else { continue };
        let center = d.center().unwrap_or([0.0, 0.0]);
        let Ok(param) = BoundaryParam::new(chart, c, center) else { continue };
        let pts: Vec<[f64; 2]> = (0..=256)
            .filter_map(|k| param.point(chart, std::f64::consts::TAU * k as f64 / 256.0).ok())
            .collect();
        for p in &pts {
            bbox = [bbox[0].min(p[0]), bbox[1].max(p[0]), bbox[2].min(p[1]), bbox[3].max(p[1])];
        }
        curves.push((c, pts));
    }
    if !bbox[0].is_finite() {
        bbox = [-1.0, 1.0, -1.0, 1.0];
    }
    let pad = 0.05 * (bbox[1] - bbox[0]).max(bbox[3] - bbox[2]);
    let (w, h) = (bbox[1] - bbox[0] + 2.0 * pad, bbox[3] - bbox[2] + 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="800" height="{:.0}" viewBox="{:.5} {:.5} {:.5} {:.5}">"#,
        800.0 * h / w,
        bbox[0] - pad,
        -bbox[3] - pad,
        w,
        h
    );
    let lw = 0.002 * w;
    let _ = writeln!(
        s,
        "<style>polyline {{ fill: none; stroke-linejoin: round; }} .emitter {{ stroke: #1b5e20; stroke-width: {:.5}; }} .reflector {{ stroke: #b71c1c; stroke-width: {:.5}; }} .ray {{ stroke: #1565c0; stroke-opacity: 0.6; stroke-width: {:.5}; }}</style>",
        3.0 * lw,
        3.0 * lw,
        lw
    );
    for (c, pts) in &curves {
        polyline(&mut s, pts.iter().copied(), c.name());
    }
    for ray in rays {
        for seg in &ray.segments {
            let n = seg.len();
            let pts = seg
                .iter()
                .enumerate()
                .filter(|(i, _)| i % stride == 0 || *i + 1 == n)
                .map(|(_, p)| [p.point.x, p.point.y]);
            polyline(&mut s, pts, "ray");
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{trace_broken_ray, TraceOptions};
    use crate::geometry::PhasePoint;
    use crate::lambda::LambdaField;

    #[test]
    fn svg_has_curves_and_rays() {
        let chart = ConformalChart::flat_annulus(0.5, 1.0);
        let lam = LambdaField::constant(0.0);
        let ray = trace_broken_ray(&chart, &lam, &PhasePoint::new(1.0, 0.0, 3.0), &TraceOptions::default()).unwrap();
        let svg = svg_overlay(&chart, &[ray.clone(), ray], 10);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches(r#"class="emitter""#).count(), 1);
        assert_eq!(svg.matches(r#"class="reflector""#).count(), 1);
        assert!(svg.matches(r#"class="ray""#).count() >= 2);
    }

    #[test]
    fn files_are_recorded() {
        let dir = std::env::temp_dir().join(format!("twistray-output-{}", std::process::id()));
        let mut out = OutputDir::create(&dir).unwrap();
        #[derive(Serialize)]
        struct Row {
            a: f64,
            b: &'static str,
        }
        out.csv("t.csv", [Row { a: 0.1, b: "x" }, Row { a: 2.0, b: "y" }]).unwrap();
        out.json("t.json", &[1, 2]).unwrap();
        assert_eq!(out.written().len(), 2);
        let text = fs::read_to_string(out.path("t.csv")).unwrap();
        assert_eq!(text, "a,b\n0.1,x\n2.0,y\n");
        fs::remove_dir_all(dir).unwrap();
    }
}
