//! Quadrature weights on a ray segment's sample grid.
//!
//! A segment has uniform steps except for a final partial step that ends on
//! the boundary. The uniform part uses composite Simpson (with one 3/8 panel
//! when the interval count is odd); the partial step is integrated against
//! the cubic through the last four nodes.

/// Weights w with ∫ f dt ≈ Σ w_k f(t_k) over the segment. Times may run
/// backward; weights are always for the positive-length integral.
pub fn segment_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    if n < 2 {
        return w;
    }
    let t: Vec<f64> = times.iter().map(|&s| (s - times[0]).abs()).collect();
    if n <= 4 {
        // too few nodes for a composite rule: integrate the interpolant directly
        return interval_weights(&t, t[0], t[n - 1]);
    }
    // uniform part covers nodes 0..=m, partial step is [t_m, t_{n-1}]
    let m = n - 2;
    let h = t[1] - t[0];
    let mut start = 0;
    if m % 2 == 1 {
        for (k, c) in [3.0, 9.0, 9.0, 3.0].iter().enumerate() {
            w[k] += c * h / 8.0;
        }
        start = 3;
    }
    let mut k = start;
    while k + 2 <= m {
        w[k] += h / 3.0;
        w[k + 1] += 4.0 * h / 3.0;
        w[k + 2] += h / 3.0;
        k += 2;
    }
    let first = n - 4;
    let nodes: Vec<f64> = t[first..].to_vec();
    let part = interval_weights(&nodes, t[n - 2], t[n - 1]);
    for (i, v) in part.into_iter().enumerate() {
        w[first + i] += v;
    }
    w
}

/// ∫_a^b of the Lagrange basis polynomials on `nodes`, by 3-point Gauss.
fn interval_weights(nodes: &[f64], a: f64, b: f64) -> Vec<f64> {
    const G: [(f64, f64); 3] = [
        (-0.774_596_669_241_483_4, 5.0 / 9.0),
        (0.0, 8.0 / 9.0),
        (0.774_596_669_241_483_4, 5.0 / 9.0),
    ];
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut out = vec![0.0; nodes.len()];
    if half == 0.0 {
        return out;
    }
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (xg, wg) in G {
            let x = mid + half * xg;
            let mut l = 1.0;
            for (j, &tj) in nodes.iter().enumerate() {
                if j != i {
                    l *= (x - tj) / (nodes[i] - tj);
                }
            }
            acc += wg * l;
        }
        *o = acc * half;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: f64, len: f64) -> Vec<f64> {
        let mut t: Vec<f64> = (0..).map(|k| k as f64 * h).take_while(|&s| s < len).collect();
        t.push(len);
        t
    }

    fn integrate(t: &[f64], f: impl Fn(f64) -> f64) -> f64 {
        segment_weights(t).iter().zip(t).map(|(w, &s)| w * f(s)).sum()
    }

    #[test]
    fn exact_for_cubics() {
        let f = |s: f64| 1.0 - 2.0 * s + 3.0 * s * s - 0.5 * s * s * s;
        let exact = |s: f64| s - s * s + s * s * s - 0.125 * s.powi(4);
        for len in [0.3, 0.31, 0.3 + 1e-13, 0.0301, 0.0201, 0.04] {
            let t = grid(0.01, len);
            let got = integrate(&t, f);
            assert!((got - exact(len)).abs() < 1e-14, "len {len}: {got} vs {}", exact(len));
        }
    }

    #[test]
    fn short_segments_use_the_interpolant() {
        let quad = |s: f64| 2.0 - s + 4.0 * s * s;
        let exact = |s: f64| 2.0 * s - 0.5 * s * s + 4.0 / 3.0 * s * s * s;
        for len in [0.0123, 0.0051, 0.015] {
            let t = grid(0.01, len);
            let f: &dyn Fn(f64) -> f64 = if t.len() == 2 { &|s| 1.0 + 3.0 * s } else { &quad };
            let want = if t.len() == 2 { len + 1.5 * len * len } else { exact(len) };
            assert!((integrate(&t, f) - want).abs() < 1e-15, "len {len}");
        }
        assert_eq!(segment_weights(&[0.5]), vec![0.0]);
    }

    #[test]
    fn fourth_order_on_smooth_integrands() {
        let len: f64 = 1.2345;
        let exact = 1.0 - len.cos();
        let e1 = (integrate(&grid(0.02, len), f64::sin) - exact).abs();
        let e2 = (integrate(&grid(0.01, len), f64::sin) - exact).abs();
        assert!(e1 / e2 > 12.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn reversed_times_give_positive_weights_sum() {
        let t: Vec<f64> = grid(0.01, 0.257).iter().map(|s| -s).collect();
        let total: f64 = segment_weights(&t).iter().sum();
        assert!((total - 0.257).abs() < 1e-15);
    }
}
