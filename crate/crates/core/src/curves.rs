//! Smooth parametrized paths and trace comparison of sampled curves.

use crate::geometry::{dist, Curve};

/// A smooth path `t ↦ x(t)` on `[0, span]` with exact velocity.
pub trait SmoothPath: Send + Sync {
    fn dim(&self) -> usize;
    fn span(&self) -> f64;
    fn point(&self, t: f64) -> Vec<f64>;
    fn velocity(&self, t: f64) -> Vec<f64>;
}

/// Straight segment parametrized by arc length.
#[derive(Clone, Debug)]
pub struct Segment {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
}

impl Segment {
    pub fn new(from: &[f64], to: &[f64]) -> Self {
        Segment { from: from.to_vec(), to: to.to_vec() }
    }
}

impl SmoothPath for Segment {
    fn dim(&self) -> usize {
        self.from.len()
    }

    fn span(&self) -> f64 {
        dist(&self.from, &self.to)
    }

    fn point(&self, t: f64) -> Vec<f64> {
        let l = self.span();
        let s = if l > 0.0 { t / l } else { 0.0 };
        self.from.iter().zip(&self.to).map(|(a, b)| a + s * (b - a)).collect()
    }

    fn velocity(&self, _t: f64) -> Vec<f64> {
        let l = self.span();
        self.from.iter().zip(&self.to).map(|(a, b)| if l > 0.0 { (b - a) / l } else { 0.0 }).collect()
    }
}

/// Circle `c + r(cos θ u + sin θ v)` in the plane of coordinates `(i, j)`, by angle.
#[derive(Clone, Debug)]
pub struct Circle {
    pub center: Vec<f64>,
    pub radius: f64,
    pub axes: (usize, usize),
}

impl SmoothPath for Circle {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn span(&self) -> f64 {
        2.0 * std::f64::consts::PI
    }

    fn point(&self, t: f64) -> Vec<f64> {
        let mut p = self.center.clone();
        p[self.axes.0] += self.radius * t.cos();
        p[self.axes.1] += self.radius * t.sin();
        p
    }

    fn velocity(&self, t: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.center.len()];
        v[self.axes.0] = -self.radius * t.sin();
        v[self.axes.1] = self.radius * t.cos();
        v
    }
}

/// Closed axis-aligned rectangle in coordinates `(i, j)` as four segments.
pub fn rectangle(corner: &[f64], axes: (usize, usize), w: f64, h: f64) -> Vec<Segment> {
    let mut p1 = corner.to_vec();
    p1[axes.0] += w;
    let mut p2 = p1.clone();
    p2[axes.1] += h;
    let mut p3 = corner.to_vec();
    p3[axes.1] += h;
    vec![
        Segment::new(corner, &p1),
        Segment::new(&p1, &p2),
        Segment::new(&p2, &p3),
        Segment::new(&p3, corner),
    ]
}

/// Cumulative Euclidean chart length along the samples.
fn arc_lengths(c: &Curve) -> Vec<f64> {
    let mut s = vec![0.0];
    for i in 1..c.x.len() {
        let dt = c.t[i] - c.t[i - 1];
        let seg = hermite_length(&c.x[i - 1], &c.v[i - 1], &c.x[i], &c.v[i], dt);
        s.push(s[i - 1] + seg);
    }
    s
}

fn hermite_point(x0: &[f64], v0: &[f64], x1: &[f64], v1: &[f64], dt: f64, u: f64) -> Vec<f64> {
    let h00 = 2.0 * u * u * u - 3.0 * u * u + 1.0;
    let h10 = u * u * u - 2.0 * u * u + u;
    let h01 = -2.0 * u * u * u + 3.0 * u * u;
    let h11 = u * u * u - u * u;
    (0..x0.len()).map(|k| h00 * x0[k] + h10 * dt * v0[k] + h01 * x1[k] + h11 * dt * v1[k]).collect()
}

fn hermite_length(x0: &[f64], v0: &[f64], x1: &[f64], v1: &[f64], dt: f64) -> f64 {
    // Fine polyline on the Hermite interpolant.
    let m = 8;
    let pts: Vec<Vec<f64>> = (0..=m).map(|i| hermite_point(x0, v0, x1, v1, dt, i as f64 / m as f64)).collect();
    let mut l = 0.0;
    for i in 0..m {
        l += dist(&pts[i], &pts[i + 1]);
    }
    l
}

/// Point at chart arc length `target`, interpolating with cubic Hermite pieces.
fn point_at_length(c: &Curve, s: &[f64], target: f64) -> Vec<f64> {
    let i = match s.iter().position(|v| *v >= target) {
        Some(0) => return c.x[0].clone(),
        Some(i) => i,
        None => return c.x.last().unwrap().clone(),
    };
    let dt = c.t[i] - c.t[i - 1];
    let (mut lo, mut hi) = (0.0, 1.0);
    let want = target - s[i - 1];
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        // Length of the sub-piece from the start, approximated by a fine polyline.
        let m = 8;
        let mut l = 0.0;
        let mut prev = c.x[i - 1].clone();
        for k in 1..=m {
            let q = hermite_point(&c.x[i - 1], &c.v[i - 1], &c.x[i], &c.v[i], dt, mid * k as f64 / m as f64);
            l += dist(&prev, &q);
            prev = q;
        }
        if l < want {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hermite_point(&c.x[i - 1], &c.v[i - 1], &c.x[i], &c.v[i], dt, 0.5 * (lo + hi))
}

/// Maximum distance between two traces after resampling both at equal chart arc
/// length over their common length. Both curves must start at the same point.
pub fn trace_deviation(a: &Curve, b: &Curve, samples: usize) -> f64 {
    let sa = arc_lengths(a);
    let sb = arc_lengths(b);
    let total = sa.last().unwrap().min(*sb.last().unwrap());
    (0..=samples)
        .map(|k| {
            let target = total * k as f64 / samples as f64;
            dist(&point_at_length(a, &sa, target), &point_at_length(b, &sb, target))
        })
        .fold(0.0, f64::max)
}
