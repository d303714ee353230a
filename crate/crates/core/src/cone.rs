//! The Thomas cone over a chart: coordinates `(x¹,…,xⁿ, ρ)` with `ρ > 0` the fibre
//! coordinate of the chart-scale trivialization, carrying the Ricci-flat connection
//!
//! ```text
//! ∇̂_{∂a}∂b = Γᵉ^c_ab ∂c − ρ Pᵉ_(ab) ∂ρ,   ∇̂_{∂a}∂ρ = ∇̂_{∂ρ}∂a = ρ⁻¹ ∂a,   ∇̂_{∂ρ}∂ρ = 0
//! ```
//!
//! where `Γᵉ` is the representative preserving the coordinate volume and `Pᵉ` its
//! Schouten tensor. A cone tangent `(ξ, v)` at height `ρ` is the tractor with
//! components `(v | ρξ)` in the `Γᵉ` splitting.

use crate::error::{Error, Result};
use crate::geometry::{ricci_from_riemann, schouten_from_ricci, ChartGeometry, Christoffel, Curve, PointData};
use crate::jet::Jet;
use crate::ode::{integrate, rk4_step, step_count};

#[derive(Clone, Debug, PartialEq)]
pub struct ConePoint {
    pub x: Vec<f64>,
    pub rho: f64,
}

impl ConePoint {
    pub fn new(x: &[f64], rho: f64) -> Self {
        ConePoint { x: x.to_vec(), rho }
    }

    pub fn coords(&self) -> Vec<f64> {
        let mut c = self.x.clone();
        c.push(self.rho);
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConeTangent {
    pub xi: Vec<f64>,
    pub v: f64,
}

impl ConeTangent {
    pub fn new(xi: &[f64], v: f64) -> Self {
        ConeTangent { xi: xi.to_vec(), v }
    }

    pub fn horizontal(xi: &[f64]) -> Self {
        ConeTangent { xi: xi.to_vec(), v: 0.0 }
    }

    pub fn coords(&self) -> Vec<f64> {
        let mut c = self.xi.clone();
        c.push(self.v);
        c
    }

    pub fn from_coords(c: &[f64]) -> Self {
        let n = c.len() - 1;
        ConeTangent { xi: c[..n].to_vec(), v: c[n] }
    }
}

/// Euler field `ζ = ρ∂ρ`.
pub fn euler_field(p: &ConePoint) -> ConeTangent {
    ConeTangent { xi: vec![0.0; p.x.len()], v: p.rho }
}

fn cone_from_point_data(pd: &PointData, rho: f64) -> Vec<f64> {
    let n = pd.n;
    let m = n + 1;
    let mut c = vec![0.0; m * m * m];
    for a in 0..n {
        for b in 0..n {
            for k in 0..n {
                c[(k * m + a) * m + b] = pd.gamma_at(k, a, b);
            }
            c[(n * m + a) * m + b] = -rho * 0.5 * (pd.p_at(a, b) + pd.p_at(b, a));
        }
        c[(a * m + a) * m + n] = 1.0 / rho;
        c[(a * m + n) * m + a] = 1.0 / rho;
    }
    c
}

/// Cone Christoffel symbols `Ĉ^A_BC` at `(A*(n+1) + B)*(n+1) + C`, index `n` being `ρ`.
pub fn cone_connection(geom: &ChartGeometry, p: &ConePoint) -> Result<Vec<f64>> {
    Ok(cone_from_point_data(&geom.point_data(&p.x)?.trace_free(), p.rho))
}

/// Exact cone Christoffel jets over the `n+1` cone coordinates (order ≤ 1).
pub fn cone_christoffel_jets(geom: &ChartGeometry, p: &ConePoint, order: usize) -> Result<Christoffel> {
    let n = geom.n;
    let m = n + 1;
    let g = geom.gamma_jets(&p.x, order + 1)?;
    let s = -1.0 / (n as f64 + 1.0);
    let ups: Vec<Jet> = g.beta().iter().map(|b| b.scale(s)).collect();
    let ge = g.changed(&ups);
    let pe = schouten_from_ricci(&ricci_from_riemann(&ge.riemann(), n), n);
    let rho = Jet::variable(m, order, n, p.rho);
    let inv = rho.recip();
    let mut c = vec![Jet::zeros(m, order); m * m * m];
    for a in 0..n {
        for b in 0..n {
            for k in 0..n {
                c[(k * m + a) * m + b] = ge.get(k, a, b).truncated(order).extend_vars(m);
            }
            let sym = (&pe[a * n + b] + &pe[b * n + a]).scale(-0.5).extend_vars(m);
            c[(n * m + a) * m + b] = &rho * &sym;
        }
        c[(a * m + a) * m + n] = inv.clone();
        c[(a * m + n) * m + a] = inv.clone();
    }
    Ok(Christoffel { dim: m, order, c })
}

/// Ricci tensor of `∇̂` at a cone point, `Ric[B*(n+1) + D]`.
pub fn cone_ricci(geom: &ChartGeometry, p: &ConePoint) -> Result<Vec<f64>> {
    let c = cone_christoffel_jets(geom, p, 1)?;
    Ok(ricci_from_riemann(&c.riemann(), geom.n + 1).iter().map(|j| j.value()).collect())
}

/// `∇̂_B ζ^A` at `A*(n+1) + B`.
pub fn euler_derivative(geom: &ChartGeometry, p: &ConePoint) -> Result<Vec<f64>> {
    let m = geom.n + 1;
    let c = cone_connection(geom, p)?;
    let zeta = euler_field(p).coords();
    let mut out = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            let mut s = if a == m - 1 && b == m - 1 { 1.0 } else { 0.0 };
            for k in 0..m {
                s += c[(a * m + b) * m + k] * zeta[k];
            }
            out[a * m + b] = s;
        }
    }
    Ok(out)
}

/// Cone tangent at height `ρ` as a contravariant tractor `[T⁰, T¹…Tⁿ]` in the
/// splitting of the stored connection.
pub fn tangent_to_tractor(beta: &[f64], rho: f64, t: &ConeTangent) -> Vec<f64> {
    let n = beta.len();
    let top: Vec<f64> = t.xi.iter().map(|v| rho * v).collect();
    let shift: f64 = beta.iter().zip(&top).map(|(b, v)| b * v).sum::<f64>() / (n as f64 + 1.0);
    let mut out = vec![t.v - shift];
    out.extend(top);
    out
}

pub fn tractor_to_tangent(beta: &[f64], rho: f64, tr: &[f64]) -> ConeTangent {
    let n = beta.len();
    let shift: f64 = beta.iter().zip(&tr[1..]).map(|(b, v)| b * v).sum::<f64>() / (n as f64 + 1.0);
    ConeTangent { xi: tr[1..].iter().map(|v| v / rho).collect(), v: tr[0] + shift }
}

/// Endpoint of a cone geodesic with optionally co-transported data.
#[derive(Clone, Debug)]
pub struct Shot {
    pub end: ConePoint,
    pub tangent: ConeTangent,
    /// Cone vectors `(η, u)` transported by `∇̂`.
    pub cone_vecs: Vec<Vec<f64>>,
    /// Contravariant tractors transported along the projected curve.
    pub tractors: Vec<Vec<f64>>,
}

fn geodesic_rhs(pd: &PointData, pe: &PointData, y: &[f64], dy: &mut [f64], ncone: usize, ntr: usize) {
    let n = pd.n;
    let m = n + 1;
    let rho = y[n];
    let xi = &y[m..m + n];
    let v = y[m + n];
    let quad = |g: &dyn Fn(usize, usize) -> f64, a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                s += g(i, j) * a[i] * b[j];
            }
        }
        s
    };
    let psym = |i: usize, j: usize| 0.5 * (pe.p_at(i, j) + pe.p_at(j, i));
    for c in 0..n {
        dy[c] = xi[c];
        dy[m + c] = -quad(&|a, b| pe.gamma_at(c, a, b), xi, xi) - 2.0 * xi[c] * v / rho;
    }
    dy[n] = v;
    dy[m + n] = rho * quad(&psym, xi, xi);
    let mut off = 2 * m;
    for _ in 0..ncone {
        let eta = &y[off..off + n];
        let u = y[off + n];
        for c in 0..n {
            dy[off + c] = -quad(&|a, b| pe.gamma_at(c, a, b), xi, eta) - (xi[c] * u + v * eta[c]) / rho;
        }
        dy[off + n] = rho * quad(&psym, xi, eta);
        off += m;
    }
    if ntr > 0 {
        let cm = crate::tractor::ConnectionMatrix::from_point_data(pd);
        for _ in 0..ntr {
            let d = cm.act_dual(xi, &y[off..off + m]);
            for i in 0..m {
                dy[off + i] = -d[i];
            }
            off += m;
        }
    }
}

/// Integrate the cone geodesic from `p0` with velocity `t0` over `[0, span]`,
/// transporting `cone_vecs` with `∇̂` and contravariant `tractors` with the tractor
/// connection along the projected curve.
pub fn shoot(
    geom: &ChartGeometry,
    p0: &ConePoint,
    t0: &ConeTangent,
    span: f64,
    h: f64,
    cone_vecs: &[Vec<f64>],
    tractors: &[Vec<f64>],
) -> Result<Shot> {
    let n = geom.n;
    let m = n + 1;
    let mut y = p0.coords();
    y.extend(t0.coords());
    for c in cone_vecs {
        y.extend_from_slice(c);
    }
    for t in tractors {
        y.extend_from_slice(t);
    }
    let (ncone, ntr) = (cone_vecs.len(), tractors.len());
    let mut rhs = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = &y[..n];
        if !geom.domain.contains(x) {
            return Err(Error::OutsideDomain(x.to_vec()));
        }
        if !(y[n] > 0.0) {
            return Err(Error::Numerical(format!("cone geodesic reached the zero section at {x:?}")));
        }
        let pd = geom.point_data(x)?;
        let pe = pd.trace_free();
        geodesic_rhs(&pd, &pe, y, dy, ncone, ntr);
        Ok(())
    };
    let steps = step_count(span, h);
    let dt = span / steps as f64;
    for s in 0..steps {
        y = rk4_step(&mut rhs, s as f64 * dt, &y, dt)?;
    }
    if !geom.domain.contains(&y[..n]) {
        return Err(Error::OutsideDomain(y[..n].to_vec()));
    }
    let mut off = 2 * m;
    let mut take = |k: usize| -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| {
                let v = y[off..off + m].to_vec();
                off += m;
                v
            })
            .collect()
    };
    let cv = take(ncone);
    let tv = take(ntr);
    Ok(Shot {
        end: ConePoint::new(&y[..n], y[n]),
        tangent: ConeTangent::new(&y[m..m + n], y[m + n]),
        cone_vecs: cv,
        tractors: tv,
    })
}

/// Sampled cone geodesic; `Curve::x` holds `(x, ρ)` and `Curve::v` holds `(ξ, v)`.
pub fn cone_geodesic(geom: &ChartGeometry, p0: &ConePoint, t0: &ConeTangent, span: f64, h: f64) -> Curve {
    let n = geom.n;
    let m = n + 1;
    let mut y0 = p0.coords();
    y0.extend(t0.coords());
    let tr = integrate(
        |_, y, dy| {
            if !geom.domain.contains(&y[..n]) {
                return Err(Error::OutsideDomain(y[..n].to_vec()));
            }
            let pd = geom.point_data(&y[..n])?;
            geodesic_rhs(&pd, &pd.trace_free(), y, dy, 0, 0);
            Ok(())
        },
        |y| geom.domain.contains(&y[..n]) && y[n] > 0.0,
        &y0,
        0.0,
        span,
        h,
        true,
    );
    Curve::from_trajectory(tr, m)
}

/// `exp_{p0}(t0)`: the cone geodesic at parameter 1.
pub fn cone_exp(geom: &ChartGeometry, p0: &ConePoint, t0: &ConeTangent, h: f64) -> Result<ConePoint> {
    Ok(shoot(geom, p0, t0, 1.0, h, &[], &[])?.end)
}

/// Project a sampled cone curve to the base chart.
pub fn project(c: &Curve) -> Curve {
    let n = c.x[0].len() - 1;
    Curve {
        t: c.t.clone(),
        x: c.x.iter().map(|p| p[..n].to_vec()).collect(),
        v: c.v.iter().map(|p| p[..n].to_vec()).collect(),
        exited: c.exited,
        reason: c.reason.clone(),
    }
}

/// Determinant of cone vectors (columns `(η, u)`) against the parallel volume
/// `ρⁿ dρ∧dx¹∧…∧dxⁿ`.
pub fn cone_volume(rho: f64, vecs: &[Vec<f64>]) -> f64 {
    let m = vecs.len();
    let n = m - 1;
    let mat = nalgebra::DMatrix::from_fn(m, m, |i, j| if i == 0 { vecs[j][n] } else { vecs[j][i - 1] });
    rho.powi(n as i32) * mat.determinant()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::trace_deviation;
    use crate::geometry::{registry, scale_connection};
    use crate::expr::ScalarFieldExpr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_point(geom: &ChartGeometry, rng: &mut ChaCha8Rng) -> ConePoint {
        ConePoint { x: geom.domain.shrunk(0.8).sample(rng), rho: rng.gen_range(0.5..2.0) }
    }

    #[test]
    fn euler_field_is_identity_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in ["flat", "klein", "sphere-stereo"] {
            let g = registry(name, 2).unwrap();
            for _ in 0..5 {
                let p = random_point(&g, &mut rng);
                let d = euler_derivative(&g, &p).unwrap();
                for a in 0..3 {
                    for b in 0..3 {
                        let id = if a == b { 1.0 } else { 0.0 };
                        assert!((d[a * 3 + b] - id).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn cone_is_ricci_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for g in [registry("klein", 2).unwrap(), registry("sphere-stereo", 3).unwrap(), registry("ppwave", 4).unwrap()] {
            for _ in 0..3 {
                let p = random_point(&g, &mut rng);
                let ric = cone_ricci(&g, &p).unwrap();
                assert!(ric.iter().all(|v| v.abs() < 1e-9), "{} {:?}", g.name, ric);
            }
        }
    }

    #[test]
    fn jets_agree_with_values() {
        let g = registry("sphere-stereo", 2).unwrap();
        let p = ConePoint::new(&[0.3, -0.2], 1.7);
        let v = cone_connection(&g, &p).unwrap();
        let j = cone_christoffel_jets(&g, &p, 1).unwrap();
        for (a, b) in v.iter().zip(j.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_cone_examples() {
        let g = registry("flat", 2).unwrap();
        let p0 = ConePoint::new(&[0.0, 0.0], 1.0);
        let e = cone_exp(&g, &p0, &ConeTangent::horizontal(&[0.4, -0.3]), 1e-3).unwrap();
        assert!((e.x[0] - 0.4).abs() < 1e-12 && (e.x[1] + 0.3).abs() < 1e-12 && (e.rho - 1.0).abs() < 1e-12);
        let z = cone_exp(&g, &p0, &ConeTangent::horizontal(&[0.0, 0.0]), 1e-3).unwrap();
        assert_eq!(z, p0);
        let c = cone_geodesic(&g, &p0, &ConeTangent::new(&[0.0, 0.0], 0.7), 1.0, 1e-3);
        for (t, x) in c.t.iter().zip(&c.x) {
            assert!((x[2] - 1.0 - 0.7 * t).abs() < 1e-12 && x[0] == 0.0);
        }
    }

    #[test]
    fn vertical_lines_are_geodesics_in_curved_cones() {
        let g = registry("klein", 2).unwrap();
        let c = cone_geodesic(&g, &ConePoint::new(&[0.2, 0.3], 0.8), &ConeTangent::new(&[0.0, 0.0], 0.5), 1.0, 1e-3);
        let last = c.x.last().unwrap();
        assert!((last[2] - 1.3).abs() < 1e-12 && (last[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn exp_is_homogeneous() {
        let g = registry("sphere-stereo", 2).unwrap();
        let t = ConeTangent::new(&[0.5, 0.2], 0.3);
        let a = cone_exp(&g, &ConePoint::new(&[0.1, 0.1], 1.0), &t, 1e-3).unwrap();
        let r = 2.5;
        let b = cone_exp(&g, &ConePoint::new(&[0.1, 0.1], r), &ConeTangent::new(&t.xi, r * t.v), 1e-3).unwrap();
        assert!((b.rho - r * a.rho).abs() < 1e-8);
        assert!((b.x[0] - a.x[0]).abs() < 1e-8 && (b.x[1] - a.x[1]).abs() < 1e-8);
    }

    #[test]
    fn projected_geodesics_follow_the_volume_connection() {
        let base = Arc::new(registry("sphere-stereo", 2).unwrap());
        let sc = scale_connection(&base, ScalarFieldExpr::constant(1.0, 2), 1.0);
        let c = cone_geodesic(&base, &ConePoint::new(&[0.1, -0.2], 1.0), &ConeTangent::new(&[0.6, 0.3], 0.4), 1.0, 1e-3);
        let b = sc.geodesic(&[0.1, -0.2], &[0.6, 0.3], 1.5, 1e-3);
        assert!(trace_deviation(&project(&c), &b, 200) < 1e-6);
    }

    #[test]
    fn transport_preserves_cone_volume() {
        let g = registry("sphere-stereo", 2).unwrap();
        let p0 = ConePoint::new(&[0.1, 0.2], 1.3);
        let frame = vec![vec![0.0, 0.0, 1.3], vec![0.5, 0.1, 0.2], vec![-0.2, 0.7, 0.0]];
        let v0 = cone_volume(p0.rho, &frame);
        let s = shoot(&g, &p0, &ConeTangent::new(&[0.4, -0.5], 0.3), 1.0, 1e-3, &frame, &[]).unwrap();
        assert!((cone_volume(s.end.rho, &s.cone_vecs) - v0).abs() < 1e-9);
    }

    #[test]
    fn cone_transport_matches_tractor_transport() {
        let g = registry("sphere-stereo", 2).unwrap();
        let p0 = ConePoint::new(&[0.1, 0.2], 1.3);
        let beta0 = g.beta(&p0.x).unwrap();
        let vecs = vec![vec![0.5, 0.1, 0.2], vec![-0.2, 0.7, 0.0], vec![0.0, 0.0, 1.3]];
        let tr: Vec<Vec<f64>> = vecs.iter().map(|v| tangent_to_tractor(&beta0, p0.rho, &ConeTangent::from_coords(v))).collect();
        let s = shoot(&g, &p0, &ConeTangent::new(&[0.4, -0.5], 0.3), 1.0, 1e-3, &vecs, &tr).unwrap();
        let beta1 = g.beta(&s.end.x).unwrap();
        for (cv, t) in s.cone_vecs.iter().zip(&s.tractors) {
            let conv = tangent_to_tractor(&beta1, s.end.rho, &ConeTangent::from_coords(cv));
            for (a, b) in conv.iter().zip(t) {
                assert!((a - b).abs() < 1e-9, "{conv:?} {t:?}");
            }
        }
        let back = tractor_to_tangent(&beta1, s.end.rho, &s.tractors[0]);
        assert!((back.coords()[0] - s.cone_vecs[0][0]).abs() < 1e-9);
    }

    #[test]
    fn horizontal_connection_projects_to_volume_connection() {
        // π∗ ∇̂_u v = ∇^e_u v for lifted base vectors, vertical part −ρPᵉ(u,v).
        let g = registry("klein", 2).unwrap();
        let x = [0.3, -0.1];
        let c = cone_connection(&g, &ConePoint::new(&x, 1.0)).unwrap();
        let pe = g.point_data(&x).unwrap().trace_free();
        for k in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    assert_eq!(c[(k * 3 + a) * 3 + b], pe.gamma_at(k, a, b));
                }
            }
        }
    }
}
