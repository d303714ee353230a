//! Projective structures on a single coordinate chart.
//!
//! A geometry is represented by one torsion-free connection from the projective
//! class. Curvature conventions:
//!
//! ```text
//! R_ab^c_d = ∂_a Γ^c_bd − ∂_b Γ^c_ad + Γ^c_ae Γ^e_bd − Γ^c_be Γ^e_ad
//! Ric_bd   = R_ab^a_d
//! (n−1) P_ab = Ric_ab − (2/(n+1)) Ric_[ab]
//! ```
//!
//! With these signs the round sphere has positive Ricci curvature and the Klein
//! model has `P = −g`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::expr::{parse, ScalarFieldExpr};
use crate::jet::Jet;
use crate::ode::{integrate, Trajectory};

#[derive(Clone, Debug, PartialEq)]
pub enum Domain {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Domain {
    pub fn cube(n: usize, half: f64) -> Domain {
        Domain::Box { lo: vec![-half; n], hi: vec![half; n] }
    }

    pub fn ball(n: usize, radius: f64) -> Domain {
        Domain::Ball { center: vec![0.0; n], radius }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lo, .. } => lo.len(),
            Domain::Ball { center, .. } => center.len(),
        }
    }

    /// Strict interior membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Domain::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| v > a && v < b),
            Domain::Ball { center, radius } => dist(x, center) < *radius,
        }
    }

    pub fn center(&self) -> Vec<f64> {
        match self {
            Domain::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect(),
            Domain::Ball { center, .. } => center.clone(),
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Domain::Box { lo, hi } => dist(lo, hi),
            Domain::Ball { radius, .. } => 2.0 * radius,
        }
    }

    /// The domain scaled by `f` about its center.
    pub fn shrunk(&self, f: f64) -> Domain {
        match self {
            Domain::Box { lo, hi } => {
                let c = self.center();
                Domain::Box {
                    lo: lo.iter().zip(&c).map(|(a, m)| m + f * (a - m)).collect(),
                    hi: hi.iter().zip(&c).map(|(b, m)| m + f * (b - m)).collect(),
                }
            }
            Domain::Ball { center, radius } => Domain::Ball { center: center.clone(), radius: radius * f },
        }
    }

    /// Uniform sample from the domain.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Domain::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| rng.gen_range(*a..*b)).collect(),
            Domain::Ball { center, radius } => loop {
                let y: Vec<f64> = center.iter().map(|c| c + rng.gen_range(-radius..*radius)).collect();
                if self.contains(&y) {
                    return y;
                }
            },
        }
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Christoffel symbols as jets, `c[(c*m + a)*m + b] = Γ^c_ab`, over `dim` variables.
#[derive(Clone, Debug)]
pub struct Christoffel {
    pub dim: usize,
    pub order: usize,
    pub c: Vec<Jet>,
}

impl Christoffel {
    pub fn idx(&self, c: usize, a: usize, b: usize) -> usize {
        (c * self.dim + a) * self.dim + b
    }

    pub fn get(&self, c: usize, a: usize, b: usize) -> &Jet {
        &self.c[self.idx(c, a, b)]
    }

    pub fn values(&self) -> Vec<f64> {
        self.c.iter().map(|j| j.value()).collect()
    }

    pub fn beta(&self) -> Vec<Jet> {
        let m = self.dim;
        (0..m)
            .map(|a| {
                let mut s = Jet::zeros(self.c[0].nvars(), self.order);
                for b in 0..m {
                    s.axpy(1.0, self.get(b, b, a));
                }
                s
            })
            .collect()
    }

    /// `Γ + Υ_a δ^c_b + Υ_b δ^c_a`.
    pub fn changed(&self, ups: &[Jet]) -> Christoffel {
        let m = self.dim;
        let mut out = self.clone();
        for c in 0..m {
            for a in 0..m {
                let i = out.idx(c, a, c);
                out.c[i] = &out.c[i] + &ups[a];
                let i = out.idx(c, c, a);
                out.c[i] = &out.c[i] + &ups[a];
            }
        }
        out
    }

    /// Curvature `R_ab^c_d` at index `((a*m + b)*m + c)*m + d`, one order lower.
    pub fn riemann(&self) -> Vec<Jet> {
        let m = self.dim;
        let low: Vec<Jet> = self.c.iter().map(|j| j.truncated(self.order - 1)).collect();
        let g = |c: usize, a: usize, b: usize| &low[(c * m + a) * m + b];
        let mut r = Vec::with_capacity(m * m * m * m);
        for a in 0..m {
            for b in 0..m {
                for c in 0..m {
                    for d in 0..m {
                        if a == b {
                            r.push(Jet::zeros(self.c[0].nvars(), self.order - 1));
                            continue;
                        }
                        let mut v = &self.get(c, b, d).derivative(a) - &self.get(c, a, d).derivative(b);
                        for e in 0..m {
                            v.add_product(g(c, a, e), g(e, b, d));
                            v.add_product(&g(c, b, e).scale(-1.0), g(e, a, d));
                        }
                        r.push(v);
                    }
                }
            }
        }
        r
    }
}

/// `Ric_bd = R_ab^a_d` from a Riemann array in dimension `m`.
pub fn ricci_from_riemann(r: &[Jet], m: usize) -> Vec<Jet> {
    let mut ric = Vec::with_capacity(m * m);
    for b in 0..m {
        for d in 0..m {
            let mut s = Jet::zeros(r[0].nvars(), r[0].order());
            for a in 0..m {
                s.axpy(1.0, &r[((a * m + b) * m + a) * m + d]);
            }
            ric.push(s);
        }
    }
    ric
}

pub fn schouten_from_ricci(ric: &[Jet], m: usize) -> Vec<Jet> {
    let nf = m as f64;
    let mut p = Vec::with_capacity(m * m);
    for a in 0..m {
        for b in 0..m {
            let skew = (&ric[a * m + b] - &ric[b * m + a]).scale(0.5);
            let v = &ric[a * m + b] - &skew.scale(2.0 / (nf + 1.0));
            p.push(v.scale(1.0 / (nf - 1.0)));
        }
    }
    p
}

/// Connection data at a point from Γ and its first derivatives, as plain arrays.
#[derive(Clone, Debug)]
pub struct PointData {
    pub n: usize,
    /// `Γ^c_ab` at `(c*n + a)*n + b`.
    pub gamma: Vec<f64>,
    /// `∂_l Γ^c_ab` at `((l*n + c)*n + a)*n + b`.
    pub dgamma: Vec<f64>,
    pub beta: Vec<f64>,
    /// `∂_l β_a` at `l*n + a`.
    pub dbeta: Vec<f64>,
    pub ric: Vec<f64>,
    pub p: Vec<f64>,
}

impl PointData {
    pub fn new(n: usize, gamma: Vec<f64>, dgamma: Vec<f64>) -> PointData {
        let g = |c: usize, a: usize, b: usize| gamma[(c * n + a) * n + b];
        let dg = |l: usize, c: usize, a: usize, b: usize| dgamma[((l * n + c) * n + a) * n + b];
        let beta: Vec<f64> = (0..n).map(|a| (0..n).map(|b| g(b, b, a)).sum()).collect();
        let mut dbeta = vec![0.0; n * n];
        for l in 0..n {
            for a in 0..n {
                dbeta[l * n + a] = (0..n).map(|b| dg(l, b, b, a)).sum();
            }
        }
        let mut ric = vec![0.0; n * n];
        for b in 0..n {
            for d in 0..n {
                let mut s = -dbeta[b * n + d];
                for a in 0..n {
                    s += dg(a, a, b, d) + beta[a] * g(a, b, d);
                    for e in 0..n {
                        s -= g(a, b, e) * g(e, a, d);
                    }
                }
                ric[b * n + d] = s;
            }
        }
        let nf = n as f64;
        let mut p = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let skew = 0.5 * (ric[a * n + b] - ric[b * n + a]);
                p[a * n + b] = (ric[a * n + b] - 2.0 / (nf + 1.0) * skew) / (nf - 1.0);
            }
        }
        PointData { n, gamma, dgamma, beta, dbeta, ric, p }
    }

    pub fn gamma_at(&self, c: usize, a: usize, b: usize) -> f64 {
        self.gamma[(c * self.n + a) * self.n + b]
    }

    pub fn p_at(&self, a: usize, b: usize) -> f64 {
        self.p[a * self.n + b]
    }

    /// Change by `Υ` with derivatives `dups[l*n + a] = ∂_l Υ_a`.
    pub fn changed(&self, ups: &[f64], dups: &[f64]) -> PointData {
        let n = self.n;
        let mut gamma = self.gamma.clone();
        let mut dgamma = self.dgamma.clone();
        for c in 0..n {
            for a in 0..n {
                gamma[(c * n + a) * n + c] += ups[a];
                gamma[(c * n + c) * n + a] += ups[a];
                for l in 0..n {
                    dgamma[((l * n + c) * n + a) * n + c] += dups[l * n + a];
                    dgamma[((l * n + c) * n + c) * n + a] += dups[l * n + a];
                }
            }
        }
        PointData::new(n, gamma, dgamma)
    }

    /// The trace-free representative `Γ − (β_a δ^c_b + β_b δ^c_a)/(n+1)`.
    pub fn trace_free(&self) -> PointData {
        let s = -1.0 / (self.n as f64 + 1.0);
        let ups: Vec<f64> = self.beta.iter().map(|b| s * b).collect();
        let dups: Vec<f64> = self.dbeta.iter().map(|b| s * b).collect();
        self.changed(&ups, &dups)
    }
}

/// A covector field supplying exact jets, used for projective changes.
pub trait CovectorField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn jets(&self, x: &[f64], order: usize) -> Result<Vec<Jet>>;
}

#[derive(Clone, Debug)]
pub struct ExprCovector(pub Vec<ScalarFieldExpr>);

impl ExprCovector {
    pub fn parse(texts: &[&str], n: usize) -> Result<Self> {
        Ok(ExprCovector(texts.iter().map(|t| parse(t, n)).collect::<Result<_>>()?))
    }
}

impl CovectorField for ExprCovector {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn jets(&self, x: &[f64], order: usize) -> Result<Vec<Jet>> {
        self.0.iter().map(|e| e.eval_jet(x, order)).collect()
    }
}

/// `Υ_a = −(1/w) σ^{-1} ∇_a σ`, the change taking the base connection to the
/// connection `∇^σ` that preserves the weight-`w` scale `σ`.
#[derive(Clone, Debug)]
pub struct ScaleCovector {
    pub base: Arc<ChartGeometry>,
    pub sigma: ScalarFieldExpr,
    pub weight: f64,
}

impl CovectorField for ScaleCovector {
    fn dim(&self) -> usize {
        self.base.n
    }

    fn jets(&self, x: &[f64], order: usize) -> Result<Vec<Jet>> {
        let n = self.base.n;
        let s = self.sigma.eval_jet(x, order + 1)?;
        if s.value() == 0.0 {
            return Err(Error::Singularity(format!("scale vanishes at {x:?}")));
        }
        let inv = s.truncated(order).recip();
        let beta = self.base.beta_jets(x, order)?;
        let w = self.weight;
        Ok((0..n)
            .map(|a| (&s.derivative(a) * &inv).scale(-1.0 / w) - beta[a].scale(1.0 / (n as f64 + 1.0)))
            .collect())
    }
}

#[derive(Clone, Debug)]
pub enum Connection {
    /// Christoffel fields at `(c*n + a)*n + b`.
    Explicit(Vec<ScalarFieldExpr>),
    /// Metric fields at `i*n + j`; the connection is its Levi-Civita connection.
    Metric(Vec<ScalarFieldExpr>),
    Changed { base: Arc<ChartGeometry>, upsilon: Arc<dyn CovectorField> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Explicit,
    DerivedFromMetric,
    ProjectiveChange,
}

#[derive(Clone, Debug)]
pub struct CurvatureData {
    pub n: usize,
    /// `R_ab^c_d` at `((a*n + b)*n + c)*n + d`.
    pub r: Vec<f64>,
    pub ric: Vec<f64>,
    pub p: Vec<f64>,
    /// `∇_a P_bc` at `(a*n + b)*n + c`.
    pub dp: Vec<f64>,
}

/// Sampled base curve with velocities.
#[derive(Clone, Debug)]
pub struct Curve {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub exited: bool,
    pub reason: Option<String>,
}

impl Curve {
    pub fn from_trajectory(tr: Trajectory, n: usize) -> Curve {
        Curve {
            x: tr.y.iter().map(|y| y[..n].to_vec()).collect(),
            v: tr.y.iter().map(|y| y[n..2 * n].to_vec()).collect(),
            t: tr.t,
            exited: tr.exited,
            reason: tr.reason,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChartGeometry {
    pub name: String,
    pub n: usize,
    pub domain: Domain,
    pub connection: Connection,
}

/// Two fields agree structurally or at a fixed set of probe points.
fn same_field(a: &ScalarFieldExpr, b: &ScalarFieldExpr, domain: &Domain) -> bool {
    if a == b {
        return true;
    }
    let probe = domain.shrunk(0.7);
    let c = probe.center();
    let n = c.len();
    let mut pts = vec![c.clone()];
    for k in 0..n {
        let mut p = c.clone();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.13 * ((i + k) % 3) as f64 - 0.11 * k as f64 / n as f64;
        }
        if probe.contains(&p) {
            pts.push(p);
        }
    }
    pts.iter().all(|p| match (a.eval(p), b.eval(p)) {
        (Ok(u), Ok(v)) => (u - v).abs() <= 1e-12 * (1.0 + u.abs()),
        (Err(_), Err(_)) => true,
        _ => false,
    })
}

fn metric_inverse(g: &[f64], n: usize, x: &[f64]) -> Result<DMatrix<f64>> {
    let m = DMatrix::from_row_slice(n, n, g);
    let inv = m.clone().try_inverse().ok_or_else(|| Error::SingularMetric(x.to_vec()))?;
    // Frobenius condition estimate.
    let cond = m.norm() * inv.norm();
    if !(cond < 1e12) {
        return Err(Error::SingularMetric(x.to_vec()));
    }
    Ok(inv)
}

impl ChartGeometry {
    pub fn explicit(name: &str, n: usize, domain: Domain, gamma: Vec<ScalarFieldExpr>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Validation("chart dimension must be at least 2".into()));
        }
        if gamma.len() != n * n * n {
            return Err(Error::Validation(format!("expected {} Christoffel fields", n * n * n)));
        }
        for c in 0..n {
            for a in 0..n {
                for b in 0..a {
                    if !same_field(&gamma[(c * n + a) * n + b], &gamma[(c * n + b) * n + a], &domain) {
                        return Err(Error::Validation(format!(
                            "Christoffel entry {},{},{} differs from {},{},{} (connection must be torsion-free)",
                            c + 1,
                            a + 1,
                            b + 1,
                            c + 1,
                            b + 1,
                            a + 1
                        )));
                    }
                }
            }
        }
        let mut gamma = gamma;
        for c in 0..n {
            for a in 0..n {
                for b in 0..a {
                    gamma[(c * n + a) * n + b] = gamma[(c * n + b) * n + a].clone();
                }
            }
        }
        Ok(ChartGeometry { name: name.into(), n, domain, connection: Connection::Explicit(gamma) })
    }

    pub fn levi_civita(name: &str, n: usize, domain: Domain, g: Vec<ScalarFieldExpr>) -> Result<Self> {
        if n < 2 {
            return Err(Error::Validation("chart dimension must be at least 2".into()));
        }
        if g.len() != n * n {
            return Err(Error::Validation(format!("expected {} metric fields", n * n)));
        }
        for i in 0..n {
            for j in 0..i {
                if !same_field(&g[i * n + j], &g[j * n + i], &domain) {
                    return Err(Error::Validation(format!("metric entry {},{} is not symmetric", i + 1, j + 1)));
                }
            }
        }
        let mut g = g;
        for i in 0..n {
            for j in 0..i {
                g[i * n + j] = g[j * n + i].clone();
            }
        }
        let geom = ChartGeometry { name: name.into(), n, domain, connection: Connection::Metric(g) };
        // Probe invertibility on a fixed lattice of interior points.
        let probe = geom.domain.shrunk(0.9);
        let c = probe.center();
        let mut pts = vec![c.clone()];
        for k in 0..n {
            for s in [-0.5, 0.5] {
                let mut p = c.clone();
                p[k] += s * probe.diameter() / (n as f64).sqrt() * 0.5;
                if probe.contains(&p) {
                    pts.push(p);
                }
            }
        }
        for p in &pts {
            let vals = geom.metric_values(p)?.unwrap();
            metric_inverse(&vals, n, p)?;
        }
        Ok(geom)
    }

    pub fn provenance(&self) -> Provenance {
        match self.connection {
            Connection::Explicit(_) => Provenance::Explicit,
            Connection::Metric(_) => Provenance::DerivedFromMetric,
            Connection::Changed { .. } => Provenance::ProjectiveChange,
        }
    }

    /// Metric values at `x` when the connection is derived from a metric.
    pub fn metric_values(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        match &self.connection {
            Connection::Metric(g) => Ok(Some(g.iter().map(|e| e.eval(x)).collect::<Result<_>>()?)),
            _ => Ok(None),
        }
    }

    fn metric_jets(&self, g: &[ScalarFieldExpr], x: &[f64], order: usize) -> Result<Vec<Jet>> {
        let n = self.n;
        let mut out: Vec<Option<Jet>> = vec![None; n * n];
        for i in 0..n {
            for j in i..n {
                let jt = g[i * n + j].eval_jet(x, order)?;
                out[j * n + i] = Some(jt.clone());
                out[i * n + j] = Some(jt);
            }
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    /// Christoffel values at `x`.
    pub fn gamma(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        match &self.connection {
            Connection::Explicit(gs) => {
                let mut out = vec![0.0; n * n * n];
                for c in 0..n {
                    for a in 0..n {
                        for b in a..n {
                            let v = gs[(c * n + a) * n + b].eval(x)?;
                            out[(c * n + a) * n + b] = v;
                            out[(c * n + b) * n + a] = v;
                        }
                    }
                }
                Ok(out)
            }
            Connection::Metric(g) => {
                let gj = self.metric_jets(g, x, 1)?;
                let g0: Vec<f64> = gj.iter().map(|j| j.value()).collect();
                let ainv = metric_inverse(&g0, n, x)?;
                let dg = |l: usize, i: usize, j: usize| gj[i * n + j].grad(l);
                let mut out = vec![0.0; n * n * n];
                for c in 0..n {
                    for a in 0..n {
                        for b in a..n {
                            let mut s = 0.0;
                            for d in 0..n {
                                s += ainv[(c, d)] * (dg(a, d, b) + dg(b, d, a) - dg(d, a, b));
                            }
                            out[(c * n + a) * n + b] = 0.5 * s;
                            out[(c * n + b) * n + a] = 0.5 * s;
                        }
                    }
                }
                Ok(out)
            }
            Connection::Changed { base, upsilon } => {
                let mut out = base.gamma(x)?;
                let u = upsilon.jets(x, 0)?;
                for c in 0..n {
                    for a in 0..n {
                        out[(c * n + a) * n + c] += u[a].value();
                        out[(c * n + c) * n + a] += u[a].value();
                    }
                }
                Ok(out)
            }
        }
    }

    /// Γ and its first derivatives with the derived `β`, `Ric` and `P`.
    pub fn point_data(&self, x: &[f64]) -> Result<PointData> {
        let n = self.n;
        match &self.connection {
            Connection::Explicit(gs) => {
                let mut gamma = vec![0.0; n * n * n];
                let mut dgamma = vec![0.0; n * n * n * n];
                for c in 0..n {
                    for a in 0..n {
                        for b in a..n {
                            let e = &gs[(c * n + a) * n + b];
                            if e.is_zero_constant() {
                                continue;
                            }
                            let j = e.eval_jet(x, 1)?;
                            gamma[(c * n + a) * n + b] = j.value();
                            gamma[(c * n + b) * n + a] = j.value();
                            for l in 0..n {
                                dgamma[((l * n + c) * n + a) * n + b] = j.grad(l);
                                dgamma[((l * n + c) * n + b) * n + a] = j.grad(l);
                            }
                        }
                    }
                }
                Ok(PointData::new(n, gamma, dgamma))
            }
            Connection::Metric(g) => {
                let gj = self.metric_jets(g, x, 2)?;
                let g0: Vec<f64> = gj.iter().map(|j| j.value()).collect();
                let ainv = metric_inverse(&g0, n, x)?;
                let g1 = |l: usize, i: usize, j: usize| gj[i * n + j].grad(l);
                let g2 = |l: usize, m: usize, i: usize, j: usize| gj[i * n + j].hess(l, m);
                // ∂_l g^{-1} = −A (∂_l g) A
                let mut da = vec![0.0; n * n * n];
                let mut tmp = vec![0.0; n * n];
                for l in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            tmp[i * n + j] = (0..n).map(|k| ainv[(i, k)] * g1(l, k, j)).sum();
                        }
                    }
                    for i in 0..n {
                        for j in 0..n {
                            da[(l * n + i) * n + j] = -(0..n).map(|k| tmp[i * n + k] * ainv[(k, j)]).sum::<f64>();
                        }
                    }
                }
                let mut gamma = vec![0.0; n * n * n];
                let mut dgamma = vec![0.0; n * n * n * n];
                for a in 0..n {
                    for b in a..n {
                        let comb0: Vec<f64> = (0..n).map(|d| g1(a, d, b) + g1(b, d, a) - g1(d, a, b)).collect();
                        for c in 0..n {
                            let v: f64 = 0.5 * (0..n).map(|d| ainv[(c, d)] * comb0[d]).sum::<f64>();
                            gamma[(c * n + a) * n + b] = v;
                            gamma[(c * n + b) * n + a] = v;
                        }
                        for l in 0..n {
                            let comb1: Vec<f64> =
                                (0..n).map(|d| g2(l, a, d, b) + g2(l, b, d, a) - g2(l, d, a, b)).collect();
                            for c in 0..n {
                                let mut s = 0.0;
                                for d in 0..n {
                                    s += da[(l * n + c) * n + d] * comb0[d] + ainv[(c, d)] * comb1[d];
                                }
                                dgamma[((l * n + c) * n + a) * n + b] = 0.5 * s;
                                dgamma[((l * n + c) * n + b) * n + a] = 0.5 * s;
                            }
                        }
                    }
                }
                Ok(PointData::new(n, gamma, dgamma))
            }
            Connection::Changed { base, upsilon } => {
                let pd = base.point_data(x)?;
                let u = upsilon.jets(x, 1)?;
                let ups: Vec<f64> = u.iter().map(|j| j.value()).collect();
                let mut dups = vec![0.0; n * n];
                for l in 0..n {
                    for a in 0..n {
                        dups[l * n + a] = u[a].grad(l);
                    }
                }
                Ok(pd.changed(&ups, &dups))
            }
        }
    }

    /// Exact Christoffel jets of the given order at `x`.
    pub fn gamma_jets(&self, x: &[f64], order: usize) -> Result<Christoffel> {
        let n = self.n;
        match &self.connection {
            Connection::Explicit(gs) => {
                let mut c = vec![Jet::zeros(n, order); n * n * n];
                for k in 0..n {
                    for a in 0..n {
                        for b in a..n {
                            let j = gs[(k * n + a) * n + b].eval_jet(x, order)?;
                            c[(k * n + b) * n + a] = j.clone();
                            c[(k * n + a) * n + b] = j;
                        }
                    }
                }
                Ok(Christoffel { dim: n, order, c })
            }
            Connection::Metric(g) => {
                assert!(order <= 2, "metric connections provide Christoffel jets up to order 2");
                let gj = self.metric_jets(g, x, order + 1)?;
                let g0: Vec<f64> = gj.iter().map(|j| j.value()).collect();
                let a0 = metric_inverse(&g0, n, x)?;
                let gt: Vec<Jet> = gj.iter().map(|j| j.truncated(order)).collect();
                // Newton-Schulz: each sweep doubles the number of correct orders.
                let mut inv: Vec<Jet> = (0..n * n).map(|k| Jet::constant(n, order, a0[(k / n, k % n)])).collect();
                let mut correct = 0;
                while correct < order {
                    let mut gx = vec![Jet::zeros(n, order); n * n];
                    for i in 0..n {
                        for j in 0..n {
                            for k in 0..n {
                                gx[i * n + j].add_product(&gt[i * n + k], &inv[k * n + j]);
                            }
                        }
                    }
                    for (k, v) in gx.iter_mut().enumerate() {
                        *v = v.scale(-1.0);
                        if k / n == k % n {
                            *v = v.add_scalar(2.0);
                        }
                    }
                    let mut next = vec![Jet::zeros(n, order); n * n];
                    for i in 0..n {
                        for j in 0..n {
                            for k in 0..n {
                                next[i * n + j].add_product(&inv[i * n + k], &gx[k * n + j]);
                            }
                        }
                    }
                    inv = next;
                    correct = 2 * correct + 1;
                }
                let dg: Vec<Vec<Jet>> = (0..n).map(|l| gj.iter().map(|j| j.derivative(l)).collect()).collect();
                let mut c = vec![Jet::zeros(n, order); n * n * n];
                for a in 0..n {
                    for b in a..n {
                        let comb: Vec<Jet> =
                            (0..n).map(|d| &(&dg[a][d * n + b] + &dg[b][d * n + a]) - &dg[d][a * n + b]).collect();
                        for k in 0..n {
                            let mut s = Jet::zeros(n, order);
                            for d in 0..n {
                                s.add_product(&inv[k * n + d], &comb[d]);
                            }
                            let s = s.scale(0.5);
                            c[(k * n + b) * n + a] = s.clone();
                            c[(k * n + a) * n + b] = s;
                        }
                    }
                }
                Ok(Christoffel { dim: n, order, c })
            }
            Connection::Changed { base, upsilon } => {
                let g = base.gamma_jets(x, order)?;
                let u = upsilon.jets(x, order)?;
                Ok(g.changed(&u))
            }
        }
    }

    /// Jets of `β_a = Γ^b_ba`.
    pub fn beta_jets(&self, x: &[f64], order: usize) -> Result<Vec<Jet>> {
        let n = self.n;
        match order {
            0 => {
                let g = self.gamma(x)?;
                Ok((0..n).map(|a| Jet::constant(n, 0, (0..n).map(|b| g[(b * n + b) * n + a]).sum())).collect())
            }
            1 => {
                let pd = self.point_data(x)?;
                Ok((0..n)
                    .map(|a| {
                        let mut d = vec![pd.beta[a]];
                        d.extend((0..n).map(|l| pd.dbeta[l * n + a]));
                        Jet::from_data(n, 1, d)
                    })
                    .collect())
            }
            _ => Ok(self.gamma_jets(x, order)?.beta()),
        }
    }

    pub fn beta(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.beta_jets(x, 0)?.iter().map(|j| j.value()).collect())
    }

    /// Projective Schouten tensor at `x`, `P[a*n + b]`.
    pub fn schouten(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.point_data(x)?.p)
    }

    pub fn curvature(&self, x: &[f64]) -> Result<CurvatureData> {
        let n = self.n;
        let g = self.gamma_jets(x, 2)?;
        let r = g.riemann();
        let ric = ricci_from_riemann(&r, n);
        let p = schouten_from_ricci(&ric, n);
        let gv = g.values();
        let mut dp = vec![0.0; n * n * n];
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let mut s = p[b * n + c].grad(a);
                    for e in 0..n {
                        s -= gv[(e * n + a) * n + b] * p[e * n + c].value();
                        s -= gv[(e * n + a) * n + c] * p[b * n + e].value();
                    }
                    dp[(a * n + b) * n + c] = s;
                }
            }
        }
        Ok(CurvatureData {
            n,
            r: r.iter().map(|j| j.value()).collect(),
            ric: ric.iter().map(|j| j.value()).collect(),
            p: p.iter().map(|j| j.value()).collect(),
            dp,
        })
    }

    /// `∇_a f = ∂_a f + (w/(n+1)) β_a f` for a weight-`w` density `f`.
    pub fn density_derivative(&self, w: f64, f: &ScalarFieldExpr, x: &[f64]) -> Result<Vec<f64>> {
        let j = f.eval_jet(x, 1)?;
        let beta = self.beta(x)?;
        let k = w / (self.n as f64 + 1.0);
        Ok((0..self.n).map(|a| j.grad(a) + k * beta[a] * j.value()).collect())
    }

    /// RK4 geodesic over parameter span `span`; exits are flagged partial results.
    pub fn geodesic(&self, x0: &[f64], v0: &[f64], span: f64, h: f64) -> Curve {
        let n = self.n;
        let mut y0 = x0.to_vec();
        y0.extend_from_slice(v0);
        if !self.domain.contains(x0) {
            return Curve {
                t: vec![0.0],
                x: vec![x0.to_vec()],
                v: vec![v0.to_vec()],
                exited: true,
                reason: Some("start point outside the domain".into()),
            };
        }
        let tr = integrate(
            |_, y, dy| {
                let g = self.gamma(&y[..n])?;
                for c in 0..n {
                    dy[c] = y[n + c];
                    let mut s = 0.0;
                    for a in 0..n {
                        for b in 0..n {
                            s += g[(c * n + a) * n + b] * y[n + a] * y[n + b];
                        }
                    }
                    dy[n + c] = -s;
                }
                Ok(())
            },
            |y| self.domain.contains(&y[..n]),
            &y0,
            0.0,
            span,
            h,
            true,
        );
        Curve::from_trajectory(tr, n)
    }
}

/// `Γ̂ = Γ + Υ_a δ^c_b + Υ_b δ^c_a`.
pub fn projective_change(base: &Arc<ChartGeometry>, upsilon: Arc<dyn CovectorField>) -> ChartGeometry {
    assert_eq!(upsilon.dim(), base.n);
    ChartGeometry {
        name: format!("{}+change", base.name),
        n: base.n,
        domain: base.domain.clone(),
        connection: Connection::Changed { base: base.clone(), upsilon },
    }
}

/// The connection `∇^σ` determined by a nonvanishing weight-`w` scale.
pub fn scale_connection(base: &Arc<ChartGeometry>, sigma: ScalarFieldExpr, weight: f64) -> ChartGeometry {
    projective_change(base, Arc::new(ScaleCovector { base: base.clone(), sigma, weight }))
}

fn sum_squares(n: usize) -> String {
    (1..=n).map(|i| format!("x{i}^2")).collect::<Vec<_>>().join(" + ")
}

fn parse_all(texts: &[String], n: usize) -> Vec<ScalarFieldExpr> {
    texts.iter().map(|t| parse(t, n).expect("registry expression")).collect()
}

pub fn klein_metric_text(n: usize) -> Vec<String> {
    let r2 = sum_squares(n);
    let mut g = Vec::with_capacity(n * n);
    for i in 1..=n {
        for j in 1..=n {
            let diag = if i == j { format!("1/(1 - ({r2})) + ") } else { String::new() };
            g.push(format!("{diag}x{i}*x{j}/(1 - ({r2}))^2"));
        }
    }
    g
}

/// Example geometries: `flat`, `klein`, `sphere-stereo` (any n ≥ 2), `ppwave`, `s2xs2` (n = 4).
pub fn registry(name: &str, n: usize) -> Result<ChartGeometry> {
    let label = format!("{name}({n})");
    match name {
        "flat" => {
            if n < 2 {
                return Err(Error::Validation("flat needs n >= 2".into()));
            }
            let zeros = vec![ScalarFieldExpr::constant(0.0, n); n * n * n];
            ChartGeometry::explicit(&label, n, Domain::cube(n, 1.5), zeros)
        }
        "klein" => {
            let g = parse_all(&klein_metric_text(n), n);
            ChartGeometry::levi_civita(&label, n, Domain::ball(n, 0.95), g)
        }
        "sphere-stereo" => {
            let r2 = sum_squares(n);
            let texts: Vec<String> = (0..n * n)
                .map(|k| if k / n == k % n { format!("4/(1 + {r2})^2") } else { "0".into() })
                .collect();
            ChartGeometry::levi_civita(&label, n, Domain::cube(n, 1.5), parse_all(&texts, n))
        }
        "ppwave" => {
            if n != 4 {
                return Err(Error::Validation("ppwave is four-dimensional".into()));
            }
            let mut t = vec!["0".to_string(); 16];
            t[0] = "x3^2 - x4^2".into();
            t[1] = "1".into();
            t[4] = "1".into();
            t[10] = "1".into();
            t[15] = "1".into();
            ChartGeometry::levi_civita("ppwave", 4, Domain::cube(4, 1.0), parse_all(&t, 4))
        }
        "s2xs2" => {
            if n != 4 {
                return Err(Error::Validation("s2xs2 is four-dimensional".into()));
            }
            let mut t = vec!["0".to_string(); 16];
            for i in 0..2 {
                t[i * 5] = "4/(1 + x1^2 + x2^2)^2".into();
                t[(i + 2) * 5] = "4/(1 + x3^2 + x4^2)^2".into();
            }
            ChartGeometry::levi_civita("s2xs2", 4, Domain::cube(4, 1.5), parse_all(&t, 4))
        }
        _ => Err(Error::UnknownGeometry(name.into())),
    }
}

/// Registry lookup by `name(n)` or bare name (`ppwave`, `s2xs2`).
pub fn registry_spec(spec: &str) -> Result<ChartGeometry> {
    let spec = spec.trim();
    if let Some(open) = spec.find('(') {
        let name = &spec[..open];
        let n: usize = spec[open + 1..]
            .trim_end_matches(')')
            .trim()
            .parse()
            .map_err(|_| Error::UnknownGeometry(spec.into()))?;
        registry(name, n)
    } else {
        match spec {
            "ppwave" | "s2xs2" => registry(spec, 4),
            _ => Err(Error::UnknownGeometry(spec.into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn flat_has_zero_curvature() {
        for n in [2, 3] {
            let g = registry("flat", n).unwrap();
            let c = g.curvature(&vec![0.3; n]).unwrap();
            assert!(c.r.iter().chain(&c.ric).chain(&c.p).chain(&c.dp).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn klein_christoffels_closed_form() {
        let g = registry("klein", 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = g.domain.shrunk(0.9).sample(&mut rng);
            let r2 = x[0] * x[0] + x[1] * x[1];
            let gam = g.gamma(&x).unwrap();
            for k in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                        let expect = (x[i] * d(k, j) + x[j] * d(k, i)) / (1.0 - r2);
                        assert!((gam[(k * 2 + i) * 2 + j] - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn klein_schouten_at_origin() {
        let g = registry("klein", 2).unwrap();
        let c = g.curvature(&[0.0, 0.0]).unwrap();
        assert!(close(&c.p, &[-1.0, 0.0, 0.0, -1.0], 1e-12));
        let s = registry("sphere-stereo", 2).unwrap();
        let c = s.curvature(&[0.0, 0.0]).unwrap();
        assert!(close(&c.p, &[4.0, 0.0, 0.0, 4.0], 1e-12));
    }

    #[test]
    fn fast_and_jet_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (name, n) in [("klein", 3), ("sphere-stereo", 2), ("ppwave", 4), ("s2xs2", 4)] {
            let g = registry(name, n).unwrap();
            for _ in 0..5 {
                let x = g.domain.shrunk(0.8).sample(&mut rng);
                let pd = g.point_data(&x).unwrap();
                let cj = g.gamma_jets(&x, 2).unwrap();
                assert!(close(&pd.gamma, &cj.values(), 1e-12));
                assert!(close(&pd.gamma, &g.gamma(&x).unwrap(), 1e-12));
                let c = g.curvature(&x).unwrap();
                assert!(close(&pd.p, &c.p, 1e-10), "{name}");
                assert!(close(&pd.ric, &c.ric, 1e-10), "{name}");
            }
        }
    }

    #[test]
    fn riemann_antisymmetric_and_schouten_relation() {
        let g = registry("ppwave", 4).unwrap();
        let c = g.curvature(&[0.0, 0.0, 0.3, 0.2]).unwrap();
        let n = 4;
        for a in 0..n {
            for b in 0..n {
                for k in 0..n * n {
                    assert_eq!(c.r[(a * n + b) * n * n + k], -c.r[(b * n + a) * n * n + k]);
                }
            }
        }
        assert!(c.ric.iter().all(|v| v.abs() < 1e-12));
        assert!(c.r.iter().any(|v| v.abs() > 0.1));
    }

    #[test]
    fn s2xs2_is_einstein() {
        let g = registry("s2xs2", 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = g.domain.shrunk(0.8).sample(&mut rng);
            let c = g.curvature(&x).unwrap();
            let m = g.metric_values(&x).unwrap().unwrap();
            assert!(close(&c.ric, &m, 1e-10));
        }
    }

    #[test]
    fn klein_is_projective_change_of_flat() {
        let flat = Arc::new(registry("flat", 2).unwrap());
        let ups = ExprCovector::parse(&["x1/(1 - x1^2 - x2^2)", "x2/(1 - x1^2 - x2^2)"], 2).unwrap();
        let changed = projective_change(&flat, Arc::new(ups));
        let klein = registry("klein", 2).unwrap();
        for x in [[0.1, 0.2], [-0.5, 0.3], [0.7, -0.6]] {
            assert!(close(&changed.gamma(&x).unwrap(), &klein.gamma(&x).unwrap(), 1e-12));
            let a = changed.curvature(&x).unwrap();
            let b = klein.curvature(&x).unwrap();
            assert!(close(&a.p, &b.p, 1e-9));
        }
    }

    #[test]
    fn projective_change_composes() {
        let klein = Arc::new(registry("klein", 2).unwrap());
        let u1: Arc<dyn CovectorField> = Arc::new(ExprCovector::parse(&["sin(x2)", "x1^2"], 2).unwrap());
        let u2: Arc<dyn CovectorField> = Arc::new(ExprCovector::parse(&["0.5*x1", "exp(x1)*x2"], 2).unwrap());
        let u12: Arc<dyn CovectorField> =
            Arc::new(ExprCovector::parse(&["sin(x2) + 0.5*x1", "x1^2 + exp(x1)*x2"], 2).unwrap());
        let once = Arc::new(projective_change(&klein, u1));
        let twice = projective_change(&once, u2);
        let direct = projective_change(&klein, u12);
        let x = [0.2, -0.4];
        assert!(close(&twice.gamma(&x).unwrap(), &direct.gamma(&x).unwrap(), 1e-14));
        let zero = projective_change(&klein, Arc::new(ExprCovector::parse(&["0", "0"], 2).unwrap()));
        assert_eq!(zero.gamma(&x).unwrap(), klein.gamma(&x).unwrap());
    }

    #[test]
    fn trace_free_connection_of_klein_is_flat() {
        let klein = registry("klein", 2).unwrap();
        let pd = klein.point_data(&[0.3, -0.2]).unwrap().trace_free();
        assert!(pd.gamma.iter().all(|v| v.abs() < 1e-12));
        assert!(pd.p.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn density_derivatives() {
        let pp = registry("ppwave", 4).unwrap();
        let one = parse("1", 4).unwrap();
        let d = pp.density_derivative(1.0, &one, &[0.1, 0.2, 0.3, -0.4]).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-14));
        let klein = registry("klein", 2).unwrap();
        let f = parse("x1*x2 + 3", 2).unwrap();
        let d = klein.density_derivative(0.0, &f, &[0.2, 0.5]).unwrap();
        assert!(close(&d, &[0.5, 0.2], 1e-15));
    }

    #[test]
    fn geodesics() {
        let flat = registry("flat", 2).unwrap();
        let c = flat.geodesic(&[0.0, 0.0], &[0.5, 0.25], 1.0, 1e-3);
        assert!(!c.exited);
        assert!(close(c.x.last().unwrap(), &[0.5, 0.25], 1e-14));
        let klein = registry("klein", 2).unwrap();
        let c = klein.geodesic(&[0.0, 0.0], &[1.0, 0.0], 2.0, 1e-3);
        assert!(c.x.iter().all(|p| p[1].abs() < 1e-9));
        let out = flat.geodesic(&[0.0, 0.0], &[1.0, 0.0], 3.0, 1e-3);
        assert!(out.exited);
        assert!(out.x.last().unwrap()[0] < 1.5);
    }

    #[test]
    fn rk4_order_on_klein() {
        let klein = registry("klein", 2).unwrap();
        let end = |h: f64| klein.geodesic(&[0.1, -0.2], &[0.6, 0.5], 1.0, h).x.last().unwrap().clone();
        let (a, b, c) = (end(0.1), end(0.05), end(0.025));
        let e1 = dist(&a, &b);
        let e2 = dist(&b, &c);
        let ratio = e1 / e2;
        assert!((ratio - 16.0).abs() < 2.0, "ratio {ratio}");
    }

    #[test]
    fn asymmetric_input_rejected() {
        let n = 2;
        let mut g = vec![ScalarFieldExpr::constant(0.0, n); 8];
        g[1] = parse("x1", 2).unwrap();
        assert!(matches!(ChartGeometry::explicit("bad", 2, Domain::cube(2, 1.0), g), Err(Error::Validation(_))));
        assert!(matches!(registry("nope", 2), Err(Error::UnknownGeometry(_))));
        assert_eq!(registry_spec("klein(3)").unwrap().n, 3);
    }

    #[test]
    fn singular_metric_rejected() {
        let g = parse_all(&["1".into(), "1".into(), "1".into(), "1".into()], 2);
        assert!(matches!(
            ChartGeometry::levi_civita("bad", 2, Domain::cube(2, 1.0), g),
            Err(Error::SingularMetric(_))
        ));
    }
}
