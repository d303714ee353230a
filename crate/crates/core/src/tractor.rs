//! Covariant tractors in the splitting determined by the chart connection.
//!
//! Index 0 of every slot is the scalar slot (contraction with `X^A`); indices
//! `1..=n` are the one-form slots. Densities are trivialized by the chart, so a
//! rank-1 cotractor of weight 0 has components `(σ, μ_b)` with `σ ∈ E(1)`,
//! `μ_b ∈ E_b(1)`, and
//!
//! ```text
//! ∇_a (σ, μ_b) = (∇_a σ − μ_a,  ∇_a μ_b + P_ab σ)
//! ```

use std::sync::Arc;

use crate::curves::SmoothPath;
use crate::error::{Error, Result};
use crate::expr::ScalarFieldExpr;
use crate::geometry::{schouten_from_ricci, ricci_from_riemann, ChartGeometry, PointData};
use crate::jet::Jet;
use crate::ode::{rk4_step, step_count};

#[derive(Clone, Debug, PartialEq)]
pub struct TractorValue {
    pub n: usize,
    pub k: usize,
    pub w: f64,
    pub comp: Vec<f64>,
}

impl TractorValue {
    pub fn zeros(n: usize, k: usize, w: f64) -> Self {
        TractorValue { n, k, w, comp: vec![0.0; (n + 1).pow(k as u32)] }
    }

    pub fn new(n: usize, k: usize, w: f64, comp: Vec<f64>) -> Self {
        assert_eq!(comp.len(), (n + 1).pow(k as u32));
        TractorValue { n, k, w, comp }
    }

    pub fn index(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, i| acc * (self.n + 1) + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.comp[self.index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let i = self.index(idx);
        self.comp[i] = v;
    }

    pub fn max_abs_diff(&self, other: &TractorValue) -> f64 {
        self.comp.iter().zip(&other.comp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.comp.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn lincomb(a: f64, u: &TractorValue, b: f64, v: &TractorValue) -> TractorValue {
        TractorValue { comp: u.comp.iter().zip(&v.comp).map(|(x, y)| a * x + b * y).collect(), ..u.clone() }
    }

    /// Evaluate on contravariant tractors (one column of `vecs` per slot).
    pub fn contract(&self, vecs: &[&[f64]]) -> f64 {
        assert_eq!(vecs.len(), self.k);
        let d = self.n + 1;
        let mut total = 0.0;
        for (i, c) in self.comp.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let mut rem = i;
            let mut prod = *c;
            for s in (0..self.k).rev() {
                prod *= vecs[s][rem % d];
                rem /= d;
            }
            total += prod;
        }
        total
    }
}

/// Tractor connection coefficients at a point for the unweighted cotractor bundle:
/// `∇_a V_B = ∂_a V_B + Σ_C M_a[B][C] V_C`.
#[derive(Clone, Debug)]
pub struct ConnectionMatrix {
    pub n: usize,
    pub beta: Vec<f64>,
    /// `M_a[B][C]` at `(a*(n+1) + B)*(n+1) + C`.
    pub m: Vec<f64>,
}

impl ConnectionMatrix {
    pub fn from_point_data(pd: &PointData) -> Self {
        let n = pd.n;
        let d = n + 1;
        let tr = 1.0 / (n as f64 + 1.0);
        let mut m = vec![0.0; n * d * d];
        for a in 0..n {
            let base = a * d * d;
            m[base] = tr * pd.beta[a];
            m[base + a + 1] = -1.0;
            for b in 0..n {
                m[base + (b + 1) * d] = pd.p_at(a, b);
                for c in 0..n {
                    let mut v = -pd.gamma_at(c, a, b);
                    if b == c {
                        v += tr * pd.beta[a];
                    }
                    m[base + (b + 1) * d + c + 1] = v;
                }
            }
        }
        ConnectionMatrix { n, beta: pd.beta.clone(), m }
    }

    pub fn entry(&self, a: usize, b: usize, c: usize) -> f64 {
        let d = self.n + 1;
        self.m[(a * d + b) * d + c]
    }

    /// `Σ_slots M_a · V + (w/(n+1)) β_a V` contracted with a direction `v^a`.
    pub fn act(&self, dir: &[f64], val: &TractorValue) -> Vec<f64> {
        let n = self.n;
        let d = n + 1;
        let k = val.k;
        let mut mv = vec![0.0; d * d];
        let mut trace = 0.0;
        for a in 0..n {
            if dir[a] == 0.0 {
                continue;
            }
            trace += dir[a] * self.beta[a];
            for i in 0..d * d {
                mv[i] += dir[a] * self.m[a * d * d + i];
            }
        }
        let wt = val.w / (n as f64 + 1.0) * trace;
        let mut out: Vec<f64> = val.comp.iter().map(|c| wt * c).collect();
        let total = val.comp.len();
        for s in 0..k {
            let stride = d.pow((k - 1 - s) as u32);
            for i in 0..total {
                let bs = (i / stride) % d;
                let base = i - bs * stride;
                let mut acc = 0.0;
                for c in 0..d {
                    acc += mv[bs * d + c] * val.comp[base + c * stride];
                }
                out[i] += acc;
            }
        }
        out
    }

    /// `−Σ_a v^a M_a^T T` for a contravariant weight-0 tractor `T^B`.
    pub fn act_dual(&self, dir: &[f64], t: &[f64]) -> Vec<f64> {
        let d = self.n + 1;
        let mut out = vec![0.0; d];
        for a in 0..self.n {
            if dir[a] == 0.0 {
                continue;
            }
            for b in 0..d {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += self.m[(a * d + c) * d + b] * t[c];
                }
                out[b] -= dir[a] * acc;
            }
        }
        out
    }
}

/// Components of a weight-0 cotractor in the splitting of `Γ + Υ` from those in
/// the splitting of `Γ`: every index is contracted with `e₀` and `e_a + Υ_a e₀`.
pub fn change_splitting(v: &TractorValue, ups: &[f64]) -> TractorValue {
    let d = v.n + 1;
    let legs: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let mut t = vec![0.0; d];
            t[a] = 1.0;
            if a > 0 {
                t[0] = ups[a - 1];
            }
            t
        })
        .collect();
    let total = d.pow(v.k as u32);
    let comp = (0..total)
        .map(|mut i| {
            let mut idx = vec![0; v.k];
            for s in (0..v.k).rev() {
                idx[s] = i % d;
                i /= d;
            }
            let vecs: Vec<&[f64]> = idx.iter().map(|a| legs[*a].as_slice()).collect();
            v.contract(&vecs)
        })
        .collect();
    TractorValue::new(v.n, v.k, v.w, comp)
}

pub fn tractor_connection_matrix(geom: &ChartGeometry, x: &[f64]) -> Result<ConnectionMatrix> {
    Ok(ConnectionMatrix::from_point_data(&geom.point_data(x)?))
}

/// Covariant derivative of a tractor along `dir` given its directional derivative `dv`.
pub fn covariant_along(cm: &ConnectionMatrix, dir: &[f64], val: &TractorValue, dv: &[f64]) -> Vec<f64> {
    let act = cm.act(dir, val);
    dv.iter().zip(&act).map(|(a, b)| a + b).collect()
}

/// Parallel transport of a covariant tractor along a smooth path by RK4 with step `h`.
pub fn tractor_transport(geom: &ChartGeometry, path: &dyn SmoothPath, v0: &TractorValue, h: f64) -> Result<TractorValue> {
    let span = path.span();
    if span == 0.0 {
        return Ok(v0.clone());
    }
    let steps = step_count(span, h);
    let dt = span / steps as f64;
    let mut y = v0.comp.clone();
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = path.point(t);
        if !geom.domain.contains(&x) {
            return Err(Error::OutsideDomain(x));
        }
        let cm = tractor_connection_matrix(geom, &x)?;
        let val = TractorValue { comp: y.to_vec(), ..v0.clone() };
        let a = cm.act(&path.velocity(t), &val);
        for (d, v) in dy.iter_mut().zip(a) {
            *d = -v;
        }
        Ok(())
    };
    for s in 0..steps {
        y = rk4_step(&mut rhs, s as f64 * dt, &y, dt)?;
    }
    Ok(TractorValue { comp: y, ..v0.clone() })
}

/// Transport along consecutive pieces.
pub fn transport_pieces<P: SmoothPath>(geom: &ChartGeometry, pieces: &[P], v0: &TractorValue, h: f64) -> Result<TractorValue> {
    let mut v = v0.clone();
    for p in pieces {
        v = tractor_transport(geom, p, &v, h)?;
    }
    Ok(v)
}

/// Transport of a weight-`w` density along a path: `f' = −(w/(n+1)) β(ẋ) f`.
pub fn density_transport(geom: &ChartGeometry, path: &dyn SmoothPath, w: f64, f0: f64, h: f64) -> Result<f64> {
    let span = path.span();
    let steps = step_count(span, h);
    let dt = span / steps as f64;
    let k = w / (geom.n as f64 + 1.0);
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = path.point(t);
        let beta = geom.beta(&x)?;
        let v = path.velocity(t);
        dy[0] = -k * beta.iter().zip(&v).map(|(b, u)| b * u).sum::<f64>() * y[0];
        Ok(())
    };
    let mut y = vec![f0];
    for s in 0..steps {
        y = rk4_step(&mut rhs, s as f64 * dt, &y, dt)?;
    }
    Ok(y[0])
}

/// `𝔻f = (w f, ∇_a f)`, a cotractor of weight `w − 1`.
pub fn thomas_d(geom: &ChartGeometry, w: f64, f: &ScalarFieldExpr, x: &[f64]) -> Result<TractorValue> {
    let mut comp = vec![w * f.eval(x)?];
    comp.extend(geom.density_derivative(w, f, x)?);
    Ok(TractorValue::new(geom.n, 1, w - 1.0, comp))
}

/// The scale tractor `Y = (1/w) f^{-1} 𝔻f`, normalized so that its slot 0 is 1.
pub fn scale_tractor(geom: &ChartGeometry, w: f64, f: &ScalarFieldExpr, x: &[f64]) -> Result<TractorValue> {
    let d = thomas_d(geom, w, f, x)?;
    let fv = d.comp[0] / w;
    if fv == 0.0 {
        return Err(Error::Singularity(format!("scale vanishes at {x:?}")));
    }
    let s = 1.0 / (w * fv);
    Ok(TractorValue { comp: d.comp.iter().map(|c| c * s).collect(), w: -1.0, ..d })
}

/// Tractor curvature `κ_ab = ∂_a M_b − ∂_b M_a + [M_a, M_b]` at
/// `((a*n + b)*(n+1) + B)*(n+1) + C`.
pub fn tractor_curvature(geom: &ChartGeometry, x: &[f64]) -> Result<Vec<f64>> {
    let n = geom.n;
    let d = n + 1;
    let g2 = geom.gamma_jets(x, 2)?;
    let r = g2.riemann();
    let p = schouten_from_ricci(&ricci_from_riemann(&r, n), n);
    let beta: Vec<Jet> = g2.beta().iter().map(|j| j.truncated(1)).collect();
    let tr = 1.0 / (n as f64 + 1.0);
    let zero = Jet::zeros(n, 1);
    let mut m: Vec<Jet> = vec![zero.clone(); n * d * d];
    for a in 0..n {
        m[a * d * d] = beta[a].scale(tr);
        m[a * d * d + a + 1] = Jet::constant(n, 1, -1.0);
        for b in 0..n {
            m[a * d * d + (b + 1) * d] = p[a * n + b].clone();
            for c in 0..n {
                let mut v = g2.get(c, a, b).truncated(1).scale(-1.0);
                if b == c {
                    v.axpy(tr, &beta[a]);
                }
                m[a * d * d + (b + 1) * d + c + 1] = v;
            }
        }
    }
    let mut kappa = vec![0.0; n * n * d * d];
    for a in 0..n {
        for b in 0..n {
            for bb in 0..d {
                for cc in 0..d {
                    let mut v = m[(b * d + bb) * d + cc].grad(a) - m[(a * d + bb) * d + cc].grad(b);
                    for e in 0..d {
                        v += m[(a * d + bb) * d + e].value() * m[(b * d + e) * d + cc].value();
                        v -= m[(b * d + bb) * d + e].value() * m[(a * d + e) * d + cc].value();
                    }
                    kappa[((a * n + b) * d + bb) * d + cc] = v;
                }
            }
        }
    }
    Ok(kappa)
}

/// A covariant tractor field on the chart.
pub trait TractorField: Send + Sync {
    fn dim(&self) -> usize;
    fn valence(&self) -> usize;
    fn weight(&self) -> f64;
    fn eval(&self, x: &[f64]) -> Result<TractorValue>;
}

/// Tractor field given by explicit component expressions.
#[derive(Clone, Debug)]
pub struct ExprTractorField {
    pub n: usize,
    pub k: usize,
    pub w: f64,
    pub comp: Vec<ScalarFieldExpr>,
}

impl TractorField for ExprTractorField {
    fn dim(&self) -> usize {
        self.n
    }

    fn valence(&self) -> usize {
        self.k
    }

    fn weight(&self) -> f64 {
        self.w
    }

    fn eval(&self, x: &[f64]) -> Result<TractorValue> {
        let comp = self.comp.iter().map(|e| e.eval(x)).collect::<Result<Vec<_>>>()?;
        Ok(TractorValue::new(self.n, self.k, self.w, comp))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProductKind {
    /// `a ⊗ b + b ⊗ a`
    Sym,
    /// `a ⊗ b − b ⊗ a`
    Wedge,
}

/// Symmetric or skew product of two rank-1 tractor fields.
pub struct ProductField {
    pub a: Arc<dyn TractorField>,
    pub b: Arc<dyn TractorField>,
    pub kind: ProductKind,
}

impl TractorField for ProductField {
    fn dim(&self) -> usize {
        self.a.dim()
    }

    fn valence(&self) -> usize {
        2
    }

    fn weight(&self) -> f64 {
        self.a.weight() + self.b.weight()
    }

    fn eval(&self, x: &[f64]) -> Result<TractorValue> {
        let u = self.a.eval(x)?;
        let v = self.b.eval(x)?;
        let d = u.n + 1;
        let sign = match self.kind {
            ProductKind::Sym => 1.0,
            ProductKind::Wedge => -1.0,
        };
        let mut comp = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                comp[i * d + j] = u.comp[i] * v.comp[j] + sign * v.comp[i] * u.comp[j];
            }
        }
        Ok(TractorValue::new(u.n, 2, self.weight(), comp))
    }
}
