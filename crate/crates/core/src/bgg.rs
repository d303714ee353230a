//! First BGG operators for weight-1 and weight-2 densities and weight-2 one-forms,
//! their prolongations to tractors, saturation, and the parallelism certificate.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::curves::SmoothPath;
use crate::error::{Error, Result};
use crate::expr::{parse, ScalarFieldExpr};
use crate::geometry::{ricci_from_riemann, schouten_from_ricci, ChartGeometry, Christoffel};
use crate::jet::Jet;
use crate::tractor::{tractor_connection_matrix, TractorField, TractorValue};

#[derive(Clone, Debug)]
pub struct DensitySolution {
    pub w: f64,
    pub f: ScalarFieldExpr,
}

impl DensitySolution {
    pub fn parse(text: &str, n: usize, w: f64) -> Result<Self> {
        Ok(DensitySolution { w, f: parse(text, n)? })
    }
}

/// A one-form `k_a` of weight 2.
#[derive(Clone, Debug)]
pub struct WeightedOneForm {
    pub k: Vec<ScalarFieldExpr>,
}

impl WeightedOneForm {
    pub fn parse(texts: &[&str], n: usize) -> Result<Self> {
        Ok(WeightedOneForm { k: texts.iter().map(|t| parse(t, n)).collect::<Result<_>>()? })
    }

    pub const WEIGHT: f64 = 2.0;
}

/// Covariant derivative of a weighted covariant tensor given as jets.
/// Entries are indexed `a*n^r + I`; the result has one order less.
pub fn nabla(g: &Christoffel, beta: &[Jet], w: f64, t: &[Jet], rank: usize) -> Vec<Jet> {
    let n = g.dim;
    let o = t[0].order() - 1;
    let size = n.pow(rank as u32);
    let k = w / (n as f64 + 1.0);
    let low: Vec<Jet> = t.iter().map(|j| j.truncated(o)).collect();
    let mut out = Vec::with_capacity(n * size);
    for a in 0..n {
        let ba = beta[a].truncated(o);
        for i in 0..size {
            let mut v = t[i].derivative(a);
            if k != 0.0 {
                v.add_product(&ba.scale(k), &low[i]);
            }
            let mut rem = i;
            for s in (0..rank).rev() {
                let stride = n.pow((rank - 1 - s) as u32);
                let bs = rem % n;
                rem /= n;
                let base = i - bs * stride;
                for e in 0..n {
                    let ge = g.get(e, a, bs).truncated(o);
                    v.add_product(&ge.scale(-1.0), &low[base + e * stride]);
                }
            }
            out.push(v);
        }
    }
    out
}

/// Sum over the permutations of a rank-3 array, divided by 6.
fn sym3(t: &[f64], n: usize) -> Vec<f64> {
    let at = |a: usize, b: usize, c: usize| t[(a * n + b) * n + c];
    let mut out = vec![0.0; n * n * n];
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                out[(a * n + b) * n + c] =
                    (at(a, b, c) + at(a, c, b) + at(b, a, c) + at(b, c, a) + at(c, a, b) + at(c, b, a)) / 6.0;
            }
        }
    }
    out
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Clone, Debug)]
pub struct K1Residual {
    /// Symmetrized `∇_a∇_b σ + P_ab σ` at `a*n + b`.
    pub sym: Vec<f64>,
    /// Largest component of the skew part.
    pub skew: f64,
}

impl K1Residual {
    pub fn max_abs(&self) -> f64 {
        max_abs(&self.sym)
    }
}

fn check_weight(s: &DensitySolution, w: f64) -> Result<()> {
    if s.w != w {
        return Err(Error::Validation(format!("expected a density of weight {w}, got {}", s.w)));
    }
    Ok(())
}

pub fn bgg_residual_k1(geom: &ChartGeometry, s: &DensitySolution, x: &[f64]) -> Result<K1Residual> {
    check_weight(s, 1.0)?;
    let n = geom.n;
    let pd = geom.point_data(x)?;
    let hess = weighted_hessian(geom, s, x)?;
    let sv = s.f.eval(x)?;
    let mut sym = vec![0.0; n * n];
    let mut skew: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            let full = |a: usize, b: usize| hess[a * n + b] + pd.p_at(a, b) * sv;
            sym[a * n + b] = 0.5 * (full(a, b) + full(b, a));
            skew = skew.max((0.5 * (full(a, b) - full(b, a))).abs());
        }
    }
    Ok(K1Residual { sym, skew })
}

/// `sym(∇∇∇σ) + 4 sym(P ∇σ) + 2 sym(∇P) σ` at `(a*n + b)*n + c`.
pub fn bgg_residual_k2(geom: &ChartGeometry, s: &DensitySolution, x: &[f64]) -> Result<Vec<f64>> {
    check_weight(s, 2.0)?;
    let n = geom.n;
    let g = geom.gamma_jets(x, 2)?;
    let beta = g.beta();
    let sigma = s.f.eval_jet(x, 3)?;
    let d1 = nabla(&g, &beta, 2.0, std::slice::from_ref(&sigma), 0);
    let d2 = nabla(&g, &beta, 2.0, &d1, 1);
    let d3 = nabla(&g, &beta, 2.0, &d2, 2);
    let p = schouten_from_ricci(&ricci_from_riemann(&g.riemann(), n), n);
    let dp = nabla(&g, &beta, 0.0, &p, 2);
    let sv = sigma.value();
    let mut t = vec![0.0; n * n * n];
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let i = (a * n + b) * n + c;
                t[i] = d3[i].value() + 4.0 * p[a * n + b].value() * d1[c].value() + 2.0 * dp[i].value() * sv;
            }
        }
    }
    Ok(sym3(&t, n))
}

/// `∇_(a k_b)` at `a*n + b`.
pub fn bgg_residual_skew(geom: &ChartGeometry, k: &WeightedOneForm, x: &[f64]) -> Result<Vec<f64>> {
    let n = geom.n;
    let g = geom.gamma_jets(x, 1)?;
    let beta = g.beta();
    let kj = k.k.iter().map(|e| e.eval_jet(x, 1)).collect::<Result<Vec<_>>>()?;
    let d = nabla(&g, &beta, WeightedOneForm::WEIGHT, &kj, 1);
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            out[a * n + b] = 0.5 * (d[a * n + b].value() + d[b * n + a].value());
        }
    }
    Ok(out)
}

/// `∇_a σ` for a weighted density.
pub fn weighted_gradient(geom: &ChartGeometry, s: &DensitySolution, x: &[f64]) -> Result<Vec<f64>> {
    geom.density_derivative(s.w, &s.f, x)
}

/// `∇_a∇_b σ` at `a*n + b` (not symmetrized).
pub fn weighted_hessian(geom: &ChartGeometry, s: &DensitySolution, x: &[f64]) -> Result<Vec<f64>> {
    let n = geom.n;
    let pd = geom.point_data(x)?;
    let j = s.f.eval_jet(x, 2)?;
    let k = s.w / (n as f64 + 1.0);
    let sv = j.value();
    let grad: Vec<f64> = (0..n).map(|b| j.grad(b) + k * pd.beta[b] * sv).collect();
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let mut v = j.hess(a, b) + k * (pd.dbeta[a * n + b] * sv + pd.beta[b] * j.grad(a)) + k * pd.beta[a] * grad[b];
            for c in 0..n {
                v -= pd.gamma_at(c, a, b) * grad[c];
            }
            out[a * n + b] = v;
        }
    }
    Ok(out)
}

/// `(σ; ∇_b σ)` for a weight-1 density.
pub struct ProlongK1 {
    pub geom: Arc<ChartGeometry>,
    pub sigma: DensitySolution,
}

impl TractorField for ProlongK1 {
    fn dim(&self) -> usize {
        self.geom.n
    }

    fn valence(&self) -> usize {
        1
    }

    fn weight(&self) -> f64 {
        0.0
    }

    fn eval(&self, x: &[f64]) -> Result<TractorValue> {
        let mut comp = vec![self.sigma.f.eval(x)?];
        comp.extend(weighted_gradient(&self.geom, &self.sigma, x)?);
        Ok(TractorValue::new(self.geom.n, 1, 0.0, comp))
    }
}

/// `(σ; ν_a = ½∇_a σ; h_ab = ½∇_(a∇_b)σ + P_(ab)σ)` for a weight-2 density.
pub struct ProlongK2 {
    pub geom: Arc<ChartGeometry>,
    pub sigma: DensitySolution,
}

impl ProlongK2 {
    /// Largest skew component of `½∇_a∇_b σ + P_ab σ`, dropped by the symmetrization.
    pub fn skew_remainder(&self, x: &[f64]) -> Result<f64> {
        let n = self.geom.n;
        let hess = weighted_hessian(&self.geom, &self.sigma, x)?;
        let p = self.geom.schouten(x)?;
        let sv = self.sigma.f.eval(x)?;
        let mut m: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let full = |a: usize, b: usize| 0.5 * hess[a * n + b] + p[a * n + b] * sv;
                m = m.max((0.5 * (full(a, b) - full(b, a))).abs());
            }
        }
        Ok(m)
    }
}

impl TractorField for ProlongK2 {
    fn dim(&self) -> usize {
        self.geom.n
    }

    fn valence(&self) -> usize {
        2
    }

    fn weight(&self) -> f64 {
        0.0
    }

    fn eval(&self, x: &[f64]) -> Result<TractorValue> {
        let n = self.geom.n;
        let d = n + 1;
        let sv = self.sigma.f.eval(x)?;
        let grad = weighted_gradient(&self.geom, &self.sigma, x)?;
        let hess = weighted_hessian(&self.geom, &self.sigma, x)?;
        let p = self.geom.schouten(x)?;
        let mut v = TractorValue::zeros(n, 2, 0.0);
        v.comp[0] = sv;
        for a in 0..n {
            v.comp[(a + 1) * d] = 0.5 * grad[a];
            v.comp[a + 1] = 0.5 * grad[a];
            for b in 0..n {
                let h = 0.25 * (hess[a * n + b] + hess[b * n + a]) + 0.5 * (p[a * n + b] + p[b * n + a]) * sv;
                v.comp[(a + 1) * d + b + 1] = h;
            }
        }
        Ok(v)
    }
}

pub fn prolong_k1(geom: &Arc<ChartGeometry>, sigma: DensitySolution) -> Result<ProlongK1> {
    check_weight(&sigma, 1.0)?;
    Ok(ProlongK1 { geom: geom.clone(), sigma })
}

pub fn prolong_k2(geom: &Arc<ChartGeometry>, sigma: DensitySolution) -> Result<ProlongK2> {
    check_weight(&sigma, 2.0)?;
    Ok(ProlongK2 { geom: geom.clone(), sigma })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TractorFamily {
    Covector,
    Sym2,
    Skew2,
}

impl TractorFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "covector" => Ok(TractorFamily::Covector),
            "sym2" => Ok(TractorFamily::Sym2),
            "skew2" => Ok(TractorFamily::Skew2),
            other => Err(Error::UnsupportedFamily(other.into())),
        }
    }
}

/// The projection `Π`: contraction of the first index with `X`.
pub fn saturate(v: &TractorValue, family: TractorFamily) -> Result<Vec<f64>> {
    let d = v.n + 1;
    match (family, v.k) {
        (TractorFamily::Covector, 1) => Ok(vec![v.comp[0]]),
        (TractorFamily::Sym2, 2) => Ok(vec![v.comp[0]]),
        (TractorFamily::Skew2, 2) => Ok((1..d).map(|b| v.comp[b]).collect()),
        _ => Err(Error::UnsupportedFamily(format!("{family:?} with valence {}", v.k))),
    }
}

/// Supremum of `|∇_{ẋ} V|` over `samples` interior points on each curve, with the
/// derivative along the curve taken by a five-point stencil of step `delta`.
pub fn normality_check(
    geom: &ChartGeometry,
    field: &dyn TractorField,
    curves: &[&dyn SmoothPath],
    samples: usize,
    delta: f64,
) -> Result<f64> {
    let mut sup: f64 = 0.0;
    for c in curves {
        let span = c.span();
        for i in 0..samples {
            let t = span * (i as f64 + 0.5) / samples as f64;
            let t = t.clamp(2.0 * delta, span - 2.0 * delta);
            let vals = [-2.0, -1.0, 1.0, 2.0]
                .iter()
                .map(|k| field.eval(&c.point(t + k * delta)))
                .collect::<Result<Vec<_>>>()?;
            let x = c.point(t);
            let v = field.eval(&x)?;
            let cm = tractor_connection_matrix(geom, &x)?;
            let act = cm.act(&c.velocity(t), &v);
            for j in 0..v.comp.len() {
                let dv = (vals[0].comp[j] - 8.0 * vals[1].comp[j] + 8.0 * vals[2].comp[j] - vals[3].comp[j]) / (12.0 * delta);
                sup = sup.max((dv + act[j]).abs());
            }
        }
    }
    Ok(sup)
}

/// Monomials of total degree ≤ `degree` in `n` variables, as expression text.
pub fn monomials(n: usize, degree: usize) -> Vec<String> {
    fn rec(n: usize, i: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(n, i + 1, left - e, cur, out);
            cur.pop();
        }
    }
    let mut exps = Vec::new();
    rec(n, 0, degree, &mut Vec::new(), &mut exps);
    exps.sort_by_key(|e| e.iter().sum::<usize>());
    exps.iter()
        .map(|e| {
            let parts: Vec<String> = e
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0)
                .map(|(i, p)| if *p == 1 { format!("x{}", i + 1) } else { format!("x{}^{}", i + 1, p) })
                .collect();
            if parts.is_empty() {
                "1".into()
            } else {
                parts.join("*")
            }
        })
        .collect()
}

/// Dimension of the space of weight-2 solutions of the third order equation within
/// the span of the monomials of degree ≤ `degree`, by numerical rank at `points`.
pub fn k2_solution_dimension(geom: &ChartGeometry, degree: usize, points: &[Vec<f64>]) -> Result<usize> {
    let n = geom.n;
    let basis = monomials(n, degree);
    let rows_per = n * n * n;
    let mut m = DMatrix::zeros(rows_per * points.len(), basis.len());
    for (j, mono) in basis.iter().enumerate() {
        let s = DensitySolution::parse(mono, n, 2.0)?;
        for (p, x) in points.iter().enumerate() {
            let r = bgg_residual_k2(geom, &s, x)?;
            for (i, v) in r.iter().enumerate() {
                m[(p * rows_per + i, j)] = *v;
            }
        }
    }
    let sv = m.svd(false, false).singular_values;
    let top = sv.max().max(1.0);
    let rank = sv.iter().filter(|s| **s > 1e-9 * top).count();
    Ok(basis.len() - rank)
}
