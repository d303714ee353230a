//! Adapted frames, the normal frame field and generalised homogeneous coordinates.
//!
//! A frame `e_1,…,e_n` of base vectors at `q` and a lift `ρ0` give the unit volume
//! cone frame `e_0 = ζ`, `e_i = λ(ξ_i, 0)` at `q̃ = (q, ρ0)`. A base point `x` is
//! reached by the horizontal cone geodesic `exp(Σ yⁱ e_i) = (x, r)`; then
//! `X⁰ = 1/r`, `Xⁱ = yⁱ/r` in the chart scale, and `f_Ā` is the tractor transport
//! of the adapted frame along the projected path.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cone::{shoot, tangent_to_tractor, ConePoint, ConeTangent};
use crate::error::{Error, Result};
use crate::geometry::{dist, ChartGeometry};
use crate::tractor::{TractorField, TractorValue};

pub const SHOOT_TOL: f64 = 1e-10;
pub const SHOOT_MAX_ITER: usize = 50;
pub const COND_LIMIT: f64 = 1e6;

#[derive(Clone, Debug)]
pub struct AdaptedFrame {
    pub q: Vec<f64>,
    pub rho0: f64,
    /// Base vectors `ξ_i` as given.
    pub xi: Vec<Vec<f64>>,
    pub lambda: f64,
    /// Cone tangents `e_0 = ζ, e_i = λ(ξ_i, 0)` at `(q, ρ0)`.
    pub e: Vec<ConeTangent>,
    /// Cone volume of `e`, equal to 1.
    pub det_norm: f64,
    /// The `e_Ā` as contravariant tractors at `q`, `[T⁰, T¹…Tⁿ]`.
    pub tractors: Vec<Vec<f64>>,
}

/// Normal frame data at one base point.
#[derive(Clone, Debug)]
pub struct FramePoint {
    pub x: Vec<f64>,
    /// Shooting coefficients with `π exp(Σ yⁱ e_i) = x`.
    pub y: Vec<f64>,
    /// Fibre coordinate of `exp(Σ yⁱ e_i)`.
    pub r: f64,
    /// Generalised homogeneous coordinates `X^Ā`.
    pub hom: Vec<f64>,
    /// Tractors `e_Ā(x)` (columns, contravariant components).
    pub e: Vec<Vec<f64>>,
    /// Normal frame `f_Ā(x)`.
    pub f: Vec<Vec<f64>>,
    /// Dual coframe `f^Ā(x)` (rows, covariant components).
    pub coframe: Vec<Vec<f64>>,
    /// Adapted-frame transport of `e_0`, an independent evaluation of `f_0`.
    pub transported_e0: Vec<f64>,
}

impl FramePoint {
    /// `X^Ā = f^Ā(X)`, read off from the coframe.
    pub fn hom_from_coframe(&self) -> Vec<f64> {
        self.coframe.iter().map(|row| row[0]).collect()
    }

    pub fn det_f(&self) -> f64 {
        let m = self.f.len();
        DMatrix::from_fn(m, m, |i, j| self.f[j][i]).determinant()
    }

    /// Components `V(f_Ā, f_B̄, …)` of a covariant tractor.
    pub fn components(&self, v: &TractorValue) -> Vec<f64> {
        let m = self.f.len();
        let total = m.pow(v.k as u32);
        (0..total)
            .map(|mut idx| {
                let mut cols: Vec<&[f64]> = Vec::with_capacity(v.k);
                let mut digits = vec![0; v.k];
                for s in (0..v.k).rev() {
                    digits[s] = idx % m;
                    idx /= m;
                }
                for d in digits {
                    cols.push(&self.f[d]);
                }
                v.contract(&cols)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct CacheEntry {
    point: Arc<FramePoint>,
    jac: Option<DMatrix<f64>>,
}

pub struct NormalFrameData {
    pub geom: Arc<ChartGeometry>,
    pub adapted: AdaptedFrame,
    /// Validity radius in shooting coefficients.
    pub w: f64,
    pub h: f64,
    /// `λΞ`, the derivative of the shooting map at `y = 0`.
    lin: DMatrix<f64>,
    cache: Mutex<HashMap<Vec<u64>, CacheEntry>>,
}

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub points: Vec<Vec<f64>>,
    pub components: Vec<Vec<f64>>,
    pub reference: Vec<f64>,
    pub max_dev: f64,
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn cond(j: &DMatrix<f64>) -> f64 {
    let s = j.clone().svd(false, false).singular_values;
    let lo = s.min();
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        s.max() / lo
    }
}

pub fn adapted_frame(geom: &ChartGeometry, q: &[f64], basis: &[Vec<f64>], rho0: f64) -> Result<AdaptedFrame> {
    let n = geom.n;
    if basis.len() != n || basis.iter().any(|b| b.len() != n) {
        return Err(Error::Validation(format!("an adapted frame needs {n} base vectors of length {n}")));
    }
    if !(rho0 > 0.0) {
        return Err(Error::Validation("the lift ρ0 must be positive".into()));
    }
    if !geom.domain.contains(q) {
        return Err(Error::OutsideDomain(q.to_vec()));
    }
    let xi = DMatrix::from_fn(n, n, |i, j| basis[j][i]);
    let det = xi.determinant();
    let scale: f64 = basis.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt()).product();
    if !(det.abs() > 1e-12 * scale) {
        return Err(Error::DegenerateFrame(format!("base vectors are linearly dependent (det = {det:e})")));
    }
    if det < 0.0 {
        return Err(Error::DegenerateFrame("base vectors must be positively oriented".into()));
    }
    let lambda = (rho0.powi(n as i32 + 1) * det).powf(-1.0 / n as f64);
    let mut e = vec![ConeTangent::new(&vec![0.0; n], rho0)];
    for b in basis {
        e.push(ConeTangent::horizontal(&b.iter().map(|v| lambda * v).collect::<Vec<_>>()));
    }
    let vecs: Vec<Vec<f64>> = e.iter().map(|t| t.coords()).collect();
    let det_norm = crate::cone::cone_volume(rho0, &vecs);
    let beta = geom.beta(q)?;
    let tractors = e.iter().map(|t| tangent_to_tractor(&beta, rho0, t)).collect();
    Ok(AdaptedFrame { q: q.to_vec(), rho0, xi: basis.to_vec(), lambda, e, det_norm, tractors })
}

impl NormalFrameData {
    /// Set up the normal frame at `q` and detect its validity radius.
    pub fn build(geom: Arc<ChartGeometry>, q: &[f64], basis: &[Vec<f64>], rho0: f64, h: f64) -> Result<Self> {
        let adapted = adapted_frame(&geom, q, basis, rho0)?;
        let n = geom.n;
        let lin = DMatrix::from_fn(n, n, |i, j| adapted.lambda * basis[j][i]);
        let mut nf = NormalFrameData { geom, adapted, w: 0.0, h, lin, cache: Mutex::new(HashMap::new()) };
        nf.w = nf.detect_radius()?;
        Ok(nf)
    }

    pub fn n(&self) -> usize {
        self.geom.n
    }

    fn lifted(&self) -> ConePoint {
        ConePoint::new(&self.adapted.q, self.adapted.rho0)
    }

    fn direction(&self, y: &[f64]) -> ConeTangent {
        let n = self.n();
        let mut xi = vec![0.0; n];
        for (i, e) in self.adapted.e[1..].iter().enumerate() {
            for k in 0..n {
                xi[k] += y[i] * e.xi[k];
            }
        }
        ConeTangent::horizontal(&xi)
    }

    /// `π exp(Σ yⁱ e_i)` with step `h`.
    pub fn shoot_base(&self, y: &[f64], h: f64) -> Result<Vec<f64>> {
        Ok(shoot(&self.geom, &self.lifted(), &self.direction(y), 1.0, h, &[], &[])?.end.x)
    }

    fn jacobian(&self, y: &[f64], fy: &[f64], h: f64) -> Result<DMatrix<f64>> {
        let n = self.n();
        let mut j = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut yp = y.to_vec();
            let step = 1e-6 * (1.0 + y[c].abs());
            yp[c] += step;
            let fp = self.shoot_base(&yp, h)?;
            for r in 0..n {
                j[(r, c)] = (fp[r] - fy[r]) / step;
            }
        }
        Ok(j)
    }

    /// Forward evaluation of the normal frame at `π exp(Σ yⁱ e_i)`.
    pub fn point_from_y(&self, y: &[f64]) -> Result<Arc<FramePoint>> {
        let fp = self.evaluate(y)?;
        Ok(self.insert(fp, None))
    }

    fn insert(&self, fp: FramePoint, jac: Option<DMatrix<f64>>) -> Arc<FramePoint> {
        let mut cache = self.cache.lock().unwrap();
        let entry = cache.entry(key(&fp.x)).or_insert(CacheEntry { point: Arc::new(fp), jac: None });
        if entry.jac.is_none() {
            entry.jac = jac;
        }
        entry.point.clone()
    }

    fn evaluate(&self, y: &[f64]) -> Result<FramePoint> {
        let n = self.n();
        let m = n + 1;
        let shot = shoot(&self.geom, &self.lifted(), &self.direction(y), 1.0, self.h, &[], &self.adapted.tractors)?;
        let x = shot.end.x.clone();
        let r = shot.end.rho;
        let beta = self.geom.beta(&x)?;
        let mut e = vec![tangent_to_tractor(&beta, r, &ConeTangent::new(&vec![0.0; n], r))];
        e.extend(shot.tractors[1..].iter().cloned());
        let mut f = e.clone();
        for i in 0..n {
            for k in 0..m {
                f[0][k] -= y[i] * e[i + 1][k];
            }
        }
        let fm = DMatrix::from_fn(m, m, |i, j| f[j][i]);
        let inv = fm
            .try_inverse()
            .ok_or_else(|| Error::DegenerateFrame(format!("normal frame is singular at {x:?}")))?;
        let coframe = (0..m).map(|a| (0..m).map(|k| inv[(a, k)]).collect()).collect();
        let mut hom = vec![1.0 / r];
        hom.extend(y.iter().map(|v| v / r));
        Ok(FramePoint { x, y: y.to_vec(), r, hom, e, f, coframe, transported_e0: shot.tractors[0].clone() })
    }

    fn nearest(&self, x: &[f64]) -> Option<CacheEntry> {
        let cache = self.cache.lock().unwrap();
        cache
            .values()
            .min_by(|a, b| dist(&a.point.x, x).total_cmp(&dist(&b.point.x, x)))
            .cloned()
    }

    /// Solve `π exp(Σ yⁱ e_i) = x` by Newton iteration with Broyden updates.
    pub fn solve(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n = self.n();
        if !self.geom.domain.contains(x) {
            return Err(Error::OutsideDomain(x.to_vec()));
        }
        let (mut y, mut jac, x0) = match self.nearest(x) {
            Some(c) if dist(&c.point.x, x) < dist(&self.adapted.q, x) => {
                (c.point.y.clone(), c.jac.unwrap_or_else(|| self.lin.clone()), c.point.x.clone())
            }
            _ => (vec![0.0; n], self.lin.clone(), self.adapted.q.clone()),
        };
        let rhs = DVector::from_fn(n, |i, _| x[i] - x0[i]);
        if let Some(step) = jac.clone().lu().solve(&rhs) {
            for i in 0..n {
                y[i] += step[i];
            }
        }
        let fail = |msg: String| Error::Shooting(format!("shooting to {x:?} failed: {msg}"));
        let mut fy = match self.shoot_base(&y, self.h) {
            Ok(p) => p,
            Err(_) => {
                y = vec![0.0; n];
                jac = self.lin.clone();
                self.shoot_base(&y, self.h).map_err(|e| fail(e.to_string()))?
            }
        };
        let mut res: Vec<f64> = (0..n).map(|i| fy[i] - x[i]).collect();
        let mut fresh = false;
        for _ in 0..SHOOT_MAX_ITER {
            let norm = res.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < SHOOT_TOL {
                if y.iter().map(|v| v * v).sum::<f64>().sqrt() > self.w {
                    return Err(fail(format!("target lies outside the validity radius {:.6}", self.w)));
                }
                return Ok((y, jac));
            }
            let step = jac
                .clone()
                .lu()
                .solve(&DVector::from_column_slice(&res))
                .ok_or_else(|| fail("singular Jacobian".into()))?;
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..8 {
                let yn: Vec<f64> = (0..n).map(|i| y[i] - t * step[i]).collect();
                if let Ok(p) = self.shoot_base(&yn, self.h) {
                    let rn: Vec<f64> = (0..n).map(|i| p[i] - x[i]).collect();
                    let nn = rn.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nn < norm {
                        accepted = Some((yn, p, rn, nn));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((yn, p, rn, nn)) => {
                    let s = DVector::from_fn(n, |i, _| yn[i] - y[i]);
                    let df = DVector::from_fn(n, |i, _| rn[i] - res[i]);
                    let ss = s.dot(&s);
                    if ss > 0.0 {
                        let corr = (&df - &jac * &s) / ss;
                        jac += corr * s.transpose();
                    }
                    let slow = nn > 0.5 * norm;
                    y = yn;
                    fy = p;
                    res = rn;
                    fresh = false;
                    if slow {
                        jac = self.jacobian(&y, &fy, self.h).map_err(|e| fail(e.to_string()))?;
                        fresh = true;
                    }
                }
                None => {
                    if fresh {
                        return Err(fail("no descent along the Newton direction".into()));
                    }
                    jac = self.jacobian(&y, &fy, self.h).map_err(|e| fail(e.to_string()))?;
                    fresh = true;
                }
            }
        }
        Err(fail(format!("no convergence in {SHOOT_MAX_ITER} iterations")))
    }

    /// Normal frame data at `x`, memoized.
    pub fn frame_at(&self, x: &[f64]) -> Result<Arc<FramePoint>> {
        if let Some(c) = self.cache.lock().unwrap().get(&key(x)) {
            return Ok(c.point.clone());
        }
        let (y, jac) = self.solve(x)?;
        let mut fp = self.evaluate(&y)?;
        fp.x = x.to_vec();
        Ok(self.insert(fp, Some(jac)))
    }

    pub fn hom_coords(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.frame_at(x)?.hom.clone())
    }

    /// The normal scale `X⁰` relative to the chart scale.
    pub fn normal_scale(&self, x: &[f64]) -> Result<f64> {
        Ok(self.frame_at(x)?.hom[0])
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    /// Largest radius in shooting coefficients on which the shooting map stays
    /// well conditioned along probe rays; rays that leave the domain end their scan.
    fn detect_radius(&self) -> Result<f64> {
        let n = self.n();
        let smin = self.lin.clone().svd(false, false).singular_values.min();
        let rmax = self.geom.domain.diameter() / smin;
        let hp = self.h.max(1e-2);
        let mut dirs = Vec::new();
        for i in 0..n {
            for s in [1.0, -1.0] {
                let mut d = vec![0.0; n];
                d[i] = s;
                dirs.push(d);
            }
        }
        for s in [1.0, -1.0] {
            dirs.push(vec![s / (n as f64).sqrt(); n]);
        }
        let good = |y: &[f64]| -> Option<bool> {
            let fy = self.shoot_base(y, hp).ok()?;
            let j = self.jacobian(y, &fy, hp).ok()?;
            Some(cond(&j) < COND_LIMIT)
        };
        let mut w = rmax;
        let scan = 8;
        for d in &dirs {
            let mut prev = 0.0;
            for k in 1..=scan {
                let s = rmax * k as f64 / scan as f64;
                if s >= w {
                    break;
                }
                let y: Vec<f64> = d.iter().map(|v| v * s).collect();
                match good(&y) {
                    None => break,
                    Some(true) => prev = s,
                    Some(false) => {
                        let (mut lo, mut hi) = (prev, s);
                        for _ in 0..12 {
                            let mid = 0.5 * (lo + hi);
                            let ym: Vec<f64> = d.iter().map(|v| v * mid).collect();
                            match good(&ym) {
                                Some(true) | None => lo = mid,
                                Some(false) => hi = mid,
                            }
                        }
                        w = w.min(lo);
                        break;
                    }
                }
            }
        }
        if !(w > 0.0) {
            return Err(Error::DegenerateFrame("the exponential chart is not invertible near q".into()));
        }
        Ok(w)
    }

    /// Sample `count` points by forward shooting with coefficients uniform in the
    /// ball of radius `frac·W` (capped at `cap`); rays leaving the domain are redrawn.
    pub fn sample_points(&self, count: usize, frac: f64, cap: f64, seed: u64) -> Result<Vec<Arc<FramePoint>>> {
        let n = self.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let radius = (frac * self.w).min(cap);
        let mut out = Vec::with_capacity(count);
        let mut tries = 0;
        while out.len() < count {
            tries += 1;
            if tries > 20 * count + 100 {
                return Err(Error::Shooting("too many sample rays left the domain".into()));
            }
            let y: Vec<f64> = loop {
                let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if c.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                    break c.iter().map(|v| v * radius).collect();
                }
            };
            match self.point_from_y(&y) {
                Ok(p) => out.push(p),
                Err(Error::OutsideDomain(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

pub fn build_normal_frame(geom: Arc<ChartGeometry>, q: &[f64], basis: &[Vec<f64>], rho0: f64, h: f64) -> Result<NormalFrameData> {
    NormalFrameData::build(geom, q, basis, rho0, h)
}

pub fn standard_basis(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Components of `field` in the normal frame at each sample, and the largest
/// deviation from the components at the base point.
pub fn components_in_normal_frame(nf: &NormalFrameData, field: &dyn TractorField, samples: &[Vec<f64>]) -> Result<ComponentReport> {
    let q = nf.adapted.q.clone();
    let at_q = nf.frame_at(&q)?;
    let reference = at_q.components(&field.eval(&q)?);
    let mut components = Vec::with_capacity(samples.len());
    let mut max_dev: f64 = 0.0;
    for x in samples {
        let fp = nf.frame_at(x)?;
        let c = fp.components(&field.eval(x)?);
        for (a, b) in c.iter().zip(&reference) {
            max_dev = max_dev.max((a - b).abs());
        }
        components.push(c);
    }
    Ok(ComponentReport { points: samples.to_vec(), components, reference, max_dev })
}

/// Covariant tractor field with constant components in the normal frame.
pub struct ConstantFrameField {
    pub nf: Arc<NormalFrameData>,
    pub k: usize,
    pub constants: Vec<f64>,
}

impl ConstantFrameField {
    pub fn new(nf: Arc<NormalFrameData>, k: usize, constants: Vec<f64>) -> Result<Self> {
        let m = nf.n() + 1;
        if constants.len() != m.pow(k as u32) {
            return Err(Error::Validation(format!("expected {} constants, got {}", m.pow(k as u32), constants.len())));
        }
        Ok(ConstantFrameField { nf, k, constants })
    }
}

impl TractorField for ConstantFrameField {
    fn dim(&self) -> usize {
        self.nf.n()
    }

    fn valence(&self) -> usize {
        self.k
    }

    fn weight(&self) -> f64 {
        0.0
    }

    fn eval(&self, x: &[f64]) -> Result<TractorValue> {
        let fp = self.nf.frame_at(x)?;
        let m = self.nf.n() + 1;
        let total = m.pow(self.k as u32);
        let digits = |mut i: usize| {
            let mut d = vec![0; self.k];
            for s in (0..self.k).rev() {
                d[s] = i % m;
                i /= m;
            }
            d
        };
        let mut v = TractorValue::zeros(self.nf.n(), self.k, 0.0);
        for (ib, c) in self.constants.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let bar = digits(ib);
            for i in 0..total {
                let d = digits(i);
                let prod: f64 = bar.iter().zip(&d).map(|(b, a)| fp.coframe[*b][*a]).product();
                v.comp[i] += c * prod;
            }
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::cone_volume;
    use crate::expr::ScalarFieldExpr;
    use crate::geometry::registry;
    use crate::tractor::ExprTractorField;

    fn flat2() -> NormalFrameData {
        build_normal_frame(Arc::new(registry("flat", 2).unwrap()), &[0.0, 0.0], &standard_basis(2), 1.0, 1e-3).unwrap()
    }

    #[test]
    fn adapted_frame_has_unit_volume() {
        let g = registry("klein", 2).unwrap();
        let a = adapted_frame(&g, &[0.1, 0.2], &[vec![1.0, 0.5], vec![-0.3, 2.0]], 1.7).unwrap();
        assert!((a.det_norm - 1.0).abs() < 1e-14);
        assert_eq!(a.e[0], ConeTangent::new(&[0.0, 0.0], 1.7));
        let vecs: Vec<Vec<f64>> = a.e.iter().map(|t| t.coords()).collect();
        assert!((cone_volume(1.7, &vecs) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dependent_frame_rejected() {
        let g = Arc::new(registry("flat", 2).unwrap());
        let r = build_normal_frame(g, &[0.0, 0.0], &[vec![1.0, 0.0], vec![1.0, 0.0]], 1.0, 1e-3);
        assert!(matches!(r, Err(Error::DegenerateFrame(_))));
    }

    #[test]
    fn flat_model_reproduces_standard_coordinates() {
        let nf = flat2();
        assert!(nf.w >= 1.5 * 2f64.sqrt());
        for x in [[0.0, 0.0], [0.3, -0.7], [1.2, 1.1], [-1.4, 0.2]] {
            let fp = nf.frame_at(&x).unwrap();
            let hom = &fp.hom;
            assert!((hom[0] - 1.0).abs() < 1e-10 && (hom[1] - x[0]).abs() < 1e-10 && (hom[2] - x[1]).abs() < 1e-10);
            for (k, v) in [1.0, -x[0], -x[1]].iter().enumerate() {
                assert!((fp.f[0][k] - v).abs() < 1e-10);
            }
            assert!((fp.det_f() - 1.0).abs() < 1e-10);
        }
        let at_q = nf.frame_at(&[0.0, 0.0]).unwrap();
        assert_eq!(at_q.f, at_q.e);
    }

    #[test]
    fn flat_parallel_cotractor_is_constant() {
        let nf = flat2();
        let one = ExprTractorField {
            n: 2,
            k: 1,
            w: 0.0,
            comp: vec![ScalarFieldExpr::constant(1.0, 2), ScalarFieldExpr::constant(0.0, 2), ScalarFieldExpr::constant(0.0, 2)],
        };
        let samples = vec![vec![0.5, 0.2], vec![-1.0, 0.9]];
        let rep = components_in_normal_frame(&nf, &one, &samples).unwrap();
        assert_eq!(rep.reference, vec![1.0, 0.0, 0.0]);
        assert!(rep.max_dev < 1e-10);
    }

    #[test]
    fn klein_frame_routes_agree() {
        let nf = build_normal_frame(Arc::new(registry("klein", 2).unwrap()), &[0.0, 0.0], &standard_basis(2), 1.0, 1e-3).unwrap();
        assert!(nf.w >= 0.9, "W = {}", nf.w);
        for p in nf.sample_points(5, 0.5, 0.8, 7).unwrap() {
            assert!(p.hom[0] > 0.0);
            for (a, b) in p.hom.iter().zip(p.hom_from_coframe()) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in p.f[0].iter().zip(&p.transported_e0) {
                assert!((a - b).abs() < 1e-9);
            }
            assert!((p.det_f() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn newton_matches_forward_shooting() {
        let g = Arc::new(registry("sphere-stereo", 2).unwrap());
        let nf = build_normal_frame(g.clone(), &[0.1, 0.0], &[vec![1.0, 0.2], vec![0.0, 0.8]], 1.3, 1e-3).unwrap();
        let fwd = nf.evaluate(&[0.4, -0.3]).unwrap();
        let fresh = build_normal_frame(g, &[0.1, 0.0], &[vec![1.0, 0.2], vec![0.0, 0.8]], 1.3, 1e-3).unwrap();
        let back = fresh.frame_at(&fwd.x).unwrap();
        for (a, b) in back.y.iter().zip(&fwd.y) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in back.hom.iter().zip(&fwd.hom) {
            assert!((a - b).abs() < 1e-9);
        }
        let at_q = fresh.hom_coords(&[0.1, 0.0]).unwrap();
        assert!((at_q[0] - 1.0 / 1.3).abs() < 1e-12 && at_q[1].abs() < 1e-12);
    }

    #[test]
    fn lift_rescaling_rescales_coordinates() {
        let g = Arc::new(registry("sphere-stereo", 2).unwrap());
        let a = build_normal_frame(g.clone(), &[0.0, 0.0], &standard_basis(2), 1.0, 1e-3).unwrap();
        let b = build_normal_frame(g, &[0.0, 0.0], &standard_basis(2), 2.0, 1e-3).unwrap();
        let x = [0.3, -0.2];
        let ha = a.hom_coords(&x).unwrap();
        let hb = b.hom_coords(&x).unwrap();
        assert!((hb[0] - 0.5 * ha[0]).abs() < 1e-9);
        for i in 1..3 {
            assert!((hb[i] - 2f64.sqrt() * ha[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn outside_domain_fails() {
        let nf = flat2();
        assert!(nf.hom_coords(&[2.0, 0.0]).is_err());
    }

    #[test]
    fn memo_returns_identical_values() {
        let nf = Arc::new(flat2());
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let nf = nf.clone();
                std::thread::spawn(move || nf.frame_at(&[0.25, 0.5]).unwrap())
            })
            .collect();
        let pts: Vec<Arc<FramePoint>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        for p in &pts[1..] {
            assert_eq!(p.hom, pts[0].hom);
        }
    }
}
