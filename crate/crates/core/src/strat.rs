//! Stratification of a chart by the labels of a parallel tractor, Einstein scales,
//! and the affine reparametrization towards the zero locus of a scale.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::bgg::{normality_check, prolong_k2, saturate, DensitySolution, TractorFamily};
use crate::curves::{Circle, Segment, SmoothPath};
use crate::error::{Error, Result};
use crate::geometry::{scale_connection, ChartGeometry, CovectorField, ScaleCovector};
use crate::model::{g_type, label_values, polynomial_system, signature, GType, ModelFamily, ModelTensor, PTypeLabel};
use crate::normal_frame::{build_normal_frame, standard_basis, NormalFrameData};
use crate::ode::rk4_step;
use crate::tractor::{change_splitting, TractorField};

/// Regular grid with `counts[i]` points along axis `i`, endpoints included.
#[derive(Clone, Debug, Serialize)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Grid {
    pub fn square(n: usize, half: f64, count: usize) -> Grid {
        Grid { lo: vec![-half; n], hi: vec![half; n], counts: vec![count; n] }
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi_index(&self, mut i: usize) -> Vec<usize> {
        let mut idx = vec![0; self.counts.len()];
        for a in (0..self.counts.len()).rev() {
            idx[a] = i % self.counts[a];
            i /= self.counts[a];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.counts).fold(0, |acc, (i, c)| acc * c + i)
    }

    /// Coordinates measured from the centre so the midpoint of an odd axis is exact.
    pub fn point(&self, idx: &[usize]) -> Vec<f64> {
        (0..idx.len())
            .map(|a| {
                let c = 0.5 * (self.lo[a] + self.hi[a]);
                let half = 0.5 * (self.hi[a] - self.lo[a]);
                if self.counts[a] == 1 {
                    c
                } else {
                    c + half * ((2 * idx[a]) as f64 / (self.counts[a] - 1) as f64 - 1.0)
                }
            })
            .collect()
    }
}

/// A parallel tractor, or a pair of parallel cotractors.
pub enum StratInput {
    Single(Arc<dyn TractorField>, TractorFamily),
    Pair(Arc<dyn TractorField>, Arc<dyn TractorField>),
}

impl StratInput {
    pub fn model_family(&self) -> ModelFamily {
        match self {
            StratInput::Single(_, TractorFamily::Covector) => ModelFamily::Covector,
            StratInput::Single(_, TractorFamily::Sym2) => ModelFamily::Sym2,
            StratInput::Single(_, TractorFamily::Skew2) => ModelFamily::Skew2,
            StratInput::Pair(..) => ModelFamily::PairCovectors,
        }
    }

    fn fields(&self) -> Vec<&dyn TractorField> {
        match self {
            StratInput::Single(f, _) => vec![f.as_ref()],
            StratInput::Pair(a, b) => vec![a.as_ref(), b.as_ref()],
        }
    }

    /// Saturated values at `x`.
    pub fn saturated(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            StratInput::Single(f, fam) => saturate(&f.eval(x)?, *fam),
            StratInput::Pair(a, b) => {
                Ok(vec![saturate(&a.eval(x)?, TractorFamily::Covector)?[0], saturate(&b.eval(x)?, TractorFamily::Covector)?[0]])
            }
        }
    }

    /// The scalar whose gradient decides smoothness (the product for pairs).
    fn defining_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        let q = self.saturated(x)?;
        Ok(match self {
            StratInput::Pair(..) => vec![q[0] * q[1]],
            _ => q,
        })
    }

    /// Components in the normal frame at its base point.
    fn frame_components(&self, nf: &NormalFrameData) -> Result<Vec<f64>> {
        let q = nf.adapted.q.clone();
        let fp = nf.frame_at(&q)?;
        let mut out = Vec::new();
        for f in self.fields() {
            out.extend(fp.components(&f.eval(&q)?));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct StratOptions {
    pub band: f64,
    pub normality_tol: f64,
    pub h: f64,
    /// Grid stride for the normal-frame route; `None` picks about 11 points per axis.
    pub frame_stride: Option<usize>,
    /// Base point of the normal frame; defaults to the grid centre.
    pub base: Option<Vec<f64>>,
}

impl Default for StratOptions {
    fn default() -> Self {
        StratOptions { band: 1e-9, normality_tol: 1e-6, h: 1e-3, frame_stride: None, base: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ZeroPoint {
    pub x: Vec<f64>,
    pub values: Vec<f64>,
    pub label: String,
    pub smooth: bool,
    pub grad_norm: f64,
    /// Signature of the h-slot restricted to the kernel of the gradient (symmetric case).
    pub boundary_signature: Option<(usize, usize, usize)>,
    pub from_bisection: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct StratReport {
    pub grid: Grid,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub counts: BTreeMap<String, usize>,
    pub strata: Vec<String>,
    pub zero_points: Vec<ZeroPoint>,
    pub normality: f64,
    pub model: ModelTensor,
    pub g_type: GType,
    pub frame_checked: usize,
    pub outside_validity: usize,
    pub route_disagreements: usize,
    pub max_route_dev: f64,
    /// Signature of the induced metric at a representative point of each open label.
    pub side_signatures: BTreeMap<String, (usize, usize, usize)>,
}

impl StratReport {
    pub fn singular_points(&self) -> Vec<&ZeroPoint> {
        self.zero_points.iter().filter(|z| !z.smooth).collect()
    }
}

fn fd_jacobian(f: &dyn Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for a in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[a] += step;
        xm[a] -= step;
        let (p, m) = (f(&xp)?, f(&xm)?);
        cols.push(p.iter().zip(&m).map(|(u, v)| (u - v) / (2.0 * step)).collect::<Vec<_>>());
    }
    let rows = cols[0].len();
    Ok(DMatrix::from_fn(rows, n, |i, j| cols[j][i]))
}

fn rank(a: &DMatrix<f64>, tol: f64) -> usize {
    a.clone().svd(false, false).singular_values.iter().filter(|s| **s > tol).count()
}

/// Orthonormal basis of the kernel of the row vector `g`.
fn kernel_basis(g: &[f64]) -> Vec<Vec<f64>> {
    let n = g.len();
    let gv = DMatrix::from_column_slice(n, 1, g);
    let proj = DMatrix::identity(n, n) - &gv * gv.transpose() / gv.norm_squared();
    let eig = nalgebra::SymmetricEigen::new(proj);
    (0..n)
        .filter(|i| eig.eigenvalues[*i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect()
}

/// `h` restricted to the span of `basis`.
fn restricted_signature(h: &DMatrix<f64>, basis: &[Vec<f64>]) -> (usize, usize, usize) {
    let k = basis.len();
    let b = DMatrix::from_fn(h.nrows(), k, |i, j| basis[j][i]);
    signature(&(b.transpose() * h * b))
}

fn h_slot(v: &crate::tractor::TractorValue) -> DMatrix<f64> {
    let n = v.n;
    let d = n + 1;
    DMatrix::from_fn(n, n, |a, b| 0.5 * (v.comp[(a + 1) * d + b + 1] + v.comp[(b + 1) * d + a + 1]))
}

/// Signature of `ε h^σ/|σ|`, the metric induced by a symmetric cotractor in the
/// splitting of the scale `σ` (weight 2), with `ε` fixing `r ≥ s` for the tractor.
pub fn induced_metric(geom: &Arc<ChartGeometry>, field: &dyn TractorField, sigma: &DensitySolution, eps: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let sv = sigma.f.eval(x)?;
    let ups = ScaleCovector { base: geom.clone(), sigma: sigma.f.clone(), weight: sigma.w };
    let u: Vec<f64> = ups.jets(x, 0)?.iter().map(|j| j.value()).collect();
    let v = change_splitting(&field.eval(x)?, &u);
    Ok(h_slot(&v) * (eps / sv.abs()))
}

/// Sign making the signature `(r, s)` of the tractor metric satisfy `r ≥ s`.
pub fn signature_sign(field: &dyn TractorField, x: &[f64]) -> Result<f64> {
    let v = field.eval(x)?;
    let d = v.n + 1;
    let (pos, neg, _) = signature(&DMatrix::from_row_slice(d, d, &v.comp));
    Ok(if pos >= neg { 1.0 } else { -1.0 })
}

fn default_curves(geom: &ChartGeometry, grid: &Grid) -> Vec<Box<dyn SmoothPath>> {
    let n = geom.n;
    let c: Vec<f64> = (0..n).map(|a| 0.5 * (grid.lo[a] + grid.hi[a])).collect();
    let half: Vec<f64> = (0..n).map(|a| 0.25 * (grid.hi[a] - grid.lo[a])).collect();
    let mut out: Vec<Box<dyn SmoothPath>> = Vec::new();
    let a: Vec<f64> = c.iter().zip(&half).map(|(c, h)| c - h).collect();
    let b: Vec<f64> = c.iter().zip(&half).map(|(c, h)| c + h).collect();
    out.push(Box::new(Segment::new(&a, &b)));
    let mut a2 = a.clone();
    let mut b2 = b.clone();
    a2[0] = b[0];
    b2[0] = a[0];
    out.push(Box::new(Segment::new(&a2, &b2)));
    let r = half.iter().fold(f64::INFINITY, |m, v| m.min(*v)) * 0.8;
    out.push(Box::new(Circle { center: c, radius: r, axes: (0, 1) }));
    out.retain(|p| (0..=8).all(|k| geom.domain.contains(&p.point(p.span() * k as f64 / 8.0))));
    out
}

pub fn stratify(geom: &Arc<ChartGeometry>, input: &StratInput, grid: &Grid, opts: &StratOptions) -> Result<StratReport> {
    let n = geom.n;
    if grid.counts.len() != n || grid.lo.len() != n || grid.hi.len() != n {
        return Err(Error::Validation(format!("grid must be {n}-dimensional")));
    }
    if grid.counts.contains(&0) {
        return Err(Error::Validation("grid counts must be positive".into()));
    }
    let family = input.model_family();

    let curves = default_curves(geom, grid);
    let refs: Vec<&dyn SmoothPath> = curves.iter().map(|c| c.as_ref()).collect();
    let mut normality: f64 = 0.0;
    for f in input.fields() {
        normality = normality.max(normality_check(geom, f, &refs, 12, 1e-3)?);
    }
    if normality >= opts.normality_tol {
        return Err(Error::NotParallel(format!("tractor derivative reaches {normality:e}")));
    }

    let total = grid.len();
    let mut points = Vec::with_capacity(total);
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut raw_labels: Vec<Option<PTypeLabel>> = Vec::with_capacity(total);
    for i in 0..total {
        let x = grid.point(&grid.multi_index(i));
        let (label, vals) = if geom.domain.contains(&x) {
            let q = input.saturated(&x)?;
            let l = label_values(family, &q, opts.band);
            raw_labels.push(Some(l));
            (l.to_string(), q)
        } else {
            raw_labels.push(None);
            ("outside".to_string(), Vec::new())
        };
        *counts.entry(label.clone()).or_insert(0) += 1;
        labels.push(label);
        values.push(vals);
        points.push(x);
    }

    // Normal-frame route on a sub-grid.
    let base = opts.base.clone().unwrap_or_else(|| (0..n).map(|a| 0.5 * (grid.lo[a] + grid.hi[a])).collect());
    let nf = build_normal_frame(geom.clone(), &base, &standard_basis(n), 1.0, opts.h)?;
    let (model, _) = ModelTensor::projected(family, n + 1, input.frame_components(&nf)?)?;
    let gt = g_type(&model);
    let stride = opts.frame_stride.unwrap_or_else(|| {
        let longest = *grid.counts.iter().max().unwrap();
        (longest.saturating_sub(1)).div_ceil(10).max(1)
    });
    let mut frame_checked = 0;
    let mut outside_validity = 0;
    let mut route_disagreements = 0;
    let mut max_route_dev: f64 = 0.0;
    let scalar_family = family != ModelFamily::Skew2;
    for i in 0..total {
        let idx = grid.multi_index(i);
        if idx.iter().zip(&grid.counts).any(|(k, c)| k % stride != 0 && *k != c - 1) {
            continue;
        }
        let Some(direct) = raw_labels[i] else { continue };
        let hom = match nf.hom_coords(&points[i]) {
            Ok(h) => h,
            Err(Error::Shooting(_)) | Err(Error::OutsideDomain(_)) => {
                outside_validity += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let q = polynomial_system(&model, &hom)?;
        if scalar_family {
            for (a, b) in q.iter().zip(&values[i]) {
                max_route_dev = max_route_dev.max((a - b).abs());
            }
        }
        if label_values(family, &q, opts.band) != direct {
            route_disagreements += 1;
        }
        frame_checked += 1;
    }

    // Zero locus: band points and one bisection per sign-change edge.
    let mut zero_points = Vec::new();
    let model_rank = match gt {
        GType::Rank(r) => r,
        _ => 1,
    };
    let eps_sign = match input {
        StratInput::Single(f, TractorFamily::Sym2) => Some(signature_sign(f.as_ref(), &base)?),
        _ => None,
    };
    let mut add_zero = |x: Vec<f64>, from_bisection: bool| -> Result<()> {
        let q = input.saturated(&x)?;
        let label = label_values(family, &q, opts.band);
        if !label.is_zero_locus() {
            return Ok(());
        }
        let jac = fd_jacobian(&|y| input.defining_values(y), &x, 1e-5)?;
        let grad_norm = jac.norm();
        let (smooth, boundary_signature) = match input {
            StratInput::Single(f, TractorFamily::Sym2) => {
                let g: Vec<f64> = jac.row(0).iter().copied().collect();
                let sig = if grad_norm > 1e-6 { Some(restricted_signature(&h_slot(&f.eval(&x)?), &kernel_basis(&g))) } else { None };
                (grad_norm > 1e-6, sig)
            }
            StratInput::Single(_, TractorFamily::Skew2) => (rank(&jac, 1e-6) == model_rank.min(n), None),
            _ => (grad_norm > 1e-6, None),
        };
        zero_points.push(ZeroPoint { x, values: q, label: label.to_string(), smooth, grad_norm, boundary_signature, from_bisection });
        Ok(())
    };
    for i in 0..total {
        if raw_labels[i].is_some_and(|l| l.is_zero_locus()) {
            add_zero(points[i].clone(), false)?;
        }
    }
    let parts: Vec<usize> = match family {
        ModelFamily::PairCovectors => vec![0, 1],
        ModelFamily::Skew2 => vec![],
        _ => vec![0],
    };
    for i in 0..total {
        if raw_labels[i].is_none() {
            continue;
        }
        let idx = grid.multi_index(i);
        for a in 0..n {
            if idx[a] + 1 >= grid.counts[a] {
                continue;
            }
            let mut jdx = idx.clone();
            jdx[a] += 1;
            let j = grid.flat_index(&jdx);
            if raw_labels[j].is_none() {
                continue;
            }
            for &p in &parts {
                let (fa, fb) = (values[i][p], values[j][p]);
                if fa * fb < 0.0 && fa.abs() >= opts.band && fb.abs() >= opts.band {
                    let (mut lo, mut hi) = (points[i][a], points[j][a]);
                    let mut x = points[i].clone();
                    for _ in 0..60 {
                        x[a] = 0.5 * (lo + hi);
                        let v = input.saturated(&x)?[p];
                        if v.abs() < opts.band * 1e-3 {
                            break;
                        }
                        if (v > 0.0) == (fa > 0.0) {
                            lo = x[a];
                        } else {
                            hi = x[a];
                        }
                    }
                    add_zero(x, true)?;
                }
            }
        }
    }

    let mut side_signatures = BTreeMap::new();
    if let (StratInput::Single(f, TractorFamily::Sym2), Some(eps)) = (input, eps_sign) {
        for (i, l) in raw_labels.iter().enumerate() {
            let Some(l) = l else { continue };
            if l.is_zero_locus() || side_signatures.contains_key(&l.to_string()) {
                continue;
            }
            let sv = values[i][0];
            if sv.abs() < 1e-3 {
                continue;
            }
            let g = induced_metric_from_tractor(f.as_ref(), eps, &points[i])?;
            side_signatures.insert(l.to_string(), signature(&g));
        }
    }

    let mut strata: Vec<String> = labels.iter().filter(|l| *l != "outside").cloned().collect();
    strata.extend(zero_points.iter().map(|z| z.label.clone()));
    strata.sort();
    strata.dedup();

    Ok(StratReport {
        grid: grid.clone(),
        points,
        labels,
        values,
        counts,
        strata,
        zero_points,
        normality,
        model,
        g_type: gt,
        frame_checked,
        outside_validity,
        route_disagreements,
        max_route_dev,
        side_signatures,
    })
}

/// Induced metric where the scale is the saturation of the tractor itself; the
/// σ-splitting is reached with `Υ = -ν/σ` read off the tractor.
fn induced_metric_from_tractor(field: &dyn TractorField, eps: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let v = field.eval(x)?;
    let d = v.n + 1;
    let sv = v.comp[0];
    let u: Vec<f64> = (0..v.n).map(|a| -v.comp[(a + 1) * d] / sv).collect();
    Ok(h_slot(&change_splitting(&v, &u)) * (eps / sv.abs()))
}

#[derive(Clone, Debug, Serialize)]
pub struct EinsteinFit {
    pub side: i8,
    pub count: usize,
    pub c: f64,
    /// Largest pointwise deviation `|P̂ - c g|`.
    pub spread: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScaleReport {
    pub points: Vec<Vec<f64>>,
    /// `P̂` at each point, `a*n + b`.
    pub p_hat: Vec<Vec<f64>>,
    pub p_hat_sup: f64,
    pub nabla_p_hat_sup: f64,
    /// One fit of `P̂ = c g` per sign of `σ` among the points.
    pub einstein: Vec<EinsteinFit>,
    pub metric_signatures: Vec<(usize, usize, usize)>,
}

/// Schouten tensor of `∇^σ` and its derivative; for weight 2 also the comparison
/// of `P̂` with the metric induced by the prolonged tractor (or `tractor`).
pub fn scale_geometry_check(
    geom: &Arc<ChartGeometry>,
    sigma: &DensitySolution,
    points: &[Vec<f64>],
    tractor: Option<Arc<dyn TractorField>>,
    band: f64,
) -> Result<ScaleReport> {
    let n = geom.n;
    for x in points {
        let v = sigma.f.eval(x)?;
        if v.abs() <= band {
            return Err(Error::Validation(format!("scale vanishes at {x:?}")));
        }
    }
    let hat = scale_connection(geom, sigma.f.clone(), sigma.w);
    let mut p_hat = Vec::with_capacity(points.len());
    let mut p_sup: f64 = 0.0;
    let mut dp_sup: f64 = 0.0;
    for x in points {
        let cd = hat.curvature(x)?;
        p_sup = p_sup.max(cd.p.iter().fold(0.0, |m, v| m.max(v.abs())));
        dp_sup = dp_sup.max(cd.dp.iter().fold(0.0, |m, v| m.max(v.abs())));
        p_hat.push(cd.p);
    }
    let mut einstein = Vec::new();
    let mut metric_signatures = Vec::new();
    if sigma.w == 2.0 && !points.is_empty() {
        let field: Arc<dyn TractorField> = match tractor {
            Some(t) => t,
            None => Arc::new(prolong_k2(geom, sigma.clone())?),
        };
        let eps = signature_sign(field.as_ref(), &points[0])?;
        let mut metrics = Vec::with_capacity(points.len());
        for x in points {
            let g = induced_metric(geom, field.as_ref(), sigma, eps, x)?;
            metric_signatures.push(signature(&g));
            metrics.push(g);
        }
        for side in [1i8, -1] {
            let idx: Vec<usize> = (0..points.len())
                .filter(|&i| (sigma.f.eval(&points[i]).unwrap_or(0.0) > 0.0) == (side > 0))
                .collect();
            let (mut num, mut den) = (0.0, 0.0);
            for &i in &idx {
                for ab in 0..n * n {
                    num += p_hat[i][ab] * metrics[i][(ab / n, ab % n)];
                    den += metrics[i][(ab / n, ab % n)].powi(2);
                }
            }
            if den > 0.0 {
                let c = num / den;
                let mut spread: f64 = 0.0;
                for &i in &idx {
                    for ab in 0..n * n {
                        spread = spread.max((p_hat[i][ab] - c * metrics[i][(ab / n, ab % n)]).abs());
                    }
                }
                einstein.push(EinsteinFit { side, count: idx.len(), c, spread });
            }
        }
    }
    Ok(ScaleReport { points: points.to_vec(), p_hat, p_hat_sup: p_sup, nabla_p_hat_sup: dp_sup, einstein, metric_signatures })
}

#[derive(Clone, Debug)]
pub struct ProfileOptions {
    pub h: f64,
    pub band: f64,
    pub s_max: f64,
    /// Parameter values the integration must land on exactly.
    pub targets: Vec<f64>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions { h: 1e-3, band: 1e-9, s_max: 10.0, targets: Vec::new() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Profile {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub sigma: Vec<f64>,
    pub targets: Vec<(f64, Option<f64>)>,
    pub reached_band: bool,
    pub exited: bool,
}

impl Profile {
    pub fn t_at(&self, s: f64) -> Option<f64> {
        self.targets.iter().find(|(a, _)| *a == s).and_then(|(_, t)| *t)
    }

    pub fn is_increasing(&self) -> bool {
        self.t.windows(2).all(|w| w[1] > w[0])
    }
}

/// Integrates the geodesic `γ(s)` of `geom` from `(x0, v0)` together with the
/// parameter `t` that is affine for `∇^σ`: with `τ = log(dt/ds)`, `τ' = 2Υ(γ̇)`.
/// The step is capped by a fixed fraction of `|σ|/|dσ/ds|` so the approach to the
/// zero band is resolved geometrically.
pub fn completeness_profile(
    geom: &Arc<ChartGeometry>,
    sigma: &DensitySolution,
    x0: &[f64],
    v0: &[f64],
    opts: &ProfileOptions,
) -> Result<Profile> {
    let n = geom.n;
    let s0 = sigma.f.eval(x0)?;
    if s0.abs() <= opts.band {
        return Err(Error::Validation("the scale vanishes at the start point".into()));
    }
    let ups = ScaleCovector { base: geom.clone(), sigma: sigma.f.clone(), weight: sigma.w };
    // State: x, v, τ, t.
    let mut rhs = |_s: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
        let x = &y[..n];
        let v = &y[n..2 * n];
        let gamma = geom.gamma(x)?;
        out[..n].copy_from_slice(v);
        for c in 0..n {
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    acc += gamma[(c * n + a) * n + b] * v[a] * v[b];
                }
            }
            out[n + c] = -acc;
        }
        let u: Vec<f64> = ups.jets(x, 0)?.iter().map(|j| j.value()).collect();
        out[2 * n] = 2.0 * (0..n).map(|a| u[a] * v[a]).sum::<f64>();
        out[2 * n + 1] = y[2 * n].exp();
        Ok(())
    };
    let mut y: Vec<f64> = x0.iter().chain(v0).copied().chain([0.0, 0.0]).collect();
    let mut s = 0.0;
    let mut prof = Profile {
        s: vec![0.0],
        t: vec![0.0],
        sigma: vec![s0],
        targets: opts.targets.iter().map(|t| (*t, None)).collect(),
        reached_band: false,
        exited: false,
    };
    let mut targets: Vec<f64> = opts.targets.clone();
    targets.sort_by(f64::total_cmp);
    let mut next_target = 0;
    let max_steps = 10_000_000usize;
    for _ in 0..max_steps {
        if s >= opts.s_max {
            break;
        }
        let x = &y[..n];
        let sv = sigma.f.eval(x)?;
        let j = sigma.f.eval_jet(x, 1)?;
        let ds: f64 = (0..n).map(|a| j.grad(a) * y[n + a]).sum();
        let mut h = opts.h.min(opts.s_max - s);
        if ds.abs() > 0.0 {
            h = h.min(0.05 * sv.abs() / ds.abs());
        }
        while next_target < targets.len() && targets[next_target] <= s {
            next_target += 1;
        }
        if next_target < targets.len() {
            h = h.min(targets[next_target] - s);
        }
        if h <= 0.0 {
            break;
        }
        let ynew = rk4_step(&mut rhs, s, &y, h)?;
        if !geom.domain.contains(&ynew[..n]) {
            prof.exited = true;
            break;
        }
        y = ynew;
        s += h;
        let sv = sigma.f.eval(&y[..n])?;
        prof.s.push(s);
        prof.t.push(y[2 * n + 1]);
        prof.sigma.push(sv);
        for (a, t) in prof.targets.iter_mut() {
            if *a == s {
                *t = Some(y[2 * n + 1]);
            }
        }
        if sv.abs() <= opts.band || sv.signum() != s0.signum() {
            prof.reached_band = true;
            break;
        }
    }
    Ok(prof)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bgg::{prolong_k1, prolong_k2};
    use crate::geometry::registry;

    fn flat2() -> Arc<ChartGeometry> {
        Arc::new(registry("flat", 2).unwrap())
    }

    #[test]
    fn grid_midpoint_is_exact() {
        let g = Grid::square(2, 1.2, 101);
        assert_eq!(g.point(&[50, 50]), vec![0.0, 0.0]);
        assert_eq!(g.point(&[0, 100]), vec![-1.2, 1.2]);
        assert_eq!(g.flat_index(&g.multi_index(1234)), 1234);
    }

    #[test]
    fn klein_picture_on_flat_plane() {
        let g = flat2();
        let h = prolong_k2(&g, DensitySolution::parse("x1^2 + x2^2 - 1", 2, 2.0).unwrap()).unwrap();
        let input = StratInput::Single(Arc::new(h), TractorFamily::Sym2);
        let grid = Grid::square(2, 1.2, 101);
        let rep = stratify(&g, &input, &grid, &StratOptions::default()).unwrap();
        assert_eq!(rep.strata, vec!["+", "-", "0"]);
        assert_eq!(rep.counts.values().sum::<usize>(), grid.len());
        assert!(!rep.zero_points.is_empty());
        for z in &rep.zero_points {
            let r = (z.x[0] * z.x[0] + z.x[1] * z.x[1]).sqrt();
            assert!((r - 1.0).abs() < 1e-9, "{r}");
            assert!(z.smooth);
            assert_eq!(z.boundary_signature, Some((1, 0, 0)));
        }
        assert_eq!(rep.route_disagreements, 0);
        assert!(rep.frame_checked > 50);
        assert!(rep.max_route_dev < 1e-8, "{}", rep.max_route_dev);
        assert_eq!(rep.g_type, GType::Signature { pos: 2, neg: 1, kernel: 0 });
        assert_eq!(rep.side_signatures["-"], (2, 0, 0));
        assert_eq!(rep.side_signatures["+"], (1, 1, 0));
    }

    #[test]
    fn linear_covector_splits_along_a_line() {
        let g = flat2();
        let p = prolong_k1(&g, DensitySolution::parse("x1", 2, 1.0).unwrap()).unwrap();
        let input = StratInput::Single(Arc::new(p), TractorFamily::Covector);
        let rep = stratify(&g, &input, &Grid::square(2, 1.2, 21), &StratOptions::default()).unwrap();
        assert_eq!(rep.strata, vec!["+", "-", "0"]);
        assert!(rep.zero_points.iter().all(|z| z.x[0] == 0.0 && z.smooth));
        assert_eq!(rep.counts["0"], 21);
    }

    #[test]
    fn pair_of_covectors_has_a_singular_crossing() {
        let g = flat2();
        let a = prolong_k1(&g, DensitySolution::parse("x1", 2, 1.0).unwrap()).unwrap();
        let b = prolong_k1(&g, DensitySolution::parse("x2", 2, 1.0).unwrap()).unwrap();
        let input = StratInput::Pair(Arc::new(a), Arc::new(b));
        let rep = stratify(&g, &input, &Grid::square(2, 1.2, 41), &StratOptions::default()).unwrap();
        assert_eq!(rep.strata.len(), 4, "{:?}", rep.strata);
        let sing = rep.singular_points();
        assert_eq!(sing.len(), 1);
        assert_eq!(sing[0].x, vec![0.0, 0.0]);
        assert_eq!(rep.route_disagreements, 0);
    }

    #[test]
    fn non_parallel_input_is_rejected() {
        let g = flat2();
        let p = prolong_k1(&g, DensitySolution::parse("x1*x2", 2, 1.0).unwrap()).unwrap();
        let input = StratInput::Single(Arc::new(p), TractorFamily::Covector);
        assert!(matches!(
            stratify(&g, &input, &Grid::square(2, 1.0, 5), &StratOptions::default()),
            Err(Error::NotParallel(_))
        ));
    }

    fn disc_points(k: usize) -> Vec<Vec<f64>> {
        (0..k).map(|i| {
            let a = i as f64 * 2.399;
            let r = 0.85 * ((i as f64 + 0.5) / k as f64).sqrt();
            vec![r * a.cos(), r * a.sin()]
        }).collect()
    }

    #[test]
    fn einstein_scales() {
        let g = flat2();
        for text in ["1 - x1^2 - x2^2", "x1^2 + x2^2 - 1"] {
            let s = DensitySolution::parse(text, 2, 2.0).unwrap();
            let rep = scale_geometry_check(&g, &s, &disc_points(30), None, 1e-9).unwrap();
            assert!(rep.nabla_p_hat_sup < 1e-6, "{}", rep.nabla_p_hat_sup);
            let fit = &rep.einstein[..];
            assert!(fit.len() == 1 && (fit[0].c + 1.0).abs() < 1e-6 && fit[0].spread < 1e-6, "{fit:?}");
            assert!(rep.metric_signatures.iter().all(|s| *s == (2, 0, 0)));
        }
        // Outside the circle the same scale is Lorentzian Einstein with the opposite constant.
        let s = DensitySolution::parse("1 - x1^2 - x2^2", 2, 2.0).unwrap();
        let mut pts = disc_points(10);
        pts.extend([vec![1.3, 0.2], vec![-0.4, 1.4], vec![1.1, -1.0]]);
        let rep = scale_geometry_check(&g, &s, &pts, None, 1e-9).unwrap();
        assert_eq!(rep.einstein.len(), 2);
        for fit in &rep.einstein {
            assert!((fit.c + fit.side as f64).abs() < 1e-6 && fit.spread < 1e-6, "{fit:?}");
        }
        assert_eq!(rep.metric_signatures[10..], [(1, 1, 0); 3]);
        let s2 = Arc::new(registry("s2xs2", 4).unwrap());
        let scale = DensitySolution::parse("exp(0.8*log(1 + x1^2 + x2^2) + 0.8*log(1 + x3^2 + x4^2))", 4, 2.0).unwrap();
        let pts = vec![vec![0.1, 0.2, -0.3, 0.4], vec![-0.5, 0.1, 0.6, -0.2], vec![0.7, -0.6, 0.0, 0.3]];
        let rep = scale_geometry_check(&s2, &scale, &pts, None, 1e-9).unwrap();
        let (c, spread) = (rep.einstein[0].c, rep.einstein[0].spread);
        assert!(rep.einstein.len() == 1 && rep.nabla_p_hat_sup < 1e-6 && c > 0.0 && spread < 1e-6, "{c} {spread} {}", rep.nabla_p_hat_sup);
        assert!(rep.metric_signatures.iter().all(|s| *s == (4, 0, 0)));
        let pp = Arc::new(registry("ppwave", 4).unwrap());
        let one = DensitySolution::parse("1", 4, 1.0).unwrap();
        let pts = vec![vec![0.1, 0.2, -0.3, 0.4], vec![-0.5, 0.1, 0.6, -0.2]];
        let rep = scale_geometry_check(&pp, &one, &pts, None, 1e-9).unwrap();
        assert!(rep.p_hat_sup < 1e-10 && rep.einstein.is_empty());
    }

    #[test]
    fn hyperbolic_metric_matches_the_klein_form() {
        // Oracle: the Beltrami-Klein metric written in closed form.
        let g = flat2();
        let s = DensitySolution::parse("x1^2 + x2^2 - 1", 2, 2.0).unwrap();
        let h = prolong_k2(&g, s.clone()).unwrap();
        let x = [0.3, -0.5];
        let m = induced_metric(&g, &h, &s, 1.0, &x).unwrap();
        let r2 = x[0] * x[0] + x[1] * x[1];
        for a in 0..2 {
            for b in 0..2 {
                let want = if a == b { 1.0 / (1.0 - r2) } else { 0.0 } + x[a] * x[b] / (1.0 - r2).powi(2);
                assert!((m[(a, b)] - want).abs() < 1e-12);
            }
        }
        let m2 = induced_metric_from_tractor(&h, 1.0, &x).unwrap();
        assert!((m - m2).abs().max() < 1e-12);
    }

    #[test]
    fn profile_towards_the_klein_circle() {
        let g = flat2();
        let s = DensitySolution::parse("1 - x1^2 - x2^2", 2, 2.0).unwrap();
        let targets: Vec<f64> = (3..=6).map(|k| 1.0 - 10f64.powi(-k)).collect();
        let opts = ProfileOptions { targets: targets.clone(), ..Default::default() };
        let p = completeness_profile(&g, &s, &[0.0, 0.0], &[1.0, 0.0], &opts).unwrap();
        assert!(p.is_increasing() && p.reached_band);
        for (a, t) in &p.targets {
            let want = a.atanh();
            assert!((t.unwrap() - want).abs() < 1e-6 * want.max(1.0), "{a} {t:?} {want}");
        }
        let d = p.t_at(targets[3]).unwrap() - p.t_at(targets[1]).unwrap();
        assert!((d / (2.0 * 10f64.ln() / 2.0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn profile_towards_a_hyperplane() {
        // Closed form for σ = x¹ from x¹ = 1 straight down: t = 1/(1 - s) - 1.
        let g = flat2();
        let s = DensitySolution::parse("x1", 2, 1.0).unwrap();
        let targets = vec![0.9, 0.99, 0.999];
        let opts = ProfileOptions { targets: targets.clone(), ..Default::default() };
        let p = completeness_profile(&g, &s, &[1.0, 0.2], &[-1.0, 0.0], &opts).unwrap();
        for a in targets {
            let want = 1.0 / (1.0 - a) - 1.0;
            assert!((p.t_at(a).unwrap() - want).abs() < 1e-6 * want, "{a}");
        }
        assert!(p.reached_band && p.is_increasing());
        assert!(*p.t.last().unwrap() > 1e6);
    }

    #[test]
    fn profile_with_constant_coefficient() {
        let g = flat2();
        // Υ(γ̇) = 0 along the path: t = s.
        let s = DensitySolution::parse("exp(x2)", 2, 1.0).unwrap();
        let opts = ProfileOptions { s_max: 0.5, targets: vec![0.5], ..Default::default() };
        let p = completeness_profile(&g, &s, &[0.0, 0.0], &[1.0, 0.0], &opts).unwrap();
        assert!((p.t_at(0.5).unwrap() - 0.5).abs() < 1e-12);
        // Υ(γ̇) = k constant: t = (e^{2ks} - 1)/(2k).
        let s = DensitySolution::parse("exp(x1)", 2, 1.0).unwrap();
        let opts = ProfileOptions { s_max: 0.5, targets: vec![0.5], ..Default::default() };
        let p = completeness_profile(&g, &s, &[0.0, 0.0], &[1.0, 0.0], &opts).unwrap();
        let k = -1.0;
        let want = ((2.0 * k * 0.5_f64).exp() - 1.0) / (2.0 * k);
        assert!((p.t_at(0.5).unwrap() - want).abs() < 1e-8);
    }
}
