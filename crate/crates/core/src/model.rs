//! Constant tensors on ℝⁿ⁺¹: saturated polynomial systems, orbit invariants,
//! labels of rays and smoothness of zero loci.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ZERO_BAND: f64 = 1e-9;
const RANK_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFamily {
    Covector,
    Sym2,
    Skew2,
    SymK(usize),
    PairCovectors,
}

impl ModelFamily {
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.to_ascii_lowercase();
        match t.as_str() {
            "covector" => Ok(ModelFamily::Covector),
            "sym2" => Ok(ModelFamily::Sym2),
            "skew2" => Ok(ModelFamily::Skew2),
            "pair" | "paircovectors" | "pair-covectors" => Ok(ModelFamily::PairCovectors),
            _ => {
                if let Some(k) = t.strip_prefix("sym") {
                    if let Ok(k) = k.parse::<usize>() {
                        if (1..=4).contains(&k) {
                            return Ok(ModelFamily::SymK(k));
                        }
                        return Err(Error::UnsupportedFamily(format!("symmetric weight {k} (supported up to 4)")));
                    }
                }
                Err(Error::UnsupportedFamily(s.into()))
            }
        }
    }

    /// Number of stored components for ambient dimension `m`.
    pub fn len(&self, m: usize) -> usize {
        match self {
            ModelFamily::Covector => m,
            ModelFamily::Sym2 | ModelFamily::Skew2 => m * m,
            ModelFamily::SymK(k) => m.pow(*k as u32),
            ModelFamily::PairCovectors => 2 * m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTensor {
    pub family: ModelFamily,
    /// Ambient dimension `n + 1`.
    pub m: usize,
    /// Row-major components; for pairs, the first covector followed by the second.
    pub comp: Vec<f64>,
}

fn digits(mut i: usize, m: usize, k: usize) -> Vec<usize> {
    let mut d = vec![0; k];
    for s in (0..k).rev() {
        d[s] = i % m;
        i /= m;
    }
    d
}

fn sorted_index(d: &[usize], m: usize) -> usize {
    let mut s = d.to_vec();
    s.sort_unstable();
    s.iter().fold(0, |acc, v| acc * m + v)
}

impl ModelTensor {
    /// Validates the declared symmetry exactly.
    pub fn new(family: ModelFamily, m: usize, comp: Vec<f64>) -> Result<Self> {
        if let ModelFamily::SymK(k) = family {
            if k == 0 || k > 4 {
                return Err(Error::UnsupportedFamily(format!("symmetric weight {k} (supported up to 4)")));
            }
        }
        if comp.len() != family.len(m) {
            return Err(Error::Validation(format!(
                "{family:?} on R^{m} needs {} components, got {}",
                family.len(m),
                comp.len()
            )));
        }
        let t = ModelTensor { family, m, comp };
        let defect = t.symmetry_defect();
        if defect != 0.0 {
            return Err(Error::Validation(format!("{family:?} components violate the symmetry by {defect:e}")));
        }
        Ok(t)
    }

    /// Projects numerical components onto the family and returns the removed part's size.
    pub fn projected(family: ModelFamily, m: usize, comp: Vec<f64>) -> Result<(Self, f64)> {
        if comp.len() != family.len(m) {
            return Err(Error::Validation(format!("expected {} components, got {}", family.len(m), comp.len())));
        }
        let mut t = ModelTensor { family, m, comp };
        let defect = t.symmetry_defect();
        match family {
            ModelFamily::Sym2 | ModelFamily::Skew2 => {
                let s = if family == ModelFamily::Sym2 { 1.0 } else { -1.0 };
                let c = t.comp.clone();
                for a in 0..m {
                    for b in 0..m {
                        t.comp[a * m + b] = 0.5 * (c[a * m + b] + s * c[b * m + a]);
                    }
                }
            }
            ModelFamily::SymK(k) => {
                let c = t.comp.clone();
                let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
                for (i, v) in c.iter().enumerate() {
                    let e = sums.entry(sorted_index(&digits(i, m, k), m)).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
                for i in 0..c.len() {
                    let (s, cnt) = sums[&sorted_index(&digits(i, m, k), m)];
                    t.comp[i] = s / cnt as f64;
                }
            }
            _ => {}
        }
        Ok((t, defect))
    }

    fn symmetry_defect(&self) -> f64 {
        let m = self.m;
        let c = &self.comp;
        match self.family {
            ModelFamily::Sym2 => (0..m * m).map(|i| (c[i] - c[(i % m) * m + i / m]).abs()).fold(0.0, f64::max),
            ModelFamily::Skew2 => (0..m * m).map(|i| (c[i] + c[(i % m) * m + i / m]).abs()).fold(0.0, f64::max),
            ModelFamily::SymK(k) => (0..c.len())
                .map(|i| (c[i] - c[sorted_index(&digits(i, m, k), m)]).abs())
                .fold(0.0, f64::max),
            _ => 0.0,
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match self.family {
            ModelFamily::Sym2 | ModelFamily::Skew2 => DMatrix::from_row_slice(self.m, self.m, &self.comp),
            ModelFamily::SymK(2) => DMatrix::from_row_slice(self.m, self.m, &self.comp),
            _ => DMatrix::from_row_slice(1, self.comp.len(), &self.comp),
        }
    }

    /// Pullback `I(A·, …, A·)`.
    pub fn transformed(&self, a: &DMatrix<f64>) -> ModelTensor {
        let m = self.m;
        let comp = match self.family {
            ModelFamily::Covector => (0..m).map(|j| (0..m).map(|i| self.comp[i] * a[(i, j)]).sum()).collect(),
            ModelFamily::PairCovectors => {
                let mut out = Vec::with_capacity(2 * m);
                for p in 0..2 {
                    for j in 0..m {
                        out.push((0..m).map(|i| self.comp[p * m + i] * a[(i, j)]).sum());
                    }
                }
                out
            }
            ModelFamily::Sym2 | ModelFamily::Skew2 => {
                let r = a.transpose() * self.matrix() * a;
                let mut out = Vec::with_capacity(m * m);
                for i in 0..m {
                    for j in 0..m {
                        out.push(r[(i, j)]);
                    }
                }
                out
            }
            ModelFamily::SymK(k) => {
                let mut cur = self.comp.clone();
                for s in 0..k {
                    let mut next = vec![0.0; cur.len()];
                    let stride = m.pow((k - 1 - s) as u32);
                    for (i, v) in next.iter_mut().enumerate() {
                        let j = (i / stride) % m;
                        let base = i - j * stride;
                        *v = (0..m).map(|l| cur[base + l * stride] * a[(l, j)]).sum();
                    }
                    cur = next;
                }
                cur
            }
        };
        // Reimpose the exact symmetry lost to rounding.
        ModelTensor::projected(self.family, m, comp).expect("component count preserved").0
    }

    fn full_contraction(&self, x: &[f64], k: usize) -> f64 {
        let m = self.m;
        (0..self.comp.len())
            .map(|i| {
                let d = digits(i, m, k);
                self.comp[i] * d.iter().map(|j| x[*j]).product::<f64>()
            })
            .sum()
    }

    /// Gradient in `X` of each saturated value, one row per value.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let m = self.m;
        match self.family {
            ModelFamily::Covector => DMatrix::from_row_slice(1, m, &self.comp),
            ModelFamily::PairCovectors => DMatrix::from_row_slice(2, m, &self.comp),
            ModelFamily::Sym2 => {
                let g = self.matrix() * DVector::from_column_slice(x) * 2.0;
                DMatrix::from_row_slice(1, m, g.as_slice())
            }
            ModelFamily::Skew2 => self.matrix().transpose(),
            ModelFamily::SymK(k) => {
                let mut g = vec![0.0; m];
                for (i, c) in self.comp.iter().enumerate() {
                    let d = digits(i, m, k);
                    for s in 0..k {
                        let p: f64 = d.iter().enumerate().filter(|(t, _)| *t != s).map(|(_, j)| x[*j]).product();
                        g[d[s]] += c * p;
                    }
                }
                DMatrix::from_row_slice(1, m, &g)
            }
        }
    }
}

/// Saturated values `Q(X)`.
pub fn polynomial_system(t: &ModelTensor, x: &[f64]) -> Result<Vec<f64>> {
    let m = t.m;
    if x.len() != m || x.iter().all(|v| *v == 0.0) {
        return Err(Error::Validation("X must be a nonzero vector of the ambient dimension".into()));
    }
    Ok(match t.family {
        ModelFamily::Covector => vec![t.full_contraction(x, 1)],
        ModelFamily::Sym2 => vec![t.full_contraction(x, 2)],
        ModelFamily::SymK(k) => vec![t.full_contraction(x, k)],
        ModelFamily::Skew2 => (0..m).map(|b| (0..m).map(|a| x[a] * t.comp[a * m + b]).sum()).collect(),
        ModelFamily::PairCovectors => (0..2).map(|p| (0..m).map(|a| x[a] * t.comp[p * m + a]).sum()).collect(),
    })
}

/// `Xᵀ K X`, identically zero for skew `K`.
pub fn skew_relation(t: &ModelTensor, x: &[f64]) -> f64 {
    let m = t.m;
    (0..m).flat_map(|a| (0..m).map(move |b| (a, b))).map(|(a, b)| x[a] * t.comp[a * m + b] * x[b]).sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GType {
    Zero,
    Nonzero,
    Signature { pos: usize, neg: usize, kernel: usize },
    Rank(usize),
    SpanDim(usize),
}

impl fmt::Display for GType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GType::Zero => write!(f, "zero"),
            GType::Nonzero => write!(f, "nonzero"),
            GType::Signature { pos, neg, kernel } => write!(f, "signature ({pos},{neg}) kernel {kernel}"),
            GType::Rank(r) => write!(f, "rank {r}"),
            GType::SpanDim(d) => write!(f, "span {d}"),
        }
    }
}

fn scale(t: &ModelTensor) -> f64 {
    t.comp.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0)
}

pub fn signature(h: &DMatrix<f64>) -> (usize, usize, usize) {
    let eig = SymmetricEigen::new(h.clone()).eigenvalues;
    let tol = RANK_TOL * eig.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let pos = eig.iter().filter(|v| **v > tol).count();
    let neg = eig.iter().filter(|v| **v < -tol).count();
    (pos, neg, eig.len() - pos - neg)
}

fn rank(a: &DMatrix<f64>, rel: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    sv.iter().filter(|s| **s > rel).count()
}

pub fn g_type(t: &ModelTensor) -> GType {
    let tol = RANK_TOL * scale(t);
    let is_zero = t.comp.iter().all(|v| v.abs() <= tol);
    match t.family {
        ModelFamily::Covector | ModelFamily::SymK(1) => {
            if is_zero {
                GType::Zero
            } else {
                GType::Nonzero
            }
        }
        ModelFamily::Sym2 | ModelFamily::SymK(2) => {
            let (pos, neg, kernel) = signature(&t.matrix());
            GType::Signature { pos, neg, kernel }
        }
        ModelFamily::Skew2 => GType::Rank(rank(&t.matrix(), tol)),
        ModelFamily::PairCovectors => GType::SpanDim(rank(&DMatrix::from_row_slice(2, t.m, &t.comp), tol)),
        ModelFamily::SymK(_) => {
            if is_zero {
                GType::Zero
            } else {
                GType::Nonzero
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PTypeLabel {
    Plus,
    Zero,
    Minus,
    /// Which of the two saturated covectors vanish.
    Pattern(bool, bool),
    SkewNonzero,
    SkewZero,
}

impl fmt::Display for PTypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PTypeLabel::Plus => "+",
            PTypeLabel::Zero => "0",
            PTypeLabel::Minus => "-",
            PTypeLabel::Pattern(false, false) => "{}",
            PTypeLabel::Pattern(true, false) => "{1}",
            PTypeLabel::Pattern(false, true) => "{2}",
            PTypeLabel::Pattern(true, true) => "{1,2}",
            PTypeLabel::SkewNonzero => "k!=0",
            PTypeLabel::SkewZero => "k=0",
        };
        f.write_str(s)
    }
}

impl PTypeLabel {
    pub fn is_zero_locus(&self) -> bool {
        matches!(self, PTypeLabel::Zero | PTypeLabel::SkewZero) || matches!(self, PTypeLabel::Pattern(a, b) if *a || *b)
    }
}

/// Label from saturated values, with `band` as the zero band.
pub fn label_values(family: ModelFamily, q: &[f64], band: f64) -> PTypeLabel {
    match family {
        ModelFamily::PairCovectors => PTypeLabel::Pattern(q[0].abs() < band, q[1].abs() < band),
        ModelFamily::Skew2 => {
            if q.iter().all(|v| v.abs() < band) {
                PTypeLabel::SkewZero
            } else {
                PTypeLabel::SkewNonzero
            }
        }
        _ => {
            if q[0].abs() < band {
                PTypeLabel::Zero
            } else if q[0] > 0.0 {
                PTypeLabel::Plus
            } else {
                PTypeLabel::Minus
            }
        }
    }
}

fn normalized(x: &[f64]) -> Vec<f64> {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().map(|v| v / r).collect()
}

pub fn p_type(t: &ModelTensor, x: &[f64]) -> Result<PTypeLabel> {
    p_type_band(t, x, ZERO_BAND)
}

pub fn p_type_band(t: &ModelTensor, x: &[f64], band: f64) -> Result<PTypeLabel> {
    let q = polynomial_system(t, &normalized(x))?;
    Ok(label_values(t.family, &q, band))
}

/// Smoothness of the zero locus at the ray of `x`, from the rank of the saturated
/// Jacobian on the complement of the Euler direction. Pairs are treated through
/// the product of their saturations, which is singular where both vanish.
pub fn zero_locus_smooth(t: &ModelTensor, x: &[f64]) -> Result<bool> {
    let x = normalized(x);
    let q = polynomial_system(t, &x)?;
    let on_locus = match t.family {
        ModelFamily::PairCovectors => q.iter().any(|v| v.abs() < ZERO_BAND),
        _ => q.iter().all(|v| v.abs() < ZERO_BAND),
    };
    if !on_locus {
        return Err(Error::Validation(format!("X is not on the zero locus (saturated values {q:?})")));
    }
    let m = t.m;
    let xv = DVector::from_column_slice(&x);
    let proj = DMatrix::identity(m, m) - &xv * xv.transpose();
    let tol = RANK_TOL * scale(t);
    let (jac, codim) = match t.family {
        ModelFamily::PairCovectors => {
            let j = t.jacobian(&x);
            let g = j.row(0) * q[1] + j.row(1) * q[0];
            (DMatrix::from_row_slice(1, m, g.transpose().as_slice()), 1)
        }
        ModelFamily::Skew2 => (t.jacobian(&x), rank(&t.matrix(), tol)),
        _ => (t.jacobian(&x), 1),
    };
    Ok(rank(&(jac * proj), tol) == codim)
}

fn random_unit<R: Rng>(rng: &mut R, m: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = v.iter().map(|a| a * a).sum::<f64>();
        if r > 1e-4 && r <= 1.0 {
            return normalized(&v);
        }
    }
}

/// Random matrix of determinant 1.
pub fn random_unimodular<R: Rng>(rng: &mut R, m: usize) -> DMatrix<f64> {
    loop {
        let mut a = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.5..0.5_f64));
        let d: f64 = a.determinant();
        if d.abs() < 0.1 {
            continue;
        }
        if d < 0.0 {
            a.swap_rows(0, 1);
        }
        let s = a.determinant().powf(-1.0 / m as f64);
        return a * s;
    }
}

/// Random element of the stabilizer of the ray through `e₀` (upper triangular,
/// positive diagonal).
pub fn random_ray_stabilizer<R: Rng>(rng: &mut R, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => rng.gen_range(0.3..2.0),
        std::cmp::Ordering::Less => rng.gen_range(-1.0..1.0),
        std::cmp::Ordering::Greater => 0.0,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Census {
    pub counts: BTreeMap<String, usize>,
    /// Zero-locus rays found by refinement, with their smoothness.
    pub zero_rays: Vec<(Vec<f64>, bool)>,
}

impl Census {
    pub fn singular(&self) -> Vec<Vec<f64>> {
        self.zero_rays.iter().filter(|(_, s)| !s).map(|(x, _)| x.clone()).collect()
    }
}

/// Bisects the great-circle arc from `a` to `b` for a sign change of `f`.
fn bisect_arc(a: &[f64], b: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let point = |s: f64| normalized(&a.iter().zip(b).map(|(u, v)| (1.0 - s) * u + s * v).collect::<Vec<_>>());
    let (mut lo, mut hi) = (0.0, 1.0);
    let flo = f(a);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if (f(&point(mid)) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    point(0.5 * (lo + hi))
}

fn kernel_rays<R: Rng>(a: &DMatrix<f64>, tol: f64, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let m = a.ncols();
    let eig = SymmetricEigen::new(a.transpose() * a);
    let basis: Vec<Vec<f64>> = (0..m)
        .filter(|i| eig.eigenvalues[*i].abs() <= tol * tol)
        .map(|i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    if basis.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let c = random_unit(rng, basis.len());
            let v: Vec<f64> = (0..m).map(|j| basis.iter().zip(&c).map(|(b, s)| b[j] * s).sum()).collect();
            normalized(&v)
        })
        .collect()
}

/// Labels of `samples` random rays, plus zero-locus rays found by bisecting sign
/// changes between consecutive samples (and kernel rays for the linear loci).
pub fn census(t: &ModelTensor, samples: usize, seed: u64) -> Result<Census> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = t.m;
    let rays: Vec<Vec<f64>> = (0..samples).map(|_| random_unit(&mut rng, m)).collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let add = |l: PTypeLabel, counts: &mut BTreeMap<String, usize>| *counts.entry(l.to_string()).or_insert(0) += 1;
    for r in &rays {
        add(p_type(t, r)?, &mut counts);
    }
    let mut zeros: Vec<Vec<f64>> = Vec::new();
    let scalar_parts: Vec<usize> = match t.family {
        ModelFamily::PairCovectors => vec![0, 1],
        ModelFamily::Skew2 => vec![],
        _ => vec![0],
    };
    let refine = samples.min(200);
    for part in scalar_parts {
        let f = |x: &[f64]| polynomial_system(t, x).map(|q| q[part]).unwrap_or(0.0);
        for w in rays[..refine].windows(2) {
            if f(&w[0]) * f(&w[1]) < 0.0 {
                zeros.push(bisect_arc(&w[0], &w[1], &f));
            }
        }
    }
    let tol = RANK_TOL * scale(t);
    match t.family {
        ModelFamily::PairCovectors => {
            let a = DMatrix::from_row_slice(2, m, &t.comp);
            zeros.extend(kernel_rays(&a, tol, 5, &mut rng));
        }
        ModelFamily::Skew2 => zeros.extend(kernel_rays(&t.matrix(), tol, 5, &mut rng)),
        _ => {}
    }
    let mut zero_rays = Vec::new();
    for z in zeros {
        let l = p_type(t, &z)?;
        if !l.is_zero_locus() {
            continue;
        }
        add(l, &mut counts);
        let smooth = zero_locus_smooth(t, &z)?;
        zero_rays.push((z, smooth));
    }
    Ok(Census { counts, zero_rays })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn h_klein() -> ModelTensor {
        ModelTensor::new(ModelFamily::Sym2, 3, vec![-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap()
    }

    fn pair(m: usize) -> ModelTensor {
        let mut c = vec![0.0; 2 * m];
        c[0] = 1.0;
        c[m + 1] = 1.0;
        ModelTensor::new(ModelFamily::PairCovectors, m, c).unwrap()
    }

    #[test]
    fn polynomial_system_examples() {
        assert_eq!(polynomial_system(&h_klein(), &[1.0, 0.0, 0.0]).unwrap(), vec![-1.0]);
        let mut k = vec![0.0; 9];
        k[1] = 1.0;
        k[3] = -1.0;
        let k = ModelTensor::new(ModelFamily::Skew2, 3, k).unwrap();
        assert_eq!(polynomial_system(&k, &[1.0, 0.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(skew_relation(&k, &[0.3, -1.2, 0.7]), 0.0);
        let mut s = vec![0.0; 27];
        s[0] = 1.0;
        let s = ModelTensor::new(ModelFamily::SymK(3), 3, s).unwrap();
        assert_eq!(polynomial_system(&s, &[2.0, 0.5, -1.0]).unwrap(), vec![8.0]);
        assert!(polynomial_system(&s, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn symmetry_is_validated() {
        assert!(ModelTensor::new(ModelFamily::Sym2, 2, vec![1.0, 2.0, 3.0, 1.0]).is_err());
        assert!(ModelTensor::new(ModelFamily::Skew2, 2, vec![0.0, 1.0, 1.0, 0.0]).is_err());
        assert!(ModelFamily::parse("sym5").is_err());
        assert_eq!(ModelFamily::parse("sym3").unwrap(), ModelFamily::SymK(3));
        let (t, d) = ModelTensor::projected(ModelFamily::Sym2, 2, vec![1.0, 2.0, 4.0, 1.0]).unwrap();
        assert_eq!(t.comp, vec![1.0, 3.0, 3.0, 1.0]);
        assert_eq!(d, 2.0);
    }

    #[test]
    fn g_type_examples() {
        assert_eq!(g_type(&h_klein()), GType::Signature { pos: 2, neg: 1, kernel: 0 });
        let zero = ModelTensor::new(ModelFamily::Covector, 3, vec![0.0; 3]).unwrap();
        assert_eq!(g_type(&zero), GType::Zero);
        // S = I¹⊗I² + I²⊗I¹ by eigenvalues, against a direct count.
        for n in [2usize, 3, 4] {
            let m = n + 1;
            let mut s = vec![0.0; m * m];
            s[1] = 1.0;
            s[m] = 1.0;
            let s = ModelTensor::new(ModelFamily::Sym2, m, s).unwrap();
            assert_eq!(g_type(&s), GType::Signature { pos: 1, neg: 1, kernel: n - 1 });
            assert_eq!(g_type(&pair(m)), GType::SpanDim(2));
        }
    }

    #[test]
    fn p_type_examples() {
        assert_eq!(p_type(&h_klein(), &[1.0, 0.0, 0.0]).unwrap(), PTypeLabel::Minus);
        assert_eq!(p_type(&h_klein(), &[1.0, 1.0, 0.0]).unwrap(), PTypeLabel::Zero);
        assert_eq!(p_type(&h_klein(), &[0.1, 1.0, 0.0]).unwrap(), PTypeLabel::Plus);
        assert_eq!(p_type(&pair(3), &[0.0, 0.0, 1.0]).unwrap(), PTypeLabel::Pattern(true, true));
        assert_eq!(p_type(&pair(3), &[1.0, 0.0, 1.0]).unwrap(), PTypeLabel::Pattern(false, true));
        assert_eq!(p_type(&pair(3), &[1.0, 1.0, 1.0]).unwrap().to_string(), "{}");
    }

    #[test]
    fn smoothness_examples() {
        assert!(zero_locus_smooth(&h_klein(), &[1.0, 0.6, 0.8]).unwrap());
        assert!(!zero_locus_smooth(&pair(3), &[0.0, 0.0, 1.0]).unwrap());
        assert!(zero_locus_smooth(&pair(3), &[0.0, 1.0, 1.0]).unwrap());
        let c = ModelTensor::new(ModelFamily::Covector, 3, vec![0.0, 2.0, -1.0]).unwrap();
        assert!(zero_locus_smooth(&c, &[0.7, 1.0, 2.0]).unwrap());
        assert!(zero_locus_smooth(&h_klein(), &[1.0, 0.0, 0.0]).is_err());
        // A degenerate cone is singular at its vertex ray.
        let d = ModelTensor::new(ModelFamily::Sym2, 3, vec![-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(!zero_locus_smooth(&d, &[0.0, 0.0, 1.0]).unwrap());
    }

    #[test]
    fn g_type_invariant_under_unimodular_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut k = vec![0.0; 16];
        k[1] = 1.0;
        k[4] = -1.0;
        let tensors = vec![
            h_klein(),
            pair(4),
            ModelTensor::new(ModelFamily::Skew2, 4, k).unwrap(),
            ModelTensor::new(ModelFamily::Covector, 3, vec![0.0, 1.0, 2.0]).unwrap(),
        ];
        for t in tensors {
            let g = g_type(&t);
            for _ in 0..50 {
                let a = random_unimodular(&mut rng, t.m);
                assert!((a.determinant() - 1.0).abs() < 1e-12);
                assert_eq!(g_type(&t.transformed(&a)), g);
            }
        }
    }

    #[test]
    fn transform_of_sym3_matches_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (t, _) = ModelTensor::projected(ModelFamily::SymK(3), 3, (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = random_unimodular(&mut rng, 3);
        let x = [0.3, -0.2, 0.9];
        let ax: Vec<f64> = (0..3).map(|i| (0..3).map(|j| a[(i, j)] * x[j]).sum()).collect();
        let lhs = polynomial_system(&t.transformed(&a), &x).unwrap()[0];
        let rhs = polynomial_system(&t, &ax).unwrap()[0];
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn census_of_indefinite_and_definite_forms() {
        let c = census(&h_klein(), 10_000, 1).unwrap();
        for l in ["+", "0", "-"] {
            assert!(c.counts.get(l).copied().unwrap_or(0) > 0, "{:?}", c.counts);
        }
        assert!(c.zero_rays.iter().all(|(_, s)| *s));
        let def = ModelTensor::new(ModelFamily::Sym2, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let c = census(&def, 10_000, 1).unwrap();
        assert_eq!(c.counts.keys().collect::<Vec<_>>(), vec!["+"]);
        let c = census(&pair(3), 2000, 2).unwrap();
        assert_eq!(c.counts.len(), 4, "{:?}", c.counts);
        assert!(c.singular().iter().all(|x| x[0].abs() < 1e-9 && x[1].abs() < 1e-9));
        assert!(!c.singular().is_empty());
    }

    proptest! {
        #[test]
        fn p_type_invariant_under_ray_stabilizer(seed in 0u64..500, which in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut k = vec![0.0; 9];
            k[1] = rng.gen_range(-1.0..1.0);
            k[3] = -k[1];
            k[5] = 1.0;
            k[7] = -1.0;
            let t = match which {
                0 => h_klein(),
                1 => pair(3),
                2 => ModelTensor::new(ModelFamily::Skew2, 3, k).unwrap(),
                _ => ModelTensor::projected(ModelFamily::Sym2, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap().0,
            };
            let a = random_ray_stabilizer(&mut rng, 3);
            let e0 = [1.0, 0.0, 0.0];
            prop_assert_eq!(p_type(&t.transformed(&a), &e0).unwrap(), p_type(&t, &e0).unwrap());
        }

        #[test]
        fn labels_depend_only_on_the_ray(x in prop::collection::vec(-1.0f64..1.0, 3), s in 0.01f64..100.0) {
            prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let y: Vec<f64> = x.iter().map(|v| v * s).collect();
            prop_assert_eq!(p_type(&h_klein(), &x).unwrap(), p_type(&h_klein(), &y).unwrap());
        }
    }
}
