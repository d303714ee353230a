//! Truncated Taylor jets in `n` variables up to order 3.
//!
//! A jet stores the value, gradient, Hessian and third derivative tensor of a
//! function at a point. All tensors are stored densely (row-major), so the
//! symmetric blocks carry redundant entries; this keeps indexing trivial.

use std::ops::{Add, Mul, Neg, Sub};

/// Number of stored coefficients for a jet in `n` variables of the given order.
pub fn jet_len(n: usize, order: usize) -> usize {
    match order {
        0 => 1,
        1 => 1 + n,
        2 => 1 + n + n * n,
        _ => 1 + n + n * n + n * n * n,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    n: usize,
    order: usize,
    data: Vec<f64>,
}

impl Jet {
    pub fn zeros(n: usize, order: usize) -> Self {
        assert!(order <= 3, "jets are limited to order 3");
        Jet { n, order, data: vec![0.0; jet_len(n, order)] }
    }

    pub fn constant(n: usize, order: usize, c: f64) -> Self {
        let mut j = Jet::zeros(n, order);
        j.data[0] = c;
        j
    }

    /// The coordinate function `x_i` expanded at a point where it takes `value`.
    pub fn variable(n: usize, order: usize, i: usize, value: f64) -> Self {
        let mut j = Jet::constant(n, order, value);
        if order >= 1 {
            j.data[1 + i] = 1.0;
        }
        j
    }

    pub fn from_data(n: usize, order: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), jet_len(n, order));
        Jet { n, order, data }
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn value(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self, i: usize) -> f64 {
        self.data[1 + i]
    }

    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.data[1 + self.n + i * self.n + j]
    }

    pub fn third(&self, i: usize, j: usize, k: usize) -> f64 {
        let n = self.n;
        self.data[1 + n + n * n + (i * n + j) * n + k]
    }

    pub fn gradient(&self) -> Vec<f64> {
        self.data[1..1 + self.n].to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Partial derivative in direction `l`; the result has one order less.
    pub fn derivative(&self, l: usize) -> Jet {
        assert!(self.order >= 1, "cannot differentiate an order-0 jet");
        let n = self.n;
        let mut out = Jet::zeros(n, self.order - 1);
        out.data[0] = self.grad(l);
        if self.order >= 2 {
            for i in 0..n {
                out.data[1 + i] = self.hess(l, i);
            }
        }
        if self.order >= 3 {
            for i in 0..n {
                for j in 0..n {
                    out.data[1 + n + i * n + j] = self.third(l, i, j);
                }
            }
        }
        out
    }

    pub fn truncated(&self, order: usize) -> Jet {
        assert!(order <= self.order);
        Jet { n: self.n, order, data: self.data[..jet_len(self.n, order)].to_vec() }
    }

    /// Embed into a jet over `m >= n` variables; the extra variables do not appear.
    pub fn extend_vars(&self, m: usize) -> Jet {
        assert!(m >= self.n);
        let n = self.n;
        let mut out = Jet::zeros(m, self.order);
        out.data[0] = self.data[0];
        if self.order >= 1 {
            for i in 0..n {
                out.data[1 + i] = self.grad(i);
            }
        }
        if self.order >= 2 {
            for i in 0..n {
                for j in 0..n {
                    out.data[1 + m + i * m + j] = self.hess(i, j);
                }
            }
        }
        if self.order >= 3 {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        out.data[1 + m + m * m + (i * m + j) * m + k] = self.third(i, j, k);
                    }
                }
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet { n: self.n, order: self.order, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add_scalar(&self, s: f64) -> Jet {
        let mut out = self.clone();
        out.data[0] += s;
        out
    }

    /// `out += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Jet) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// `self += a * b`, truncated to the order of `self`.
    pub fn add_product(&mut self, a: &Jet, b: &Jet) {
        let p = a * b;
        for (x, y) in self.data.iter_mut().zip(&p.data) {
            *x += y;
        }
    }

    /// Compose with a scalar function whose derivatives at the base value are `d`.
    pub fn compose(&self, d: [f64; 4]) -> Jet {
        let mut out = Jet::zeros(self.n, self.order);
        compose_into(self.n, self.order, &self.data, d, &mut out.data);
        out
    }

    pub fn recip(&self) -> Jet {
        let b = self.value();
        let r = 1.0 / b;
        self.compose([r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r])
    }
}

fn check_pair(a: &Jet, b: &Jet) -> (usize, usize) {
    assert_eq!(a.n, b.n, "jet variable counts differ");
    (a.n, a.order.min(b.order))
}

/// Leibniz product of two jets stored in slices, written into `out`.
pub fn mul_into(n: usize, order: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out[0] = a[0] * b[0];
    if order == 0 {
        return;
    }
    let g = 1;
    for i in 0..n {
        out[g + i] = a[g + i] * b[0] + a[0] * b[g + i];
    }
    if order == 1 {
        return;
    }
    let h = 1 + n;
    for i in 0..n {
        for j in 0..n {
            let ij = h + i * n + j;
            out[ij] = a[ij] * b[0] + a[g + i] * b[g + j] + a[g + j] * b[g + i] + a[0] * b[ij];
        }
    }
    if order == 2 {
        return;
    }
    let t = 1 + n + n * n;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let ijk = t + (i * n + j) * n + k;
                out[ijk] = a[ijk] * b[0]
                    + a[h + i * n + j] * b[g + k]
                    + a[h + i * n + k] * b[g + j]
                    + a[h + j * n + k] * b[g + i]
                    + a[g + i] * b[h + j * n + k]
                    + a[g + j] * b[h + i * n + k]
                    + a[g + k] * b[h + i * n + j]
                    + a[0] * b[ijk];
            }
        }
    }
}

/// Faà di Bruno for a scalar function with derivatives `d` at `u[0]`.
pub fn compose_into(n: usize, order: usize, u: &[f64], d: [f64; 4], out: &mut [f64]) {
    out[0] = d[0];
    if order == 0 {
        return;
    }
    let g = 1;
    for i in 0..n {
        out[g + i] = d[1] * u[g + i];
    }
    if order == 1 {
        return;
    }
    let h = 1 + n;
    for i in 0..n {
        for j in 0..n {
            let ij = h + i * n + j;
            out[ij] = d[1] * u[ij] + d[2] * u[g + i] * u[g + j];
        }
    }
    if order == 2 {
        return;
    }
    let t = 1 + n + n * n;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let ijk = t + (i * n + j) * n + k;
                out[ijk] = d[1] * u[ijk]
                    + d[2]
                        * (u[h + i * n + j] * u[g + k]
                            + u[h + i * n + k] * u[g + j]
                            + u[h + j * n + k] * u[g + i])
                    + d[3] * u[g + i] * u[g + j] * u[g + k];
            }
        }
    }
}

impl<'a> Add<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn add(self, rhs: &Jet) -> Jet {
        let (n, order) = check_pair(self, rhs);
        let len = jet_len(n, order);
        Jet { n, order, data: (0..len).map(|i| self.data[i] + rhs.data[i]).collect() }
    }
}

impl<'a> Sub<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn sub(self, rhs: &Jet) -> Jet {
        let (n, order) = check_pair(self, rhs);
        let len = jet_len(n, order);
        Jet { n, order, data: (0..len).map(|i| self.data[i] - rhs.data[i]).collect() }
    }
}

impl<'a> Mul<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        let (n, order) = check_pair(self, rhs);
        let mut out = Jet::zeros(n, order);
        mul_into(n, order, &self.data, &rhs.data, &mut out.data);
        out
    }
}

impl Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        &self + &rhs
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        &self - &rhs
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        &self * &rhs
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(n: usize, order: usize, x: &[f64]) -> Jet {
        // f = x0^2 x1 + 3 x1
        let a = Jet::variable(n, order, 0, x[0]);
        let b = Jet::variable(n, order, 1, x[1]);
        &(&(&a * &a) * &b) + &b.scale(3.0)
    }

    #[test]
    fn product_rule_matches_hand_derivatives() {
        let f = poly(2, 3, &[2.0, 5.0]);
        assert_eq!(f.value(), 4.0 * 5.0 + 15.0);
        assert_eq!(f.grad(0), 2.0 * 2.0 * 5.0);
        assert_eq!(f.grad(1), 4.0 + 3.0);
        assert_eq!(f.hess(0, 0), 10.0);
        assert_eq!(f.hess(0, 1), 4.0);
        assert_eq!(f.hess(1, 0), 4.0);
        assert_eq!(f.third(0, 0, 1), 2.0);
        assert_eq!(f.third(1, 0, 0), 2.0);
        assert_eq!(f.third(0, 0, 0), 0.0);
    }

    #[test]
    fn derivative_shifts_order() {
        let f = poly(2, 3, &[2.0, 5.0]);
        let d = f.derivative(0);
        assert_eq!(d.order(), 2);
        assert_eq!(d.value(), f.grad(0));
        assert_eq!(d.grad(1), f.hess(0, 1));
        assert_eq!(d.hess(0, 1), f.third(0, 0, 1));
    }

    #[test]
    fn reciprocal_of_variable() {
        let x = Jet::variable(1, 3, 0, 2.0);
        let r = x.recip();
        assert!((r.value() - 0.5).abs() < 1e-15);
        assert!((r.grad(0) + 0.25).abs() < 1e-15);
        assert!((r.hess(0, 0) - 0.25).abs() < 1e-15);
        assert!((r.third(0, 0, 0) + 6.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn extend_vars_keeps_old_block() {
        let f = poly(2, 3, &[1.0, -1.0]);
        let g = f.extend_vars(3);
        assert_eq!(g.hess(0, 1), f.hess(0, 1));
        assert_eq!(g.hess(2, 0), 0.0);
        assert_eq!(g.third(0, 0, 1), f.third(0, 0, 1));
        assert_eq!(g.third(2, 0, 1), 0.0);
    }
}
