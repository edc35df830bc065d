//! Truncated multivariate Taylor polynomials ("jets").
//!
//! A jet represents `f(x0 + d) = sum_alpha c_alpha d^alpha` for all multi-indices with
//! `|alpha| <= valid`. Products are truncated at the smaller validity of the operands
//! and each partial derivative lowers validity by one, so every coefficient that is
//! kept is exact up to roundoff.

use std::sync::Arc;

/// Monomial tables shared by all jets in `nvars` variables up to total degree `degree`.
#[derive(Debug)]
pub struct JetSpace {
    nvars: usize,
    degree: usize,
    exponents: Vec<Vec<u8>>,
    /// `count_upto[d]` = number of monomials of degree `<= d`.
    count_upto: Vec<usize>,
    /// `(a, b, out)` sorted by degree of `out`.
    mul_table: Vec<(u32, u32, u32)>,
    /// `mul_upto[d]` = number of table entries whose product has degree `<= d`.
    mul_upto: Vec<usize>,
    /// Per variable: `(src, dst, factor)` sorted by degree of `dst`.
    deriv_tables: Vec<Vec<(u32, u32, f64)>>,
    deriv_upto: Vec<Vec<usize>>,
}

impl JetSpace {
    pub fn new(nvars: usize, degree: usize) -> Arc<Self> {
        let mut exponents: Vec<Vec<u8>> = Vec::new();
        let mut count_upto = Vec::with_capacity(degree + 1);
        for d in 0..=degree {
            let mut cur = vec![0u8; nvars];
            push_compositions(nvars, d, 0, &mut cur, &mut exponents);
            count_upto.push(exponents.len());
        }
        let deg_of = |e: &[u8]| e.iter().map(|&v| v as usize).sum::<usize>();
        let index: std::collections::HashMap<Vec<u8>, usize> =
            exponents.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();

        let mut mul_table = Vec::new();
        for (ia, ea) in exponents.iter().enumerate() {
            for (ib, eb) in exponents.iter().enumerate() {
                if deg_of(ea) + deg_of(eb) > degree {
                    continue;
                }
                let sum: Vec<u8> = ea.iter().zip(eb).map(|(x, y)| x + y).collect();
                mul_table.push((ia as u32, ib as u32, index[&sum] as u32));
            }
        }
        mul_table.sort_by_key(|&(_, _, o)| (deg_of(&exponents[o as usize]), o));
        let mut mul_upto = vec![0; degree + 1];
        for d in 0..=degree {
            mul_upto[d] = mul_table.iter().filter(|&&(_, _, o)| deg_of(&exponents[o as usize]) <= d).count();
        }

        let mut deriv_tables = Vec::with_capacity(nvars);
        let mut deriv_upto = Vec::with_capacity(nvars);
        for a in 0..nvars {
            let mut t = Vec::new();
            for (i, e) in exponents.iter().enumerate() {
                if e[a] == 0 {
                    continue;
                }
                let mut dst = e.clone();
                dst[a] -= 1;
                t.push((i as u32, index[&dst] as u32, e[a] as f64));
            }
            t.sort_by_key(|&(_, d, _)| (deg_of(&exponents[d as usize]), d));
            let upto: Vec<usize> = (0..=degree)
                .map(|d| t.iter().filter(|&&(_, dst, _)| deg_of(&exponents[dst as usize]) <= d).count())
                .collect();
            deriv_tables.push(t);
            deriv_upto.push(upto);
        }
        Arc::new(Self { nvars, degree, exponents, count_upto, mul_table, mul_upto, deriv_tables, deriv_upto })
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn exponents(&self, idx: usize) -> &[u8] {
        &self.exponents[idx]
    }

    pub fn len_upto(&self, d: usize) -> usize {
        self.count_upto[d]
    }

    pub fn constant(&self, value: f64) -> Jet {
        let mut c = vec![0.0; self.count_upto[self.degree]];
        c[0] = value;
        Jet { coeffs: c, valid: self.degree }
    }

    pub fn zero(&self) -> Jet {
        self.constant(0.0)
    }

    /// The affine jet `x0[a] + d_a`.
    pub fn variable(&self, a: usize, x0: f64) -> Jet {
        let mut j = self.constant(x0);
        if self.degree >= 1 {
            j.coeffs[1 + a] = 1.0;
        }
        j
    }

    pub fn add(&self, a: &Jet, b: &Jet) -> Jet {
        let valid = a.valid.min(b.valid);
        let len = self.count_upto[valid];
        Jet { coeffs: (0..len).map(|i| a.coeffs[i] + b.coeffs[i]).collect(), valid }
    }

    pub fn sub(&self, a: &Jet, b: &Jet) -> Jet {
        let valid = a.valid.min(b.valid);
        let len = self.count_upto[valid];
        Jet { coeffs: (0..len).map(|i| a.coeffs[i] - b.coeffs[i]).collect(), valid }
    }

    /// `acc += c * b`, truncating `acc` to the common validity.
    pub fn add_scaled(&self, acc: &mut Jet, c: f64, b: &Jet) {
        if b.valid < acc.valid {
            acc.truncate(self, b.valid);
        }
        for (x, y) in acc.coeffs.iter_mut().zip(&b.coeffs) {
            *x += c * y;
        }
    }

    pub fn mul(&self, a: &Jet, b: &Jet) -> Jet {
        let valid = a.valid.min(b.valid);
        let mut out = vec![0.0; self.count_upto[valid]];
        for &(ia, ib, o) in &self.mul_table[..self.mul_upto[valid]] {
            out[o as usize] += a.coeffs[ia as usize] * b.coeffs[ib as usize];
        }
        Jet { coeffs: out, valid }
    }

    /// `acc += c * a * b`.
    pub fn fma(&self, acc: &mut Jet, c: f64, a: &Jet, b: &Jet) {
        let valid = acc.valid.min(a.valid).min(b.valid);
        if valid < acc.valid {
            acc.truncate(self, valid);
        }
        for &(ia, ib, o) in &self.mul_table[..self.mul_upto[valid]] {
            acc.coeffs[o as usize] += c * a.coeffs[ia as usize] * b.coeffs[ib as usize];
        }
    }

    /// Partial derivative in variable `a`; validity drops by one.
    pub fn deriv(&self, f: &Jet, a: usize) -> Jet {
        assert!(f.valid >= 1, "derivative of a jet with no first-order information");
        let valid = f.valid - 1;
        let mut out = vec![0.0; self.count_upto[valid]];
        for &(src, dst, fac) in &self.deriv_tables[a][..self.deriv_upto[a][valid]] {
            out[dst as usize] += fac * f.coeffs[src as usize];
        }
        Jet { coeffs: out, valid }
    }

    /// `f(a0 + d) = sum_k derivs[k] / k! d^k` for the nilpotent part `d` of `a`.
    fn compose(&self, a: &Jet, derivs: &[f64]) -> Jet {
        let mut nil = a.clone();
        nil.coeffs[0] = 0.0;
        let mut out = Jet { coeffs: vec![0.0; a.coeffs.len()], valid: a.valid };
        out.coeffs[0] = derivs[0];
        let mut power = self.constant(1.0);
        power.truncate(self, a.valid);
        let mut fact = 1.0;
        for (k, &dk) in derivs.iter().enumerate().take(a.valid + 1).skip(1) {
            power = self.mul(&power, &nil);
            fact *= k as f64;
            self.add_scaled(&mut out, dk / fact, &power);
        }
        out
    }

    pub fn exp(&self, a: &Jet) -> Jet {
        let e = a.coeffs[0].exp();
        self.compose(a, &vec![e; a.valid + 1])
    }

    pub fn sin(&self, a: &Jet) -> Jet {
        let (s, c) = a.coeffs[0].sin_cos();
        let cycle = [s, c, -s, -c];
        let d: Vec<f64> = (0..=a.valid).map(|k| cycle[k % 4]).collect();
        self.compose(a, &d)
    }

    pub fn cos(&self, a: &Jet) -> Jet {
        let (s, c) = a.coeffs[0].sin_cos();
        let cycle = [c, -s, -c, s];
        let d: Vec<f64> = (0..=a.valid).map(|k| cycle[k % 4]).collect();
        self.compose(a, &d)
    }

    pub fn recip(&self, a: &Jet) -> Jet {
        let x = a.coeffs[0];
        assert!(x != 0.0, "reciprocal of a jet with zero value");
        // d^k/dx^k x^-1 = (-1)^k k! x^-(k+1)
        let mut d = Vec::with_capacity(a.valid + 1);
        let mut fact = 1.0;
        for k in 0..=a.valid {
            if k > 0 {
                fact *= k as f64;
            }
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            d.push(sign * fact / x.powi(k as i32 + 1));
        }
        self.compose(a, &d)
    }

    /// Real power `a^q` for `a0 > 0`.
    pub fn powf(&self, a: &Jet, q: f64) -> Jet {
        let x = a.coeffs[0];
        assert!(x > 0.0, "powf of a jet with non-positive value");
        let mut d = Vec::with_capacity(a.valid + 1);
        let mut c = 1.0;
        for k in 0..=a.valid {
            d.push(c * x.powf(q - k as f64));
            c *= q - k as f64;
        }
        self.compose(a, &d)
    }

    /// Inverse of a matrix of jets (row-major `n x n`), valid to the smallest operand validity.
    pub fn mat_inverse(&self, n: usize, m: &[Jet]) -> Vec<Jet> {
        let valid = m.iter().map(|j| j.valid).min().unwrap_or(self.degree);
        let m0 = nalgebra::DMatrix::from_fn(n, n, |i, j| m[i * n + j].coeffs[0]);
        let inv0 = m0.try_inverse().expect("jet matrix is singular at the expansion point");
        let inv0_jets: Vec<Jet> = (0..n * n)
            .map(|k| {
                let mut j = self.constant(inv0[(k / n, k % n)]);
                j.truncate(self, valid);
                j
            })
            .collect();
        // N = M - M0 (nilpotent), X = -M0^{-1} N, M^{-1} = sum_k X^k M0^{-1}
        let nil: Vec<Jet> = m
            .iter()
            .map(|j| {
                let mut j = j.clone();
                j.truncate(self, valid);
                j.coeffs[0] = 0.0;
                j
            })
            .collect();
        let x = self.mat_mul(n, &inv0_jets, &nil);
        let x: Vec<Jet> = x.iter().map(|j| j.scaled(-1.0)).collect();
        let mut term = inv0_jets.clone();
        let mut out = inv0_jets;
        for _ in 0..valid {
            term = self.mat_mul(n, &x, &term);
            for (o, t) in out.iter_mut().zip(&term) {
                self.add_scaled(o, 1.0, t);
            }
        }
        out
    }

    pub fn mat_mul(&self, n: usize, a: &[Jet], b: &[Jet]) -> Vec<Jet> {
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = self.zero();
                for k in 0..n {
                    self.fma(&mut acc, 1.0, &a[i * n + k], &b[k * n + j]);
                }
                out.push(acc);
            }
        }
        out
    }
}

fn push_compositions(nvars: usize, remaining: usize, pos: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if pos == nvars - 1 {
        cur[pos] = remaining as u8;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for k in (0..=remaining).rev() {
        cur[pos] = k as u8;
        push_compositions(nvars, remaining - k, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    coeffs: Vec<f64>,
    valid: usize,
}

impl Jet {
    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn valid(&self) -> usize {
        self.valid
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn scaled(&self, c: f64) -> Jet {
        Jet { coeffs: self.coeffs.iter().map(|v| c * v).collect(), valid: self.valid }
    }

    pub fn truncate(&mut self, space: &JetSpace, valid: usize) {
        if valid < self.valid {
            self.valid = valid;
            self.coeffs.truncate(space.len_upto(valid));
        }
    }

    /// Partial derivative `d^alpha f(x0)` read off the coefficients (`alpha! c_alpha`).
    pub fn partial(&self, space: &JetSpace, alpha: &[u8]) -> f64 {
        let idx = (0..self.coeffs.len())
            .find(|&i| space.exponents(i) == alpha)
            .expect("requested derivative exceeds jet validity");
        let fact: f64 = alpha.iter().map(|&k| (1..=k as u64).product::<u64>() as f64).product();
        fact * self.coeffs[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        let s = JetSpace::new(4, 6);
        assert_eq!(s.len_upto(6), 210);
        assert_eq!(s.len_upto(0), 1);
        assert_eq!(s.len_upto(1), 5);
        let s5 = JetSpace::new(5, 6);
        assert_eq!(s5.len_upto(6), 462);
    }

    #[test]
    fn derivatives_of_products() {
        let s = JetSpace::new(2, 5);
        let x = s.variable(0, 0.3);
        let y = s.variable(1, -0.7);
        // f = sin(x) * exp(x y)
        let f = s.mul(&s.sin(&x), &s.exp(&s.mul(&x, &y)));
        let (x0, y0) = (0.3f64, -0.7f64);
        let f0 = x0.sin() * (x0 * y0).exp();
        assert!((f.value() - f0).abs() < 1e-15);
        let fx = x0.cos() * (x0 * y0).exp() + y0 * f0;
        assert!((f.partial(&s, &[1, 0]) - fx).abs() < 1e-14);
        let fy = x0 * f0;
        assert!((f.partial(&s, &[0, 1]) - fy).abs() < 1e-14);
        let fyy = x0 * x0 * f0;
        assert!((f.partial(&s, &[0, 2]) - fyy).abs() < 1e-14);
        let dx = s.deriv(&f, 0);
        assert_eq!(dx.valid(), 4);
        assert!((dx.value() - fx).abs() < 1e-14);
        assert!((s.deriv(&s.deriv(&f, 1), 1).value() - fyy).abs() < 1e-14);
    }

    #[test]
    fn reciprocal_and_power() {
        let s = JetSpace::new(1, 6);
        let x = s.variable(0, 2.0);
        let r = s.recip(&x);
        // d^3/dx^3 (1/x) = -6/x^4
        assert!((r.partial(&s, &[3]) + 6.0 / 16.0).abs() < 1e-14);
        let p = s.powf(&x, 0.5);
        let d2 = -0.25 * 2f64.powf(-1.5);
        assert!((p.partial(&s, &[2]) - d2).abs() < 1e-14);
        let prod = s.mul(&r, &x);
        for (i, c) in prod.coeffs().iter().enumerate() {
            let e = if i == 0 { 1.0 } else { 0.0 };
            assert!((c - e).abs() < 1e-14);
        }
    }

    #[test]
    fn matrix_inverse() {
        let s = JetSpace::new(2, 4);
        let x = s.variable(0, 0.2);
        let y = s.variable(1, 0.1);
        let m = vec![
            s.add(&s.constant(2.0), &s.sin(&x)),
            s.mul(&x, &y),
            s.mul(&x, &y),
            s.add(&s.constant(1.5), &s.cos(&y)),
        ];
        let inv = s.mat_inverse(2, &m);
        let id = s.mat_mul(2, &m, &inv);
        for (k, j) in id.iter().enumerate() {
            let e = if k % 3 == 0 { 1.0 } else { 0.0 };
            for (i, c) in j.coeffs().iter().enumerate() {
                let want = if i == 0 { e } else { 0.0 };
                assert!((c - want).abs() < 1e-13, "entry {k} coeff {i}: {c}");
            }
        }
    }
}
