//! Monomials in several variables and their derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// `z^S = Π z_j^{S_j}`.
pub fn monomial(z: &[f64], exps: &[u32]) -> f64 {
    z.iter().zip(exps).map(|(v, &e)| v.powi(e as i32)).product()
}

/// Gradient of `z^S`.
pub fn monomial_grad(z: &[f64], exps: &[u32]) -> DVector<f64> {
    DVector::from_fn(z.len(), |j, _| {
        if exps[j] == 0 {
            return 0.0;
        }
        let mut v = exps[j] as f64 * z[j].powi(exps[j] as i32 - 1);
        for (k, (&zk, &ek)) in z.iter().zip(exps).enumerate() {
            if k != j {
                v *= zk.powi(ek as i32);
            }
        }
        v
    })
}

/// Hessian of `z^S`.
pub fn monomial_hessian(z: &[f64], exps: &[u32]) -> DMatrix<f64> {
    let d = z.len();
    let mut h = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let mut e = exps.to_vec();
            let mut coef = 1.0;
            for idx in [a, b] {
                if e[idx] == 0 {
                    coef = 0.0;
                    break;
                }
                coef *= e[idx] as f64;
                e[idx] -= 1;
            }
            if coef != 0.0 {
                let v = coef * monomial(z, &e);
                h[(a, b)] = v;
                h[(b, a)] = v;
            }
        }
    }
    h
}

/// One term `coeffs · z^S` of a vector-valued polynomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub exponents: Vec<u32>,
    pub coeffs: Vec<f64>,
}

impl PolyTerm {
    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }
}

/// Vector-valued polynomial `f: ℝ^d → ℝ^m` given as a sum of terms.
#[derive(Debug, Clone, PartialEq)]
pub struct VecPoly {
    pub d: usize,
    pub m: usize,
    pub terms: Vec<PolyTerm>,
}

impl VecPoly {
    pub fn eval(&self, z: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for t in &self.terms {
            let v = monomial(z, &t.exponents);
            for (o, c) in out.iter_mut().zip(&t.coeffs) {
                *o += c * v;
            }
        }
        out
    }

    /// Jacobian, `m × d`.
    pub fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.m, self.d);
        for t in &self.terms {
            let g = monomial_grad(z, &t.exponents);
            for (r, c) in t.coeffs.iter().enumerate() {
                for k in 0..self.d {
                    j[(r, k)] += c * g[k];
                }
            }
        }
        j
    }

    /// Second derivative contracted with direction `a` twice: `Σ_{ab} ∂_a∂_b f · a_a a_b`.
    pub fn second_directional(&self, z: &[f64], a: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for t in &self.terms {
            let h = monomial_hessian(z, &t.exponents);
            let q = (a.transpose() * &h * a)[(0, 0)];
            for (o, c) in out.iter_mut().zip(&t.coeffs) {
                *o += c * q;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_finite_differences() {
        let z = [0.3, -0.7, 1.1];
        let e = [2u32, 1, 3];
        let g = monomial_grad(&z, &e);
        let h = monomial_hessian(&z, &e);
        let step = 1e-6;
        for j in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += step;
            zm[j] -= step;
            let fd = (monomial(&zp, &e) - monomial(&zm, &e)) / (2.0 * step);
            assert!((fd - g[j]).abs() < 1e-7);
            let gp = monomial_grad(&zp, &e);
            let gm = monomial_grad(&zm, &e);
            for k in 0..3 {
                let fd2 = (gp[k] - gm[k]) / (2.0 * step);
                assert!((fd2 - h[(j, k)]).abs() < 1e-6);
            }
        }
    }
}
