//! Forward OU process and exact scores of finitely supported measures.
//!
//! For `dX = −X dt + √2 dB` started at `μ`, the time-t law is the Gaussian
//! mixture `Σ wᵢ N(c_t yᵢ, σ_t² I)` with `c_t = e^{−t}`, `σ_t² = 1 − e^{−2t}`.
//! All mixture sums are done in the log domain.

mod loss;
mod measure;

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{LabError, Result};
use crate::rng;

pub use loss::{
    dsm_loss, dsm_loss_diff, empirical_risk, empirical_risk_diff, sm_loss, sm_loss_diff, McConfig, TimeQuadrature,
};
pub use measure::{FiniteMeasure, MeasureSampler};

/// Scores are refused below this time.
pub const MIN_SCORE_TIME: f64 = 1e-8;

/// `(t, c_t, σ_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OUCoeffs {
    pub t: f64,
    pub c: f64,
    pub sigma: f64,
}

impl OUCoeffs {
    pub fn sigma2(&self) -> f64 {
        self.sigma * self.sigma
    }
}

pub fn ou_coeffs(t: f64) -> Result<OUCoeffs> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(LabError::TimeOutOfRange { t, lo: 0.0, hi: f64::INFINITY });
    }
    // -expm1(-2t) keeps full precision for small t.
    Ok(OUCoeffs { t, c: (-t).exp(), sigma: (-(-2.0 * t).exp_m1()).sqrt() })
}

/// `σ_t²` without the square root round trip.
pub fn sigma2(t: f64) -> f64 {
    -(-2.0 * t).exp_m1()
}

fn score_coeffs(t: f64) -> Result<OUCoeffs> {
    if !(t >= MIN_SCORE_TIME) || !t.is_finite() {
        return Err(LabError::TimeOutOfRange { t, lo: MIN_SCORE_TIME, hi: f64::INFINITY });
    }
    ou_coeffs(t)
}

/// One coupled forward draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSample {
    pub index: usize,
    pub x0: DVector<f64>,
    pub z: DVector<f64>,
    pub xt: DVector<f64>,
}

pub fn forward_sample<R: Rng + ?Sized>(mu: &FiniteMeasure, t: f64, rng: &mut R) -> Result<ForwardSample> {
    let oc = ou_coeffs(t)?;
    let index = mu.sample_index(rng);
    Ok(forward_from(mu, index, oc, rng))
}

pub(crate) fn forward_from<R: Rng + ?Sized>(mu: &FiniteMeasure, index: usize, oc: OUCoeffs, rng: &mut R) -> ForwardSample {
    let x0 = mu.support()[index].clone();
    let z = rng::standard_normal(rng, mu.dim());
    let xt = if oc.t == 0.0 { x0.clone() } else { &x0 * oc.c + &z * oc.sigma };
    ForwardSample { index, x0, z, xt }
}

/// Posterior law of `X(0)` given `X(t) = x` over the support of `μ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights {
    pub weights: Vec<f64>,
    /// Natural logs of `weights` (−∞ for zero prior weight).
    pub log_weights: Vec<f64>,
}

fn log_mixture_terms(mu: &FiniteMeasure, oc: OUCoeffs, x: &DVector<f64>) -> Result<Vec<f64>> {
    if x.len() != mu.dim() {
        return Err(LabError::DimensionMismatch { expected: mu.dim(), got: x.len() });
    }
    let inv = 1.0 / (2.0 * oc.sigma2());
    Ok(mu
        .support()
        .iter()
        .zip(mu.weights())
        .map(|(y, w)| {
            let mut d2 = 0.0;
            for (xi, yi) in x.iter().zip(y.iter()) {
                let r = xi - oc.c * yi;
                d2 += r * r;
            }
            w.ln() - d2 * inv
        })
        .collect())
}

fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(LabError::Numerical("all mixture exponents are -inf".into()));
    }
    Ok(m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln())
}

pub fn posterior_weights(mu: &FiniteMeasure, t: f64, x: &DVector<f64>) -> Result<PosteriorWeights> {
    let oc = score_coeffs(t)?;
    posterior_at(mu, oc, x)
}

fn posterior_at(mu: &FiniteMeasure, oc: OUCoeffs, x: &DVector<f64>) -> Result<PosteriorWeights> {
    let mut logs = log_mixture_terms(mu, oc, x)?;
    let lse = log_sum_exp(&logs)?;
    logs.iter_mut().for_each(|l| *l -= lse);
    Ok(PosteriorWeights { weights: logs.iter().map(|l| l.exp()).collect(), log_weights: logs })
}

/// `log p(t, x)` of the normalized mixture density.
pub fn log_density(mu: &FiniteMeasure, t: f64, x: &DVector<f64>) -> Result<f64> {
    let oc = score_coeffs(t)?;
    let lse = log_sum_exp(&log_mixture_terms(mu, oc, x)?)?;
    Ok(lse - 0.5 * mu.dim() as f64 * (2.0 * std::f64::consts::PI * oc.sigma2()).ln())
}

/// `e(t, x) = Σ p(yᵢ|t,x) yᵢ`.
pub fn cond_expectation(mu: &FiniteMeasure, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    let pw = posterior_weights(mu, t, x)?;
    Ok(weighted_mean(mu, &pw.weights))
}

fn weighted_mean(mu: &FiniteMeasure, p: &[f64]) -> DVector<f64> {
    let mut e = DVector::zeros(mu.dim());
    for (y, pi) in mu.support().iter().zip(p) {
        if *pi > 0.0 {
            e.axpy(*pi, y, 1.0);
        }
    }
    e
}

/// `s(t, x) = (c_t e(t,x) − x)/σ_t²`.
pub fn exact_score(mu: &FiniteMeasure, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    let oc = score_coeffs(t)?;
    let pw = posterior_at(mu, oc, x)?;
    let e = weighted_mean(mu, &pw.weights);
    Ok((e * oc.c - x) / oc.sigma2())
}

/// Exact score of the uniform empirical measure on `samples`.
pub fn empirical_score(samples: &[DVector<f64>], t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    exact_score(&FiniteMeasure::uniform(samples.to_vec())?, t, x)
}

/// A time-indexed vector field `s(t, x)`.
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    /// Closed interval of times where evaluation is valid.
    fn time_range(&self) -> (f64, f64) {
        (MIN_SCORE_TIME, f64::INFINITY)
    }

    fn eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn name(&self) -> &str;

    fn check_time(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.time_range();
        if !(t >= lo && t <= hi) {
            return Err(LabError::TimeOutOfRange { t, lo, hi });
        }
        Ok(())
    }
}

impl<S: ScoreField + ?Sized> ScoreField for Arc<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn time_range(&self) -> (f64, f64) {
        (**self).time_range()
    }
    fn eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).eval(t, x)
    }
    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Exact score of a finite measure.
#[derive(Debug, Clone)]
pub struct ExactScore {
    mu: FiniteMeasure,
}

impl ExactScore {
    pub fn new(mu: FiniteMeasure) -> Self {
        Self { mu }
    }

    /// Score of the uniform empirical measure on `samples`.
    pub fn empirical(samples: Vec<DVector<f64>>) -> Result<Self> {
        Ok(Self { mu: FiniteMeasure::uniform(samples)? })
    }

    pub fn measure(&self) -> &FiniteMeasure {
        &self.mu
    }
}

impl ScoreField for ExactScore {
    fn dim(&self) -> usize {
        self.mu.dim()
    }
    fn eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        exact_score(&self.mu, t, x)
    }
    fn name(&self) -> &str {
        "exact"
    }
}

/// `ŝ ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroScore {
    pub dim: usize,
}

impl ScoreField for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, _x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_time(t)?;
        Ok(DVector::zeros(self.dim))
    }
    fn name(&self) -> &str {
        "zero"
    }
}

/// Wrap a closure as a score field.
pub struct FnScore<F> {
    dim: usize,
    name: String,
    f: F,
}

impl<F> FnScore<F>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync,
{
    pub fn new(dim: usize, name: impl Into<String>, f: F) -> Self {
        Self { dim, name: name.into(), f }
    }
}

impl<F> ScoreField for FnScore<F>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_time(t)?;
        Ok((self.f)(t, x))
    }
    fn name(&self) -> &str {
        &self.name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 })
    }

    #[test]
    fn coefficients() {
        let a = ou_coeffs(0.0).unwrap();
        assert_eq!((a.c, a.sigma), (1.0, 0.0));
        let b = ou_coeffs(2f64.ln()).unwrap();
        assert!((b.c - 0.5).abs() < 1e-15 && (b.sigma - 0.75f64.sqrt()).abs() < 1e-15);
        let c = ou_coeffs(50.0).unwrap();
        assert!((c.c - 1.9287e-22).abs() < 1e-25 && (c.sigma - 1.0).abs() < 1e-15);
        assert!(ou_coeffs(-1.0).is_err());
    }

    #[test]
    fn two_point_posterior() {
        let mu = FiniteMeasure::uniform(vec![DVector::zeros(3), e(0, 3)]).unwrap();
        let t = 2f64.ln();
        let pw = posterior_weights(&mu, t, &(e(0, 3) * 0.5)).unwrap();
        let z = (1.0f64 / 6.0).exp();
        let expect = [1.0 / (1.0 + z), z / (1.0 + z)];
        assert!((pw.weights[0] - expect[0]).abs() < 1e-12);
        assert!((pw.weights[1] - expect[1]).abs() < 1e-12);
        assert!((pw.weights[0] - 0.4584).abs() < 1e-4);
    }

    #[test]
    fn point_mass_score() {
        let mu = FiniteMeasure::dirac(e(0, 2));
        let s = exact_score(&mu, 2f64.ln(), &DVector::zeros(2)).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-14 && s[1].abs() < 1e-15);
        assert!(exact_score(&mu, 0.0, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn symmetric_pair_cancels() {
        let mu = FiniteMeasure::uniform(vec![e(1, 3), -e(1, 3)]).unwrap();
        let s = exact_score(&mu, 0.4, &DVector::zeros(3)).unwrap();
        assert!(s.norm() < 1e-15);
        let m = cond_expectation(&FiniteMeasure::uniform(vec![DVector::zeros(2), e(0, 2)]).unwrap(), 0.3, &(e(0, 2) * 0.3f64.exp().recip() * 0.5)).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn extreme_exponents_stay_finite() {
        let mu = FiniteMeasure::uniform(vec![DVector::from_element(4, 30.0), DVector::from_element(4, -30.0)]).unwrap();
        let s = exact_score(&mu, 1e-6, &DVector::from_element(4, 1.0)).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
    }
}
