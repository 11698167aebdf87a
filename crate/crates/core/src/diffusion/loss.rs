//! Score-matching losses as Monte Carlo time integrals.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{exact_score, forward_from, ou_coeffs, FiniteMeasure, ScoreField};
use crate::error::{invalid, LabError, Result};
use crate::rng::{self, LabRng};
use crate::stats::{Accumulator, Estimate};

/// Monte Carlo settings for loss integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    /// Noise draws per (sample, time node).
    pub trials: usize,
    /// Midpoint nodes per doubling interval `[t, 2t]`.
    pub nodes_per_doubling: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { trials: 64, nodes_per_doubling: 16, seed: 0 }
    }
}

impl McConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Nodes and weights of a time quadrature rule.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TimeQuadrature {
    /// Split `[a, b]` into `[a, 2a], [2a, 4a], …` (the last piece truncated at `b`)
    /// and use the midpoint rule with `per_doubling` nodes on each piece.
    pub fn geometric(a: f64, b: f64, per_doubling: usize) -> Result<Self> {
        if !(a > 0.0 && b > a && b.is_finite()) {
            return invalid(format!("quadrature interval [{a}, {b}] must satisfy 0 < a < b"));
        }
        if per_doubling == 0 {
            return invalid("nodes_per_doubling must be at least 1");
        }
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut lo = a;
        while lo < b {
            let hi = (2.0 * lo).min(b);
            let h = (hi - lo) / per_doubling as f64;
            for k in 0..per_doubling {
                nodes.push(lo + (k as f64 + 0.5) * h);
                weights.push(h);
            }
            lo = hi;
        }
        Ok(Self { nodes, weights })
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(t, w)| w * f(*t)).sum()
    }
}

/// `(1/outer) Σ_o ∫ E[f(o, t, ·)] dt` with per-cell substreams.
fn mc_integrate<F>(q: &TimeQuadrature, outer: usize, trials: usize, seed: u64, f: F) -> Result<Estimate>
where
    F: Fn(usize, f64, &mut LabRng) -> Result<f64> + Sync,
{
    if outer == 0 {
        return Err(LabError::Empty("sample set".into()));
    }
    if trials == 0 {
        return invalid("mc trials must be at least 1");
    }
    let nn = q.nodes.len();
    let cells: Vec<(f64, f64)> = (0..outer * nn)
        .into_par_iter()
        .map(|cell| {
            let (o, j) = (cell / nn, cell % nn);
            let mut rng = rng::substream(seed, cell as u64);
            let mut acc = Accumulator::default();
            for _ in 0..trials {
                acc.push(f(o, q.nodes[j], &mut rng)?);
            }
            Ok((acc.mean(), acc.variance()))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / outer as f64;
    let mut value = 0.0;
    let mut var = 0.0;
    for j in 0..nn {
        let w = q.weights[j];
        let means: Vec<f64> = (0..outer).map(|o| cells[o * nn + j].0).collect();
        value += w * scale * means.iter().sum::<f64>();
        if trials > 1 {
            var += w * w * scale * scale * (0..outer).map(|o| cells[o * nn + j].1).sum::<f64>() / trials as f64;
        } else {
            let mut acc = Accumulator::default();
            means.iter().for_each(|m| acc.push(*m));
            var += w * w * acc.variance() * scale;
        }
    }
    Ok(Estimate::new(value, var.sqrt()))
}

/// DSM residual `‖ŝ(t, c_t y + σ_t z) + z/σ_t‖²`.
fn dsm_term(score: &dyn ScoreField, y: &DVector<f64>, t: f64, rng: &mut LabRng) -> Result<f64> {
    let oc = ou_coeffs(t)?;
    let z = rng::standard_normal(rng, y.len());
    let x = y * oc.c + &z * oc.sigma;
    let s = score.eval(t, &x)?;
    Ok((s + z / oc.sigma).norm_squared())
}

fn dsm_pair(a: &dyn ScoreField, b: &dyn ScoreField, y: &DVector<f64>, t: f64, rng: &mut LabRng) -> Result<f64> {
    let oc = ou_coeffs(t)?;
    let z = rng::standard_normal(rng, y.len());
    let x = y * oc.c + &z * oc.sigma;
    let r = &z / oc.sigma;
    Ok((a.eval(t, &x)? + &r).norm_squared() - (b.eval(t, &x)? + &r).norm_squared())
}

/// `ℓ_y(ŝ, a, b) = ∫_a^b E‖ŝ(t, c_t y + σ_t Z) + Z/σ_t‖² dt`.
pub fn dsm_loss(score: &dyn ScoreField, y: &DVector<f64>, a: f64, b: f64, mc: &McConfig) -> Result<Estimate> {
    let q = TimeQuadrature::geometric(a, b, mc.nodes_per_doubling)?;
    mc_integrate(&q, 1, mc.trials, mc.seed, |_, t, rng| dsm_term(score, y, t, rng))
}

/// `ℓ_y(ŝ₁) − ℓ_y(ŝ₂)` with shared noise.
pub fn dsm_loss_diff(
    s1: &dyn ScoreField,
    s2: &dyn ScoreField,
    y: &DVector<f64>,
    a: f64,
    b: f64,
    mc: &McConfig,
) -> Result<Estimate> {
    let q = TimeQuadrature::geometric(a, b, mc.nodes_per_doubling)?;
    mc_integrate(&q, 1, mc.trials, mc.seed, |_, t, rng| dsm_pair(s1, s2, y, t, rng))
}

/// `R_Y(ŝ) = (1/n) Σ_i ℓ_{yᵢ}(ŝ)`, shared time nodes, independent noise.
pub fn empirical_risk(
    score: &dyn ScoreField,
    samples: &[DVector<f64>],
    a: f64,
    b: f64,
    mc: &McConfig,
) -> Result<Estimate> {
    let q = TimeQuadrature::geometric(a, b, mc.nodes_per_doubling)?;
    mc_integrate(&q, samples.len(), mc.trials, mc.seed, |o, t, rng| dsm_term(score, &samples[o], t, rng))
}

pub fn empirical_risk_diff(
    s1: &dyn ScoreField,
    s2: &dyn ScoreField,
    samples: &[DVector<f64>],
    a: f64,
    b: f64,
    mc: &McConfig,
) -> Result<Estimate> {
    let q = TimeQuadrature::geometric(a, b, mc.nodes_per_doubling)?;
    mc_integrate(&q, samples.len(), mc.trials, mc.seed, |o, t, rng| dsm_pair(s1, s2, &samples[o], t, rng))
}

/// `∫_a^b E‖ŝ(t, X(t)) − s(t, X(t))‖² dt` with `X(0) ∼ μ`.
pub fn sm_loss(score: &dyn ScoreField, truth: &FiniteMeasure, a: f64, b: f64, mc: &McConfig) -> Result<Estimate> {
    let q = TimeQuadrature::geometric(a, b, mc.nodes_per_doubling)?;
    let sampler = truth.sampler();
    mc_integrate(&q, 1, mc.trials, mc.seed, |_, t, rng| {
        let fs = forward_from(truth, sampler.sample(rng), ou_coeffs(t)?, rng);
        Ok((score.eval(t, &fs.xt)? - exact_score(truth, t, &fs.xt)?).norm_squared())
    })
}

pub fn sm_loss_diff(
    s1: &dyn ScoreField,
    s2: &dyn ScoreField,
    truth: &FiniteMeasure,
    a: f64,
    b: f64,
    mc: &McConfig,
) -> Result<Estimate> {
    let q = TimeQuadrature::geometric(a, b, mc.nodes_per_doubling)?;
    let sampler = truth.sampler();
    mc_integrate(&q, 1, mc.trials, mc.seed, |_, t, rng| {
        let fs = forward_from(truth, sampler.sample(rng), ou_coeffs(t)?, rng);
        let s = exact_score(truth, t, &fs.xt)?;
        Ok((s1.eval(t, &fs.xt)? - &s).norm_squared() - (s2.eval(t, &fs.xt)? - &s).norm_squared())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ExactScore, ZeroScore};

    #[test]
    fn geometric_nodes_cover_interval() {
        let q = TimeQuadrature::geometric(0.01, 1.0, 16).unwrap();
        let total: f64 = q.weights.iter().sum();
        assert!((total - 0.99).abs() < 1e-12);
        assert_eq!(q.nodes.len(), 7 * 16);
        assert!(q.nodes.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        let y = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let s = ExactScore::new(FiniteMeasure::dirac(y.clone()));
        let l = dsm_loss(&s, &y, 0.01, 1.0, &McConfig::default()).unwrap();
        assert!(l.value.abs() < 1e-12, "{l:?}");
    }

    #[test]
    fn zero_score_matches_closed_form() {
        let d = 5;
        let (a, b) = (0.05, 2.0);
        let s = ZeroScore { dim: d };
        let l = dsm_loss(&s, &DVector::zeros(d), a, b, &McConfig { trials: 400, ..Default::default() }).unwrap();
        // ∫ D/σ_t² dt = (D/2)[ln(e^{2t} − 1)]_a^b.
        let exact = 0.5 * d as f64 * (((2.0 * b).exp_m1()).ln() - ((2.0 * a).exp_m1()).ln());
        assert!((l.value - exact).abs() < 4.0 * l.stderr + 2e-3 * exact, "{l:?} vs {exact}");
    }

    #[test]
    fn risk_of_duplicates_equals_single() {
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let s = ExactScore::new(FiniteMeasure::dirac(DVector::from_vec(vec![0.0, 1.0])));
        let mc = McConfig { trials: 50, seed: 3, ..Default::default() };
        let one = empirical_risk(&s, std::slice::from_ref(&y), 0.1, 1.0, &mc).unwrap();
        let single = dsm_loss(&s, &y, 0.1, 1.0, &mc).unwrap();
        assert_eq!(one.value, single.value);
        let two = empirical_risk(&s, &[y.clone(), y.clone()], 0.1, 1.0, &mc).unwrap();
        assert!((two.value - one.value).abs() < 4.0 * (one.stderr + two.stderr), "{one:?} {two:?}");
    }
}
