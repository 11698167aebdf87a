//! Measure distances: exact Wasserstein distances on point clouds, Gaussian KL,
//! and the two score-matching bound checks built on them.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffusion::{ou_coeffs, sm_loss, ExactScore, FiniteMeasure, McConfig};
use crate::error::{invalid, LabError, Result};
use crate::stats::Estimate;

/// Largest problem solved by exact assignment.
pub const EXACT_CAP: usize = 4096;

/// Minimum-cost perfect matching of a square cost matrix by shortest
/// augmenting paths with row/column potentials. Returns `assign[row] = col`
/// and the total cost. O(n³).
pub fn linear_assignment(cost: &DMatrix<f64>) -> Result<(Vec<usize>, f64)> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return invalid("assignment cost matrix must be square");
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return invalid("assignment costs must be finite");
    }
    // 1-based arrays: column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok((assign, total))
}

/// Coupling between two finite measures as `(i, j, mass)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Vec<(usize, usize, f64)>,
    /// `Σ mass · ‖aᵢ − bⱼ‖^p`.
    pub cost: f64,
}

impl TransportPlan {
    pub fn marginals(&self, na: usize, nb: usize) -> (Vec<f64>, Vec<f64>) {
        let mut ma = vec![0.0; na];
        let mut mb = vec![0.0; nb];
        for &(i, j, m) in &self.coupling {
            ma[i] += m;
            mb[j] += m;
        }
        (ma, mb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wasserstein {
    pub value: f64,
    pub plan: TransportPlan,
}

/// Smallest `N ≤ cap` making every weight an integer multiple of `1/N`.
fn common_denominator(weights: &[&[f64]], cap: usize) -> Option<usize> {
    let min_n = weights.iter().map(|w| w.len()).max().unwrap_or(1);
    (min_n..=cap).find(|&n| {
        weights.iter().all(|ws| {
            ws.iter().all(|w| {
                let k = w * n as f64;
                (k - k.round()).abs() < 1e-9 * n as f64
            })
        })
    })
}

/// Exact `W_p(a, b)` for `p ∈ {1, 2}` by linear assignment. Non-uniform
/// weights are handled by splitting each atom into equal-mass copies.
pub fn w_p(a: &FiniteMeasure, b: &FiniteMeasure, p: u32) -> Result<Wasserstein> {
    if p != 1 && p != 2 {
        return invalid(format!("p must be 1 or 2, got {p}"));
    }
    if a.dim() != b.dim() {
        return Err(LabError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let n = common_denominator(&[a.weights(), b.weights()], EXACT_CAP).ok_or(LabError::SizeCapExceeded {
        size: a.len().max(b.len()),
        cap: EXACT_CAP,
    })?;
    let expand = |m: &FiniteMeasure| -> Vec<usize> {
        let mut idx = Vec::with_capacity(n);
        for (i, w) in m.weights().iter().enumerate() {
            idx.extend(std::iter::repeat_n(i, (w * n as f64).round() as usize));
        }
        idx
    };
    let (ia, ib) = (expand(a), expand(b));
    if ia.len() != n || ib.len() != n {
        return Err(LabError::Numerical("mass splitting did not produce equal sizes".into()));
    }
    let cost = DMatrix::from_fn(n, n, |r, c| {
        let d = (&a.support()[ia[r]] - &b.support()[ib[c]]).norm();
        if p == 1 { d } else { d * d }
    });
    let (assign, total) = linear_assignment(&cost)?;
    let mass = 1.0 / n as f64;
    let mut merged: std::collections::BTreeMap<(usize, usize), f64> = Default::default();
    for (r, &c) in assign.iter().enumerate() {
        *merged.entry((ia[r], ib[c])).or_default() += mass;
    }
    let plan_cost = total * mass;
    Ok(Wasserstein {
        value: plan_cost.powf(1.0 / p as f64),
        plan: TransportPlan { coupling: merged.into_iter().map(|((i, j), m)| (i, j, m)).collect(), cost: plan_cost },
    })
}

/// `W_p` between two equal-size uniform clouds.
pub fn w_p_clouds(a: &[DVector<f64>], b: &[DVector<f64>], p: u32) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("cloud sizes differ: {} vs {}", a.len(), b.len()));
    }
    if a.len() > EXACT_CAP {
        return Err(LabError::SizeCapExceeded { size: a.len(), cap: EXACT_CAP });
    }
    Ok(w_p(&FiniteMeasure::uniform(a.to_vec())?, &FiniteMeasure::uniform(b.to_vec())?, p)?.value)
}

/// A Gaussian law `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(LabError::DimensionMismatch { expected: mean.len(), got: cov.nrows() });
        }
        Ok(Self { mean, cov })
    }

    /// Law at time t of the OU process started from this Gaussian.
    pub fn evolve(&self, t: f64) -> Result<Gaussian> {
        let oc = ou_coeffs(t)?;
        let k = self.mean.len();
        Ok(Gaussian {
            mean: &self.mean * oc.c,
            cov: &self.cov * (oc.c * oc.c) + DMatrix::identity(k, k) * oc.sigma2(),
        })
    }
}

fn cholesky(s: &DMatrix<f64>, label: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if (s - s.transpose()).amax() > 1e-12 * s.amax().max(1.0) {
        return Err(LabError::NotPositiveDefinite(format!("{label} is not symmetric")));
    }
    Cholesky::new(s.clone()).ok_or_else(|| LabError::NotPositiveDefinite(label.to_string()))
}

/// `KL(N(m1,S1) ‖ N(m2,S2))`.
pub fn kl_gaussian(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let k = m1.len();
    if m2.len() != k || s1.shape() != (k, k) || s2.shape() != (k, k) {
        return Err(LabError::DimensionMismatch { expected: k, got: m2.len() });
    }
    let c1 = cholesky(s1, "first covariance")?;
    let c2 = cholesky(s2, "second covariance")?;
    let logdet = |c: &Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let tr = c2.solve(s1).trace();
    let dm = m2 - m1;
    let quad = dm.dot(&c2.solve(&dm));
    Ok(0.5 * (tr + quad - k as f64 + logdet(&c2) - logdet(&c1)))
}

pub fn kl(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    kl_gaussian(&p.mean, &p.cov, &q.mean, &q.cov)
}

/// `E_P ‖∇log p − ∇log q‖²` for Gaussians.
pub fn relative_fisher(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    let cp = cholesky(&p.cov, "first covariance")?;
    let cq = cholesky(&q.cov, "second covariance")?;
    let a = cq.inverse() - cp.inverse();
    let b = cq.solve(&(&p.mean - &q.mean));
    Ok((&a * &p.cov * a.transpose()).trace() + b.norm_squared())
}

/// Time derivative of `KL(P_t ‖ Q_t)` against the relative Fisher information.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlDissipation {
    /// Centered finite difference of the KL in t.
    pub lhs: f64,
    /// `−2 · E_{P_t}‖∇log p_t − ∇log q_t‖²`.
    pub rhs: f64,
    pub fisher: f64,
    pub gap: f64,
}

impl KlDissipation {
    /// `| |lhs| − 2·fisher | / (2·fisher)`.
    pub fn magnitude_rel_error(&self) -> f64 {
        rel(self.lhs.abs(), 2.0 * self.fisher)
    }

    /// `| |lhs| − fisher | / fisher`.
    pub fn unit_rel_error(&self) -> f64 {
        rel(self.lhs.abs(), self.fisher)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}

pub fn kl_dissipation_check(p: &Gaussian, q: &Gaussian, t: f64, dt: f64) -> Result<KlDissipation> {
    if !(dt > 0.0 && t - dt >= 0.0) {
        return invalid(format!("need 0 < dt ≤ t, got t={t}, dt={dt}"));
    }
    let k = |s: f64| kl(&p.evolve(s)?, &q.evolve(s)?);
    let lhs = (k(t + dt)? - k(t - dt)?) / (2.0 * dt);
    let fisher = relative_fisher(&p.evolve(t)?, &q.evolve(t)?)?;
    let rhs = -2.0 * fisher;
    Ok(KlDissipation { lhs, rhs, fisher, gap: lhs - rhs })
}

/// Score-matching loss between two exact scores against `W₂²·c²/(4σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmlBound {
    pub loss: Estimate,
    pub w2: f64,
    pub bound: f64,
    pub ratio: f64,
    pub ratio_stderr: f64,
}

/// `∫_{t_min}^{t_max} E_{P_t}‖s_P − s_Q‖² dt` versus `W₂²(P,Q) c²_{t_min}/(4σ²_{t_min})`.
pub fn sml_bound_check(p: &FiniteMeasure, q: &FiniteMeasure, t_min: f64, t_max: f64, mc: &McConfig) -> Result<SmlBound> {
    let loss = sm_loss(&ExactScore::new(q.clone()), p, t_min, t_max, mc)?;
    let w2 = w_p(p, q, 2)?.value;
    let oc = ou_coeffs(t_min)?;
    let bound = w2 * w2 * oc.c * oc.c / (4.0 * oc.sigma2());
    let (ratio, ratio_stderr) = if bound > 0.0 {
        (loss.value / bound, loss.stderr / bound)
    } else {
        (if loss.value.abs() <= loss.stderr.max(1e-300) { 0.0 } else { f64::INFINITY }, 0.0)
    };
    Ok(SmlBound { loss, w2, bound, ratio, ratio_stderr })
}
