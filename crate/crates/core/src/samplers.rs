//! Reverse-process simulation over κ-decreasing time partitions.
//!
//! Time runs forward in the reverse process: step k goes from `t_k` to
//! `t_{k+1}` and uses the score at remaining time `T̄ − t_k`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, ou_coeffs, sigma2, FiniteMeasure, ScoreField};
use crate::error::{invalid, LabError, Result};
use crate::linalg::span_basis;
use crate::metrics::w_p_clouds;
use crate::registry::Registry;
use crate::rng;

const PARTITION_TOL: f64 = 1e-12;

/// Nodes `0 = t_0 < … < t_K` with horizon `T̄` and early-stop remainder `T̄ − t_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePartition {
    nodes: Vec<f64>,
    kappa: f64,
    t_bar: f64,
}

impl TimePartition {
    /// Validate arbitrary nodes against the κ-decreasing definition.
    pub fn new(nodes: Vec<f64>, kappa: f64, t_bar: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa < 0.25) {
            return invalid(format!("kappa must lie in (0, 1/4), got {kappa}"));
        }
        if nodes.len() < 2 || nodes[0] != 0.0 {
            return invalid("partition needs at least two nodes starting at 0");
        }
        let p = Self { nodes, kappa, t_bar };
        if *p.nodes.last().unwrap() >= t_bar {
            return invalid("last node must stay below the horizon");
        }
        if let Some(k) = p.first_violation() {
            return invalid(format!("partition is not {kappa}-decreasing at step {k}"));
        }
        Ok(p)
    }

    /// `t_k = κk` for `k ≤ L` with `T̄ = κL + 1`, then `T̄ − t_{L+m} = (1+κ)^{−m}`
    /// for `m = 1…K−L`.
    pub fn make_schedule(kappa: f64, l: usize, k: usize) -> Result<Self> {
        if l < 1 || k <= l {
            return invalid(format!("need K > L ≥ 1, got L={l}, K={k}"));
        }
        let t_bar = kappa * l as f64 + 1.0;
        let mut nodes: Vec<f64> = (0..=l).map(|i| kappa * i as f64).collect();
        for m in 1..=(k - l) {
            nodes.push(t_bar - (1.0 + kappa).powi(-(m as i32)));
        }
        Self::new(nodes, kappa, t_bar)
    }

    /// K steps over `[0, T̄ − T_under]`: uniform steps while the remaining time
    /// exceeds 1, then a geometric tail that ends exactly at `T_under`. The split
    /// is chosen to minimize κ.
    pub fn from_budget(k: usize, t_bar: f64, t_under: f64) -> Result<Self> {
        if !(t_under > 0.0 && t_under < t_bar && t_under < 1.0) {
            return invalid(format!("need 0 < T_under < min(1, T̄), got {t_under}, {t_bar}"));
        }
        if k == 0 {
            return invalid("step budget must be positive");
        }
        let head = (t_bar - 1.0).max(0.0);
        let tail_start = t_bar.min(1.0);
        let mut best: Option<(f64, usize)> = None;
        for m in 1..=k {
            let l = k - m;
            if (head > 0.0) != (l > 0) {
                continue;
            }
            let uniform = if l > 0 { head / l as f64 } else { 0.0 };
            let q = (tail_start / t_under).powf(1.0 / m as f64);
            let kappa = uniform.max(1.0 - 1.0 / q);
            if best.is_none_or(|(b, _)| kappa < b) {
                best = Some((kappa, m));
            }
        }
        let (kappa, m) = best.ok_or_else(|| LabError::InvalidArgument("no feasible split".into()))?;
        if kappa >= 0.25 {
            return invalid(format!("{k} steps cannot reach T_under={t_under} from T̄={t_bar} with κ < 1/4"));
        }
        let l = k - m;
        let mut nodes: Vec<f64> = (0..=l).map(|i| head * i as f64 / l.max(1) as f64).collect();
        let q = (tail_start / t_under).powf(1.0 / m as f64);
        for j in 1..=m {
            nodes.push(if j == m { t_bar - t_under } else { t_bar - tail_start * q.powi(-(j as i32)) });
        }
        // Slack keeps the validation robust to rounding in the tail.
        Self::new(nodes, (kappa * (1.0 + 1e-9)).min(0.25 - 1e-12), t_bar)
    }

    fn first_violation(&self) -> Option<usize> {
        self.nodes.windows(2).enumerate().find_map(|(k, w)| {
            let gap = w[1] - w[0];
            let limit = self.kappa * 1f64.min(self.t_bar - w[0]);
            (gap <= 0.0 || gap > limit * (1.0 + PARTITION_TOL)).then_some(k)
        })
    }

    pub fn is_kappa_decreasing(&self) -> bool {
        self.first_violation().is_none()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn t_bar(&self) -> f64 {
        self.t_bar
    }

    pub fn t_under(&self) -> f64 {
        self.t_bar - self.nodes.last().unwrap()
    }

    /// Number of steps K.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Forward-process time `T̄ − t_k` matching reverse node k.
    pub fn remaining(&self, k: usize) -> f64 {
        self.t_bar - self.nodes[k]
    }

    /// Reverse node index whose remaining time equals `s`, if any.
    pub fn index_of_remaining(&self, s: f64) -> Option<usize> {
        self.nodes.iter().position(|t| ((self.t_bar - t) - s).abs() <= 1e-12 * s.max(1.0))
    }
}

/// One-step transition rule of a reverse sampler. Deterministic given `z`.
pub trait Scheme: Send + Sync {
    fn name(&self) -> &str;

    fn step(
        &self,
        y: &DVector<f64>,
        t_k: f64,
        t_next: f64,
        score: &dyn ScoreField,
        t_bar: f64,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>>;
}

/// Noise scale of the classic scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassicNoise {
    /// Exact integrator of the frozen-drift linear SDE.
    Exponential,
    /// `y + σ_γ ŝ + σ_γ z`, the raw recursion.
    Raw,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassicScheme {
    pub noise: ClassicNoise,
}

impl Scheme for ClassicScheme {
    fn name(&self) -> &str {
        match self.noise {
            ClassicNoise::Exponential => "classic",
            ClassicNoise::Raw => "classic_raw",
        }
    }

    fn step(
        &self,
        y: &DVector<f64>,
        t_k: f64,
        t_next: f64,
        score: &dyn ScoreField,
        t_bar: f64,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        match self.noise {
            ClassicNoise::Exponential => classic_step(y, t_k, t_next, score, t_bar, z),
            ClassicNoise::Raw => {
                let gamma = step_size(t_k, t_next)?;
                let sg = sigma2(gamma).sqrt();
                let s = score.eval(t_bar - t_k, y)?;
                Ok(y + (s + z) * sg)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModifiedScheme;

impl Scheme for ModifiedScheme {
    fn name(&self) -> &str {
        "modified"
    }

    fn step(
        &self,
        y: &DVector<f64>,
        t_k: f64,
        t_next: f64,
        score: &dyn ScoreField,
        t_bar: f64,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        modified_step(y, t_k, t_next, score, t_bar, z)
    }
}

fn step_size(t_k: f64, t_next: f64) -> Result<f64> {
    if !(t_next > t_k) {
        return invalid(format!("step must move forward: {t_k} → {t_next}"));
    }
    Ok(t_next - t_k)
}

/// `y' = e^γ y + 2(e^γ − 1) ŝ(T̄ − t_k, y) + √(e^{2γ} − 1) z`.
pub fn classic_step(
    y: &DVector<f64>,
    t_k: f64,
    t_next: f64,
    score: &dyn ScoreField,
    t_bar: f64,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    let gamma = step_size(t_k, t_next)?;
    let s = score.eval(t_bar - t_k, y)?;
    let em1 = gamma.exp_m1();
    Ok(y * (1.0 + em1) + s * (2.0 * em1) + z * (2.0 * gamma).exp_m1().sqrt())
}

/// `y' = y/c_γ + (σ_γ²/c_γ) ŝ(T̄ − t_k, y) + σ_γ (σ_{T̄−t_{k+1}}/σ_{T̄−t_k}) z`.
pub fn modified_step(
    y: &DVector<f64>,
    t_k: f64,
    t_next: f64,
    score: &dyn ScoreField,
    t_bar: f64,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    let gamma = step_size(t_k, t_next)?;
    if t_next >= t_bar {
        return invalid(format!("modified step needs t_(k+1) < T̄, got {t_next} ≥ {t_bar}"));
    }
    let g = ou_coeffs(gamma)?;
    let s = score.eval(t_bar - t_k, y)?;
    let ratio = (sigma2(t_bar - t_next) / sigma2(t_bar - t_k)).sqrt();
    Ok(y / g.c + s * (g.sigma2() / g.c) + z * (g.sigma * ratio))
}

/// `s̃(t, x, x′) = c_γ^{−1}(σ²_{t+γ}/σ²_t) ŝ(t+γ, x′) − (x − c_γ^{−1} x′)/σ²_t`, `γ = t_anchor − t`.
pub fn modified_drift(
    t: f64,
    x: &DVector<f64>,
    x_anchor: &DVector<f64>,
    t_anchor: f64,
    score: &dyn ScoreField,
) -> Result<DVector<f64>> {
    if !(t < t_anchor) || !(t > 0.0) {
        return invalid(format!("need 0 < t < t_anchor, got t={t}, t_anchor={t_anchor}"));
    }
    let g = ou_coeffs(t_anchor - t)?;
    let s_t = sigma2(t);
    let s = score.eval(t_anchor, x_anchor)?;
    Ok(s * (sigma2(t_anchor) / (g.c * s_t)) - (x - x_anchor / g.c) / s_t)
}

/// Where the per-step Gaussian noise comes from.
#[derive(Debug, Clone, Default)]
pub enum NoiseSource {
    /// Fresh standard normals per step.
    #[default]
    Independent,
    /// Increments of one Brownian path per path id, sampled on `times`; every
    /// partition node must be one of these times. Runs with different
    /// partitions over the same times and seed are driven by the same path.
    Brownian { times: Arc<Vec<f64>> },
}

/// Sorted union of the nodes of several partitions.
pub fn union_times(partitions: &[&TimePartition]) -> Arc<Vec<f64>> {
    let mut all: Vec<f64> = partitions.iter().flat_map(|p| p.nodes().iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup_by(|a, b| (*a - *b).abs() <= 1e-13);
    Arc::new(all)
}

/// A configured reverse simulation.
#[derive(Clone)]
pub struct SamplerRun {
    pub scheme: Arc<dyn Scheme>,
    pub score: Arc<dyn ScoreField>,
    pub partition: TimePartition,
    pub n_paths: usize,
    pub seed: u64,
    pub record_trajectories: bool,
    pub noise: NoiseSource,
}

/// Map each partition node to its position in `times`.
fn node_positions(nodes: &[f64], times: &[f64]) -> Result<Vec<usize>> {
    nodes
        .iter()
        .map(|t| {
            let i = times.partition_point(|s| *s < t - 1e-13);
            if i < times.len() && (times[i] - t).abs() <= 1e-13 {
                Ok(i)
            } else {
                invalid(format!("partition node {t} is not on the Brownian time grid"))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct BackwardOutput {
    pub terminal: Vec<DVector<f64>>,
    /// `trajectories[path][k]` is the state at reverse node k.
    pub trajectories: Option<Vec<Vec<DVector<f64>>>>,
}

/// Simulate `n_paths` independent reverse paths from `N(0, I)`.
pub fn run_backward(run: &SamplerRun) -> Result<BackwardOutput> {
    let dim = run.score.dim();
    let nodes = run.partition.nodes();
    let t_bar = run.partition.t_bar();
    let (lo, hi) = run.score.time_range();
    if run.partition.t_under() < lo || t_bar > hi {
        return invalid(format!(
            "score valid on [{lo}, {hi}] but the run needs [{}, {t_bar}]",
            run.partition.t_under()
        ));
    }
    let positions = match &run.noise {
        NoiseSource::Independent => None,
        NoiseSource::Brownian { times } => Some(node_positions(nodes, times)?),
    };
    let paths: Vec<(DVector<f64>, Option<Vec<DVector<f64>>>)> = (0..run.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng::substream(run.seed, p as u64);
            let mut y = rng::standard_normal(&mut rng, dim);
            let mut traj = run.record_trajectories.then(|| vec![y.clone()]);
            let increments = match (&run.noise, &positions) {
                (NoiseSource::Brownian { times }, Some(pos)) => Some(brownian_increments(times, pos, dim, &mut rng)),
                _ => None,
            };
            for k in 0..nodes.len() - 1 {
                let z = match &increments {
                    Some(inc) => &inc[k] / (nodes[k + 1] - nodes[k]).sqrt(),
                    None => rng::standard_normal(&mut rng, dim),
                };
                y = run
                    .scheme
                    .step(&y, nodes[k], nodes[k + 1], run.score.as_ref(), t_bar, &z)
                    .map_err(|e| LabError::Numerical(format!("path {p}, step {k}: {e}")))?;
                if let Some(tr) = traj.as_mut() {
                    tr.push(y.clone());
                }
            }
            Ok((y, traj))
        })
        .collect::<Result<_>>()?;
    let mut out = BackwardOutput::default();
    if run.record_trajectories {
        out.trajectories = Some(Vec::with_capacity(paths.len()));
    }
    for (y, tr) in paths {
        out.terminal.push(y);
        if let (Some(all), Some(tr)) = (out.trajectories.as_mut(), tr) {
            all.push(tr);
        }
    }
    Ok(out)
}

/// Increments of a Brownian path between consecutive selected grid points.
fn brownian_increments(times: &[f64], pos: &[usize], dim: usize, rng: &mut rng::LabRng) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(pos.len().saturating_sub(1));
    let mut acc = DVector::zeros(dim);
    let mut next = 1;
    for i in 0..times.len() - 1 {
        if next >= pos.len() {
            break;
        }
        let dz = rng::standard_normal(rng, dim) * (times[i + 1] - times[i]).sqrt();
        if i >= pos[0] {
            acc += dz;
        }
        if i + 1 == pos[next] {
            out.push(std::mem::replace(&mut acc, DVector::zeros(dim)));
            next += 1;
        }
    }
    out
}

/// Trajectory dump: `path,k,t,x0,…`.
pub fn write_trajectories<W: Write>(out: W, partition: &TimePartition, traj: &[Vec<DVector<f64>>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = traj.first().and_then(|p| p.first()).map_or(0, |v| v.len());
    let mut header = vec!["path".to_string(), "k".into(), "t".into()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (p, path) in traj.iter().enumerate() {
        for (k, y) in path.iter().enumerate() {
            let mut row = vec![p.to_string(), k.to_string(), format!("{:e}", partition.nodes()[k])];
            row.extend(y.iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Registry with the built-in schemes: `classic`, `classic_raw`, `modified`.
pub fn scheme_registry() -> Registry<dyn Scheme> {
    let mut r: Registry<dyn Scheme> = Registry::default();
    let items: [Arc<dyn Scheme>; 3] = [
        Arc::new(ClassicScheme { noise: ClassicNoise::Exponential }),
        Arc::new(ClassicScheme { noise: ClassicNoise::Raw }),
        Arc::new(ModifiedScheme),
    ];
    for s in items {
        r.register(s.name().to_string(), s).expect("unique built-in names");
    }
    r
}

/// Terminal error of a sampler cloud against `Law(c X₀ + σ Z)` at time `t`,
/// split along `S = span(supp μ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitError {
    /// Exact W1 between in-span coordinates of the cloud and of a reference
    /// sample of the same size.
    pub in_span_w1: f64,
    /// `√(D − r) · |√v̂ − σ_t|`: W2 between `N(0, v̂ I)` and `N(0, σ_t² I)` on `S^⊥`.
    pub out_of_span_w2: f64,
    pub total: f64,
    pub span_dim: usize,
}

/// Compare a terminal cloud with the noised target at time `t`.
///
/// When `μ` lives in a subspace S of dimension r, the exact score acts on
/// `S^⊥` as `−x/σ²`, so every scheme keeps the `S^⊥` part an isotropic
/// Gaussian independent of the `S` part. The error is split accordingly: exact
/// assignment W1 on the r in-span coordinates plus the closed-form W2 between
/// isotropic Gaussians on the complement, with the variance estimated from the
/// cloud. This avoids the `σ√(2D)` floor of raw high-dimensional W1.
pub fn split_terminal_error(cloud: &[DVector<f64>], mu: &FiniteMeasure, t: f64, seed: u64) -> Result<SplitError> {
    let mut rng = rng::master(seed);
    let reference: Vec<DVector<f64>> =
        (0..cloud.len()).map(|_| forward_sample(mu, t, &mut rng).map(|fs| fs.xt)).collect::<Result<_>>()?;
    split_error(cloud, &reference, mu, Some(sigma2(t).sqrt()))
}

/// As [`split_terminal_error`], with a given ambient reference cloud (for
/// example a finely discretized run driven by the same Brownian paths). The
/// complement variance of the reference replaces `σ_t²`.
pub fn split_error_against(cloud: &[DVector<f64>], reference: &[DVector<f64>], mu: &FiniteMeasure) -> Result<SplitError> {
    split_error(cloud, reference, mu, None)
}

fn split_error(
    cloud: &[DVector<f64>],
    reference: &[DVector<f64>],
    mu: &FiniteMeasure,
    target_sd: Option<f64>,
) -> Result<SplitError> {
    if cloud.is_empty() || reference.is_empty() {
        return Err(LabError::Empty("terminal cloud".into()));
    }
    let dim = mu.dim();
    let support = nalgebra::DMatrix::from_columns(mu.support());
    let q = span_basis(&support, 1e-10);
    let r = q.ncols();
    let inside: Vec<DVector<f64>> = cloud.iter().map(|y| q.tr_mul(y)).collect();
    let ref_inside: Vec<DVector<f64>> = reference.iter().map(|y| q.tr_mul(y)).collect();
    let in_span_w1 = w_p_clouds(&inside, &ref_inside, 1)?;
    let complement_sd = |pts: &[DVector<f64>], proj: &[DVector<f64>]| {
        let total: f64 = pts.iter().zip(proj).map(|(y, c)| y.norm_squared() - c.norm_squared()).sum();
        (total / (pts.len() * (dim - r)) as f64).max(0.0).sqrt()
    };
    let out_of_span_w2 = if dim > r {
        let target = target_sd.unwrap_or_else(|| complement_sd(reference, &ref_inside));
        ((dim - r) as f64).sqrt() * (complement_sd(cloud, &inside) - target).abs()
    } else {
        0.0
    };
    Ok(SplitError { in_span_w1, out_of_span_w2, total: in_span_w1 + out_of_span_w2, span_dim: r })
}
