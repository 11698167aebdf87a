//! Local polynomial manifold estimation.
//!
//! Around each sample `yᵢ` the neighbors `Vᵢ = {yⱼ − yᵢ : ‖yⱼ − yᵢ‖ ≤ ε}` are
//! fitted by `z ↦ yᵢ + P z + Σ_S a_S z^S` with `PᵀP = I`, `a_S ⊥ Im P` and
//! `‖a_S‖ ≤ 1/ε`. The fit runs in coordinates of `Hᵢ = span Vᵢ`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::geometry::EmbeddedManifold;
use crate::linalg::{extend_orthonormal, left_singular, polar, span_basis as svd_span, sym_op_norm};
use crate::poly::{monomial, monomial_grad};
use crate::diffusion::FiniteMeasure;

/// Multi-indices `S` with `2 ≤ |S| ≤ ⌈β⌉ − 1`, ordered by degree, then
/// lexicographically descending within a degree (`z₁²` before `z₁z₂` before `z₂²`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndexSet {
    d: usize,
    indices: Vec<Vec<u32>>,
}

impl MultiIndexSet {
    pub fn new(d: usize, beta: f64) -> Result<Self> {
        if d == 0 {
            return invalid("intrinsic dimension must be positive");
        }
        if !(beta >= 1.0 && beta.is_finite()) {
            return invalid(format!("smoothness beta must be at least 1, got {beta}"));
        }
        let max_deg = (beta.ceil() as u32).saturating_sub(1);
        let mut indices = Vec::new();
        for deg in 2..=max_deg {
            let mut cur = vec![0u32; d];
            push_degree(&mut indices, &mut cur, 0, deg);
        }
        Ok(Self { d, indices })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[Vec<u32>] {
        &self.indices
    }

    pub fn max_degree(&self) -> u32 {
        self.indices.last().map_or(1, |s| s.iter().sum())
    }

    /// `(z^S)_S` in set order.
    pub fn eval(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|s| monomial(z, s)))
    }

    /// Jacobian of [`eval`](Self::eval), `|S| × d`.
    pub fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.indices.len(), self.d);
        for (r, s) in self.indices.iter().enumerate() {
            j.row_mut(r).copy_from(&monomial_grad(z, s).transpose());
        }
        j
    }

    pub fn label(&self, k: usize) -> String {
        self.indices[k].iter().map(|e| e.to_string()).collect::<Vec<_>>().join("-")
    }
}

fn push_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        push_degree(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

/// Differences `yⱼ − yᵢ` with `‖yⱼ − yᵢ‖ ≤ ε` (closed ball), `j ≠ i`.
pub fn neighbor_set(points: &[DVector<f64>], i: usize, eps: f64) -> Result<Vec<DVector<f64>>> {
    if !(eps > 0.0) {
        return invalid(format!("neighborhood radius must be positive, got {eps}"));
    }
    let yi = &points[i];
    Ok(points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, y)| y - yi)
        .filter(|v| v.norm() <= eps)
        .collect())
}

/// Orthonormal basis of `span V` with its dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanBasis {
    pub basis: DMatrix<f64>,
    pub dim: usize,
}

/// Keeps singular directions above `rank_tol · σ_max`.
pub fn span_basis(vs: &[DVector<f64>], rank_tol: f64) -> Result<SpanBasis> {
    if vs.is_empty() {
        return Err(LabError::Empty("neighbor set".into()));
    }
    let basis = svd_span(&DMatrix::from_columns(vs), rank_tol);
    let dim = basis.ncols();
    Ok(SpanBasis { basis, dim })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub rank_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iter: 200, rel_tol: 1e-9, rank_tol: 1e-10 }
    }
}

/// One fitted piece `Φ*(z) = y + P z + Σ a_S z^S` on `‖z‖ ≤ ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPolyChart {
    pub base: DVector<f64>,
    pub frame: DMatrix<f64>,
    /// One ambient vector per multi-index, in [`MultiIndexSet`] order.
    pub coeffs: Vec<DVector<f64>>,
    pub multi: MultiIndexSet,
    pub eps_n: f64,
    pub subspace_basis: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartFit {
    pub chart: LocalPolyChart,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after initialization and after every accepted iteration.
    pub trace: Vec<f64>,
}

impl LocalPolyChart {
    pub fn dim(&self) -> usize {
        self.frame.ncols()
    }

    /// Evaluate without the radius check.
    pub fn eval_unchecked(&self, z: &[f64]) -> DVector<f64> {
        let mut out = &self.base + &self.frame * DVector::from_column_slice(z);
        for (s, a) in self.multi.indices().iter().zip(&self.coeffs) {
            out.axpy(monomial(z, s), a, 1.0);
        }
        out
    }

    /// Upper bound on `‖Φ*(z) − y‖` over the chart ball.
    pub fn reach_radius(&self) -> f64 {
        self.eps_n
            + self
                .multi
                .indices()
                .iter()
                .zip(&self.coeffs)
                .map(|(s, a)| a.norm() * self.eps_n.powi(s.iter().sum::<u32>() as i32))
                .sum::<f64>()
    }

    /// Nearest chart point to `x` over the chart ball, by projected Gauss–Newton
    /// from the tangent projection. Returns `(z, distance)`.
    pub fn project(&self, x: &DVector<f64>) -> (Vec<f64>, f64) {
        let clamp = |z: &mut DVector<f64>| {
            let n = z.norm();
            if n > self.eps_n {
                *z *= self.eps_n / n;
            }
        };
        let mut z = self.frame.tr_mul(&(x - &self.base));
        clamp(&mut z);
        if !self.multi.is_empty() {
            let mut best = (self.eval_unchecked(z.as_slice()) - x).norm_squared();
            for _ in 0..30 {
                let r = self.eval_unchecked(z.as_slice()) - x;
                let jm = self.multi.jacobian(z.as_slice());
                let mut j = self.frame.clone();
                for (k, a) in self.coeffs.iter().enumerate() {
                    j += a * jm.row(k);
                }
                let Some(step) = (j.transpose() * &j).lu().solve(&(j.transpose() * &r)) else { break };
                let mut lambda = 1.0;
                let mut moved = false;
                while lambda > 1e-6 {
                    let mut cand = &z - &step * lambda;
                    clamp(&mut cand);
                    let v = (self.eval_unchecked(cand.as_slice()) - x).norm_squared();
                    if v < best {
                        best = v;
                        z = cand;
                        moved = true;
                        break;
                    }
                    lambda *= 0.5;
                }
                if !moved {
                    break;
                }
            }
        }
        let dist = (self.eval_unchecked(z.as_slice()) - x).norm();
        (z.as_slice().to_vec(), dist)
    }
}

/// `Φ*(z)`; errors if `‖z‖` exceeds the chart radius.
pub fn eval_chart(chart: &LocalPolyChart, z: &[f64]) -> Result<DVector<f64>> {
    if z.len() != chart.dim() {
        return Err(LabError::DimensionMismatch { expected: chart.dim(), got: z.len() });
    }
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > chart.eps_n * (1.0 + 1e-12) {
        return invalid(format!("chart coordinate norm {n} exceeds radius {}", chart.eps_n));
    }
    Ok(chart.eval_unchecked(z))
}

/// Residual sum `Σ ‖u − P Pᵀu − A m(Pᵀu)‖²` in working coordinates.
fn objective(us: &[DVector<f64>], p: &DMatrix<f64>, a: &DMatrix<f64>, multi: &MultiIndexSet) -> f64 {
    us.iter()
        .map(|u| {
            let z = p.tr_mul(u);
            let mut r = u - p * &z;
            if !multi.is_empty() {
                r -= a * multi.eval(z.as_slice());
            }
            r.norm_squared()
        })
        .sum()
}

/// Best coefficients for a fixed frame: least squares on the normal
/// residuals, projected gradient when a norm bound is active.
fn coefficient_step(us: &[DVector<f64>], p: &DMatrix<f64>, multi: &MultiIndexSet, bound: f64) -> DMatrix<f64> {
    let h = p.nrows();
    let s = multi.len();
    if s == 0 {
        return DMatrix::zeros(h, 0);
    }
    let n = us.len();
    let mut m = DMatrix::zeros(s, n);
    let mut r = DMatrix::zeros(h, n);
    for (j, u) in us.iter().enumerate() {
        let z = p.tr_mul(u);
        m.set_column(j, &multi.eval(z.as_slice()));
        r.set_column(j, &(u - p * &z));
    }
    let pinv = m.clone().pseudo_inverse(1e-12 * m.amax().max(f64::MIN_POSITIVE)).unwrap_or_else(|_| DMatrix::zeros(n, s));
    let mut a = &r * pinv;
    let over = |a: &DMatrix<f64>| a.column_iter().any(|c| c.norm() > bound * (1.0 + 1e-12));
    if over(&a) {
        // FISTA on ½‖R − A M‖² over per-column balls.
        let clip = |a: &mut DMatrix<f64>| {
            for mut c in a.column_iter_mut() {
                let nrm = c.norm();
                if nrm > bound {
                    c *= bound / nrm;
                }
            }
        };
        let mmt = &m * m.transpose();
        let lip = sym_op_norm(&mmt).max(f64::MIN_POSITIVE);
        let rmt = &r * m.transpose();
        clip(&mut a);
        let mut y = a.clone();
        let mut tk = 1.0f64;
        for _ in 0..2000 {
            let grad = &y * &mmt - &rmt;
            let mut next = &y - grad / lip;
            clip(&mut next);
            let t_next = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
            let change = (&next - &a).norm();
            y = &next + (&next - &a) * ((tk - 1.0) / t_next);
            a = next;
            tk = t_next;
            if change < 1e-15 * (1.0 + a.norm()) {
                break;
            }
        }
    }
    // Numerical cleanup of the orthogonality constraint.
    let proj = p * p.tr_mul(&a);
    a - proj
}

/// Levenberg–Marquardt step on the frame with coefficients held fixed.
fn frame_gn_candidate(
    us: &[DVector<f64>],
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    multi: &MultiIndexSet,
    lambda: f64,
) -> Option<DMatrix<f64>> {
    let h = p.nrows();
    let d = p.ncols();
    let np = h * d;
    let mut jtj = DMatrix::zeros(np, np);
    let mut jte = DVector::zeros(np);
    for u in us {
        let z = p.tr_mul(u);
        let mut e = u - p * &z;
        let mut b = p.clone();
        if !multi.is_empty() {
            e -= a * multi.eval(z.as_slice());
            b += a * multi.jacobian(z.as_slice());
        }
        // de = −dP z − B dPᵀu; column (ra + h·cb) of the Jacobian for dP = E_{ra,cb}.
        let mut jac = DMatrix::zeros(h, np);
        for cb in 0..d {
            for ra in 0..h {
                let mut col = b.column(cb) * (-u[ra]);
                col[ra] -= z[cb];
                jac.set_column(ra + h * cb, &col);
            }
        }
        jtj += jac.transpose() * &jac;
        jte += jac.transpose() * e;
    }
    let scale = jtj.diagonal().max().max(f64::MIN_POSITIVE);
    for k in 0..np {
        jtj[(k, k)] += lambda * scale;
    }
    let delta = jtj.cholesky()?.solve(&(-jte));
    let dp = DMatrix::from_column_slice(h, d, delta.as_slice());
    Some(polar(&(p + dp)))
}

/// Procrustes step: best isometric frame for the current coordinates.
fn frame_procrustes_candidate(us: &[DVector<f64>], p: &DMatrix<f64>, a: &DMatrix<f64>, multi: &MultiIndexSet) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(p.nrows(), p.ncols());
    for u in us {
        let z = p.tr_mul(u);
        let mut target = u.clone();
        if !multi.is_empty() {
            target -= a * multi.eval(z.as_slice());
        }
        c += target * z.transpose();
    }
    polar(&c)
}

struct Solved {
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Alternating minimization in working coordinates `us` (all of length h ≥ d).
fn solve(us: &[DVector<f64>], d: usize, multi: &MultiIndexSet, bound: f64, cfg: &SolverConfig) -> Solved {
    let h = us[0].len();
    // Top-d uncentered principal directions.
    let (left, _) = left_singular(&DMatrix::from_columns(us));
    let mut p = if left.ncols() >= d { left.columns(0, d).into_owned() } else { extend_orthonormal(&left, d) };
    if p.nrows() != h || p.ncols() != d {
        p = extend_orthonormal(&DMatrix::zeros(h, 0), d);
    }
    let mut a = coefficient_step(us, &p, multi, bound);
    let mut f = objective(us, &p, &a, multi);
    let mut trace = vec![f];
    if multi.is_empty() {
        // Principal directions are optimal for the linear program.
        return Solved { p, a, objective: f, iterations: 0, converged: true, trace };
    }
    let mut lambda = 1e-4;
    let mut converged = false;
    let mut iterations = 0;
    let scale = us.iter().map(|u| u.norm_squared()).sum::<f64>().max(f64::MIN_POSITIVE);
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        if f <= 1e-30 * scale {
            converged = true;
            break;
        }
        let mut best: Option<(f64, DMatrix<f64>, DMatrix<f64>)> = None;
        let consider = |cand: DMatrix<f64>, best: &mut Option<(f64, DMatrix<f64>, DMatrix<f64>)>| {
            let ca = coefficient_step(us, &cand, multi, bound);
            let cf = objective(us, &cand, &ca, multi);
            if cf < f && best.as_ref().is_none_or(|(bf, _, _)| cf < *bf) {
                *best = Some((cf, cand, ca));
            }
        };
        consider(frame_procrustes_candidate(us, &p, &a, multi), &mut best);
        for _ in 0..8 {
            if let Some(cand) = frame_gn_candidate(us, &p, &a, multi, lambda) {
                let before = best.as_ref().map(|b| b.0);
                consider(cand, &mut best);
                if best.as_ref().map(|b| b.0) != before {
                    lambda = (lambda / 3.0).max(1e-12);
                    break;
                }
            }
            lambda *= 10.0;
        }
        match best {
            Some((nf, np, na)) => {
                debug_assert!(nf <= f);
                let rel = (f - nf) / f.max(f64::MIN_POSITIVE);
                p = np;
                a = na;
                f = nf;
                trace.push(f);
                if rel < cfg.rel_tol {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    Solved { p, a, objective: f, iterations, converged, trace }
}

/// Fit one chart to the neighbor differences `vs` inside `H = span vs`.
pub fn fit_local_chart(
    base: &DVector<f64>,
    vs: &[DVector<f64>],
    d: usize,
    beta: f64,
    eps_n: f64,
    cfg: &SolverConfig,
) -> Result<ChartFit> {
    let multi = MultiIndexSet::new(d, beta)?;
    if vs.len() < d + 1 {
        return invalid(format!("need at least {} neighbors, got {}", d + 1, vs.len()));
    }
    let span = span_basis(vs, cfg.rank_tol)?;
    let q = if span.dim < d { extend_orthonormal(&span.basis, d) } else { span.basis };
    let us: Vec<DVector<f64>> = vs.iter().map(|v| q.tr_mul(v)).collect();
    let solved = solve(&us, d, &multi, 1.0 / eps_n, cfg);
    Ok(lift(base, &q, solved, multi, eps_n))
}

/// The same program solved in full ambient coordinates (no subspace reduction).
pub fn fit_local_chart_full(
    base: &DVector<f64>,
    vs: &[DVector<f64>],
    d: usize,
    beta: f64,
    eps_n: f64,
    cfg: &SolverConfig,
) -> Result<ChartFit> {
    let multi = MultiIndexSet::new(d, beta)?;
    if vs.len() < d + 1 {
        return invalid(format!("need at least {} neighbors, got {}", d + 1, vs.len()));
    }
    let dim = base.len();
    let solved = solve(vs, d, &multi, 1.0 / eps_n, cfg);
    Ok(lift(base, &DMatrix::identity(dim, dim), solved, multi, eps_n))
}

fn lift(base: &DVector<f64>, q: &DMatrix<f64>, s: Solved, multi: MultiIndexSet, eps_n: f64) -> ChartFit {
    let frame = q * &s.p;
    let coeffs = (0..multi.len()).map(|k| q * s.a.column(k)).collect();
    ChartFit {
        chart: LocalPolyChart { base: base.clone(), frame, coeffs, multi, eps_n, subspace_basis: q.clone() },
        objective: s.objective,
        iterations: s.iterations,
        converged: s.converged,
        trace: s.trace,
    }
}

/// How the neighborhood radius is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EpsConfig {
    /// `ε_n = (C log n / (n − 1))^{1/d}`; `C` from [`pilot_constant`] when absent.
    Scaling { constant: Option<f64> },
    Fixed { eps: f64 },
}

impl Default for EpsConfig {
    fn default() -> Self {
        EpsConfig::Scaling { constant: None }
    }
}

/// `(C log n / (n − 1))^{1/d}`.
pub fn eps_for(constant: f64, n: usize, d: usize) -> f64 {
    (constant * (n as f64).ln() / (n as f64 - 1.0)).powf(1.0 / d as f64)
}

/// Pilot choice of `C`: the smallest value for which the median neighbor
/// count reaches `2(d+1)` and every point has at least `d+1` neighbors.
pub fn pilot_constant(points: &[DVector<f64>], d: usize) -> Result<f64> {
    let n = points.len();
    let k = 2 * (d + 1);
    if n <= k {
        return invalid(format!("pilot needs more than {k} points, got {n}"));
    }
    let radii: Vec<(f64, f64)> = points
        .par_iter()
        .map(|p| {
            let mut ds: Vec<f64> = points.iter().map(|q| (p - q).norm()).collect();
            ds.sort_by(f64::total_cmp);
            // ds[0] is the point itself.
            (ds[k], ds[d + 1])
        })
        .collect();
    let mut kth: Vec<f64> = radii.iter().map(|r| r.0).collect();
    kth.sort_by(f64::total_cmp);
    let median = kth[n / 2];
    let cover = radii.iter().map(|r| r.1).fold(0.0, f64::max);
    let eps = median.max(cover);
    Ok(eps.powi(d as i32) * (n as f64 - 1.0) / (n as f64).ln())
}

/// Remove exact duplicates, keeping first occurrences.
pub fn dedup_points(points: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(points.len());
    for p in points {
        if !out.iter().any(|q| (p - q).norm() <= 1e-12 * (1.0 + p.norm())) {
            out.push(p.clone());
        }
    }
    out
}

/// Union of local charts sharing one radius.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseSurface {
    pub charts: Vec<LocalPolyChart>,
    pub eps_n: f64,
    pub constant: Option<f64>,
    pub d: usize,
    pub beta: f64,
    /// Indices (after deduplication) whose neighborhoods were too sparse.
    pub skipped: Vec<usize>,
    /// Neighbor counts `|Vᵢ|` for every point.
    pub neighbor_counts: Vec<usize>,
    pub objectives: Vec<f64>,
}

pub fn fit_surface(points: &[DVector<f64>], d: usize, beta: f64, eps_cfg: &EpsConfig, cfg: &SolverConfig) -> Result<PiecewiseSurface> {
    let pts = dedup_points(points);
    let n = pts.len();
    if n < d + 2 {
        return invalid(format!("need at least {} distinct points, got {n}", d + 2));
    }
    let (eps_n, constant) = match *eps_cfg {
        EpsConfig::Fixed { eps } => (eps, None),
        EpsConfig::Scaling { constant } => {
            let c = match constant {
                Some(c) => c,
                None => pilot_constant(&pts, d)?,
            };
            (eps_for(c, n, d), Some(c))
        }
    };
    let fits: Vec<(usize, Option<ChartFit>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let vs = neighbor_set(&pts, i, eps_n)?;
            let count = vs.len();
            if count < d + 1 {
                return Ok((count, None));
            }
            Ok((count, Some(fit_local_chart(&pts[i], &vs, d, beta, eps_n, cfg)?)))
        })
        .collect::<Result<_>>()?;
    let mut surface = PiecewiseSurface {
        charts: Vec::new(),
        eps_n,
        constant,
        d,
        beta,
        skipped: Vec::new(),
        neighbor_counts: Vec::with_capacity(n),
        objectives: Vec::new(),
    };
    for (i, (count, fit)) in fits.into_iter().enumerate() {
        surface.neighbor_counts.push(count);
        match fit {
            Some(f) => {
                surface.objectives.push(f.objective);
                surface.charts.push(f.chart);
            }
            None => surface.skipped.push(i),
        }
    }
    if surface.charts.is_empty() {
        return Err(LabError::Empty("every neighborhood is too sparse to fit a chart".into()));
    }
    Ok(surface)
}

fn ball_grid(d: usize, radius: f64, per_radius: usize) -> Vec<Vec<f64>> {
    let m = per_radius.max(1) as i64;
    let step = radius / m as f64;
    let side = 2 * m + 1;
    let total = (side as usize).pow(d as u32);
    let mut out = Vec::new();
    for flat in 0..total {
        let mut idx = flat;
        let z: Vec<f64> = (0..d)
            .map(|_| {
                let i = (idx % side as usize) as i64 - m;
                idx /= side as usize;
                i as f64 * step
            })
            .collect();
        let n2: f64 = z.iter().map(|v| v * v).sum();
        if n2 <= radius * radius * (1.0 + 1e-12) {
            out.push(z);
        }
    }
    out
}

impl PiecewiseSurface {
    /// Points of every chart on a grid with `per_eps` steps per radius per axis.
    pub fn sample_grid(&self, per_eps: usize) -> Vec<DVector<f64>> {
        let grid = ball_grid(self.d, self.eps_n, per_eps);
        self.charts.iter().flat_map(|c| grid.iter().map(move |z| c.eval_unchecked(z))).collect()
    }

    /// Distance from `x` to the surface, via per-chart projection with pruning.
    pub fn distance_to(&self, x: &DVector<f64>) -> f64 {
        let mut order: Vec<(f64, usize)> = self
            .charts
            .iter()
            .enumerate()
            .map(|(i, c)| ((x - &c.base).norm() - c.reach_radius(), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best = f64::INFINITY;
        for (lower, i) in order {
            if lower >= best {
                break;
            }
            best = best.min(self.charts[i].project(x).1);
        }
        best
    }

    /// Charts whose ball contains `x` in the base-distance sense, with the
    /// partition weight `ρ(‖x − yᵢ‖/ε)`.
    fn covering(&self, x: &DVector<f64>) -> Vec<(usize, f64, f64)> {
        self.charts
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let dist = (x - &c.base).norm();
                (dist <= self.eps_n).then(|| (i, crate::estimators::rho(dist / self.eps_n), dist))
            })
            .collect()
    }

    /// One CSV for the whole surface: `chart_id,record,label,v0,…`, where
    /// record is `eps`, `base`, `frame` (label = column) or `coeff` (label = multi-index).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.charts[0].base.len();
        let mut header = vec!["chart_id".to_string(), "record".into(), "label".into()];
        header.extend((0..dim).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        let fmt = |v: &mut Vec<String>, it: &mut dyn Iterator<Item = f64>| v.extend(it.map(|x| format!("{x:e}")));
        for (id, c) in self.charts.iter().enumerate() {
            let mut row = vec![id.to_string(), "eps".into(), String::new(), format!("{:e}", c.eps_n)];
            row.extend(std::iter::repeat_n(String::new(), dim - 1));
            w.write_record(&row)?;
            let mut row = vec![id.to_string(), "base".into(), String::new()];
            fmt(&mut row, &mut c.base.iter().copied());
            w.write_record(&row)?;
            for j in 0..c.frame.ncols() {
                let mut row = vec![id.to_string(), "frame".into(), j.to_string()];
                fmt(&mut row, &mut c.frame.column(j).iter().copied());
                w.write_record(&row)?;
            }
            for (k, a) in c.coeffs.iter().enumerate() {
                let mut row = vec![id.to_string(), "coeff".into(), c.multi.label(k)];
                fmt(&mut row, &mut a.iter().copied());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `max(sup_{a∈A} d(a,B), sup_{b∈B} d(b,A))` for point clouds, with the
/// early-break scan: a point stops searching once it is closer than the
/// running maximum.
pub fn hausdorff_clouds(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(LabError::Empty("Hausdorff side".into()));
    }
    Ok(directed_cloud(a, b).max(directed_cloud(b, a)))
}

fn directed_cloud(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    let mut cmax = 0.0f64;
    for x in a {
        let mut cmin = f64::INFINITY;
        for y in b {
            let d = (x - y).norm();
            if d < cmax {
                cmin = d;
                break;
            }
            cmin = cmin.min(d);
        }
        if cmin > cmax && cmin.is_finite() {
            cmax = cmin;
        }
    }
    cmax
}

/// Hausdorff distance between a fitted surface and the true manifold.
/// Surface → manifold uses the chart grid and exact manifold distances;
/// manifold → surface uses a manifold grid of the same spacing and exact
/// chart projections.
pub fn hausdorff_surface(surface: &PiecewiseSurface, manifold: &EmbeddedManifold, per_eps: usize) -> Result<f64> {
    let cloud = surface.sample_grid(per_eps);
    let forward = cloud.par_iter().map(|x| manifold.distance(x)).reduce(|| 0.0, f64::max);
    let grid = manifold.grid(surface.eps_n / per_eps.max(1) as f64)?;
    let backward = grid.par_iter().map(|x| surface.distance_to(x)).reduce(|| 0.0, f64::max);
    Ok(forward.max(backward))
}

/// `‖P*P*ᵀ − π_{T_yM}‖_op` at the chart base.
pub fn tangent_angle(chart: &LocalPolyChart, manifold: &EmbeddedManifold) -> Result<f64> {
    let dist = manifold.distance(&chart.base);
    if dist > 1e-6 {
        return Err(LabError::OffManifold { distance: dist, tolerance: 1e-6 });
    }
    let y = manifold.project(&chart.base);
    let truth = manifold.tangent_projector(&y)?;
    let est = &chart.frame * chart.frame.transpose();
    Ok(sym_op_norm(&(est - truth)))
}

/// Support of a measure moved onto the fitted surface.
#[derive(Debug, Clone, PartialEq)]
pub struct Pushforward {
    pub measure: FiniteMeasure,
    pub displacement: Vec<f64>,
    pub chart_of: Vec<usize>,
}

/// Move each support point `x` to `Φ*ᵢ(P*ᵢᵀ(x − yᵢ))` for the chart with the
/// largest partition weight among those whose ball contains `x` (ties go to
/// the nearest base). Coordinates come from the estimated tangent projection.
pub fn pushforward_surface_measure(mu: &FiniteMeasure, surface: &PiecewiseSurface) -> Result<Pushforward> {
    let mut uncovered = Vec::new();
    let mut moved = Vec::with_capacity(mu.len());
    let mut displacement = Vec::with_capacity(mu.len());
    let mut chart_of = Vec::with_capacity(mu.len());
    for (idx, x) in mu.support().iter().enumerate() {
        let cover = surface.covering(x);
        let Some(&(i, _, _)) = cover.iter().max_by(|a, b| a.1.total_cmp(&b.1).then(b.2.total_cmp(&a.2))) else {
            uncovered.push(idx);
            continue;
        };
        let c = &surface.charts[i];
        let z = c.frame.tr_mul(&(x - &c.base));
        let y = c.eval_unchecked(z.as_slice());
        displacement.push((&y - x).norm());
        moved.push(y);
        chart_of.push(i);
    }
    if !uncovered.is_empty() {
        return Err(LabError::Uncovered(uncovered));
    }
    Ok(Pushforward { measure: FiniteMeasure::new(moved, mu.weights().to_vec())?, displacement, chart_of })
}
