//! Monte Carlo checks of the high-probability bounds on Gaussian noise,
//! posterior weights and exact scores for measures on embedded manifolds.
//!
//! Each check runs `trials` independent draws (one substream per trial),
//! records a per-trial statistic and its margin over the bound, and reports
//! the fraction of trials with positive margin.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diffusion::{exact_score, ou_coeffs, posterior_weights, ExactScore, FiniteMeasure};
use crate::error::{invalid, LabError, Result};
use crate::fit::PiecewiseSurface;
use crate::geometry::{eps_net, log_plus, sample_measure, ComplexityConstant, DensitySpec, EmbeddedManifold, EpsNet};
use crate::rng::{self, standard_normal};
use crate::samplers::modified_drift;
use crate::stats::{binomial_se, log_log_slope, mean, quantile, Accumulator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckConfig {
    pub delta: f64,
    pub trials: usize,
    pub seed: u64,
    /// Net resolution; defaults to a quarter of the relevant length scale.
    pub net_resolution: Option<f64>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { delta: 0.05, trials: 2000, seed: 0, net_resolution: None }
    }
}

impl CheckConfig {
    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("delta must be in (0, 1), got {}", self.delta));
        }
        if self.trials == 0 {
            return invalid("trials must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub config: BTreeMap<String, Value>,
    pub delta: f64,
    /// Per-trial statistic (the quantity whose D-dependence is of interest).
    pub statistics: Vec<f64>,
    /// Per-trial `statistic − bound` (or the worst such margin over a net); > 0 is a violation.
    pub margins: Vec<f64>,
    /// Bound value when it does not vary across trials.
    pub bound: Option<f64>,
    pub extras: BTreeMap<String, f64>,
}

impl BoundReport {
    fn new(name: &str, cfg: &CheckConfig, config: BTreeMap<String, Value>, stats: Vec<(f64, f64)>, bound: Option<f64>) -> Self {
        let (statistics, margins) = stats.into_iter().unzip();
        BoundReport { name: name.into(), config, delta: cfg.delta, statistics, margins, bound, extras: BTreeMap::new() }
    }

    pub fn trials(&self) -> usize {
        self.statistics.len()
    }

    pub fn violations(&self) -> usize {
        self.margins.iter().filter(|m| **m > 0.0).count()
    }

    pub fn violation_rate(&self) -> f64 {
        self.violations() as f64 / self.trials().max(1) as f64
    }

    /// Binomial standard error at the nominal rate δ.
    pub fn violation_se(&self) -> f64 {
        binomial_se(self.delta, self.trials().max(1))
    }

    /// Violation rate ≤ δ + 3 SE.
    pub fn passes(&self) -> bool {
        self.violation_rate() <= self.delta + 3.0 * self.violation_se()
    }

    pub fn median(&self) -> f64 {
        quantile(&self.statistics, 0.5)
    }

    pub fn mean(&self) -> f64 {
        mean(&self.statistics)
    }

    pub fn quantiles(&self) -> BTreeMap<String, f64> {
        [0.05f64, 0.25, 0.5, 0.75, 0.95].iter().map(|&q| (format!("q{:02}", (q * 100.0).round() as u32), quantile(&self.statistics, q))).collect()
    }

    /// One row per trial: `trial,statistic,margin,violated`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["trial", "statistic", "margin", "violated"])?;
        for (i, (s, m)) in self.statistics.iter().zip(&self.margins).enumerate() {
            w.write_record([i.to_string(), format!("{s:e}"), format!("{m:e}"), (*m > 0.0).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> Value {
        json!({
            "name": self.name,
            "config": self.config,
            "trials": self.trials(),
            "delta": self.delta,
            "violation_rate": self.violation_rate(),
            "violation_se": self.violation_se(),
            "passes": self.passes(),
            "bound": self.bound,
            "mean": self.mean(),
            "quantiles": self.quantiles(),
            "extras": self.extras,
        })
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.summary())?;
        Ok(())
    }
}

fn base_config(m: &EmbeddedManifold, cfg: &CheckConfig) -> BTreeMap<String, Value> {
    let mut c = BTreeMap::new();
    c.insert("manifold".into(), serde_json::to_value(m.kind()).unwrap_or(Value::Null));
    c.insert("ambient_dim".into(), json!(m.ambient_dim()));
    c.insert("intrinsic_dim".into(), json!(m.intrinsic_dim()));
    c.insert("delta".into(), json!(cfg.delta));
    c.insert("trials".into(), json!(cfg.trials));
    c.insert("seed".into(), json!(cfg.seed));
    c
}

fn run_trials<F>(cfg: &CheckConfig, f: F) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&mut rng::LabRng) -> Result<(f64, f64)> + Sync,
{
    (0..cfg.trials).into_par_iter().map(|i| f(&mut rng::substream(cfg.seed, i as u64))).collect()
}

/// A net of the given resolution built from a manifold grid at half that
/// spacing, with its density checked against random manifold points. The net
/// is selected in canonical coordinates, where distances are the same.
pub fn manifold_net(m: &EmbeddedManifold, resolution: f64, seed: u64) -> Result<EpsNet> {
    let canonical: Vec<_> = m.grid(resolution / 2.0)?.iter().map(|x| m.to_canonical(x)).collect();
    let net = eps_net(&canonical, resolution)?;
    let net = EpsNet { centers: net.centers.iter().map(|c| m.embed(c)).collect(), epsilon: net.epsilon };
    let probes = sample_measure(m, &DensitySpec::Uniform, 256, seed)?;
    net.verify_density(probes.support(), 1.5 * resolution)?;
    Ok(net)
}

fn c_log(m: &EmbeddedManifold) -> Result<f64> {
    Ok(ComplexityConstant::for_manifold(m)?.c_log)
}

/// `sup_{y,y′} |⟨Z, y − y′⟩|` over a net against
/// `4ε√d + (‖y−y′‖ + 6ε)√(4d log(2/ε) + 4 log₊ Vol M + 2 log(2/δ))`.
pub fn check_inner_product_sup(m: &EmbeddedManifold, eps: f64, cfg: &CheckConfig) -> Result<BoundReport> {
    cfg.validate()?;
    if !(eps > 0.0 && eps < m.r0()) {
        return invalid(format!("eps must lie in (0, r0 = {}), got {eps}", m.r0()));
    }
    let net = manifold_net(m, cfg.net_resolution.unwrap_or(eps / 4.0), cfg.seed ^ 0x9e37)?;
    let d = m.intrinsic_dim() as f64;
    let root = (4.0 * d * (2.0 / eps).ln() + 4.0 * log_plus(m.volume()) + 2.0 * (2.0 / cfg.delta).ln()).sqrt();
    let pts = &net.centers;
    let n = pts.len();
    let dist: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (&pts[i] - &pts[j]).norm()).collect();
    let stats = run_trials(cfg, |rng| {
        let z = standard_normal(rng, m.ambient_dim());
        let a: Vec<f64> = pts.iter().map(|p| z.dot(p)).collect();
        let mut sup = 0.0f64;
        let mut margin = f64::NEG_INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = (a[i] - a[j]).abs();
                sup = sup.max(v);
                let rhs = 4.0 * eps * d.sqrt() + (dist[i * n + j] + 6.0 * eps) * root;
                margin = margin.max(v - rhs);
            }
        }
        Ok((sup, margin))
    })?;
    let mut config = base_config(m, cfg);
    config.insert("eps".into(), json!(eps));
    let mut r = BoundReport::new("inner_product_sup", cfg, config, stats, None);
    r.extras.insert("net_size".into(), n as f64);
    Ok(r)
}

/// `sup_y ‖π_{T_yM} Z‖` over a net against
/// `8√(d(4 log 2d + 2 log r₀⁻¹ + 2 log₊ Vol M + 2 log δ⁻¹))`.
pub fn check_tangent_projection(m: &EmbeddedManifold, cfg: &CheckConfig) -> Result<BoundReport> {
    cfg.validate()?;
    let d = m.intrinsic_dim() as f64;
    let net = manifold_net(m, cfg.net_resolution.unwrap_or(m.r0() / 4.0), cfg.seed ^ 0x9e37)?;
    let bases = net.centers.iter().map(|y| m.tangent_basis(y)).collect::<Result<Vec<_>>>()?;
    let bound = 8.0 * (d * (4.0 * (2.0 * d).ln() + 2.0 * (1.0 / m.r0()).ln() + 2.0 * log_plus(m.volume()) + 2.0 * (1.0 / cfg.delta).ln())).sqrt();
    let stats = run_trials(cfg, |rng| {
        let z = standard_normal(rng, m.ambient_dim());
        let sup = bases.iter().map(|b| b.tr_mul(&z).norm()).fold(0.0, f64::max);
        Ok((sup, sup - bound))
    })?;
    let mut r = BoundReport::new("tangent_projection", cfg, base_config(m, cfg), stats, Some(bound));
    r.extras.insert("net_size".into(), net.len() as f64);
    Ok(r)
}

/// Band for `log p(y|t,X(t))` over the support of `μ`, where the posterior
/// density w.r.t. volume is `(posterior weight / prior weight) · p(y)` and
/// `p` is the manifold's own density.
pub fn check_posterior_band(m: &EmbeddedManifold, mu: &FiniteMeasure, t: f64, cfg: &CheckConfig) -> Result<BoundReport> {
    cfg.validate()?;
    let oc = ou_coeffs(t)?;
    let d = m.intrinsic_dim() as f64;
    let cl = c_log(m)?;
    let ratio2 = (oc.c / oc.sigma).powi(2);
    let a = 20.0 * d * (log_plus(oc.sigma / oc.c) + 4.0 * cl) + 8.0 * (1.0 / cfg.delta).ln();
    let density = m.density();
    let log_ref: Vec<f64> = mu.support().iter().zip(mu.weights()).map(|(y, w)| density.density_at(m, y).ln() - w.ln()).collect();
    let stats = run_trials(cfg, |rng| {
        let fs = crate::diffusion::forward_sample(mu, t, rng)?;
        let pw = posterior_weights(mu, t, &fs.xt)?;
        let mut worst = f64::NEG_INFINITY;
        let mut dev = 0.0f64;
        for (i, y) in mu.support().iter().enumerate() {
            let lp = pw.log_weights[i] + log_ref[i];
            let r2 = (&fs.x0 - y).norm_squared();
            let lower = -a - 0.75 * ratio2 * r2;
            let upper = a - 0.25 * ratio2 * r2;
            worst = worst.max((lower - lp).max(lp - upper));
            dev = dev.max((lp + 0.5 * ratio2 * r2).abs());
        }
        Ok((dev, worst))
    })?;
    let mut config = base_config(m, cfg);
    config.insert("t".into(), json!(t));
    config.insert("support_size".into(), json!(mu.len()));
    let mut r = BoundReport::new("posterior_band", cfg, config, stats, None);
    r.extras.insert("c_log".into(), cl);
    r.extras.insert("band_halfwidth".into(), a);
    Ok(r)
}

/// `‖σ_t s(t, c_t y + σ_t Z) + Z‖` per trial against the high-probability
/// bound `4√(20d(2 log₊(c_t/σ_t) + 4C_log) + 8 log δ⁻¹)`. Statistics are the
/// squared norms; extras carry the mean, the expectation bound
/// `320(d log₊(c_t/σ_t) + 2C_log + 1)` and the control `E‖Z‖²`.
pub fn check_denoiser_variance(m: &EmbeddedManifold, mu: &FiniteMeasure, t: f64, cfg: &CheckConfig) -> Result<BoundReport> {
    cfg.validate()?;
    let oc = ou_coeffs(t)?;
    let d = m.intrinsic_dim() as f64;
    let cl = c_log(m)?;
    let hp = 4.0 * (20.0 * d * (2.0 * log_plus(oc.c / oc.sigma) + 4.0 * cl) + 8.0 * (1.0 / cfg.delta).ln()).sqrt();
    let expectation = 320.0 * (d * log_plus(oc.c / oc.sigma) + 2.0 * cl + 1.0);
    let stats = run_trials(cfg, |rng| {
        let fs = crate::diffusion::forward_sample(mu, t, rng)?;
        let s = exact_score(mu, t, &fs.xt)?;
        let stat = (s * oc.sigma + &fs.z).norm_squared();
        Ok((stat, stat.sqrt() - hp))
    })?;
    // Control draws use their own substreams so the main statistic is unaffected.
    let ctl: Vec<f64> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| standard_normal(&mut rng::substream(cfg.seed ^ 0xc0ffee, i as u64), m.ambient_dim()).norm_squared())
        .collect();
    let mut config = base_config(m, cfg);
    config.insert("t".into(), json!(t));
    config.insert("support_size".into(), json!(mu.len()));
    let mut r = BoundReport::new("denoiser_variance", cfg, config, stats, Some(hp * hp));
    let mut acc = Accumulator::default();
    r.statistics.iter().for_each(|s| acc.push(*s));
    r.extras.insert("mean_sq".into(), acc.mean());
    r.extras.insert("mean_sq_stderr".into(), acc.stderr());
    r.extras.insert("expectation_bound".into(), expectation);
    r.extras.insert("control_mean_sq".into(), mean(&ctl));
    r.extras.insert("c_log".into(), cl);
    Ok(r)
}

/// Two-sided sandwich of `‖X(0) − G_i‖²` by the squared-distance gaps
/// `‖X(t) − c_t G_i‖² − ‖X(t) − c_t G_min‖²`, for every point of an ε-dense net.
pub fn check_weight_radius(m: &EmbeddedManifold, mu: &FiniteMeasure, net: &EpsNet, t: f64, cfg: &CheckConfig) -> Result<BoundReport> {
    cfg.validate()?;
    if net.is_empty() {
        return Err(LabError::Empty("net".into()));
    }
    let oc = ou_coeffs(t)?;
    let d = m.intrinsic_dim() as f64;
    let cl = c_log(m)?;
    let eps = net.epsilon;
    let r = oc.sigma / oc.c;
    let slack = 128.0 * r * r * (d * log_plus(1.0 / r) + 4.0 * d * cl + (1.0 / cfg.delta).ln());
    let inv_c2 = 1.0 / (oc.c * oc.c);
    let stats = run_trials(cfg, |rng| {
        let fs = crate::diffusion::forward_sample(mu, t, rng)?;
        let d2: Vec<f64> = net.centers.iter().map(|g| (&fs.xt - g * oc.c).norm_squared()).collect();
        let min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut worst = f64::NEG_INFINITY;
        let mut tightest = f64::INFINITY;
        for (g, v) in net.centers.iter().zip(&d2) {
            let gap = v - min;
            let mid = (&fs.x0 - g).norm_squared();
            let lower = 2.0 / 3.0 * inv_c2 * gap - slack;
            let upper = 9.0 * eps * eps + 2.0 * inv_c2 * gap + slack;
            worst = worst.max((lower - mid).max(mid - upper));
            tightest = tightest.min((mid - lower).min(upper - mid));
        }
        Ok((tightest, worst))
    })?;
    let mut config = base_config(m, cfg);
    config.insert("t".into(), json!(t));
    config.insert("eps".into(), json!(eps));
    let mut rep = BoundReport::new("weight_radius", cfg, config, stats, None);
    rep.extras.insert("slack".into(), slack);
    rep.extras.insert("net_size".into(), net.len() as f64);
    Ok(rep)
}

/// Frozen-drift error `E‖s(t,X(t)) − s̃(t, X(t), X(t+γ))‖²` for each γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftFreeze {
    pub gammas: Vec<f64>,
    pub reports: Vec<BoundReport>,
    pub means: Vec<f64>,
    /// Log-log slope of the means against γ.
    pub slope: f64,
}

/// Per γ: forward-couple `X(t+γ) = c_γ X(t) + σ_γ Z′`, compare the exact score
/// at `(t, X(t))` with the modified drift anchored at `(t+γ, X(t+γ))`, against
/// `66² γ σ_t⁻⁴ (20d(log₊(σ_{t+γ}/c_{t+γ}) + 4C_log) + 9 log γ⁻¹)³`.
pub fn check_drift_freeze(m: &EmbeddedManifold, mu: &FiniteMeasure, t: f64, gammas: &[f64], cfg: &CheckConfig) -> Result<DriftFreeze> {
    cfg.validate()?;
    if gammas.is_empty() {
        return Err(LabError::Empty("gamma list".into()));
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g < 0.25)) {
        return invalid(format!("each gamma must lie in (0, 1/4), got {g}"));
    }
    let d = m.intrinsic_dim() as f64;
    let cl = c_log(m)?;
    let score = ExactScore::new(mu.clone());
    let sigma_t = ou_coeffs(t)?.sigma;
    let mut reports = Vec::new();
    let mut means = Vec::new();
    for (k, &gamma) in gammas.iter().enumerate() {
        let anchor = ou_coeffs(t + gamma)?;
        let step = ou_coeffs(gamma)?;
        let inner = 20.0 * d * (log_plus(anchor.sigma / anchor.c) + 4.0 * cl) + 9.0 * (1.0 / gamma).ln();
        let bound = 66.0f64.powi(2) * gamma * sigma_t.powi(-4) * inner.powi(3);
        let sub = CheckConfig { seed: cfg.seed.wrapping_add(k as u64 * 0x1000_0000), ..*cfg };
        let stats = run_trials(&sub, |rng| {
            let fs = crate::diffusion::forward_sample(mu, t, rng)?;
            let x_next = &fs.xt * step.c + standard_normal(rng, fs.xt.len()) * step.sigma;
            let s = exact_score(mu, t, &fs.xt)?;
            let frozen = modified_drift(t, &fs.xt, &x_next, t + gamma, &score)?;
            let stat = (s - frozen).norm_squared();
            Ok((stat, stat - bound))
        })?;
        let mut config = base_config(m, &sub);
        config.insert("t".into(), json!(t));
        config.insert("gamma".into(), json!(gamma));
        let r = BoundReport::new("drift_freeze", &sub, config, stats, Some(bound));
        means.push(r.mean());
        reports.push(r);
    }
    let slope = if gammas.len() >= 2 && means.iter().all(|v| *v > 0.0) { log_log_slope(gammas, &means) } else { f64::NAN };
    Ok(DriftFreeze { gammas: gammas.to_vec(), reports, means, slope })
}

/// `sup |⟨Z, y − Φ*_i(P*_iᵀ(y − y_i))⟩|` over manifold grid points `y` within
/// ε of a chart base, against `L_M ε^β √(2d log ε⁻¹ + log₊ Vol M + 2 log(2/δ))`.
pub fn check_surface_gp(surface: &PiecewiseSurface, m: &EmbeddedManifold, cfg: &CheckConfig) -> Result<BoundReport> {
    cfg.validate()?;
    let eps = surface.eps_n;
    let d = m.intrinsic_dim() as f64;
    let grid = m.grid(cfg.net_resolution.unwrap_or(eps / 4.0))?;
    let mut disp = Vec::new();
    let mut uncovered = 0usize;
    for y in &grid {
        let mut covered = false;
        for c in &surface.charts {
            if (y - &c.base).norm() <= eps {
                covered = true;
                let z = c.frame.tr_mul(&(y - &c.base));
                disp.push(y - c.eval_unchecked(z.as_slice()));
            }
        }
        if !covered {
            uncovered += 1;
        }
    }
    let bound = m.holder_const() * eps.powf(surface.beta) * (2.0 * d * (1.0 / eps).ln().max(0.0) + log_plus(m.volume()) + 2.0 * (2.0 / cfg.delta).ln()).sqrt();
    let max_disp = disp.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let stats = run_trials(cfg, |rng| {
        let z = standard_normal(rng, m.ambient_dim());
        let sup = disp.iter().map(|v| z.dot(v).abs()).fold(0.0, f64::max);
        Ok((sup, sup - bound))
    })?;
    let mut config = base_config(m, cfg);
    config.insert("eps".into(), json!(eps));
    config.insert("beta".into(), json!(surface.beta));
    let mut r = BoundReport::new("surface_gp", cfg, config, stats, Some(bound));
    r.extras.insert("uncovered".into(), uncovered as f64);
    r.extras.insert("max_displacement".into(), max_disp);
    r.extras.insert("pairs".into(), disp.len() as f64);
    Ok(r)
}

/// Ratio of the largest to the smallest median across reports.
pub fn median_spread(reports: &[BoundReport]) -> f64 {
    let meds: Vec<f64> = reports.iter().map(|r| r.median()).collect();
    let hi = meds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = meds.iter().cloned().fold(f64::INFINITY, f64::min);
    hi / lo
}
