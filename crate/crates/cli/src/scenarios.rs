//! Named experiment scenarios.

use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use mdlab::concentration::{self as conc, BoundReport, CheckConfig};
use mdlab::diffusion::{sm_loss, ExactScore, FiniteMeasure, McConfig, ScoreField, ZeroScore};
use mdlab::estimators::{build_anchor_frames, erm_train, FamilyConstants, StructuredScore};
use mdlab::fit::{fit_surface, hausdorff_surface, pilot_constant, EpsConfig};
use mdlab::geometry::{sample_measure, EmbeddedManifold};
use mdlab::metrics::{kl_dissipation_check, sml_bound_check, Gaussian};
use mdlab::registry::Registry;
use mdlab::rng::{master, standard_normal};
use mdlab::samplers::{
    run_backward, scheme_registry, split_error_against, split_terminal_error, union_times, NoiseSource, SamplerRun,
    TimePartition,
};
use mdlab::stats::{log_log_slope, median};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::output::{Artifacts, Metric, MetricTable};
use crate::spec::ExperimentSpec;

pub struct RunContext {
    /// Run independent sweep points on the rayon pool.
    pub parallel: bool,
}

impl RunContext {
    /// Map over sweep points, keeping input order either way.
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Result<Vec<R>>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> Result<R> + Sync + Send,
    {
        if self.parallel {
            items.into_par_iter().map(f).collect()
        } else {
            items.into_iter().map(f).collect()
        }
    }
}

pub trait Scenario: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    /// Ambient dimensions used when `sweep.dim` is absent.
    fn default_dims(&self) -> Vec<usize>;
    /// Scenario-specific checks beyond the shared ones.
    fn validate(&self, _spec: &ExperimentSpec) -> Result<()> {
        Ok(())
    }
    fn run(&self, spec: &ExperimentSpec, ctx: &RunContext) -> Result<Artifacts>;
}

pub fn dims(s: &dyn Scenario, spec: &ExperimentSpec) -> Vec<usize> {
    spec.sweep.dim.clone().unwrap_or_else(|| s.default_dims())
}

pub fn registry() -> Registry<dyn Scenario> {
    let mut r: Registry<dyn Scenario> = Registry::default();
    let items: Vec<Arc<dyn Scenario>> = vec![
        Arc::new(Concentration(Check::InnerProduct)),
        Arc::new(Concentration(Check::TangentProjection)),
        Arc::new(Concentration(Check::PosteriorBand)),
        Arc::new(Concentration(Check::DenoiserVariance)),
        Arc::new(Concentration(Check::WeightRadius)),
        Arc::new(Concentration(Check::DriftFreeze)),
        Arc::new(Concentration(Check::SurfaceGp)),
        Arc::new(FitRate),
        Arc::new(SamplerCompare),
        Arc::new(SamplerKSweep),
        Arc::new(SmlW2),
        Arc::new(KlDissipation),
        Arc::new(ErmDemo),
    ];
    for s in items {
        r.register(s.name(), s).expect("unique scenario names");
    }
    r
}

/// Full validation: shared checks, manifold construction at every swept D,
/// and the scenario's own checks.
pub fn validate(spec: &ExperimentSpec) -> Result<Arc<dyn Scenario>> {
    spec.validate_common()?;
    let s = registry().get(&spec.scenario).map_err(|e| anyhow!("scenario: {e}"))?;
    for d in dims(s.as_ref(), spec) {
        spec.manifold.build(d).map_err(|e| anyhow!("manifold: {e:#}"))?;
    }
    s.validate(spec)?;
    Ok(s)
}

fn key(parts: &[&dyn ToString]) -> Vec<String> {
    parts.iter().map(|p| p.to_string()).collect()
}

fn check_seed(spec: &ExperimentSpec) -> u64 {
    spec.seed.wrapping_add(1)
}

// ---------------------------------------------------------------------------
// Concentration checks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Check {
    InnerProduct,
    TangentProjection,
    PosteriorBand,
    DenoiserVariance,
    WeightRadius,
    DriftFreeze,
    SurfaceGp,
}

struct Concentration(Check);

impl Check {
    fn default_t(self) -> f64 {
        match self {
            Check::PosteriorBand => 0.01,
            Check::DriftFreeze => 0.2,
            _ => 0.05,
        }
    }

    fn uses_t(self) -> bool {
        matches!(self, Check::PosteriorBand | Check::DenoiserVariance | Check::WeightRadius | Check::DriftFreeze)
    }
}

/// One point of a concentration sweep.
struct Point {
    dim: usize,
    t: f64,
}

impl Concentration {
    fn ts(&self, spec: &ExperimentSpec) -> Vec<f64> {
        spec.sweep.t.clone().unwrap_or_else(|| vec![spec.check.t.unwrap_or(self.0.default_t())])
    }

    fn gammas(spec: &ExperimentSpec) -> Vec<f64> {
        spec.sweep.gamma.clone().unwrap_or_else(|| vec![0.01, 0.02, 0.05, 0.1])
    }

    fn measure(spec: &ExperimentSpec, m: &EmbeddedManifold) -> Result<FiniteMeasure> {
        Ok(sample_measure(m, &spec.measure.density, spec.measure.n, spec.seed)?)
    }

    fn point(&self, spec: &ExperimentSpec, p: &Point) -> Result<Vec<BoundReport>> {
        let m = spec.manifold.build(p.dim)?;
        let cfg: CheckConfig = spec.check.config(check_seed(spec));
        let reports = match self.0 {
            Check::InnerProduct => vec![conc::check_inner_product_sup(&m, spec.check.eps, &cfg)?],
            Check::TangentProjection => vec![conc::check_tangent_projection(&m, &cfg)?],
            Check::PosteriorBand => vec![conc::check_posterior_band(&m, &Self::measure(spec, &m)?, p.t, &cfg)?],
            Check::DenoiserVariance => vec![conc::check_denoiser_variance(&m, &Self::measure(spec, &m)?, p.t, &cfg)?],
            Check::WeightRadius => {
                let net = conc::manifold_net(&m, spec.check.net_resolution.unwrap_or(0.1), spec.seed)?;
                vec![conc::check_weight_radius(&m, &Self::measure(spec, &m)?, &net, p.t, &cfg)?]
            }
            Check::DriftFreeze => conc::check_drift_freeze(&m, &Self::measure(spec, &m)?, p.t, &Self::gammas(spec), &cfg)?.reports,
            Check::SurfaceGp => {
                let mu = Self::measure(spec, &m)?;
                let f = &spec.fit;
                let surface = fit_surface(mu.support(), m.intrinsic_dim(), f.beta, &f.eps, &f.solver)?;
                vec![conc::check_surface_gp(&surface, &m, &cfg)?]
            }
        };
        Ok(reports)
    }
}

fn fmt_axis(x: f64) -> String {
    format!("{x}")
}

impl Scenario for Concentration {
    fn name(&self) -> &'static str {
        match self.0 {
            Check::InnerProduct => "concentration.inner_product",
            Check::TangentProjection => "concentration.tangent_projection",
            Check::PosteriorBand => "concentration.posterior_band",
            Check::DenoiserVariance => "concentration.denoiser_variance",
            Check::WeightRadius => "concentration.weight_radius",
            Check::DriftFreeze => "concentration.drift_freeze",
            Check::SurfaceGp => "concentration.surface_gp",
        }
    }

    fn description(&self) -> &'static str {
        match self.0 {
            Check::InnerProduct => "sup of Gaussian inner products over a manifold net, swept over D",
            Check::TangentProjection => "sup of projected noise norms over a manifold net, swept over D",
            Check::PosteriorBand => "posterior mass outside the high-probability band around the noised point",
            Check::DenoiserVariance => "denoiser error |sigma s + Z|^2 against its dimension-free bound, swept over D",
            Check::WeightRadius => "radius of posterior weights over a net of anchors",
            Check::DriftFreeze => "error of freezing the drift over a step of length gamma",
            Check::SurfaceGp => "Gaussian sup over displacements of a fitted surface",
        }
    }

    fn default_dims(&self) -> Vec<usize> {
        match self.0 {
            Check::DenoiserVariance | Check::InnerProduct | Check::TangentProjection => vec![8, 64, 512],
            Check::SurfaceGp => vec![8],
            _ => vec![16],
        }
    }

    fn validate(&self, spec: &ExperimentSpec) -> Result<()> {
        if self.0.uses_t() {
            for t in self.ts(spec) {
                if !(t > 0.0) {
                    bail!("sweep.t: times must be positive, got {t}");
                }
            }
        } else if spec.sweep.t.is_some() {
            bail!("sweep.t: not used by {}", self.name());
        }
        if matches!(self.0, Check::DriftFreeze) {
            if let Some(g) = Self::gammas(spec).into_iter().find(|g| !(*g > 0.0 && *g < 0.25)) {
                bail!("sweep.gamma: each gamma must lie in (0, 1/4), got {g}");
            }
        } else if spec.sweep.gamma.is_some() {
            bail!("sweep.gamma: not used by {}", self.name());
        }
        if matches!(self.0, Check::InnerProduct) && !(spec.check.eps > 0.0) {
            bail!("check.eps: must be positive");
        }
        Ok(())
    }

    fn run(&self, spec: &ExperimentSpec, ctx: &RunContext) -> Result<Artifacts> {
        let ts = if self.0.uses_t() { self.ts(spec) } else { vec![f64::NAN] };
        let dims = dims(self, spec);
        let points: Vec<Point> = dims.iter().flat_map(|&dim| ts.iter().map(move |&t| Point { dim, t })).collect();
        let labels: Vec<String> = points
            .iter()
            .map(|p| if spec.sweep.t.is_some() { format!("D{}_t{}", p.dim, fmt_axis(p.t)) } else { format!("D{}", p.dim) })
            .collect();
        let results = ctx.map(points, |p| self.point(spec, &p).with_context(|| format!("D = {}", p.dim)))?;

        let mut art = Artifacts::default();
        let mut summaries = Vec::new();
        let mut all = Vec::new();
        for (label, reports) in labels.iter().zip(results) {
            for r in reports {
                let suffix = match r.config.get("gamma") {
                    Some(g) => format!("_g{g}"),
                    None => String::new(),
                };
                let mut buf = Vec::new();
                r.write_csv(&mut buf)?;
                art.add(format!("{}_{label}{suffix}.csv", r.name), buf);
                art.violated |= !r.passes();
                summaries.push(r.summary());
                all.push(r);
            }
        }
        let mut summary = json!({ "scenario": self.name(), "reports": summaries });
        if dims.len() > 1 && ts.len() == 1 && all.len() == dims.len() {
            summary["median_spread"] = json!(conc::median_spread(&all));
        }
        art.add_json("summary.json", &summary)?;
        art.summary = summary;
        Ok(art)
    }
}

// ---------------------------------------------------------------------------
// Manifold fitting
// ---------------------------------------------------------------------------

struct FitRate;

impl Scenario for FitRate {
    fn name(&self) -> &'static str {
        "fit.rate"
    }

    fn description(&self) -> &'static str {
        "Hausdorff error of the piecewise polynomial fit against n, with the pilot constant held fixed"
    }

    fn default_dims(&self) -> Vec<usize> {
        vec![8]
    }

    fn validate(&self, spec: &ExperimentSpec) -> Result<()> {
        let f = &spec.fit;
        if f.seeds == 0 {
            bail!("fit.seeds: must be at least 1");
        }
        if f.per_eps == 0 {
            bail!("fit.per_eps: must be at least 1");
        }
        if !(f.beta >= 2.0) {
            bail!("fit.beta: must be at least 2");
        }
        if let Some(n) = spec.sweep.n.as_ref().and_then(|ns| ns.iter().find(|&&n| n < 10)) {
            bail!("sweep.n: sample sizes must be at least 10, got {n}");
        }
        Ok(())
    }

    fn run(&self, spec: &ExperimentSpec, ctx: &RunContext) -> Result<Artifacts> {
        let f = &spec.fit;
        let ns = spec.sweep.n.clone().unwrap_or_else(|| vec![100, 200, 400, 800, 1600]);
        let mut points = Vec::new();
        for &dim in &dims(self, spec) {
            for s in 0..f.seeds as u64 {
                points.push((dim, s));
            }
        }
        let rows = ctx.map(points, |(dim, s)| {
            let m = spec.manifold.build(dim)?;
            let d = m.intrinsic_dim();
            let seed = spec.seed.wrapping_add(s);
            let eps_cfg = match f.eps {
                EpsConfig::Scaling { constant: None } => {
                    let pilot = sample_measure(&m, &spec.measure.density, f.pilot_n, seed.wrapping_add(1000))?;
                    EpsConfig::Scaling { constant: Some(pilot_constant(pilot.support(), d)?) }
                }
                other => other,
            };
            let mut out = Vec::new();
            for &n in &ns {
                let mu = sample_measure(&m, &spec.measure.density, n, seed.wrapping_mul(100).wrapping_add(n as u64))?;
                let surface = fit_surface(mu.support(), d, f.beta, &eps_cfg, &f.solver)?;
                let h = hausdorff_surface(&surface, &m, f.per_eps)?;
                let max_v = surface.neighbor_counts.iter().copied().max().unwrap_or(0);
                out.push((n, h, surface.eps_n, max_v, surface.charts.len(), surface.skipped.len()));
            }
            Ok((dim, s, out))
        })?;

        let mut table = MetricTable::new(&["dim", "seed", "n"]);
        let mut slopes = Vec::new();
        let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        for (dim, s, out) in &rows {
            for &(n, h, eps, max_v, charts, skipped) in out {
                let k = key(&[dim, s, &n]);
                table.push(&k, Metric::plain("hausdorff", h));
                table.push(&k, Metric::plain("eps_n", eps));
                table.push(&k, Metric { ratio: Some(max_v as f64 / (n as f64).ln()), ..Metric::plain("max_neighbors", max_v as f64) });
                table.push(&k, Metric::plain("charts", charts as f64));
                table.push(&k, Metric::plain("skipped", skipped as f64));
            }
            if ns.len() >= 2 {
                let hs: Vec<f64> = out.iter().map(|r| r.1).collect();
                slopes.push(json!({ "dim": dim, "seed": s, "slope": log_log_slope(&x, &hs) }));
            }
        }
        let slope_values: Vec<f64> = slopes.iter().filter_map(|v| v["slope"].as_f64()).collect();
        let summary = json!({
            "scenario": self.name(),
            "beta": f.beta,
            "slopes": slopes,
            "median_slope": if slope_values.is_empty() { Value::Null } else { json!(median(&slope_values)) },
        });
        let mut art = Artifacts::default();
        art.add("fit_rate.csv", table.to_csv()?);
        art.add_json("summary.json", &summary)?;
        art.summary = summary;
        Ok(art)
    }
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

fn validate_sampler(spec: &ExperimentSpec, k_axis: bool) -> Result<()> {
    let s = &spec.sampler;
    if s.schemes.is_empty() {
        bail!("sampler.schemes: at least one scheme is required");
    }
    let reg = scheme_registry();
    for name in &s.schemes {
        reg.get(name).map_err(|e| anyhow!("sampler.schemes: {e}"))?;
    }
    if s.n_paths == 0 {
        bail!("sampler.n_paths: must be at least 1");
    }
    if s.seeds == 0 {
        bail!("sampler.seeds: must be at least 1");
    }
    let ks = if k_axis { spec.sweep.k.clone().unwrap_or_else(default_ks) } else { vec![s.k] };
    for k in ks.iter().chain(k_axis.then_some(&s.k_ref)) {
        TimePartition::from_budget(*k, s.t_bar, s.t_under).map_err(|e| anyhow!("sampler: K = {k}: {e}"))?;
    }
    if k_axis && ks.iter().any(|&k| k >= s.k_ref) {
        bail!("sampler.k_ref: must exceed every swept K");
    }
    Ok(())
}

fn default_ks() -> Vec<usize> {
    vec![16, 64, 256]
}

/// Target measure for one sampler seed: a fresh frame and a fresh sample.
fn sampler_target(spec: &ExperimentSpec, dim: usize, s: u64) -> Result<FiniteMeasure> {
    let mut block = spec.manifold.clone();
    block.seed = block.seed.map(|b| b.wrapping_add(s));
    let m = block.build(dim)?;
    Ok(sample_measure(&m, &spec.measure.density, spec.measure.n, spec.seed.wrapping_add(s))?)
}

fn push_split(table: &mut MetricTable, k: &[String], e: &mdlab::samplers::SplitError) {
    table.push(k, Metric::plain("in_span_w1", e.in_span_w1));
    table.push(k, Metric::plain("out_of_span_w2", e.out_of_span_w2));
    table.push(k, Metric::plain("total", e.total));
}

struct SamplerCompare;

impl Scenario for SamplerCompare {
    fn name(&self) -> &'static str {
        "sampler.compare"
    }

    fn description(&self) -> &'static str {
        "terminal error of each reverse scheme at fixed K, swept over D"
    }

    fn default_dims(&self) -> Vec<usize> {
        vec![16, 256]
    }

    fn validate(&self, spec: &ExperimentSpec) -> Result<()> {
        validate_sampler(spec, false)
    }

    fn run(&self, spec: &ExperimentSpec, ctx: &RunContext) -> Result<Artifacts> {
        let s = &spec.sampler;
        let reg = scheme_registry();
        let partition = TimePartition::from_budget(s.k, s.t_bar, s.t_under)?;
        let dims = dims(self, spec);
        let mut points = Vec::new();
        for name in &s.schemes {
            for &dim in &dims {
                for seed in 0..s.seeds as u64 {
                    points.push((name.clone(), dim, seed));
                }
            }
        }
        let rows = ctx.map(points, |(name, dim, seed)| {
            let mu = sampler_target(spec, dim, seed)?;
            let run = SamplerRun {
                scheme: reg.get(&name)?,
                score: Arc::new(ExactScore::new(mu.clone())),
                partition: partition.clone(),
                n_paths: s.n_paths,
                seed: spec.seed.wrapping_add(seed).wrapping_add(1000),
                record_trajectories: false,
                noise: NoiseSource::Independent,
            };
            let cloud = run_backward(&run)?.terminal;
            let e = split_terminal_error(&cloud, &mu, s.t_under, spec.seed.wrapping_add(seed).wrapping_add(2000))?;
            Ok((name, dim, seed, e))
        })?;

        let mut table = MetricTable::new(&["scheme", "dim", "seed"]);
        for (name, dim, seed, e) in &rows {
            push_split(&mut table, &key(&[name, dim, seed]), e);
        }
        let mut medians = serde_json::Map::new();
        for name in &s.schemes {
            let per_dim: Vec<Value> = dims
                .iter()
                .map(|&d| {
                    let v: Vec<f64> = rows.iter().filter(|r| &r.0 == name && r.1 == d).map(|r| r.3.total).collect();
                    json!({ "dim": d, "median_total": median(&v) })
                })
                .collect();
            medians.insert(name.clone(), Value::Array(per_dim));
        }
        let summary = json!({ "scenario": self.name(), "k": s.k, "t_under": s.t_under, "medians": medians });
        let mut art = Artifacts::default();
        art.add("sampler_compare.csv", table.to_csv()?);
        art.add_json("summary.json", &summary)?;
        art.summary = summary;
        Ok(art)
    }
}

struct SamplerKSweep;

impl Scenario for SamplerKSweep {
    fn name(&self) -> &'static str {
        "sampler.k_sweep"
    }

    fn description(&self) -> &'static str {
        "terminal error against K, coupled to a fine reference run by shared Brownian paths"
    }

    fn default_dims(&self) -> Vec<usize> {
        vec![16]
    }

    fn validate(&self, spec: &ExperimentSpec) -> Result<()> {
        validate_sampler(spec, true)
    }

    fn run(&self, spec: &ExperimentSpec, ctx: &RunContext) -> Result<Artifacts> {
        let s = &spec.sampler;
        let reg = scheme_registry();
        let reference_scheme = reg.get("modified")?;
        let ks = spec.sweep.k.clone().unwrap_or_else(default_ks);
        let dims = dims(self, spec);
        let points: Vec<(usize, u64)> = dims.iter().flat_map(|&d| (0..s.seeds as u64).map(move |seed| (d, seed))).collect();
        let rows = ctx.map(points, |(dim, seed)| {
            let mu = sampler_target(spec, dim, seed)?;
            let score: Arc<dyn ScoreField> = Arc::new(ExactScore::new(mu.clone()));
            let mut parts = ks.iter().map(|&k| TimePartition::from_budget(k, s.t_bar, s.t_under)).collect::<mdlab::Result<Vec<_>>>()?;
            parts.push(TimePartition::from_budget(s.k_ref, s.t_bar, s.t_under)?);
            let noise = NoiseSource::Brownian { times: union_times(&parts.iter().collect::<Vec<_>>()) };
            let go = |scheme, p: &TimePartition| -> Result<Vec<DVector<f64>>> {
                let run = SamplerRun {
                    scheme,
                    score: score.clone(),
                    partition: p.clone(),
                    n_paths: s.n_paths,
                    seed: spec.seed.wrapping_add(seed).wrapping_add(100),
                    record_trajectories: false,
                    noise: noise.clone(),
                };
                Ok(run_backward(&run)?.terminal)
            };
            let reference = go(reference_scheme.clone(), &parts[ks.len()])?;
            let mut out = Vec::new();
            for name in &s.schemes {
                for (k, p) in ks.iter().zip(&parts) {
                    let cloud = go(reg.get(name)?, p)?;
                    out.push((name.clone(), *k, split_error_against(&cloud, &reference, &mu)?));
                }
            }
            Ok((dim, seed, out))
        })?;

        let mut table = MetricTable::new(&["scheme", "dim", "seed", "k"]);
        for (dim, seed, out) in &rows {
            for (name, k, e) in out {
                push_split(&mut table, &key(&[name, dim, seed, k]), e);
            }
        }
        let x: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
        let mut slopes = Vec::new();
        for name in &s.schemes {
            for &d in &dims {
                let meds: Vec<f64> = ks
                    .iter()
                    .map(|&k| {
                        let v: Vec<f64> = rows
                            .iter()
                            .filter(|r| r.0 == d)
                            .flat_map(|r| r.2.iter().filter(|e| &e.0 == name && e.1 == k).map(|e| e.2.total))
                            .collect();
                        median(&v)
                    })
                    .collect();
                let slope = if ks.len() >= 2 { json!(log_log_slope(&x, &meds)) } else { Value::Null };
                slopes.push(json!({ "scheme": name, "dim": d, "median_total": meds, "slope": slope }));
            }
        }
        let summary = json!({ "scenario": self.name(), "k": ks, "k_ref": s.k_ref, "fits": slopes });
        let mut art = Artifacts::default();
        art.add("sampler_k_sweep.csv", table.to_csv()?);
        art.add_json("summary.json", &summary)?;
        art.summary = summary;
        Ok(art)
    }
}

// ---------------------------------------------------------------------------
// Metric bounds
// ---------------------------------------------------------------------------

/// Integer weights keep masses rational so exact transport can split them.
fn random_measure(rng: &mut impl Rng, dim: usize, max_points: usize, scale: f64) -> Result<FiniteMeasure> {
    let n = rng.random_range(1..=max_points);
    let support = (0..n).map(|_| standard_normal(rng, dim) * scale).collect();
    let weights = (0..n).map(|_| rng.random_range(1..=3) as f64).collect();
    Ok(FiniteMeasure::normalized(support, weights)?)
}

struct SmlW2;

impl Scenario for SmlW2 {
    fn name(&self) -> &'static str {
        "bounds.sml_w2"
    }

    fn description(&self) -> &'static str {
        "score-matching loss between random finite measures against the W2 bound"
    }

    fn default_dims(&self) -> Vec<usize> {
        vec![4]
    }

    fn validate(&self, spec: &ExperimentSpec) -> Result<()> {
        let b = &spec.bounds;
        if b.pairs == 0 || b.max_points == 0 || b.max_dim == 0 {
            bail!("bounds: pairs, max_points and max_dim must be at least 1");
        }
        if !(b.t_min > 0.0 && b.t_max > b.t_min) {
            bail!("bounds.t_max: need 0 < t_min < t_max");
        }
        if b.mc_trials == 0 || b.nodes_per_doubling == 0 {
            bail!("bounds.mc_trials: Monte Carlo settings must be positive");
        }
        Ok(())
    }

    fn run(&self, spec: &ExperimentSpec, ctx: &RunContext) -> Result<Artifacts> {
        let b = &spec.bounds;
        let mut rng = master(spec.seed);
        let pairs: Vec<(usize, usize, FiniteMeasure, FiniteMeasure)> = (0..b.pairs)
            .map(|i| {
                let dim = rng.random_range(1..=b.max_dim);
                Ok((i, dim, random_measure(&mut rng, dim, b.max_points, 0.5)?, random_measure(&mut rng, dim, b.max_points, 0.5)?))
            })
            .collect::<Result<_>>()?;
        let mc = McConfig { trials: b.mc_trials, nodes_per_doubling: b.nodes_per_doubling, seed: spec.seed };
        let rows = ctx.map(pairs, |(i, dim, p, q)| Ok((i, dim, sml_bound_check(&p, &q, b.t_min, b.t_max, &mc.with_seed(spec.seed.wrapping_add(i as u64)))?)))?;

        let mut table = MetricTable::new(&["pair", "dim"]);
        let mut violations = 0;
        let mut worst = 0.0f64;
        for (i, dim, r) in &rows {
            let k = key(&[i, dim]);
            table.push(&k, Metric { stderr: Some(r.loss.stderr), bound: Some(r.bound), ratio: Some(r.ratio), ..Metric::plain("sm_loss", r.loss.value) });
            table.push(&k, Metric::plain("w2", r.w2));
            if r.ratio > 1.0 + 3.0 * r.ratio_stderr {
                violations += 1;
            }
            worst = worst.max(r.ratio);
        }
        let summary = json!({
            "scenario": self.name(),
            "pairs": b.pairs,
            "t_min": b.t_min,
            "t_max": b.t_max,
            "max_ratio": worst,
            "violations": violations,
        });
        let mut art = Artifacts { violated: violations > 0, ..Default::default() };
        art.add("sml_w2.csv", table.to_csv()?);
        art.add_json("summary.json", &summary)?;
        art.summary = summary;
        Ok(art)
    }
}

struct KlDissipation;

fn random_gaussian(rng: &mut impl Rng, dim: usize) -> Result<Gaussian> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose() * 0.5 + DMatrix::identity(dim, dim) * 0.2;
    Ok(Gaussian::new(standard_normal(rng, dim), cov)?)
}

impl Scenario for KlDissipation {
    fn name(&self) -> &'static str {
        "bounds.kl_dissipation"
    }

    fn description(&self) -> &'static str {
        "time derivative of KL between evolving Gaussians against a multiple of the relative Fisher information"
    }

    fn default_dims(&self) -> Vec<usize> {
        vec![3]
    }

    fn validate(&self, spec: &ExperimentSpec) -> Result<()> {
        if !(spec.bounds.factor > 0.0) {
            bail!("bounds.factor: must be positive");
        }
        if let Some(t) = spec.sweep.t.as_ref().and_then(|ts| ts.iter().find(|&&t| !(t > 1e-4))) {
            bail!("sweep.t: times must exceed 1e-4, got {t}");
        }
        Ok(())
    }

    fn run(&self, spec: &ExperimentSpec, _ctx: &RunContext) -> Result<Artifacts> {
        let b = &spec.bounds;
        let ts = spec.sweep.t.clone().unwrap_or_else(|| vec![0.1, 0.5, 1.0, 2.0]);
        let mut rng = master(spec.seed);
        let mut table = MetricTable::new(&["dim", "t"]);
        let mut worst = 0.0f64;
        for &dim in &dims(self, spec) {
            let p = random_gaussian(&mut rng, dim)?;
            let q = random_gaussian(&mut rng, dim)?;
            for &t in &ts {
                let r = kl_dissipation_check(&p, &q, t, 1e-5)?;
                let bound = b.factor * r.fisher;
                let ratio = r.lhs.abs() / bound;
                let k = key(&[&dim, &t]);
                table.push(&k, Metric { bound: Some(bound), ratio: Some(ratio), ..Metric::plain("dkl_dt", r.lhs) });
                table.push(&k, Metric::plain("relative_fisher", r.fisher));
                worst = worst.max((ratio - 1.0).abs());
            }
        }
        let summary = json!({
            "scenario": self.name(),
            "factor": b.factor,
            "tolerance": b.tolerance,
            "max_relative_error": worst,
        });
        let mut art = Artifacts { violated: worst > b.tolerance, ..Default::default() };
        art.add("kl_dissipation.csv", table.to_csv()?);
        art.add_json("summary.json", &summary)?;
        art.summary = summary;
        Ok(art)
    }
}

// ---------------------------------------------------------------------------
// Estimator
// ---------------------------------------------------------------------------

struct ErmDemo;

impl Scenario for ErmDemo {
    fn name(&self) -> &'static str {
        "estimator.erm_demo"
    }

    fn description(&self) -> &'static str {
        "train the structured score family by ERM and compare its loss with the zero score"
    }

    fn default_dims(&self) -> Vec<usize> {
        vec![8]
    }

    fn validate(&self, spec: &ExperimentSpec) -> Result<()> {
        let e = &spec.estimator;
        if e.samples == 0 || e.anchors == 0 || e.anchors > e.samples {
            bail!("estimator.anchors: need 1 <= anchors <= samples");
        }
        if e.frame_cap == 0 {
            bail!("estimator.frame_cap: must be at least 1");
        }
        if dims(self, spec).len() != 1 {
            bail!("sweep.dim: estimator.erm_demo takes a single dimension");
        }
        Ok(())
    }

    fn run(&self, spec: &ExperimentSpec, _ctx: &RunContext) -> Result<Artifacts> {
        let e = &spec.estimator;
        let dim = dims(self, spec)[0];
        let m = spec.manifold.build(dim)?;
        let population = sample_measure(&m, &spec.measure.density, spec.measure.n, spec.seed)?;
        let mut rng = master(spec.seed.wrapping_add(100));
        let samples: Vec<DVector<f64>> =
            (0..e.samples).map(|_| population.support()[population.sample_index(&mut rng)].clone()).collect();
        let af = build_anchor_frames(&samples, e.anchors, e.anchor_radius, e.frame_cap, spec.seed)?;
        let constants = FamilyConstants { n: samples.len(), d: m.intrinsic_dim(), ..e.constants };
        let train = mdlab::estimators::TrainConfig { seed: spec.seed, ..e.train };
        let model = StructuredScore::init(af.anchors, af.frames, &e.hidden, e.weight_bound, constants, (train.t_lo, train.t_hi), spec.seed)?;
        let out = erm_train(model, &samples, &train)?;
        let mc = McConfig { trials: 64, nodes_per_doubling: 8, seed: spec.seed.wrapping_add(5) };
        let trained = sm_loss(&out.model, &population, train.t_lo, train.t_hi, &mc)?;
        let zero = sm_loss(&ZeroScore { dim }, &population, train.t_lo, train.t_hi, &mc)?;

        let mut trace = csv::Writer::from_writer(Vec::new());
        trace.write_record(["step", "risk"])?;
        for (i, r) in out.risk_trace.iter().enumerate() {
            trace.write_record([i.to_string(), format!("{r:e}")])?;
        }
        let mut table = MetricTable::new(&["model"]);
        table.push(&key(&[&"trained"]), Metric { stderr: Some(trained.stderr), ..Metric::plain("sm_loss", trained.value) });
        table.push(&key(&[&"zero"]), Metric { stderr: Some(zero.stderr), ..Metric::plain("sm_loss", zero.value) });
        let mut checkpoint = Vec::new();
        out.model.write_json(&mut checkpoint)?;

        let summary = json!({
            "scenario": self.name(),
            "dim": dim,
            "samples": e.samples,
            "anchors": e.anchors,
            "steps": train.steps,
            "trained_loss": trained.value,
            "zero_loss": zero.value,
            "improvement": zero.value / trained.value,
        });
        let mut art = Artifacts::default();
        art.add("risk_trace.csv", trace.into_inner().map_err(|e| e.into_error())?);
        art.add("sm_loss.csv", table.to_csv()?);
        art.add("checkpoint.json", checkpoint);
        art.add_json("summary.json", &summary)?;
        art.summary = summary;
        Ok(art)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_is_registered() {
        let names = registry().names();
        for family in ["concentration.", "fit.rate", "sampler.compare", "sampler.k_sweep", "bounds.sml_w2", "bounds.kl_dissipation", "estimator.erm_demo"] {
            assert!(names.iter().any(|n| n.starts_with(family)), "{family}");
        }
        assert_eq!(names.len(), 13);
    }

    #[test]
    fn unknown_scheme_is_named() {
        let spec = ExperimentSpec::parse("scenario = \"sampler.compare\"\n[sampler]\nschemes = [\"euler\"]").unwrap();
        let e = validate(&spec).err().expect("invalid spec").to_string();
        assert!(e.starts_with("sampler.schemes:"), "{e}");
    }

    #[test]
    fn unused_axis_is_rejected() {
        let spec = ExperimentSpec::parse("scenario = \"concentration.inner_product\"\n[sweep]\ngamma = [0.1]").unwrap();
        assert!(validate(&spec).err().expect("invalid spec").to_string().starts_with("sweep.gamma:"));
    }
}
