//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion's outcome differs from what is recorded below.
//!
//! `cargo test --test acceptance -- 4 9` runs only criteria 4 and 9.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mdlab::concentration::*;
use mdlab::diffusion::*;
use mdlab::estimators::*;
use mdlab::fit::*;
use mdlab::geometry::*;
use mdlab::linalg::random_orthonormal;
use mdlab::metrics::{kl_dissipation_check, sml_bound_check, Gaussian};
use mdlab::rng::{master, standard_normal};
use mdlab::samplers::*;
use mdlab::stats::{log_log_slope, median};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Criteria known not to hold with the implemented quantities. They must keep
/// failing; a pass means the recorded analysis is stale.
const EXPECTED_FAILURES: &[u32] = &[11];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() -> ExitCode {
    let criteria: Vec<(u32, &str, u64, fn() -> Outcome)> = vec![
        (1, "score matches finite-difference gradient", 10, c01_score_fd),
        (2, "score-matching and denoising risks differ by a constant", 120, c02_vincent),
        (3, "denoiser error is dimension free", 300, c03_denoiser),
        (4, "concentration violation rates", 900, c04_violation_rates),
        (5, "modified scheme is exact for a point mass", 60, c05_modified_exact),
        (6, "scheme separation across D", 600, c06_separation),
        (7, "modified-scheme error decays in K", 600, c07_k_decay),
        (8, "manifold fit Hausdorff rate", 600, c08_fit_rate),
        (9, "restricted and ambient chart solves agree", 60, c09_subspace),
        (10, "W2 bounds the score-matching loss", 300, c10_sml_w2),
        (11, "KL dissipation magnitude", 10, c11_kl_dissipation),
        (12, "trained estimator beats the zero score", 300, c12_erm),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = 0;
    for (id, name, budget, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let pass = o.pass && in_time;
        let expected_fail = EXPECTED_FAILURES.contains(&id);
        let tag = match (pass, expected_fail) {
            (true, false) => "PASS",
            (false, true) => "FAIL (expected)",
            (false, false) => "FAIL",
            (true, true) => "PASS (unexpected)",
        };
        if pass == expected_fail {
            unexpected += 1;
        }
        println!(
            "{tag} [{id:02}] {name}: {} ({:.1} s / {budget} s)",
            o.detail,
            elapsed.as_secs_f64()
        );
    }
    if unexpected > 0 {
        println!("{unexpected} criteria did not match their recorded outcome");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn circle(radius: f64, dim: usize, seed: u64) -> EmbeddedManifold {
    make_manifold(ManifoldKind::Circle { radius }, dim, Some(seed)).unwrap()
}

/// Integer weights keep the masses rational, which exact transport needs.
fn random_measure(rng: &mut impl Rng, dim: usize, max_points: usize, scale: f64) -> FiniteMeasure {
    let n = rng.random_range(1..=max_points);
    let support = (0..n).map(|_| standard_normal(rng, dim) * scale).collect();
    let weights = (0..n).map(|_| rng.random_range(1..=3) as f64).collect();
    FiniteMeasure::normalized(support, weights).unwrap()
}

fn c01_score_fd() -> Outcome {
    let mut rng = master(101);
    let h = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dim = rng.random_range(1..=8);
        let mu = random_measure(&mut rng, dim, 10, 1.0);
        let t = (rng.random_range(0.05f64.ln()..2.0f64.ln())).exp();
        let x = standard_normal(&mut rng, dim);
        let s = exact_score(&mu, t, &x).unwrap();
        let f = |x: &DVector<f64>| log_density(&mu, t, x).unwrap();
        // Fourth-order central difference.
        let fd = DVector::from_fn(dim, |k, _| {
            let e = |a: f64| {
                let mut y = x.clone();
                y[k] += a * h;
                f(&y)
            };
            (8.0 * (e(1.0) - e(-1.0)) - (e(2.0) - e(-2.0))) / (12.0 * h)
        });
        worst = worst.max((&fd - &s).norm() / s.norm().max(1e-12));
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.2e} < 1e-5 over 50 configs"))
}

fn c02_vincent() -> Outcome {
    let dim = 6;
    let m = circle(1.0, dim, 7);
    let mu = sample_measure(&m, &DensitySpec::Uniform, 30, 7).unwrap();
    let shifted = FiniteMeasure::uniform(mu.support().iter().map(|y| y * 0.8).collect()).unwrap();
    let sub = FiniteMeasure::uniform(mu.support()[..10].to_vec()).unwrap();
    let exact: Arc<dyn ScoreField> = Arc::new(ExactScore::new(mu.clone()));
    let zero: Arc<dyn ScoreField> = Arc::new(ZeroScore { dim });
    let origin: Arc<dyn ScoreField> = Arc::new(FnScore::new(dim, "origin", |t, x: &DVector<f64>| -x / sigma2(t)));
    let damped: Arc<dyn ScoreField> = Arc::new(FnScore::new(dim, "damped", |_, x: &DVector<f64>| -x * 0.5));
    let pairs: Vec<(Arc<dyn ScoreField>, Arc<dyn ScoreField>)> = vec![
        (exact.clone(), zero.clone()),
        (exact.clone(), Arc::new(ExactScore::new(shifted))),
        (origin.clone(), zero),
        (exact, Arc::new(ExactScore::new(sub))),
        (damped, origin),
    ];
    let (a, b) = (0.1, 1.0);
    let mut worst = 0.0f64;
    let mut ok = true;
    for (k, (s1, s2)) in pairs.iter().enumerate() {
        let mc = McConfig { trials: 64, nodes_per_doubling: 8, seed: 200 + k as u64 };
        let sm = sm_loss_diff(s1, s2, &mu, a, b, &McConfig { trials: 64 * 30, ..mc }).unwrap();
        let er = empirical_risk_diff(s1, s2, mu.support(), a, b, &McConfig { seed: mc.seed + 50, ..mc }).unwrap();
        let se = (sm.stderr.powi(2) + er.stderr.powi(2)).sqrt();
        let z = (sm.value - er.value).abs() / se;
        worst = worst.max(z);
        ok &= z <= 3.0;
    }
    outcome(ok, format!("max |Δsm − Δrisk| / SE = {worst:.2} ≤ 3 over 5 pairs"))
}

fn c03_denoiser() -> Outcome {
    let cfg = CheckConfig { trials: 2000, seed: 3, ..Default::default() };
    let dims = [8usize, 64, 512];
    let reports: Vec<BoundReport> = dims
        .iter()
        .map(|&d| {
            let m = circle(1.0, d, 1);
            let mu = sample_measure(&m, &DensitySpec::Uniform, 500, 3).unwrap();
            check_denoiser_variance(&m, &mu, 0.05, &cfg).unwrap()
        })
        .collect();
    let medians: Vec<f64> = reports.iter().map(|r| r.median()).collect();
    let spread = median_spread(&reports);
    let below = reports.iter().all(|r| r.extras["mean_sq"] < r.extras["expectation_bound"]);
    let control = reports.iter().zip(dims).all(|(r, d)| (r.extras["control_mean_sq"] / d as f64 - 1.0).abs() < 0.05);
    outcome(
        spread <= 1.25 && below && control,
        format!(
            "medians {medians:.3?} spread {spread:.3} ≤ 1.25, mean below {:.0}: {below}, control ≈ D: {control}",
            reports[0].extras["expectation_bound"]
        ),
    )
}

fn c04_violation_rates() -> Outcome {
    let cfg = CheckConfig { trials: 2000, delta: 0.05, ..Default::default() };
    let mut reports = Vec::new();
    reports.push(check_inner_product_sup(&circle(1.0, 64, 1), 0.1, &cfg).unwrap());
    let sphere = make_manifold(ManifoldKind::Sphere { dim: 2, radius: 1.0 }, 64, Some(2)).unwrap();
    reports.push(check_tangent_projection(&sphere, &cfg).unwrap());
    let m = circle(1.0, 16, 1);
    let mu = sample_measure(&m, &DensitySpec::Uniform, 500, 3).unwrap();
    reports.push(check_posterior_band(&m, &mu, 0.01, &cfg).unwrap());
    let m = circle(1.0, 64, 1);
    let mu = sample_measure(&m, &DensitySpec::Uniform, 500, 4).unwrap();
    reports.push(check_denoiser_variance(&m, &mu, 0.05, &cfg).unwrap());
    let m = circle(1.0, 32, 1);
    let mu = sample_measure(&m, &DensitySpec::Cosine { amplitude: 0.5 }, 400, 5).unwrap();
    let net = manifold_net(&m, 0.1, 0).unwrap();
    reports.push(check_weight_radius(&m, &mu, &net, 0.05, &cfg).unwrap());
   
    let ok = reports.iter().all(|r| r.passes());
    let rates: Vec<String> = reports.iter().map(|r| format!("{} {:.4}", r.name, r.violation_rate())).collect();
    outcome(ok, format!("rates [{}] ≤ 0.05 + 3 SE", rates.join(", ")))
}

fn c05_modified_exact() -> Outcome {
    let dim = 16;
    let n = 4000;
    let score: Arc<dyn ScoreField> = Arc::new(ExactScore::new(FiniteMeasure::dirac(DVector::zeros(dim))));
    let scheme = scheme_registry().get("modified").unwrap();
    let u = DVector::from_element(dim, 1.0 / (dim as f64).sqrt());
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [8usize, 64] {
        let partition = TimePartition::make_schedule(0.2, 2, k).unwrap();
        let target = sigma2(partition.t_under());
        let run = SamplerRun {
            scheme: scheme.clone(),
            score: score.clone(),
            partition,
            n_paths: n,
            seed: 50 + k as u64,
            record_trajectories: false,
            noise: NoiseSource::Independent,
        };
        let out = run_backward(&run).unwrap().terminal;
        let proj: Vec<f64> = out.iter().map(|y| u.dot(y)).collect();
        let mean = proj.iter().sum::<f64>() / n as f64;
        let se = (target / n as f64).sqrt();
        let var = out.iter().map(|y| y.norm_squared()).sum::<f64>() / (n * dim) as f64;
        let rel = (var / target - 1.0).abs();
        ok &= mean.abs() <= 3.0 * se && rel <= 0.02;
        parts.push(format!("K={k}: mean {:.2} SE, variance off {:.2}%", mean.abs() / se, 100.0 * rel));
    }
    outcome(ok, parts.join("; "))
}

fn c06_separation() -> Outcome {
    let reg = scheme_registry();
    let tu = 0.05;
    let partition = TimePartition::from_budget(32, 2.0, tu).unwrap();
    let err = |name: &str, dim: usize, seed: u64| {
        let m = circle(0.5, dim, seed);
        let mu = sample_measure(&m, &DensitySpec::Uniform, 50, seed).unwrap();
        let run = SamplerRun {
            scheme: reg.get(name).unwrap(),
            score: Arc::new(ExactScore::new(mu.clone())),
            partition: partition.clone(),
            n_paths: 500,
            seed: seed + 1000,
            record_trajectories: false,
            noise: NoiseSource::Independent,
        };
        let cloud = run_backward(&run).unwrap().terminal;
        split_terminal_error(&cloud, &mu, tu, seed + 2000).unwrap().total
    };
    let growth = |name: &str| {
        let lo: Vec<f64> = (0..10).map(|s| err(name, 16, s)).collect();
        let hi: Vec<f64> = (0..10).map(|s| err(name, 256, s)).collect();
        median(&hi) / median(&lo)
    };
    let classic = growth("classic");
    let modified = growth("modified");
    outcome(
        classic >= 2.0 && modified <= 1.3,
        format!("D 16→256 growth: classic {classic:.2} ≥ 2, modified {modified:.2} ≤ 1.3"),
    )
}

fn c07_k_decay() -> Outcome {
    let reg = scheme_registry();
    let scheme = reg.get("modified").unwrap();
    let dim = 16;
    let tu = 0.05;
    let ks = [16usize, 64, 256];
    let k_ref = 2048;
    let mut per_k: Vec<Vec<f64>> = vec![Vec::new(); ks.len()];
    for seed in 0..5u64 {
        let m = circle(0.5, dim, seed);
        let mu = sample_measure(&m, &DensitySpec::Uniform, 50, seed).unwrap();
        let score: Arc<dyn ScoreField> = Arc::new(ExactScore::new(mu.clone()));
        let parts: Vec<TimePartition> =
            ks.iter().chain([k_ref].iter()).map(|&k| TimePartition::from_budget(k, 2.0, tu).unwrap()).collect();
        let times = union_times(&parts.iter().collect::<Vec<_>>());
        let go = |p: &TimePartition| {
            let run = SamplerRun {
                scheme: scheme.clone(),
                score: score.clone(),
                partition: p.clone(),
                n_paths: 1000,
                seed: seed + 100,
                record_trajectories: false,
                noise: NoiseSource::Brownian { times: times.clone() },
            };
            run_backward(&run).unwrap().terminal
        };
        let reference = go(&parts[ks.len()]);
        for (i, p) in parts[..ks.len()].iter().enumerate() {
            per_k[i].push(split_error_against(&go(p), &reference, &mu).unwrap().total);
        }
    }
    let errs: Vec<f64> = per_k.iter().map(|v| median(v)).collect();
    let x: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let slope = log_log_slope(&x, &errs);
    outcome(slope <= -0.4, format!("median errors {errs:.4?}, log-log slope {slope:.3} ≤ -0.4"))
}

fn c08_fit_rate() -> Outcome {
    let m = circle(1.0, 8, 2);
    let ns = [100usize, 200, 400, 800, 1600];
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let mut slopes = Vec::new();
    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); ns.len()];
    for seed in 0..5u64 {
        let pilot = sample_measure(&m, &DensitySpec::Uniform, 200, 1000 + seed).unwrap();
        let c = pilot_constant(pilot.support(), 1).unwrap();
        let mut hs = Vec::new();
        for (i, &n) in ns.iter().enumerate() {
            let mu = sample_measure(&m, &DensitySpec::Uniform, n, seed * 100 + n as u64).unwrap();
            let s = fit_surface(mu.support(), 1, 2.0, &EpsConfig::Scaling { constant: Some(c) }, &SolverConfig::default())
                .unwrap();
            hs.push(hausdorff_surface(&s, &m, 20).unwrap());
            let max_v = *s.neighbor_counts.iter().max().unwrap() as f64;
            ratios[i].push(max_v / (n as f64).ln());
        }
        slopes.push(log_log_slope(&x, &hs));
    }
    let slope = median(&slopes);
    let ratio_medians: Vec<f64> = ratios.iter().map(|r| median(r)).collect();
    let (lo, hi) = ratio_medians.iter().fold((f64::MAX, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));
    let stable = hi / lo <= 2.0;
    outcome(
        (-2.6..=-1.4).contains(&slope) && stable,
        format!("median slope {slope:.3} in [-2.6, -1.4]; max|V|/ln n {ratio_medians:.2?} spread {:.2} ≤ 2", hi / lo),
    )
}

fn c09_subspace() -> Outcome {
    let mut rng = master(909);
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let dim = rng.random_range(4..=20);
        let (kind, d, eps) = if i % 2 == 0 {
            (ManifoldKind::Circle { radius: 1.0 }, 1, 0.3)
        } else {
            (ManifoldKind::Sphere { dim: 2, radius: 1.0 }, 2, 0.45)
        };
        let m = make_manifold(kind, dim.max(3), Some(i)).unwrap();
        let mu = sample_measure(&m, &DensitySpec::Uniform, 200, i).unwrap();
        let pts = mu.support();
        let vs = neighbor_set(pts, 0, eps).unwrap();
        let cfg = SolverConfig { max_iter: 2000, rel_tol: 1e-14, ..Default::default() };
        let r = fit_local_chart(&pts[0], &vs, d, 3.0, eps, &cfg).unwrap();
        let f = fit_local_chart_full(&pts[0], &vs, d, 3.0, eps, &cfg).unwrap();
        worst = worst.max((r.objective - f.objective).abs());
    }
    outcome(worst <= 1e-8, format!("max objective gap {worst:.2e} ≤ 1e-8 over 20 instances"))
}

fn c10_sml_w2() -> Outcome {
    let (a, b) = (0.1, 0.18);
    let mc = McConfig { trials: 32, nodes_per_doubling: 8, seed: 0 };
    let mut rng = master(1010);
    let mut worst = 0.0f64;
    let mut ok = true;
    for k in 0..100u64 {
        let dim = rng.random_range(1..=4);
        let p = random_measure(&mut rng, dim, 4, 0.5);
        let q = random_measure(&mut rng, dim, 4, 0.5);
        let r = sml_bound_check(&p, &q, a, b, &mc.with_seed(k)).unwrap();
        ok &= r.ratio <= 1.0 + 3.0 * r.ratio_stderr;
        worst = worst.max(r.ratio);
    }
    let p = FiniteMeasure::dirac(DVector::zeros(3));
    let q = FiniteMeasure::dirac(DVector::from_vec(vec![0.3, 0.0, 0.0]));
    let tight = sml_bound_check(&p, &q, a, b, &mc).unwrap().ratio;
    outcome(
        ok && tight >= 0.4,
        format!("max ratio {worst:.3} ≤ 1 + 3 SE over 100 pairs; point-mass pair ratio {tight:.3} ≥ 0.4"),
    )
}

fn random_gaussian(rng: &mut impl Rng, dim: usize) -> Gaussian {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose() * 0.5 + DMatrix::identity(dim, dim) * 0.2;
    Gaussian::new(standard_normal(rng, dim), cov).unwrap()
}

fn c11_kl_dissipation() -> Outcome {
    let mut rng = master(1111);
    let p = random_gaussian(&mut rng, 3);
    let q = random_gaussian(&mut rng, 3);
    let checks: Vec<_> = [0.1, 0.5, 1.0, 2.0].iter().map(|&t| kl_dissipation_check(&p, &q, t, 1e-5).unwrap()).collect();
    let worst = checks.iter().map(|c| c.magnitude_rel_error()).fold(0.0, f64::max);
    let unit = checks.iter().map(|c| c.unit_rel_error()).fold(0.0, f64::max);
    outcome(
        worst < 0.01,
        format!("|dKL/dt| vs 2·Fisher off by {:.1}% (< 1% needed); vs 1·Fisher off by {unit:.1e}", 100.0 * worst),
    )
}

fn c12_erm() -> Outcome {
    let dim = 8;
    let seed = 3;
    let mut rng = master(seed);
    let v = random_orthonormal(&mut rng, dim, 1).column(0).into_owned();
    let mu = FiniteMeasure::uniform(vec![&v * 0.5, &v * -0.5]).unwrap();
    let mut rng = master(seed + 100);
    let samples: Vec<DVector<f64>> = (0..200).map(|_| mu.support()[rng.random_range(0..2)].clone()).collect();
    let af = build_anchor_frames(&samples, 8, 1.5, 4, seed).unwrap();
    let constants = FamilyConstants { n: samples.len(), d: 1, ..Default::default() };
    let model = StructuredScore::init(af.anchors, af.frames, &[16, 16], 10.0, constants, (0.25, 0.5), seed).unwrap();
    let cfg = TrainConfig { steps: 2000, step_size: 2e-3, ..Default::default() };
    let out = erm_train(model, &samples, &cfg).unwrap();
    let mc = McConfig { trials: 64, nodes_per_doubling: 8, seed: 5 };
    let trained = sm_loss(&out.model, &mu, 0.25, 0.5, &mc).unwrap().value;
    let zero = sm_loss(&ZeroScore { dim }, &mu, 0.25, 0.5, &mc).unwrap().value;
    outcome(zero >= 3.0 * trained, format!("zero-score loss / trained loss = {:.2} ≥ 3", zero / trained))
}
