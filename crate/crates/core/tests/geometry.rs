use mdlab::geometry::*;
use mdlab::poly::PolyTerm;
use mdlab::rng::master;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::f64::consts::PI;

fn parabola(dim: usize, seed: Option<u64>) -> EmbeddedManifold {
    let kind = ManifoldKind::PolyGraph {
        dim: 1,
        chart_radius: 0.3,
        terms: vec![PolyTerm { exponents: vec![2], coeffs: vec![1.0] }],
    };
    make_manifold(kind, dim, seed).unwrap()
}

fn test_manifolds(dim: usize, seed: u64) -> Vec<EmbeddedManifold> {
    vec![
        make_manifold(ManifoldKind::Circle { radius: 1.5 }, dim, Some(seed)).unwrap(),
        make_manifold(ManifoldKind::Sphere { dim: 2, radius: 1.0 }, dim, Some(seed)).unwrap(),
        parabola(dim, Some(seed)),
    ]
}

#[test]
fn uniform_circle_moments() {
    let m = make_manifold(ManifoldKind::Circle { radius: 1.0 }, 2, None).unwrap();
    let mu = sample_measure(&m, &DensitySpec::Uniform, 400_000, 1).unwrap();
    let n = mu.len() as f64;
    let mean = mu.mean();
    assert!(mean.norm() < 5e-3, "mean {mean}");
    for k in 0..2 {
        let var = mu.support().iter().map(|y| (y[k] - mean[k]).powi(2)).sum::<f64>() / n;
        assert!((var / 0.5 - 1.0).abs() < 0.02, "variance {var}");
    }
}

#[test]
fn single_sample_lies_on_manifold() {
    for m in test_manifolds(6, 2) {
        let mu = sample_measure(&m, &DensitySpec::Uniform, 1, 3).unwrap();
        assert!(m.distance(&mu.support()[0]) < 1e-10);
    }
}

#[test]
fn cosine_density_histogram() {
    let m = make_manifold(ManifoldKind::Circle { radius: 1.0 }, 5, Some(4)).unwrap();
    let mu = sample_measure(&m, &DensitySpec::Cosine { amplitude: 1.0 }, 20_000, 5).unwrap();
    let bins = 20;
    let mut counts = vec![0.0; bins];
    for y in mu.support() {
        let c = m.to_canonical(y);
        let a = c[1].atan2(c[0]).rem_euclid(2.0 * PI);
        counts[((a / (2.0 * PI) * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    // Bin masses of (1 + cos θ)/(2π) from its antiderivative.
    let cdf = |a: f64| (a + a.sin()) / (2.0 * PI);
    let n = mu.len() as f64;
    let stat: f64 = (0..bins)
        .map(|b| {
            let lo = 2.0 * PI * b as f64 / bins as f64;
            let hi = 2.0 * PI * (b + 1) as f64 / bins as f64;
            let e = n * (cdf(hi) - cdf(lo));
            (counts[b] - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}");
}

#[test]
fn eps_net_examples() {
    let p = DVector::from_vec(vec![0.2, 0.3]);
    assert_eq!(eps_net(&[p.clone(), p.clone(), p], 0.1).unwrap().len(), 1);
    assert!(eps_net(&[], 0.1).unwrap().is_empty());
    let m = make_manifold(ManifoldKind::Circle { radius: 1.0 }, 2, None).unwrap();
    let pts = m.grid(2.0 * PI / 100.0).unwrap();
    assert_eq!(pts.len(), 100);
    let net = eps_net(&pts, 0.5).unwrap();
    assert!((13..=26).contains(&net.len()), "size {}", net.len());
    assert!(net.is_dense_over(&pts) && net.is_sparse());
    assert!(net.within_volume_bound(1, m.volume()));
}

#[test]
fn parabola_projector_matches_difference_tangent() {
    let m = parabola(8, Some(6));
    let mut rng = master(7);
    for _ in 0..10 {
        let z: f64 = rng.random_range(-0.3..0.3);
        let point = |z: f64| m.embed(&DVector::from_vec(vec![z, z * z]));
        let y = point(z);
        let p = m.tangent_projector(&y).unwrap();
        assert!((&p * &p - &p).amax() < 1e-12);
        assert!((&p - p.transpose()).amax() < 1e-14);
        assert!((p.trace() - 1.0).abs() < 1e-12);
        let h = 1e-6;
        let v = (point(z + h) - point(z - h)) / (2.0 * h);
        assert!((&p * &v - &v).norm() < 1e-6 * v.norm());
    }
}

#[test]
fn tangent_examples() {
    let c = make_manifold(ManifoldKind::Circle { radius: 1.0 }, 2, None).unwrap();
    let p = c.tangent_projector(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
    assert!((p[(1, 1)] - 1.0).abs() < 1e-15 && p[(0, 0)].abs() < 1e-15);
    let s = make_manifold(ManifoldKind::Sphere { dim: 2, radius: 1.0 }, 3, None).unwrap();
    let pole = DVector::from_vec(vec![0.0, 0.0, 1.0]);
    let p = s.tangent_projector(&pole).unwrap();
    assert!((p.trace() - 2.0).abs() < 1e-12);
    assert!((&p * &pole).norm() < 1e-15);
}

#[test]
fn sphere_ball_volume_sandwich() {
    let d = 2;
    let m = make_manifold(ManifoldKind::Sphere { dim: d, radius: 1.0 }, 10, Some(8)).unwrap();
    let mu = sample_measure(&m, &DensitySpec::Uniform, 200_000, 9).unwrap();
    let y = m.anchor_point();
    let cd = unit_ball_volume(d);
    for eps in [0.06, 0.1] {
        assert!(eps < m.r0());
        let frac = mu.support().iter().filter(|x| (*x - &y).norm() <= eps).count() as f64 / mu.len() as f64;
        let vol = frac * m.volume();
        let base = cd * f64::powi(eps, d as i32);
        assert!(vol >= base / 4.0 && vol <= base * 4.0, "eps {eps}: {vol} vs {base}");
    }
}

#[test]
fn complexity_constant_holds_for_test_manifolds() {
    for m in test_manifolds(4, 1) {
        let c = ComplexityConstant::for_manifold(&m).unwrap();
        assert!(c.satisfied_by(&m));
        let m = m.with_density(DensitySpec::Cosine { amplitude: 0.5 }).unwrap();
        assert!(ComplexityConstant::for_manifold(&m).unwrap().satisfied_by(&m));
    }
}

#[test]
fn ambient_dimension_too_small_is_rejected() {
    assert!(make_manifold(ManifoldKind::Sphere { dim: 2, radius: 1.0 }, 2, None).is_err());
    assert!(make_manifold(ManifoldKind::Circle { radius: -1.0 }, 3, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chart_is_bi_lipschitz(seed in 0u64..1000, dim in 3usize..12, scale in 0.0f64..1.0, which in 0usize..3) {
        let m = test_manifolds(dim, seed).swap_remove(which);
        let mut rng = master(seed);
        // Graph bases stay inside the parameter domain so the chart ball does too.
        let base = if which == 2 {
            let w: f64 = rng.random_range(-0.2..0.2);
            m.embed(&DVector::from_vec(vec![w, w * w]))
        } else {
            sample_measure(&m, &DensitySpec::Uniform, 1, seed).unwrap().support()[0].clone()
        };
        let d = m.intrinsic_dim();
        let dir = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        prop_assume!(dir.norm() > 1e-3);
        let z = dir.normalize() * (scale * m.reach() / 8.0);
        let x = m.chart(&base, &z).unwrap();
        let r = (&x - &base).norm();
        prop_assert!(z.norm() <= r * (1.0 + 1e-12) + 1e-15);
        prop_assert!(r <= 2.0 * z.norm() + 1e-15);
        prop_assert!(m.distance(&x) < 1e-9);
    }

    #[test]
    fn eps_net_predicates(seed in 0u64..1000, n in 0usize..120, dim in 1usize..6, eps in 0.05f64..1.5) {
        let mut rng = master(seed);
        let pts: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))).collect();
        let net = eps_net(&pts, eps).unwrap();
        prop_assert!(net.is_dense_over(&pts));
        prop_assert!(net.is_sparse());
        // Brute force: every point within ε/2 of some center, which the greedy pass guarantees.
        for p in &pts {
            prop_assert!(net.centers.iter().any(|c| (p - c).norm() <= eps / 2.0));
        }
    }
}
