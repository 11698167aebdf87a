use approx::assert_relative_eq;
use mdlab::diffusion::{forward_sample, FiniteMeasure};
use mdlab::metrics::*;
use mdlab::rng::{master, standard_normal};
use mdlab::stats::Accumulator;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{Continuous, Normal};

fn cloud(seed: u64, n: usize, dim: usize) -> Vec<DVector<f64>> {
    let mut rng = master(seed);
    (0..n).map(|_| standard_normal(&mut rng, dim)).collect()
}

fn uniform(pts: Vec<DVector<f64>>) -> FiniteMeasure {
    FiniteMeasure::uniform(pts).unwrap()
}

#[test]
fn one_dimensional_w1_matches_sorted_coupling() {
    for seed in 0..5 {
        let a = cloud(seed, 50, 1);
        let b: Vec<DVector<f64>> = cloud(seed + 10, 50, 1).into_iter().map(|x| x * 2.0 + DVector::from_element(1, 0.3)).collect();
        let mut xa: Vec<f64> = a.iter().map(|v| v[0]).collect();
        let mut xb: Vec<f64> = b.iter().map(|v| v[0]).collect();
        xa.sort_by(f64::total_cmp);
        xb.sort_by(f64::total_cmp);
        let sorted: f64 = xa.iter().zip(&xb).map(|(p, q)| (p - q).abs()).sum::<f64>() / 50.0;
        assert_relative_eq!(w_p_clouds(&a, &b, 1).unwrap(), sorted, max_relative = 1e-12);
        let sorted2: f64 = (xa.iter().zip(&xb).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 50.0).sqrt();
        assert_relative_eq!(w_p_clouds(&a, &b, 2).unwrap(), sorted2, max_relative = 1e-12);
    }
}

#[test]
fn assignment_matches_brute_force() {
    let mut rng = master(4);
    for _ in 0..20 {
        let n = rng.random_range(1..=6);
        let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..10.0));
        let (_, total) = linear_assignment(&c).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| best = best.min(p.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum()));
        assert_relative_eq!(total, best, max_relative = 1e-12);
    }
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

#[test]
fn translation_gives_shift_length() {
    let a = cloud(1, 30, 4);
    let shift = DVector::from_vec(vec![0.5, -0.2, 0.1, 0.0]);
    let b: Vec<DVector<f64>> = a.iter().map(|x| x + &shift).collect();
    assert_relative_eq!(w_p_clouds(&a, &b, 2).unwrap(), shift.norm(), max_relative = 1e-12);
}

#[test]
fn oversized_clouds_are_refused() {
    let a = vec![DVector::zeros(1); 5000];
    assert!(w_p_clouds(&a, &a, 1).is_err());
    assert!(w_p(&uniform(cloud(0, 2, 1)), &uniform(cloud(1, 2, 1)), 3).is_err());
}

fn kl_1d_quadrature(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let p = Normal::new(m1, s1).unwrap();
    let q = Normal::new(m2, s2).unwrap();
    let (lo, hi, n) = (m1 - 12.0 * s1, m1 + 12.0 * s1, 20_000);
    let h = (hi - lo) / n as f64;
    (0..n)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            p.pdf(x) * (p.ln_pdf(x) - q.ln_pdf(x)) * h
        })
        .sum()
}

#[test]
fn gaussian_kl_matches_quadrature_on_diagonal_laws() {
    let m1 = DVector::from_vec(vec![0.3, -1.0]);
    let m2 = DVector::from_vec(vec![-0.2, 0.5]);
    let s1 = [0.7, 1.3];
    let s2 = [1.1, 0.6];
    let exact: f64 = (0..2).map(|k| kl_1d_quadrature(m1[k], s1[k], m2[k], s2[k])).sum();
    let c1 = DMatrix::from_diagonal(&DVector::from_vec(vec![s1[0] * s1[0], s1[1] * s1[1]]));
    let c2 = DMatrix::from_diagonal(&DVector::from_vec(vec![s2[0] * s2[0], s2[1] * s2[1]]));
    assert_relative_eq!(kl_gaussian(&m1, &c1, &m2, &c2).unwrap(), exact, max_relative = 1e-8);
}

#[test]
fn evolved_gaussian_matches_forward_moments() {
    // A point mass at m evolves to N(c m, σ² I).
    let m = DVector::from_vec(vec![1.0, -2.0]);
    let g = Gaussian::new(m.clone(), DMatrix::zeros(2, 2)).unwrap().evolve(0.4).unwrap();
    let mu = FiniteMeasure::dirac(m);
    let mut rng = master(2);
    let mut acc = [Accumulator::default(), Accumulator::default()];
    for _ in 0..20_000 {
        let x = forward_sample(&mu, 0.4, &mut rng).unwrap().xt;
        acc[0].push(x[0]);
        acc[1].push((x[1] - g.mean[1]).powi(2));
    }
    assert!((acc[0].mean() - g.mean[0]).abs() < 4.0 * acc[0].stderr());
    assert!((acc[1].mean() - g.cov[(1, 1)]).abs() < 4.0 * acc[1].stderr());
}

#[test]
fn kl_derivative_equals_minus_relative_fisher() {
    let p = Gaussian::new(DVector::from_vec(vec![0.5, 0.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8])).unwrap();
    let q = Gaussian::new(DVector::from_vec(vec![-0.4, 0.2]), DMatrix::from_row_slice(2, 2, &[0.6, -0.1, -0.1, 1.2])).unwrap();
    for t in [0.1, 0.5, 1.0, 2.0] {
        let r = kl_dissipation_check(&p, &q, t, 1e-5).unwrap();
        assert!(r.lhs < 0.0);
        assert!(r.unit_rel_error() < 1e-6, "t={t}: {r:?}");
        assert!((r.magnitude_rel_error() - 0.5).abs() < 1e-6);
    }
}

#[test]
fn sml_bound_equal_measures_is_zero() {
    let p = uniform(cloud(3, 4, 2));
    let r = sml_bound_check(&p, &p, 0.1, 0.18, &mdlab::diffusion::McConfig::default()).unwrap();
    assert_eq!(r.loss.value, 0.0);
    assert_eq!(r.ratio, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn w_p_is_a_metric(seed in 0u64..10_000, n in 1usize..=64, dim in 1usize..5, p in 1u32..=2) {
        let a = cloud(seed, n, dim);
        let b = cloud(seed + 1, n, dim);
        let c = cloud(seed + 2, n, dim);
        let ab = w_p_clouds(&a, &b, p).unwrap();
        let ba = w_p_clouds(&b, &a, p).unwrap();
        let bc = w_p_clouds(&b, &c, p).unwrap();
        let ac = w_p_clouds(&a, &c, p).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert!(w_p_clouds(&a, &a, p).unwrap() <= 1e-12);
    }

    #[test]
    fn unequal_sizes_preserve_marginals(seed in 0u64..10_000, na in 1usize..8, nb in 1usize..8) {
        let a = uniform(cloud(seed, na, 2));
        let b = uniform(cloud(seed + 7, nb, 2));
        let w = w_p(&a, &b, 1).unwrap();
        let (ma, mb) = w.plan.marginals(na, nb);
        for (x, y) in ma.iter().zip(a.weights()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in mb.iter().zip(b.weights()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
