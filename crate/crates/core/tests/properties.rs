mod common;

use std::sync::Arc;

use nalgebra::DVector;
use proptest::prelude::*;

use common::dv;
use parot::cost::{self, CostModel};
use parot::diagnostics::{analyze_polynomial, dichotomy_thresholds, mtw_tensor, poly_value};
use parot::geometry::{build_grid, normalize_densities, DensityField, DomainSpec};
use parot::oracle::{monotone_rearrangement_1d, transport_points};

fn power() -> impl Strategy<Value = f64> {
    prop_oneof![1.3..1.99f64, 2.01..3.5f64]
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exp_roundtrip_and_defining_relation(
        p in power(),
        x in prop::collection::vec(0.0..1.0f64, 2),
        y in prop::collection::vec(-1.0..1.0f64, 2),
    ) {
        let c = CostModel::power(p).unwrap();
        let x = dv(&x);
        let y = dv(&[y[0] + 3.0, y[1]]);
        let q = -c.grad_x(&x, &y).unwrap();
        let e = cost::c_exp(&c, &x, &q, None).unwrap();
        prop_assert!((&e.y - &y).norm() <= 1e-9);
        prop_assert!((c.grad_x(&x, &e.y).unwrap() + &q).norm() <= 1e-12 * q.norm().max(1.0));
        let r = -c.grad_y(&x, &e.y).unwrap();
        let back = cost::c_exp_star(&c, &e.y, &r, None).unwrap();
        prop_assert!((&back.y - &x).norm() <= 1e-9);
    }

    #[test]
    fn threshold_ratio_is_two(n in 2usize..10, log_sigma in -8.0..3.0f64) {
        let th = dichotomy_thresholds(n, 10f64.powf(log_sigma)).unwrap();
        prop_assert_eq!(th.blowup_bound / th.safe_bound, 2.0);
    }

    #[test]
    fn polynomial_roots_and_critical_value(n in 2usize..6, log_sigma in -5.0..0.0f64, frac in 0.0..0.95f64) {
        let sigma = 10f64.powf(log_sigma);
        let nf = n as f64;
        let s_hat = (1.0 / (nf * sigma)).powf(1.0 / (nf - 1.0));
        let c = frac * s_hat * (nf - 1.0) / nf;
        let a = analyze_polynomial(n, sigma, c).unwrap();
        prop_assert!((a.s_hat.powi(n as i32 - 1) * nf * sigma - 1.0).abs() <= 1e-12);
        let identity = a.s_hat * (nf - 1.0) / nf - c;
        prop_assert!((a.certificates.p_at_critical - identity).abs() <= 1e-12 * a.s_hat);
        let (s1, s2) = a.roots.unwrap();
        prop_assert!(s1 < a.s_hat && a.s_hat < s2);
        prop_assert!(poly_value(n, sigma, c, s1).abs() <= 1e-10 * s2.max(1.0));
        prop_assert!(poly_value(n, sigma, c, s2).abs() <= 1e-10 * s2.max(1.0));
    }

    #[test]
    fn mtw_tensor_is_quadratic_in_each_direction(p in power(), theta in 0.0..std::f64::consts::TAU, a in 0.5..3.0f64, b in 0.5..3.0f64) {
        let c = CostModel::power(p).unwrap();
        let x = dv(&[0.1, -0.2]);
        let y = dv(&[4.0, 0.3]);
        let q = -c.grad_x(&x, &y).unwrap();
        let v = dv(&[theta.cos(), theta.sin()]);
        let eta = dv(&[-theta.sin(), theta.cos()]);
        let base = mtw_tensor(&c, &x, &q, &v, &eta).unwrap();
        let scaled = mtw_tensor(&c, &x, &q, &(&v * a), &(&eta * b)).unwrap();
        prop_assert!((scaled - a * a * b * b * base).abs() <= 1e-8 * (a * a * b * b * base).abs().max(1e-6));
    }

    #[test]
    fn rearrangement_is_monotone(
        p in power(),
        s_slope in -0.8..0.8f64,
        t_amp in 0.0..0.6f64,
        res in 8usize..48,
    ) {
        let s = Arc::new(build_grid(&DomainSpec::interval(0.0, 1.0), res).unwrap());
        let t = Arc::new(build_grid(&DomainSpec::interval(2.0, 3.0), res + 3).unwrap());
        let rho = DensityField::from_fn(s, |x| 1.0 + s_slope * (x[0] - 0.5)).unwrap();
        let rs = DensityField::from_fn(t, |y| 1.0 + t_amp * (3.0 * y[0]).sin()).unwrap();
        let (rho, rs) = normalize_densities(&rho, &rs).unwrap();
        let map = monotone_rearrangement_1d(&CostModel::power(p).unwrap(), &rho, &rs).unwrap();
        let ys: Vec<f64> = map.into_iter().flatten().collect();
        prop_assert!(ys.windows(2).all(|w| w[1] > w[0]));
        prop_assert!((ys[0] - 2.0).abs() <= 1e-12 && (ys[ys.len() - 1] - 3.0).abs() <= 1e-12);
    }

    #[test]
    fn discrete_plan_keeps_marginals(
        a in prop::collection::vec(0.05..1.0f64, 1..12),
        b in prop::collection::vec(0.05..1.0f64, 1..12),
        p in power(),
    ) {
        let xs: Vec<DVector<f64>> = (0..a.len()).map(|i| dv(&[i as f64 / a.len() as f64])).collect();
        let ys: Vec<DVector<f64>> = (0..b.len()).map(|j| dv(&[2.0 + j as f64 / b.len() as f64])).collect();
        let c = CostModel::power(p).unwrap();
        let (entries, total) = transport_points(&c, &xs, &a, &ys, &b, 4096).unwrap();
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let mut rows = vec![0.0; a.len()];
        let mut cols = vec![0.0; b.len()];
        let mut cost_sum = 0.0;
        for &(i, j, m) in &entries {
            prop_assert!(m >= 0.0);
            rows[i] += m;
            cols[j] += m;
            cost_sum += m * c.value(&xs[i], &ys[j]).unwrap();
        }
        for (r, ai) in rows.iter().zip(&a) {
            prop_assert!((r - ai / sa).abs() <= 1e-12);
        }
        for (k, bj) in cols.iter().zip(&b) {
            prop_assert!((k - bj / sb).abs() <= 1e-12);
        }
        prop_assert!((cost_sum - total).abs() <= 1e-12 * total.max(1.0));
    }

    #[test]
    fn uniform_plan_matches_best_permutation(
        xs in prop::collection::vec(-1.0..1.0f64, 2..6),
        seed_y in prop::collection::vec(-1.0..1.0f64, 6),
        p in power(),
    ) {
        let n = xs.len();
        let xs: Vec<DVector<f64>> = xs.iter().map(|&x| dv(&[x, 0.3 * x * x])).collect();
        let ys: Vec<DVector<f64>> = (0..n).map(|j| dv(&[4.0 + seed_y[j], seed_y[(j + 1) % 6]])).collect();
        let c = CostModel::power(p).unwrap();
        let w = vec![1.0; n];
        let (_, total) = transport_points(&c, &xs, &w, &ys, &w, 4096).unwrap();
        let best = permutations(n)
            .iter()
            .map(|perm| perm.iter().enumerate().map(|(i, &j)| c.value(&xs[i], &ys[j]).unwrap()).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min);
        prop_assert!((total - best).abs() <= 1e-10 * best.max(1.0));
    }
}
