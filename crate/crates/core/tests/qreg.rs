use std::sync::Arc;

use proptest::prelude::*;
use qspec::basis::KnotRule;
use qspec::mcstudy::{draw_dgp, DgpSpec};
use qspec::qreg::{check_loss, fit_process, fit_tau, FitConfig, TauGrid};
use qspec::rng::StreamKey;
use qspec::{Dataset, DesignBuilder, Parallelism, PiecewiseSpec, TermSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn order_statistic(y: &[f64], tau: f64) -> f64 {
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    let k = ((tau * s.len() as f64 - 1e-9).ceil() as usize).max(1);
    s[k - 1]
}

fn intercept_only(y: Vec<f64>) -> (Dataset, Arc<DesignBuilder>) {
    let n = y.len();
    let data = Dataset::from_columns("y", y, vec![("x".into(), vec![0.0; n])]).unwrap();
    let b = Arc::new(DesignBuilder::new(&PiecewiseSpec::uniform("y", vec![]), &data).unwrap());
    (data, b)
}

#[test]
fn intercept_only_fits_are_sample_quantiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let grid = TauGrid::deciles();
    for d in 0..50 {
        // n coprime to 10 keeps every decile quantile unique
        let n = [11, 13, 17, 19, 21, 23, 27, 29, 31, 33, 37, 39, 41, 43, 47, 49, 51][d % 17] + 2 * (d / 17) * 10;
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let (data, b) = intercept_only(y.clone());
        let proc = fit_process(&data, b, &grid, &FitConfig::default().sequential()).unwrap();
        for (j, &tau) in grid.levels().iter().enumerate() {
            assert_eq!(proc.coef(j)[0], order_statistic(&y, tau), "dataset {d}, n {n}, tau {tau}");
        }
    }
}

#[test]
fn noiseless_affine_rows_are_recovered() {
    let x: Vec<f64> = (0..25).map(|i| i as f64 * 0.3).collect();
    let y = x.iter().map(|v| 2.0 * v + 1.0).collect();
    let data = Dataset::from_columns("y", y, vec![("x".into(), x)]).unwrap();
    let b = Arc::new(DesignBuilder::new(&PiecewiseSpec::uniform("y", vec![TermSpec::linear("x")]), &data).unwrap());
    let proc = fit_process(&data, b, &TauGrid::fine(), &FitConfig::default()).unwrap();
    for row in proc.coefficients() {
        assert!((row[0] - 1.0).abs() < 1e-8 && (row[1] - 2.0).abs() < 1e-8, "{row:?}");
    }
}

#[test]
fn median_fit_is_consistent_on_a_location_model() {
    let data = draw_dgp(&DgpSpec::new(1, 1000).unwrap(), StreamKey::new(99)).unwrap();
    let b = DesignBuilder::new(&PiecewiseSpec::uniform("y", vec![TermSpec::linear("x0")]), &data).unwrap();
    let theta = fit_tau(&data, &b, 0.5, &FitConfig::default()).unwrap();
    assert!((theta[1] - 0.25).abs() < 0.1, "{theta:?}");
    assert!((theta[0] - 1.0).abs() < 0.2, "{theta:?}");
}

#[test]
fn roughness_shrinks_along_the_lambda_ladder() {
    let data = draw_dgp(&DgpSpec::new(11, 200).unwrap(), StreamKey::new(5)).unwrap();
    let spec = |lambda: f64| PiecewiseSpec::uniform("y", vec![TermSpec::spline("x3", KnotRule::Count(8), 2, lambda, 2)]);
    let unit = DesignBuilder::new(&spec(1.0), &data).unwrap();
    let d = unit.penalty_rows(0);
    let mut last = f64::INFINITY;
    for lambda in [0.0, 0.01, 0.1, 1.0, 10.0, 100.0] {
        let b = DesignBuilder::new(&spec(lambda), &data).unwrap();
        let theta = fit_tau(&data, &b, 0.5, &FitConfig::default()).unwrap();
        let rough: f64 = d.mul_vec(&theta).iter().map(|v| v.abs()).sum();
        assert!(rough <= last + 1e-7, "lambda {lambda}: {rough} > {last}");
        last = rough;
    }
}

#[test]
fn process_is_identical_across_parallelism() {
    let data = draw_dgp(&DgpSpec::new(7, 300).unwrap(), StreamKey::new(3)).unwrap();
    let spec = PiecewiseSpec::uniform("y", vec![TermSpec::linear("x1"), TermSpec::spline("x2", KnotRule::SqrtN, 2, 1.0, 2)]);
    let b = Arc::new(DesignBuilder::new(&spec, &data).unwrap());
    let grid = TauGrid::fine();
    let seq = fit_process(&data, b.clone(), &grid, &FitConfig::default().sequential()).unwrap();
    let par = fit_process(&data, b, &grid, &FitConfig { parallelism: Parallelism::Parallel, ..FitConfig::default() }).unwrap();
    assert_eq!(seq.coefficients(), par.coefficients());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn residual_signs_bracket_tau(seed in any::<u64>(), tau in 0.05f64..0.95, n in 30usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.random_range(-1.0..1.0)).collect();
        let data = Dataset::from_columns("y", y.clone(), vec![("x".into(), x.clone())]).unwrap();
        let b = DesignBuilder::new(&PiecewiseSpec::uniform("y", vec![TermSpec::linear("x")]), &data).unwrap();
        let theta = fit_tau(&data, &b, tau, &FitConfig::default()).unwrap();
        let r: Vec<f64> = x.iter().zip(&y).map(|(xi, yi)| yi - theta[0] - theta[1] * xi).collect();
        let nf = n as f64;
        let neg = r.iter().filter(|v| **v < -1e-9).count() as f64;
        let nonpos = r.iter().filter(|v| **v <= 1e-9).count() as f64;
        prop_assert!(neg / nf <= tau + 2.0 / nf);
        prop_assert!(tau <= nonpos / nf + 2.0 / nf);
    }

    #[test]
    fn positive_scaling_is_equivariant(seed in any::<u64>(), c in 0.1f64..20.0, tau in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v + rng.random::<f64>()).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
        let a = Dataset::from_columns("y", y, vec![("x".into(), x.clone())]).unwrap();
        let s = Dataset::from_columns("y", ys, vec![("x".into(), x)]).unwrap();
        let spec = PiecewiseSpec::uniform("y", vec![TermSpec::linear("x")]);
        let ta = fit_tau(&a, &DesignBuilder::new(&spec, &a).unwrap(), tau, &FitConfig::default()).unwrap();
        let ts = fit_tau(&s, &DesignBuilder::new(&spec, &s).unwrap(), tau, &FitConfig::default()).unwrap();
        let la: f64 = (0..a.n()).map(|i| check_loss(a.y()[i] - ta[0] - ta[1] * a.row(i)[0], tau)).sum();
        let ls: f64 = (0..s.n()).map(|i| check_loss(s.y()[i] - ts[0] - ts[1] * s.row(i)[0], tau)).sum();
        prop_assert!((ls - c * la).abs() <= 1e-8 * (1.0 + ls.abs()));
    }
}
