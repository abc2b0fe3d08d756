use qspec::decompose::{mm_decompose, residualize_on_dummies, MmConfig, MmResult};
use qspec::error::QspecError;
use qspec::{Dataset, PiecewiseSpec, TermSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn group(seed: u64, n: usize, shift: f64, xmean: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| xmean + rng.random_range(0.0..1.0)).collect();
    let y = x.iter().map(|v| shift + 2.0 * v + rng.random_range(-0.5..0.5)).collect();
    Dataset::from_columns("y", y, vec![("x".into(), x)]).unwrap()
}

fn linear() -> PiecewiseSpec {
    PiecewiseSpec::uniform("y", vec![TermSpec::linear("x")])
}

fn taus() -> Vec<f64> {
    vec![0.1, 0.25, 0.5, 0.75, 0.9]
}

fn run(a: &Dataset, b: &Dataset, draws: usize) -> MmResult {
    mm_decompose(a, b, &linear(), &MmConfig::new(taus(), draws, 31)).unwrap()
}

#[test]
fn identical_groups_decompose_to_zero() {
    let a = group(1, 200, 0.0, 0.0);
    for r in run(&a, &a, 500).rows {
        assert_eq!(r.raw_gap, 0.0);
        assert!(r.unexplained.abs() < 1e-12, "{r:?}");
        // same covariates, different draws: only sampling noise remains
        assert!(r.explained.abs() < 0.15, "{r:?}");
    }
}

#[test]
fn pure_shift_is_unexplained() {
    let b = group(2, 400, 0.0, 0.0);
    let a = b.with_response(b.y().iter().map(|v| v + 5.0).collect()).unwrap();
    for r in run(&b, &a, 2500).rows {
        // gaps are A minus B, so B shifted up by 5 shows as -5
        assert!((r.unexplained + 5.0).abs() < 1e-6, "{r:?}");
        assert!(r.explained.abs() < 0.1, "{r:?}");
        assert!((r.raw_gap + 5.0).abs() < 1e-9);
    }
    for r in run(&a, &b, 2500).rows {
        assert!((r.unexplained - 5.0).abs() < 1e-6, "{r:?}");
    }
}

#[test]
fn covariate_shift_is_explained() {
    let a = group(3, 400, 0.0, 1.0);
    let b = group(4, 400, 0.0, 0.0);
    for r in run(&a, &b, 2500).rows {
        assert!((r.explained - 2.0).abs() < 0.15, "{r:?}");
        assert!(r.unexplained.abs() < 0.25, "{r:?}");
    }
}

#[test]
fn parts_add_up_and_swap_sign() {
    let a = group(5, 300, 1.0, 0.3);
    let b = group(6, 250, 0.0, 0.0);
    let ab = run(&a, &b, 1000);
    for r in &ab.rows {
        assert!((r.explained + r.unexplained - r.mm_gap).abs() < 1e-12);
        assert!((r.pct_explained + r.pct_unexplained - 100.0).abs() < 1e-9);
        assert!((r.raw_gap - r.mm_gap - r.residual).abs() < 1e-12);
    }
    let ba = run(&b, &a, 1000);
    for (x, y) in ab.rows.iter().zip(&ba.rows) {
        assert_eq!(x.raw_gap, -y.raw_gap);
        // the reference coefficients change, so only the total flips exactly in expectation
        assert!((x.mm_gap + y.mm_gap).abs() < 0.2, "{} vs {}", x.mm_gap, y.mm_gap);
    }
}

#[test]
fn same_seed_same_answer() {
    let a = group(7, 100, 0.5, 0.0);
    let b = group(8, 100, 0.0, 0.0);
    assert_eq!(run(&a, &b, 300), run(&a, &b, 300));
    let rows = run(&a, &b, 300).csv_rows(false);
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].split(',').count(), MmResult::CSV_HEADER.split(',').count());
}

#[test]
fn errors_are_attributed() {
    let a = group(9, 50, 0.0, 0.0);
    let other = Dataset::from_columns("y", a.y().to_vec(), vec![("z".into(), a.column(0))]).unwrap();
    assert!(mm_decompose(&a, &other, &linear(), &MmConfig::new(taus(), 10, 1)).is_err());
    assert!(mm_decompose(&a, &a, &linear(), &MmConfig::new(taus(), 0, 1)).is_err());
    let constant = Dataset::from_columns("y", vec![1.0; 50], vec![("x".into(), vec![0.5; 50])]).unwrap();
    match mm_decompose(&a, &constant, &linear(), &MmConfig::new(taus(), 10, 1)) {
        Err(QspecError::Group { group, .. }) => assert_eq!(group, "B"),
        other => panic!("expected a group error, got {other:?}"),
    }
}

#[test]
fn dummy_residualization_removes_group_means() {
    let y = vec![1.0, 2.0, 3.0, 11.0, 12.0, 13.0];
    let d = vec![vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]];
    let r = residualize_on_dummies(&y, &d).unwrap();
    let mean = 7.0;
    let expect = [mean - 1.0, mean, mean + 1.0, mean - 1.0, mean, mean + 1.0];
    for (a, b) in r.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let collinear = vec![d[0].clone(), d[0].clone()];
    assert!(matches!(residualize_on_dummies(&y, &collinear), Err(QspecError::SingularDesign { .. })));
}
