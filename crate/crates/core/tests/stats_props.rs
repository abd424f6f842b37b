//! Property tests of the statistics.

use kvguard::stats::{average_ranks, kruskal_wallis, ols_fit, spearman};
use proptest::prelude::*;

fn sample(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-50i32..50).prop_map(|v| v as f64 / 4.0), n)
}

fn paired() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| (sample(n..n + 1), sample(n..n + 1)))
}

proptest! {
    #[test]
    fn ranks_sum_to_triangular(x in sample(1..60)) {
        let n = x.len() as f64;
        let s: f64 = average_ranks(&x).iter().sum();
        prop_assert!((s - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn spearman_is_symmetric((x, y) in paired()) {
        let a = spearman(&x, &y).unwrap();
        let b = spearman(&y, &x).unwrap();
        prop_assert_eq!(a.degenerate, b.degenerate);
        if !a.degenerate {
            prop_assert!((a.statistic - b.statistic).abs() < 1e-12);
            prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a.statistic));
            prop_assert!((0.0..=1.0).contains(&a.p_value));
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms((x, y) in paired()) {
        let a = spearman(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| v * v * v + 2.0 * v).collect();
        let ty: Vec<f64> = y.iter().map(|v| (v / 8.0).exp()).collect();
        let b = spearman(&tx, &ty).unwrap();
        prop_assert_eq!(a.degenerate, b.degenerate);
        if !a.degenerate {
            prop_assert!((a.statistic - b.statistic).abs() < 1e-12);
        }
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let c = spearman(&x, &neg).unwrap();
        if !a.degenerate {
            prop_assert!((a.statistic + c.statistic).abs() < 1e-12);
        }
    }

    #[test]
    fn kruskal_wallis_ignores_order(
        groups in prop::collection::vec(sample(1..12), 2..5),
        rot in any::<usize>(),
    ) {
        let a = kruskal_wallis(&groups).unwrap();
        let mut shuffled: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().rev().copied().collect()).collect();
        let k = shuffled.len();
        shuffled.rotate_left(rot % k);
        let b = kruskal_wallis(&shuffled).unwrap();
        prop_assert!((a.statistic - b.statistic).abs() < 1e-9);
        prop_assert!((a.p_value - b.p_value).abs() < 1e-9);
        prop_assert!(a.statistic >= 0.0);
        prop_assert!((0.0..=1.0).contains(&a.p_value));
    }

    #[test]
    fn ols_residuals_are_orthogonal((x, y) in paired()) {
        prop_assume!(x.iter().any(|&v| v != x[0]));
        let f = ols_fit(&x, &y).unwrap();
        let e: Vec<f64> = x.iter().zip(&y).map(|(&a, &b)| b - f.predict(a)).collect();
        let scale = 1.0 + y.iter().map(|v| v.abs()).sum::<f64>() * x.iter().map(|v| v.abs()).sum::<f64>();
        prop_assert!(e.iter().sum::<f64>().abs() < 1e-9 * scale);
        prop_assert!(x.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>().abs() < 1e-9 * scale);
        prop_assert!((0.0..=1.0).contains(&f.r_squared));
    }
}
