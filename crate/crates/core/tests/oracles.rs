//! Library results checked against independent, deliberately naive
//! implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toothlabel::metrics::{
    confusion_from_predictions, fleiss_kappa, mcc, ols_fit, AgreementTable, MetricsError,
};

/// Fleiss' kappa from its definition: expand every item into individual
/// ratings and count agreeing ordered rater pairs.
fn fleiss_brute_force(counts: &[Vec<u32>]) -> Option<f64> {
    let k = counts[0].len();
    let mut per_item_p = Vec::new();
    let mut ratings_per_category = vec![0u64; k];
    let mut total_ratings = 0u64;
    for row in counts {
        let ratings: Vec<usize> = row
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n as usize))
            .collect();
        let (mut agree, mut pairs) = (0u64, 0u64);
        for i in 0..ratings.len() {
            for j in 0..ratings.len() {
                if i != j {
                    pairs += 1;
                    agree += (ratings[i] == ratings[j]) as u64;
                }
            }
        }
        per_item_p.push(agree as f64 / pairs as f64);
        for r in ratings {
            ratings_per_category[r] += 1;
            total_ratings += 1;
        }
    }
    let p_bar = per_item_p.iter().sum::<f64>() / per_item_p.len() as f64;
    let p_e: f64 = ratings_per_category
        .iter()
        .map(|&n| {
            let p = n as f64 / total_ratings as f64;
            p * p
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return None;
    }
    Some((p_bar - p_e) / (1.0 - p_e))
}

#[test]
fn fleiss_matches_brute_force_on_random_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 200 {
        let items = rng.random_range(1..30);
        let raters = rng.random_range(2..9u32);
        let k = rng.random_range(2..6);
        let counts: Vec<Vec<u32>> = (0..items)
            .map(|_| {
                let mut row = vec![0u32; k];
                for _ in 0..raters {
                    row[rng.random_range(0..k)] += 1;
                }
                row
            })
            .collect();
        let table = AgreementTable::new(counts.clone()).unwrap();
        match (fleiss_kappa(&table), fleiss_brute_force(&counts)) {
            (Ok(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{counts:?}: {a} vs {b}"),
            (Err(MetricsError::DegenerateAgreement), None) => {}
            other => panic!("{counts:?}: {other:?}"),
        }
        checked += 1;
    }
}

#[test]
fn fleiss_perfect_and_degenerate() {
    let perfect = AgreementTable::new(vec![vec![5, 0], vec![0, 5], vec![5, 0]]).unwrap();
    assert_eq!(fleiss_kappa(&perfect).unwrap(), 1.0);
    let single = AgreementTable::new(vec![vec![4, 0], vec![4, 0]]).unwrap();
    assert_eq!(
        fleiss_kappa(&single),
        Err(MetricsError::DegenerateAgreement)
    );
}

/// Pearson correlation of two 0/1 vectors.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[test]
fn mcc_equals_pearson_on_binary_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let n = rng.random_range(1..60);
        let bias = rng.random::<f64>();
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(bias)).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let as_f = |v: &[bool]| v.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>();
        let m = mcc(&confusion_from_predictions(&pred, &truth).unwrap()).unwrap();
        assert!((m - pearson(&as_f(&pred), &as_f(&truth))).abs() < 1e-12);
    }
}

#[test]
fn simple_regression_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(3..40);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 2.0 * v - 1.0 + rng.random_range(-5.0..5.0))
            .collect();
        let fit = ols_fit(&x.iter().map(|v| vec![*v]).collect::<Vec<_>>(), &y, true).unwrap();
        let r = pearson(&x, &y);
        assert!((fit.r_squared - r * r).abs() < 1e-10);
        let nf = n as f64;
        let (mx, my) = (x.iter().sum::<f64>() / nf, y.iter().sum::<f64>() / nf);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        assert!((fit.slopes()[0] - sxy / sxx).abs() < 1e-9);
        assert!((fit.intercept() - (my - sxy / sxx * mx)).abs() < 1e-9);
    }
}

#[test]
fn regression_without_intercept_matches_closed_form() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y = [2.1, 3.9, 6.2, 7.8];
    let fit = ols_fit(&x.iter().map(|v| vec![*v]).collect::<Vec<_>>(), &y, false).unwrap();
    let slope =
        x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / x.iter().map(|a| a * a).sum::<f64>();
    assert!((fit.slopes()[0] - slope).abs() < 1e-12);
    assert_eq!(fit.intercept(), 0.0);
}
