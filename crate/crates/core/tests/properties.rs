use std::collections::BTreeSet;

use proptest::prelude::*;
use toothlabel::crops::{crop_window, split_dataset, CropRef, Split};
use toothlabel::labeling::LabelBits;
use toothlabel::metrics::{mcc, ols_fit, soft_confusion, ConfusionCounts};
use toothlabel::phrases::normalize;
use toothlabel::report::{parse_report, validate_fdi, FdiTooth, PresenceFilter};
use toothlabel::study::{majority_vote, TiePolicy};

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u32..500, 0u32..500, 0u32..500, 0u32..500)
        .prop_filter("non-empty", |(a, b, c, d)| a + b + c + d > 0)
        .prop_map(|(tp, fp, fn_, tn)| {
            ConfusionCounts::new(tp as f64, fp as f64, fn_ as f64, tn as f64)
        })
}

fn tooth() -> impl Strategy<Value = FdiTooth> {
    prop::sample::select(FdiTooth::all().collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mcc_bounded_symmetric_and_flips_sign(c in counts()) {
        let m = mcc(&c).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m));
        let transposed = ConfusionCounts::new(c.tp, c.fn_, c.fp, c.tn);
        prop_assert_eq!(mcc(&transposed).unwrap(), m);
        let flipped = ConfusionCounts::new(c.fp, c.tp, c.tn, c.fn_);
        prop_assert_eq!(mcc(&flipped).unwrap(), -m);
        if c.tp * c.tn == c.fp * c.fn_ {
            prop_assert_eq!(m, 0.0);
        }
    }
}

proptest! {
    #[test]
    fn soft_counts_sum_to_n(pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..200)) {
        let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let c = soft_confusion(&y, &p).unwrap();
        prop_assert!((c.total() - y.len() as f64).abs() < 1e-9);
        prop_assert!(c.tp >= 0.0 && c.fp >= 0.0 && c.fn_ >= 0.0 && c.tn >= 0.0);
    }

    #[test]
    fn ols_residuals_orthogonal_and_nested(rows in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 6..40)) {
        let x1: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0]).collect();
        let x2: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let (Ok(small), Ok(big)) = (ols_fit(&x1, &y, true), ols_fit(&x2, &y, true)) else {
            return Ok(());
        };
        prop_assert!(big.r_squared + 1e-9 >= small.r_squared);
        let scale: f64 = y.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
        prop_assert!(big.residuals.iter().sum::<f64>().abs() < 1e-6 * scale);
        for j in 0..2 {
            let dot: f64 = big.residuals.iter().zip(&x2).map(|(e, x)| e * x[j]).sum();
            prop_assert!(dot.abs() < 1e-6 * scale * 50.0, "column {} dot {}", j, dot);
        }
        for (i, x) in x2.iter().enumerate() {
            prop_assert!((big.predict(x) + big.residuals[i] - y[i]).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn normalize_is_idempotent(s in "\\PC{0,60}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once.clone());
        prop_assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
    }

    #[test]
    fn report_text_round_trips(lines in prop::collection::vec(("[A-Za-z][A-Za-z ,]{0,30}", prop::collection::vec(tooth(), 0..3)), 1..8)) {
        let raw: String = lines
            .iter()
            .enumerate()
            .map(|(i, (words, teeth))| {
                let teeth: Vec<String> = teeth.iter().map(|t| t.to_string()).collect();
                format!("{:02}: {} {}.\n", i + 1, words.trim(), teeth.join(" and "))
            })
            .collect();
        let filter = PresenceFilter::default();
        let report = parse_report(&raw, "r", &filter).unwrap();
        let again = parse_report(&report.to_text(), "r", &filter).unwrap();
        prop_assert_eq!(again, report.clone());
        for (line, (_, teeth)) in report.lines.iter().zip(&lines) {
            let expected: BTreeSet<FdiTooth> = teeth.iter().copied().collect();
            let got: BTreeSet<FdiTooth> = line.teeth.iter().copied().collect();
            prop_assert_eq!(got, expected);
        }
    }

    #[test]
    fn fdi_validation_matches_definition(code in 0u32..120) {
        let (q, p) = (code / 10, code % 10);
        let valid = match q {
            1..=4 => (1..=8).contains(&p),
            5..=8 => (1..=5).contains(&p),
            _ => false,
        };
        prop_assert_eq!(validate_fdi(code).is_ok(), valid);
    }

    #[test]
    fn majority_vote_ignores_rater_order(
        votes in prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 1..8),
        seed in any::<u64>(),
        positive_ties in any::<bool>(),
    ) {
        let policy = if positive_ties { TiePolicy::Positive } else { TiePolicy::Negative };
        let bits: Vec<LabelBits> = votes.into_iter().map(LabelBits).collect();
        let refs: Vec<&LabelBits> = bits.iter().collect();
        let mut shuffled = refs.clone();
        let n = shuffled.len();
        shuffled.rotate_left((seed as usize) % n);
        shuffled.reverse();
        prop_assert_eq!(majority_vote(&refs, policy), majority_vote(&shuffled, policy));
    }

    #[test]
    fn crop_windows_stay_inside(cx in -100.0f64..3000.0, cy in -100.0f64..1500.0, w in 380u32..3000, h in 380u32..1500, more in any::<bool>()) {
        let side = if more { 380 } else { 224 };
        let win = crop_window((cx, cy), side, (w, h)).unwrap();
        prop_assert!(win.x0 + side <= w && win.y0 + side <= h);
        let ideal_x = (cx - side as f64 / 2.0).round();
        if ideal_x >= 0.0 && ideal_x + side as f64 <= w as f64 {
            prop_assert_eq!(win.x0 as f64, ideal_x);
        }
    }

    #[test]
    fn split_is_image_level_partition(n_images in 1usize..120, teeth_per in 1usize..4, seed in any::<u64>()) {
        let teeth: Vec<FdiTooth> = FdiTooth::all().take(teeth_per).collect();
        let crops: Vec<CropRef> = (0..n_images)
            .flat_map(|i| teeth.iter().map(move |t| CropRef::new(format!("img{i}"), *t)))
            .collect();
        let m = split_dataset(&crops, [0.7, 0.15, 0.15], seed).unwrap();
        prop_assert_eq!(m.entries.len(), crops.len());
        let ids: BTreeSet<&str> = m.entries.iter().map(|e| e.crop_id.as_str()).collect();
        prop_assert_eq!(ids.len(), crops.len());
        let (train, val, test) = (m.images(Split::Train), m.images(Split::Val), m.images(Split::Test));
        prop_assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        prop_assert_eq!(train.len() + val.len() + test.len(), n_images);
        for (set, r) in [(&train, 0.7), (&val, 0.15), (&test, 0.15)] {
            prop_assert!((set.len() as f64 - r * n_images as f64).abs() <= 1.0);
        }
        prop_assert_eq!(m, split_dataset(&crops, [0.7, 0.15, 0.15], seed).unwrap());
    }
}
