//! Classification metrics, training losses, rater agreement and trend fits.
//!
//! * [`mcc`]: Matthews correlation coefficient on confusion counts.
//! * [`bce`], [`combined_loss`]: binary cross-entropy and its blend with a
//!   soft-count MCC, `alpha * BCE + (1 - alpha) * (1 - MCC)`.
//! * [`fleiss_kappa`]: chance-corrected agreement of a fixed number of raters.
//! * [`ols_fit`]: least squares with the coefficient of determination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("confusion counts are all zero")]
    EmptyCounts,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("invalid agreement table: {0}")]
    InvalidTable(String),
    #[error("all ratings fall in one category; kappa is undefined")]
    DegenerateAgreement,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("response has zero variance")]
    DegenerateVariance,
    #[error("{observations} observations cannot support {parameters} parameters")]
    TooFewObservations {
        observations: usize,
        parameters: usize,
    },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub tn: f64,
}

impl ConfusionCounts {
    pub fn new(tp: f64, fp: f64, fn_: f64, tn: f64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> f64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn numerator(&self) -> f64 {
        self.tp * self.tn - self.fp * self.fn_
    }

    fn denominator_product(&self) -> f64 {
        (self.tp + self.fp) * (self.tp + self.fn_) * (self.tn + self.fp) * (self.tn + self.fn_)
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(
            self.tp + o.tp,
            self.fp + o.fp,
            self.fn_ + o.fn_,
            self.tn + o.tn,
        )
    }
}

/// Evaluation MCC. Returns 0 when any marginal is empty.
pub fn mcc(counts: &ConfusionCounts) -> Result<f64> {
    if counts.total() <= 0.0 {
        return Err(MetricsError::EmptyCounts);
    }
    let denom = counts.denominator_product();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((counts.numerator() / denom.sqrt()).clamp(-1.0, 1.0))
}

/// MCC with `epsilon` added to the denominator, as used inside the loss.
pub fn mcc_soft(counts: &ConfusionCounts, epsilon: f64) -> f64 {
    counts.numerator() / (counts.denominator_product().sqrt() + epsilon)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MetricsError::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// Expected confusion counts when predictions are probabilities.
pub fn soft_confusion(y: &[f64], p: &[f64]) -> Result<ConfusionCounts> {
    check_lengths(y.len(), p.len())?;
    let mut c = ConfusionCounts::default();
    for (&y, &p) in y.iter().zip(p) {
        c.tp += y * p;
        c.fp += (1.0 - y) * p;
        c.fn_ += y * (1.0 - p);
        c.tn += (1.0 - y) * (1.0 - p);
    }
    Ok(c)
}

pub fn confusion_from_predictions(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    check_lengths(pred.len(), truth.len())?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1.0,
            (true, false) => c.fp += 1.0,
            (false, true) => c.fn_ += 1.0,
            (false, false) => c.tn += 1.0,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    /// Added to the MCC denominator.
    pub epsilon: f64,
    /// Probabilities are clamped to `[clamp, 1 - clamp]` before logs.
    pub clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            epsilon: 1e-8,
            clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MetricsError::InvalidValue(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(MetricsError::InvalidValue(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        if !(0.0..0.5).contains(&self.clamp) {
            return Err(MetricsError::InvalidValue(format!(
                "clamp {} outside [0, 0.5)",
                self.clamp
            )));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy.
pub fn bce(y: &[f64], p: &[f64], clamp: f64) -> Result<f64> {
    check_lengths(y.len(), p.len())?;
    if y.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let sum: f64 = y
        .iter()
        .zip(p)
        .map(|(&y, &p)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / y.len() as f64)
}

pub fn combined_loss(y: &[f64], p: &[f64], config: &LossConfig) -> Result<f64> {
    config.validate()?;
    let bce = bce(y, p, config.clamp)?;
    let soft = mcc_soft(&soft_confusion(y, p)?, config.epsilon);
    Ok(config.alpha * bce + (1.0 - config.alpha) * (1.0 - soft))
}

/// Items x categories count matrix; every row sums to the number of raters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementTable {
    counts: Vec<Vec<u32>>,
    n_raters: u32,
}

impl AgreementTable {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self> {
        let first = counts
            .first()
            .ok_or_else(|| MetricsError::InvalidTable("no items".into()))?;
        let k = first.len();
        if k == 0 {
            return Err(MetricsError::InvalidTable("no categories".into()));
        }
        let n: u32 = first.iter().sum();
        if n < 2 {
            return Err(MetricsError::InvalidTable(format!(
                "{n} raters; at least 2 needed"
            )));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != k {
                return Err(MetricsError::InvalidTable(format!(
                    "row {i} has {} categories, expected {k}",
                    row.len()
                )));
            }
            let s: u32 = row.iter().sum();
            if s != n {
                return Err(MetricsError::InvalidTable(format!(
                    "row {i} sums to {s}, expected {n}"
                )));
            }
        }
        Ok(AgreementTable {
            counts,
            n_raters: n,
        })
    }

    /// Builds a table from per-item category assignments, one per rater.
    pub fn from_ratings(items: &[Vec<usize>], n_categories: usize) -> Result<Self> {
        let counts = items
            .iter()
            .map(|ratings| {
                let mut row = vec![0u32; n_categories];
                for &c in ratings {
                    *row.get_mut(c).ok_or_else(|| {
                        MetricsError::InvalidTable(format!("category {c} out of range"))
                    })? += 1;
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(counts)
    }

    pub fn n_items(&self) -> usize {
        self.counts.len()
    }

    pub fn n_raters(&self) -> u32 {
        self.n_raters
    }

    pub fn n_categories(&self) -> usize {
        self.counts[0].len()
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }
}

/// Fleiss' kappa, `(P - Pe) / (1 - Pe)`.
pub fn fleiss_kappa(table: &AgreementTable) -> Result<f64> {
    let n = table.n_raters as f64;
    let items = table.n_items() as f64;
    let mut category_totals = vec![0f64; table.n_categories()];
    let mut p_sum = 0.0;
    for row in &table.counts {
        let sq: f64 = row.iter().map(|&c| (c as f64) * (c as f64)).sum();
        p_sum += (sq - n) / (n * (n - 1.0));
        for (t, &c) in category_totals.iter_mut().zip(row) {
            *t += c as f64;
        }
    }
    let p_bar = p_sum / items;
    let p_e: f64 = category_totals
        .iter()
        .map(|t| (t / (items * n)).powi(2))
        .sum();
    if 1.0 - p_e <= f64::EPSILON {
        return Err(MetricsError::DegenerateAgreement);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    /// Intercept first when fitted with one, then one slope per regressor.
    pub coefficients: Vec<f64>,
    pub with_intercept: bool,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

impl RegressionFit {
    pub fn intercept(&self) -> f64 {
        if self.with_intercept {
            self.coefficients[0]
        } else {
            0.0
        }
    }

    pub fn slopes(&self) -> &[f64] {
        &self.coefficients[self.with_intercept as usize..]
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept() + self.slopes().iter().zip(x).map(|(b, x)| b * x).sum::<f64>()
    }
}

/// Ordinary least squares over `x` (one row per observation) via the normal
/// equations. With an intercept, columns are centered first.
pub fn ols_fit(x: &[Vec<f64>], y: &[f64], with_intercept: bool) -> Result<RegressionFit> {
    check_lengths(x.len(), y.len())?;
    let n = y.len();
    let d = x.first().map(Vec::len).unwrap_or(0);
    if d == 0 {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(row) = x.iter().find(|r| r.len() != d) {
        return Err(MetricsError::LengthMismatch {
            left: d,
            right: row.len(),
        });
    }
    let params = d + with_intercept as usize;
    if n <= params {
        return Err(MetricsError::TooFewObservations {
            observations: n,
            parameters: params,
        });
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(MetricsError::DegenerateVariance);
    }
    let (x_mean, y_shift) = if with_intercept {
        let means: Vec<f64> = (0..d)
            .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
            .collect();
        (means, y_mean)
    } else {
        (vec![0.0; d], 0.0)
    };
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![0.0; d];
    for (row, &yi) in x.iter().zip(y) {
        let c: Vec<f64> = row.iter().zip(&x_mean).map(|(v, m)| v - m).collect();
        for a in 0..d {
            xty[a] += c[a] * (yi - y_shift);
            for b in 0..d {
                xtx[a][b] += c[a] * c[b];
            }
        }
    }
    let slopes = solve_pivoting(xtx, xty)?;
    let mut coefficients = Vec::with_capacity(params);
    if with_intercept {
        coefficients.push(y_mean - slopes.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>());
    }
    coefficients.extend_from_slice(&slopes);
    let mut fit = RegressionFit {
        coefficients,
        with_intercept,
        r_squared: 0.0,
        residuals: Vec::new(),
    };
    fit.residuals = x
        .iter()
        .zip(y)
        .map(|(row, yi)| yi - fit.predict(row))
        .collect();
    let sse: f64 = fit.residuals.iter().map(|r| r * r).sum();
    fit.r_squared = (1.0 - sse / sst).clamp(0.0, 1.0);
    Ok(fit)
}

fn solve_pivoting(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let d = b.len();
    let scale = a
        .iter()
        .enumerate()
        .map(|(i, r)| r[i].abs())
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Err(MetricsError::RankDeficient);
    }
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() <= scale * 1e-12 {
            return Err(MetricsError::RankDeficient);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let (upper, lower) = a.split_at_mut(col + 1);
        let pivot_row = &upper[col];
        for (offset, row) in lower.iter_mut().enumerate() {
            let f = row[col] / pivot_row[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[col + 1 + offset] -= f * b[col];
        }
    }
    let mut out = vec![0.0; d];
    for row in (0..d).rev() {
        let s: f64 = (row + 1..d).map(|k| a[row][k] * out[k]).sum();
        out[row] = (b[row] - s) / a[row][row];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mcc_unit_cases() {
        assert_eq!(mcc(&ConfusionCounts::new(1.0, 0.0, 0.0, 1.0)).unwrap(), 1.0);
        assert_eq!(
            mcc(&ConfusionCounts::new(0.0, 1.0, 1.0, 0.0)).unwrap(),
            -1.0
        );
        // (6*3 - 2*1) / sqrt(8*7*5*4)
        let v = mcc(&ConfusionCounts::new(6.0, 2.0, 1.0, 3.0)).unwrap();
        assert!(close(v, 16.0 / 1120f64.sqrt(), 1e-15));
        assert!(close(v, 0.4781, 5e-5));
        assert_eq!(mcc(&ConfusionCounts::new(0.0, 0.0, 3.0, 5.0)).unwrap(), 0.0);
        assert_eq!(
            mcc(&ConfusionCounts::default()),
            Err(MetricsError::EmptyCounts)
        );
    }

    #[test]
    fn soft_confusion_examples() {
        assert_eq!(
            soft_confusion(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
            ConfusionCounts::new(1.0, 0.0, 0.0, 1.0)
        );
        assert_eq!(
            soft_confusion(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            ConfusionCounts::new(0.5, 0.5, 0.5, 0.5)
        );
        let c = soft_confusion(&[1.0, 1.0, 0.0], &[0.9, 0.8, 0.1]).unwrap();
        for (got, want) in [(c.tp, 1.7), (c.fp, 0.1), (c.fn_, 0.3), (c.tn, 0.9)] {
            assert!(close(got, want, 1e-12));
        }
        assert!(matches!(
            soft_confusion(&[1.0], &[]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn bce_examples() {
        assert!(bce(&[1.0], &[1.0], 1e-7).unwrap() < 1e-6);
        assert!(close(
            bce(&[1.0, 0.0], &[0.5, 0.5], 1e-7).unwrap(),
            std::f64::consts::LN_2,
            1e-12
        ));
        let worst = bce(&[0.0], &[1.0], 1e-7).unwrap();
        assert!(worst.is_finite());
        assert!(close(worst, -(1e-7f64).ln(), 1e-6));
        assert_eq!(bce(&[], &[], 1e-7), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn combined_loss_examples() {
        let cfg = LossConfig::default();
        assert!(combined_loss(&[1.0, 0.0], &[1.0, 0.0], &cfg).unwrap() < 1e-6);
        let half = combined_loss(&[1.0, 0.0], &[0.5, 0.5], &cfg).unwrap();
        assert!(close(half, 0.5 * std::f64::consts::LN_2 + 0.5, 1e-12));
        assert!(close(half, 0.8466, 5e-5));
        let y = [1.0, 0.0, 1.0];
        let p = [0.7, 0.2, 0.4];
        let one = LossConfig { alpha: 1.0, ..cfg };
        assert_eq!(
            combined_loss(&y, &p, &one).unwrap(),
            bce(&y, &p, cfg.clamp).unwrap()
        );
        let bad = LossConfig { alpha: 1.5, ..cfg };
        assert!(combined_loss(&y, &p, &bad).is_err());
        let bad = LossConfig {
            epsilon: 0.0,
            ..cfg
        };
        assert!(combined_loss(&y, &p, &bad).is_err());
    }

    #[test]
    fn fleiss_examples() {
        let perfect = AgreementTable::new(vec![vec![2, 0], vec![0, 2]]).unwrap();
        assert_eq!(fleiss_kappa(&perfect).unwrap(), 1.0);
        let zero = AgreementTable::new(vec![vec![2, 1], vec![3, 0], vec![1, 2]]).unwrap();
        assert!(close(fleiss_kappa(&zero).unwrap(), 0.0, 1e-15));
        let degenerate = AgreementTable::new(vec![vec![3, 0], vec![3, 0]]).unwrap();
        assert_eq!(
            fleiss_kappa(&degenerate),
            Err(MetricsError::DegenerateAgreement)
        );
    }

    #[test]
    fn agreement_table_validation() {
        assert!(AgreementTable::new(vec![]).is_err());
        assert!(AgreementTable::new(vec![vec![1, 0]]).is_err());
        assert!(AgreementTable::new(vec![vec![2, 0], vec![1, 0]]).is_err());
        assert!(AgreementTable::new(vec![vec![2, 0], vec![2]]).is_err());
        let t = AgreementTable::from_ratings(&[vec![0, 1, 1], vec![1, 1, 1]], 2).unwrap();
        assert_eq!(t.counts(), &[vec![1, 2], vec![0, 3]]);
        assert!(AgreementTable::from_ratings(&[vec![0, 5]], 2).is_err());
    }

    #[test]
    fn confusion_from_predictions_examples() {
        let c = |p: &[bool], t: &[bool]| confusion_from_predictions(p, t).unwrap();
        assert_eq!(
            c(&[true, false, true], &[true, false, true]),
            ConfusionCounts::new(2.0, 0.0, 0.0, 1.0)
        );
        assert_eq!(
            c(&[true, true], &[false, false]),
            ConfusionCounts::new(0.0, 2.0, 0.0, 0.0)
        );
        assert_eq!(
            c(&[true, false, false, true], &[true, true, false, false]),
            ConfusionCounts::new(1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn ols_exact_line() {
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..5).map(|i| 2.0 * i as f64).collect();
        let fit = ols_fit(&x, &y, true).unwrap();
        assert!(close(fit.slopes()[0], 2.0, 1e-12));
        assert!(close(fit.intercept(), 0.0, 1e-12));
        assert_eq!(fit.r_squared, 1.0);
        let fit0 = ols_fit(&x, &y, false).unwrap();
        assert!(close(fit0.coefficients[0], 2.0, 1e-12));
    }

    #[test]
    fn ols_errors() {
        let x = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(
            ols_fit(&x, &[1.0, 1.0, 1.0], true),
            Err(MetricsError::DegenerateVariance)
        );
        let collinear = vec![
            vec![1.0, 2.0],
            vec![2.0, 4.0],
            vec![3.0, 6.0],
            vec![4.0, 8.0],
        ];
        assert_eq!(
            ols_fit(&collinear, &[1.0, 2.0, 2.0, 3.0], true),
            Err(MetricsError::RankDeficient)
        );
        assert!(matches!(
            ols_fit(&x[..2], &[1.0, 2.0], true),
            Err(MetricsError::TooFewObservations { .. })
        ));
        let constant = vec![vec![1.0], vec![1.0], vec![1.0]];
        assert_eq!(
            ols_fit(&constant, &[1.0, 2.0, 3.0], true),
            Err(MetricsError::RankDeficient)
        );
    }
}
