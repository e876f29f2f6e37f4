//! Metric kernels: macro-F1, the δ1/δ2 gains and Fleiss' kappa.
//!
//! Everything here is generic over [`Scalar`] so tests can run the same code
//! in exact rationals.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Per-class counts over `k` classes. A `None` prediction is a miss for the
/// gold class and a false positive for nobody.
pub fn confusion_counts(gold: &[usize], pred: &[Option<usize>], k: usize) -> Vec<ClassCounts> {
    assert_eq!(gold.len(), pred.len(), "gold and predictions must align");
    let mut counts = vec![ClassCounts::default(); k];
    for (&g, &p) in gold.iter().zip(pred) {
        match p {
            Some(p) if p == g => counts[g].tp += 1,
            Some(p) => {
                counts[g].fn_ += 1;
                counts[p].fp += 1;
            }
            None => counts[g].fn_ += 1,
        }
    }
    counts
}

/// F1 of one class; a class with no gold and no predicted instances scores 0.
pub fn class_f1<S: Scalar>(c: ClassCounts) -> S {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return S::zero();
    }
    S::from_count(2 * c.tp) / S::from_count(denom)
}

/// Unweighted mean of per-class F1 over all classes, in percent.
pub fn macro_f1_from_counts<S: Scalar>(counts: &[ClassCounts]) -> S {
    if counts.is_empty() {
        return S::zero();
    }
    let sum = counts.iter().fold(S::zero(), |acc, &c| acc + class_f1::<S>(c));
    sum * S::hundred() / S::from_count(counts.len() as u64)
}

pub fn macro_f1_indices<S: Scalar>(gold: &[usize], pred: &[Option<usize>], k: usize) -> S {
    macro_f1_from_counts(&confusion_counts(gold, pred, k))
}

pub fn mean<S: Scalar>(values: &[S]) -> Option<S> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(S::zero(), |acc, &v| acc + v);
    Some(sum / S::from_count(values.len() as u64))
}

/// Gain of the test-tuned model over zero-shot.
pub fn delta1<S: Scalar>(p_test: S, p_zero: S) -> S {
    p_test - p_zero
}

/// Gain of the train+test-tuned model over the train-tuned one.
pub fn delta2<S: Scalar>(p_train_test: S, p_train: S) -> S {
    p_train_test - p_train
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KappaError {
    #[error("row {row} sums to {got} ratings, expected {expected}")]
    Ragged { row: usize, got: u64, expected: u64 },
    #[error("row {row} has {got} categories, expected {expected}")]
    Width { row: usize, got: usize, expected: usize },
    #[error("need at least {what}")]
    TooSmall { what: &'static str },
    #[error("kappa is undefined: all ratings fall in one category")]
    Undefined,
    #[error("{0}")]
    Parse(String),
}

/// Items × categories rating counts with a constant number of raters per item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    counts: Vec<Vec<u64>>,
    raters: u64,
}

impl AgreementMatrix {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self, KappaError> {
        if counts.len() < 2 {
            return Err(KappaError::TooSmall { what: "2 items" });
        }
        let width = counts[0].len();
        if width < 2 {
            // one category: chance agreement is 1 and kappa has no value
            return Err(KappaError::Undefined);
        }
        let raters: u64 = counts[0].iter().sum();
        for (row, r) in counts.iter().enumerate() {
            if r.len() != width {
                return Err(KappaError::Width {
                    row: row + 1,
                    got: r.len(),
                    expected: width,
                });
            }
            let got: u64 = r.iter().sum();
            if got != raters {
                return Err(KappaError::Ragged {
                    row: row + 1,
                    got,
                    expected: raters,
                });
            }
        }
        if raters < 2 {
            return Err(KappaError::TooSmall { what: "2 raters" });
        }
        Ok(AgreementMatrix { counts, raters })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn raters(&self) -> u64 {
        self.raters
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    /// Reads integer counts from CSV, one item per row. A non-numeric first
    /// row is taken as a header.
    pub fn from_csv(path: &Path) -> Result<Self, KappaError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| KappaError::Parse(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| KappaError::Parse(e.to_string()))?;
            if record.iter().all(str::is_empty) {
                continue;
            }
            let parsed: Result<Vec<u64>, _> = record.iter().map(str::parse::<u64>).collect();
            match parsed {
                Ok(row) => rows.push(row),
                Err(_) if i == 0 => continue,
                Err(e) => return Err(KappaError::Parse(format!("row {}: {e}", i + 1))),
            }
        }
        Self::new(rows)
    }
}

/// Fleiss' kappa. Computed as one exact integer fraction before conversion,
/// so perfect agreement gives exactly 1.
pub fn fleiss_kappa<S: Scalar>(m: &AgreementMatrix) -> Result<S, KappaError> {
    let n = i128::from(m.raters);
    let items = m.items() as i128;
    let width = m.counts[0].len();
    let mut sum_sq: i128 = 0;
    let mut columns = vec![0i128; width];
    for row in &m.counts {
        for (j, &c) in row.iter().enumerate() {
            let c = i128::from(c);
            sum_sq += c * c;
            columns[j] += c;
        }
    }
    // P̄ = a/b and P̄e = c/d
    let a = sum_sq - items * n;
    let b = items * n * (n - 1);
    let c: i128 = columns.iter().map(|x| x * x).sum();
    let d = (items * n) * (items * n);
    if c == d {
        return Err(KappaError::Undefined);
    }
    let num = a * d - c * b;
    let den = b * (d - c);
    let g = gcd(num.abs(), den.abs()).max(1);
    let (num, den) = (num / g, den / g);
    let to = |x: i128| S::from_i128(x).ok_or(KappaError::Parse("kappa overflow".into()));
    Ok(to(num)? / to(den)?)
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}
