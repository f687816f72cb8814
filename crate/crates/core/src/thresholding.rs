//! Class-wise dual thresholds and three-way pseudo-label assignment.
//!
//! For every class the positive threshold is the mid-range of the scores
//! that labeled positives receive, and the negative threshold the mid-range
//! of the scores that labeled negatives receive. Unlabeled scores strictly
//! above the positive threshold become confident positives, scores strictly
//! below the negative threshold become confident negatives, and everything
//! in between (inclusive) is marked uncertain.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThreshold {
    pub tau_pos: f64,
    pub tau_neg: f64,
    pub n_pos_support: usize,
    pub n_neg_support: usize,
    /// Both groups were non-empty, so neither threshold is a sentinel.
    pub valid: bool,
    /// The raw mid-ranges crossed and were swapped.
    pub swapped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub classes: Vec<ClassThreshold>,
}

impl ClassThresholds {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Thresholds that mark every score uncertain.
    pub fn sentinel(num_classes: usize) -> Self {
        ClassThresholds {
            classes: (0..num_classes)
                .map(|_| ClassThreshold {
                    tau_pos: 1.0,
                    tau_neg: 0.0,
                    n_pos_support: 0,
                    n_neg_support: 0,
                    valid: false,
                    swapped: false,
                })
                .collect(),
        }
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        ClassThresholds {
            classes: pairs
                .iter()
                .map(|&(tau_pos, tau_neg)| ClassThreshold {
                    tau_pos,
                    tau_neg,
                    n_pos_support: 0,
                    n_neg_support: 0,
                    valid: true,
                    swapped: false,
                })
                .collect(),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("class,tau_pos,tau_neg,n_pos_support,n_neg_support\n");
        for (c, t) in self.classes.iter().enumerate() {
            out.push_str(&format!(
                "{c},{},{},{},{}\n",
                t.tau_pos, t.tau_neg, t.n_pos_support, t.n_neg_support
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

fn mid_range(values: impl Iterator<Item = f64>) -> Option<(f64, usize)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut n = 0;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        n += 1;
    }
    (n > 0).then(|| ((hi + lo) / 2.0, n))
}

/// Per-class mid-range thresholds from labeled-set scores.
///
/// A class without labeled positives gets `tau_pos = 1.0`; one without
/// negatives gets `tau_neg = 0.0`. Crossed thresholds are swapped.
pub fn derive_thresholds(sup_preds: &Matrix, sup_labels: &Matrix) -> Result<ClassThresholds> {
    if sup_preds.shape() != sup_labels.shape() {
        return Err(Error::shape(
            "derive_thresholds",
            format!("{:?}", sup_preds.shape()),
            format!("{:?}", sup_labels.shape()),
        ));
    }
    if sup_preds.rows() == 0 {
        return Err(Error::Empty("labeled training set for thresholds".into()));
    }
    let n = sup_preds.rows();
    let classes = (0..sup_preds.cols())
        .map(|c| {
            let column = (0..n).map(|i| (sup_preds.get(i, c), sup_labels.get(i, c)));
            let pos = mid_range(column.clone().filter(|(_, y)| *y > 0.5).map(|(p, _)| p));
            let neg = mid_range(column.filter(|(_, y)| *y <= 0.5).map(|(p, _)| p));
            let (mut tau_pos, n_pos) = pos.unwrap_or((1.0, 0));
            let (mut tau_neg, n_neg) = neg.unwrap_or((0.0, 0));
            let swapped = tau_pos < tau_neg;
            if swapped {
                std::mem::swap(&mut tau_pos, &mut tau_neg);
            }
            ClassThreshold {
                tau_pos,
                tau_neg,
                n_pos_support: n_pos,
                n_neg_support: n_neg,
                valid: n_pos > 0 && n_neg > 0,
                swapped,
            }
        })
        .collect();
    Ok(ClassThresholds { classes })
}

/// A pseudo-label: confident positive, confident negative, or uncertain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PseudoLabel {
    Positive,
    Negative,
    Uncertain,
}

impl PseudoLabel {
    /// `1`, `0`, or `-1`.
    pub fn code(self) -> i8 {
        match self {
            PseudoLabel::Positive => 1,
            PseudoLabel::Negative => 0,
            PseudoLabel::Uncertain => -1,
        }
    }

    /// The hard label for confident entries.
    pub fn hard(self) -> Option<bool> {
        match self {
            PseudoLabel::Positive => Some(true),
            PseudoLabel::Negative => Some(false),
            PseudoLabel::Uncertain => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMatrix {
    rows: usize,
    cols: usize,
    labels: Vec<PseudoLabel>,
}

impl PseudoLabelMatrix {
    pub fn filled(rows: usize, cols: usize, label: PseudoLabel) -> Self {
        PseudoLabelMatrix {
            rows,
            cols,
            labels: vec![label; rows * cols],
        }
    }

    pub fn from_codes(rows: usize, cols: usize, codes: &[i8]) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::shape("PseudoLabelMatrix::from_codes", rows * cols, codes.len()));
        }
        let labels = codes
            .iter()
            .map(|&c| match c {
                1 => Ok(PseudoLabel::Positive),
                0 => Ok(PseudoLabel::Negative),
                -1 => Ok(PseudoLabel::Uncertain),
                other => Err(Error::OutOfRange {
                    what: "pseudo-label code",
                    range: "{1, 0, -1}",
                    value: other as f64,
                }),
            })
            .collect::<Result<_>>()?;
        Ok(PseudoLabelMatrix { rows, cols, labels })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> PseudoLabel {
        self.labels[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, label: PseudoLabel) {
        self.labels[r * self.cols + c] = label;
    }

    pub fn as_slice(&self) -> &[PseudoLabel] {
        &self.labels
    }

    pub fn count(&self, label: PseudoLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn confident_count(&self) -> usize {
        self.labels.len() - self.count(PseudoLabel::Uncertain)
    }

    pub fn select_rows(&self, indices: &[usize]) -> PseudoLabelMatrix {
        let mut labels = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            labels.extend_from_slice(&self.labels[i * self.cols..(i + 1) * self.cols]);
        }
        PseudoLabelMatrix {
            rows: indices.len(),
            cols: self.cols,
            labels,
        }
    }
}

/// Applies one class threshold to a single score.
#[inline]
pub fn classify(p: f64, t: &ClassThreshold) -> PseudoLabel {
    if p > t.tau_pos {
        PseudoLabel::Positive
    } else if p < t.tau_neg {
        PseudoLabel::Negative
    } else {
        PseudoLabel::Uncertain
    }
}

pub fn assign_pseudo_labels(preds: &Matrix, thresholds: &ClassThresholds) -> Result<PseudoLabelMatrix> {
    if preds.cols() != thresholds.num_classes() {
        return Err(Error::shape(
            "assign_pseudo_labels",
            thresholds.num_classes(),
            preds.cols(),
        ));
    }
    let mut labels = Vec::with_capacity(preds.len());
    for r in 0..preds.rows() {
        for (p, t) in preds.row(r).iter().zip(&thresholds.classes) {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::OutOfRange {
                    what: "score",
                    range: "[0, 1]",
                    value: *p,
                });
            }
            labels.push(classify(*p, t));
        }
    }
    Ok(PseudoLabelMatrix {
        rows: preds.rows(),
        cols: preds.cols(),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(scores: &[f64], labels: &[f64]) -> (Matrix, Matrix) {
        (
            Matrix::from_vec(scores.len(), 1, scores.to_vec()).unwrap(),
            Matrix::from_vec(labels.len(), 1, labels.to_vec()).unwrap(),
        )
    }

    #[test]
    fn mid_range_arithmetic() {
        let (p, y) = column(&[0.9, 0.3, 0.1, 0.5], &[1.0, 1.0, 0.0, 0.0]);
        let t = derive_thresholds(&p, &y).unwrap();
        assert!((t.classes[0].tau_pos - 0.6).abs() < 1e-15);
        assert!((t.classes[0].tau_neg - 0.3).abs() < 1e-15);
        assert!(t.classes[0].valid);
        assert_eq!((t.classes[0].n_pos_support, t.classes[0].n_neg_support), (2, 2));
    }

    #[test]
    fn singleton_group() {
        let (p, y) = column(&[0.7, 0.2], &[1.0, 0.0]);
        let t = derive_thresholds(&p, &y).unwrap();
        assert_eq!(t.classes[0].tau_pos, 0.7);
        assert_eq!(t.classes[0].tau_neg, 0.2);
    }

    #[test]
    fn missing_groups_use_sentinels() {
        let (p, y) = column(&[0.7, 0.2], &[0.0, 0.0]);
        let t = derive_thresholds(&p, &y).unwrap();
        assert_eq!(t.classes[0].tau_pos, 1.0);
        assert!(!t.classes[0].valid);

        let (p, y) = column(&[0.7, 0.2], &[1.0, 1.0]);
        let t = derive_thresholds(&p, &y).unwrap();
        assert_eq!(t.classes[0].tau_neg, 0.0);
    }

    #[test]
    fn crossed_thresholds_are_swapped() {
        // positives mid-range 0.3, negatives mid-range 0.6
        let (p, y) = column(&[0.2, 0.4, 0.5, 0.7], &[1.0, 1.0, 0.0, 0.0]);
        let t = derive_thresholds(&p, &y).unwrap();
        let c = &t.classes[0];
        assert!(c.swapped);
        assert!((c.tau_pos - 0.6).abs() < 1e-15 && (c.tau_neg - 0.3).abs() < 1e-15);
    }

    #[test]
    fn empty_labeled_set_is_an_error() {
        assert!(derive_thresholds(&Matrix::zeros(0, 3), &Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn assignment_follows_the_three_regions() {
        let t = ClassThresholds::from_pairs(&[(0.6, 0.3)]);
        let p = Matrix::from_vec(5, 1, vec![0.61, 0.29, 0.45, 0.6, 0.3]).unwrap();
        let m = assign_pseudo_labels(&p, &t).unwrap();
        let codes: Vec<i8> = m.as_slice().iter().map(|l| l.code()).collect();
        assert_eq!(codes, vec![1, 0, -1, -1, -1]);
    }

    #[test]
    fn sentinel_never_emits_positives() {
        let t = ClassThresholds::sentinel(1);
        let p = Matrix::from_vec(3, 1, vec![0.999999, 1.0, 0.5]).unwrap();
        let m = assign_pseudo_labels(&p, &t).unwrap();
        assert_eq!(m.count(PseudoLabel::Positive), 0);
        assert_eq!(m.count(PseudoLabel::Negative), 0);
    }

    #[test]
    fn rejects_out_of_range_scores() {
        let t = ClassThresholds::from_pairs(&[(0.6, 0.3)]);
        let p = Matrix::from_vec(1, 1, vec![1.2]).unwrap();
        assert!(assign_pseudo_labels(&p, &t).is_err());
    }

    #[test]
    fn codes_round_trip() {
        let m = PseudoLabelMatrix::from_codes(1, 3, &[1, 0, -1]).unwrap();
        assert_eq!(m.get(0, 2), PseudoLabel::Uncertain);
        assert!(PseudoLabelMatrix::from_codes(1, 1, &[2]).is_err());
    }
}
