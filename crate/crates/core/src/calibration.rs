//! Correctness-likelihood estimation by confidence binning.
//!
//! The loss weight that minimizes the expected binary cross-entropy against
//! pseudo-label correctness is the posterior probability that the
//! pseudo-label is correct given its score. That posterior is approximated
//! per confidence bin `B_k = [k/K, (k+1)/K)`: on a held-out labeled pool the
//! fraction of positives among all (sample, class) pairs whose score lands
//! in `B_k` estimates the correctness of a positive pseudo-label there, and
//! its complement the correctness of a negative one. Lookups interpolate
//! linearly between the left edges of adjacent bins.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::thresholding::PseudoLabelMatrix;

pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Bin of score `p`: `floor(p * K)`, with `p = 1` folded into the last bin.
pub fn bin_index(p: f64, bins: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRange {
            what: "score",
            range: "[0, 1]",
            value: p,
        });
    }
    Ok(((p * bins as f64).floor() as usize).min(bins - 1))
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::config("bins", "need at least 2 bins"));
    }
    Ok(())
}

/// Per-bin positive/negative counts and proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bins: usize,
    pub epsilon: f64,
    pub n_pos: Vec<u64>,
    pub n_neg: Vec<u64>,
    /// `n_pos / (n_pos + n_neg + eps)`; zero for empty bins.
    pub r_pos: Vec<f64>,
    /// `1 - r_pos` for occupied bins; zero for empty bins.
    pub r_neg: Vec<f64>,
}

impl BinStats {
    pub fn empty(bins: usize, epsilon: f64) -> Result<Self> {
        check_bins(bins)?;
        Ok(BinStats {
            bins,
            epsilon,
            n_pos: vec![0; bins],
            n_neg: vec![0; bins],
            r_pos: vec![0.0; bins],
            r_neg: vec![0.0; bins],
        })
    }

    pub fn occupancy(&self, k: usize) -> u64 {
        self.n_pos[k] + self.n_neg[k]
    }

    pub fn is_empty_bin(&self, k: usize) -> bool {
        self.occupancy(k) == 0
    }

    pub fn total(&self) -> u64 {
        (0..self.bins).map(|k| self.occupancy(k)).sum()
    }

    pub fn add(&mut self, p: f64, positive: bool) -> Result<()> {
        let k = bin_index(p, self.bins)?;
        if positive {
            self.n_pos[k] += 1;
        } else {
            self.n_neg[k] += 1;
        }
        Ok(())
    }

    /// Adds another reduction's counts into this one.
    pub fn merge(&mut self, other: &BinStats) -> Result<()> {
        if other.bins != self.bins {
            return Err(Error::shape("BinStats::merge", self.bins, other.bins));
        }
        for k in 0..self.bins {
            self.n_pos[k] += other.n_pos[k];
            self.n_neg[k] += other.n_neg[k];
        }
        self.refresh_proportions();
        Ok(())
    }

    pub fn refresh_proportions(&mut self) {
        for k in 0..self.bins {
            let n = self.occupancy(k);
            if n == 0 {
                self.r_pos[k] = 0.0;
                self.r_neg[k] = 0.0;
            } else {
                self.r_pos[k] = self.n_pos[k] as f64 / (n as f64 + self.epsilon);
                self.r_neg[k] = 1.0 - self.r_pos[k];
            }
        }
    }
}

/// Counts every (sample, class) pair of `preds` by bin and ground truth.
pub fn accumulate_bin_stats(preds: &Matrix, labels: &Matrix, bins: usize, epsilon: f64) -> Result<BinStats> {
    if preds.shape() != labels.shape() {
        return Err(Error::shape(
            "accumulate_bin_stats",
            format!("{:?}", preds.shape()),
            format!("{:?}", labels.shape()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Empty("estimation pool".into()));
    }
    let mut stats = BinStats::empty(bins, epsilon)?;
    for (&p, &y) in preds.data().iter().zip(labels.data()) {
        stats.add(p, y > 0.5)?;
    }
    stats.refresh_proportions();
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "estimated-from-d_est")]
    EstimationSet,
    #[serde(rename = "estimated-from-labeled")]
    LabeledSet,
    #[serde(rename = "oracle")]
    Oracle,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::EstimationSet => "estimated-from-d_est",
            Provenance::LabeledSet => "estimated-from-labeled",
            Provenance::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Linear between left edges of adjacent bins; constant in the last bin.
    #[default]
    Linear,
    /// Piecewise constant per bin.
    Step,
}

/// Correctness-likelihood lookup table.
///
/// `r_pos[k]` is the weight for a positive pseudo-label scored in bin `k`
/// and `r_neg[k]` the weight for a negative one. Empty bins have already
/// been resolved to their nearest occupied neighbour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub bins: usize,
    pub provenance: Provenance,
    pub interpolation: Interpolation,
    pub r_pos: Vec<f64>,
    pub r_neg: Vec<f64>,
    /// Counts written to the `n_pos`/`n_neg` CSV columns. For estimated
    /// tables these are ground-truth positives/negatives; for oracle tables
    /// the number of positive/negative pseudo-labels.
    pub n_pos: Vec<u64>,
    pub n_neg: Vec<u64>,
    /// Pairs backing `r_pos[k]` and `r_neg[k]` respectively.
    pub support_pos: Vec<u64>,
    pub support_neg: Vec<u64>,
}

/// Replaces unsupported entries with the value of the nearest supported bin
/// (ties go to the lower index). Returns `false` when nothing is supported.
fn fill_empty(values: &mut [f64], support: &[u64]) -> bool {
    let occupied: Vec<usize> = (0..values.len()).filter(|&k| support[k] > 0).collect();
    if occupied.is_empty() {
        return false;
    }
    for k in 0..values.len() {
        if support[k] > 0 {
            continue;
        }
        let nearest = occupied
            .iter()
            .copied()
            .min_by_key(|&j| (j.abs_diff(k), j))
            .expect("non-empty");
        values[k] = values[nearest];
    }
    true
}

impl WeightTable {
    /// Table from bin statistics; errors when every bin is empty.
    pub fn from_stats(stats: &BinStats, provenance: Provenance) -> Result<Self> {
        let support: Vec<u64> = (0..stats.bins).map(|k| stats.occupancy(k)).collect();
        let mut r_pos = stats.r_pos.clone();
        let mut r_neg = stats.r_neg.clone();
        if !fill_empty(&mut r_pos, &support) {
            return Err(Error::Empty("every bin of the weight table".into()));
        }
        fill_empty(&mut r_neg, &support);
        Ok(WeightTable {
            bins: stats.bins,
            provenance,
            interpolation: Interpolation::Linear,
            r_pos,
            r_neg,
            n_pos: stats.n_pos.clone(),
            n_neg: stats.n_neg.clone(),
            support_pos: support.clone(),
            support_neg: support,
        })
    }

    /// Table with explicit proportions; every bin counts as occupied.
    pub fn from_proportions(r_pos: Vec<f64>, r_neg: Vec<f64>, provenance: Provenance) -> Result<Self> {
        check_bins(r_pos.len())?;
        if r_neg.len() != r_pos.len() {
            return Err(Error::shape("WeightTable::from_proportions", r_pos.len(), r_neg.len()));
        }
        if let Some(&bad) = r_pos.iter().chain(&r_neg).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange {
                what: "bin proportion",
                range: "[0, 1]",
                value: bad,
            });
        }
        let bins = r_pos.len();
        Ok(WeightTable {
            bins,
            provenance,
            interpolation: Interpolation::Linear,
            r_pos,
            r_neg,
            n_pos: vec![0; bins],
            n_neg: vec![0; bins],
            support_pos: vec![1; bins],
            support_neg: vec![1; bins],
        })
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn proportions(&self, positive: bool) -> &[f64] {
        if positive {
            &self.r_pos
        } else {
            &self.r_neg
        }
    }

    pub fn support(&self, positive: bool) -> &[u64] {
        if positive {
            &self.support_pos
        } else {
            &self.support_neg
        }
    }

    pub fn lower_edge(&self, k: usize) -> f64 {
        k as f64 / self.bins as f64
    }

    pub fn upper_edge(&self, k: usize) -> f64 {
        (k + 1) as f64 / self.bins as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,lower_edge,upper_edge,n_pos,n_neg,r_pos,r_neg,provenance\n");
        for k in 0..self.bins {
            out.push_str(&format!(
                "{k},{},{},{},{},{},{},{}\n",
                self.lower_edge(k),
                self.upper_edge(k),
                self.n_pos[k],
                self.n_neg[k],
                self.r_pos[k],
                self.r_neg[k],
                self.provenance.as_str()
            ));
        }
        out
    }
}

/// Interpolated correctness weight for a pseudo-label `y_hat` scored `p`.
///
/// For `p` in bin `k < K-1` this is `(1 - t) r_k + t r_{k+1}` with
/// `t = pK - k`; the last bin returns `r_{K-1}`.
pub fn weight_lookup(table: &WeightTable, p: f64, y_hat: bool) -> Result<f64> {
    let k = bin_index(p, table.bins)?;
    let r = table.proportions(y_hat);
    let w = match table.interpolation {
        Interpolation::Step => r[k],
        Interpolation::Linear if k + 1 >= table.bins => r[k],
        Interpolation::Linear => {
            let t = p * table.bins as f64 - k as f64;
            (1.0 - t) * r[k] + t * r[k + 1]
        }
    };
    Ok(w.clamp(0.0, 1.0))
}

/// The exact per-bin correctness rate of confident pseudo-labels, given
/// ground truth. Uncertain entries are ignored.
pub fn oracle_weight_table(
    preds: &Matrix,
    true_labels: &Matrix,
    pseudo_labels: &PseudoLabelMatrix,
    bins: usize,
) -> Result<WeightTable> {
    check_bins(bins)?;
    if preds.shape() != true_labels.shape()
        || preds.shape() != (pseudo_labels.rows(), pseudo_labels.cols())
    {
        return Err(Error::shape(
            "oracle_weight_table",
            format!("{:?}", preds.shape()),
            format!(
                "{:?} labels / {:?} pseudo-labels",
                true_labels.shape(),
                (pseudo_labels.rows(), pseudo_labels.cols())
            ),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Empty("oracle pool".into()));
    }
    let mut correct = [vec![0u64; bins], vec![0u64; bins]];
    let mut total = [vec![0u64; bins], vec![0u64; bins]];
    for ((&p, &y), &pl) in preds
        .data()
        .iter()
        .zip(true_labels.data())
        .zip(pseudo_labels.as_slice())
    {
        let Some(hard) = pl.hard() else { continue };
        let k = bin_index(p, bins)?;
        let side = usize::from(hard);
        total[side][k] += 1;
        if hard == (y > 0.5) {
            correct[side][k] += 1;
        }
    }
    let rate = |side: usize| -> Vec<f64> {
        (0..bins)
            .map(|k| {
                if total[side][k] == 0 {
                    0.0
                } else {
                    correct[side][k] as f64 / total[side][k] as f64
                }
            })
            .collect()
    };
    let mut r_pos = rate(1);
    let mut r_neg = rate(0);
    let has_pos = fill_empty(&mut r_pos, &total[1]);
    let has_neg = fill_empty(&mut r_neg, &total[0]);
    match (has_pos, has_neg) {
        (false, false) => return Err(Error::Empty("confident pseudo-labels in oracle pool".into())),
        (true, false) => r_neg = r_pos.iter().map(|r| 1.0 - r).collect(),
        (false, true) => r_pos = r_neg.iter().map(|r| 1.0 - r).collect(),
        (true, true) => {}
    }
    let [neg_total, pos_total] = total;
    Ok(WeightTable {
        bins,
        provenance: Provenance::Oracle,
        interpolation: Interpolation::Linear,
        r_pos,
        r_neg,
        n_pos: pos_total.clone(),
        n_neg: neg_total.clone(),
        support_pos: pos_total,
        support_neg: neg_total,
    })
}

/// Mean binary cross-entropy of a constant weight `w` against correctness flags.
pub fn bce_weight_objective(w: f64, correctness: &[bool]) -> Result<f64> {
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::OutOfRange {
            what: "weight",
            range: "(0, 1)",
            value: w,
        });
    }
    if correctness.is_empty() {
        return Err(Error::Empty("correctness flags".into()));
    }
    let (lw, l1w) = (w.ln(), (1.0 - w).ln());
    let total: f64 = correctness
        .iter()
        .map(|&ok| if ok { -lw } else { -l1w })
        .sum();
    Ok(total / correctness.len() as f64)
}

/// Where pseudo-label weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    /// Every confident pseudo-label weighs 1.
    Uniform,
    /// `p` for positives and `1 - p` for negatives.
    Confidence,
    Table(WeightTable),
}

impl Weighting {
    pub fn weight(&self, p: f64, y_hat: bool) -> Result<f64> {
        match self {
            Weighting::Uniform => Ok(1.0),
            Weighting::Confidence => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::OutOfRange {
                        what: "score",
                        range: "[0, 1]",
                        value: p,
                    });
                }
                Ok(if y_hat { p } else { 1.0 - p })
            }
            Weighting::Table(table) => weight_lookup(table, p, y_hat),
        }
    }

    /// Weight matrix aligned with `scores`; uncertain entries get 0.
    pub fn weight_matrix(&self, scores: &Matrix, pseudo: &PseudoLabelMatrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(scores.rows(), scores.cols());
        for (i, (&p, &pl)) in scores.data().iter().zip(pseudo.as_slice()).enumerate() {
            if let Some(hard) = pl.hard() {
                out.data_mut()[i] = self.weight(p, hard)?;
            }
        }
        Ok(out)
    }

    pub fn table(&self) -> Option<&WeightTable> {
        match self {
            Weighting::Table(t) => Some(t),
            _ => None,
        }
    }
}
