use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::WeightTable;
use crate::error::{Error, Result};

/// Estimated and oracle correctness likelihood for one confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub k: usize,
    pub lower_edge: f64,
    pub upper_edge: f64,
    pub estimated_pos: f64,
    pub oracle_pos: f64,
    pub estimated_neg: f64,
    pub oracle_neg: f64,
    pub estimated_support: u64,
    pub oracle_support_pos: u64,
    pub oracle_support_neg: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub rows: Vec<ReliabilityRow>,
    /// Max |estimated − oracle| over bins occupied in both tables, taken over
    /// both pseudo-label directions. `None` when no bin is co-occupied.
    pub linf_gap: Option<f64>,
    pub linf_gap_pos: Option<f64>,
    pub linf_gap_neg: Option<f64>,
    pub co_occupied: usize,
}

fn side_gap(est: &[f64], est_support: &[u64], orc: &[f64], orc_support: &[u64]) -> (Option<f64>, usize) {
    let mut gap: Option<f64> = None;
    let mut n = 0;
    for k in 0..est.len() {
        if est_support[k] > 0 && orc_support[k] > 0 {
            let d = (est[k] - orc[k]).abs();
            gap = Some(gap.map_or(d, |g| g.max(d)));
            n += 1;
        }
    }
    (gap, n)
}

/// Pairs two tables bin by bin. Co-occupancy is judged separately for the
/// positive and negative pseudo-label direction.
pub fn reliability_report(estimated: &WeightTable, oracle: &WeightTable) -> Result<ReliabilityReport> {
    if estimated.bins != oracle.bins {
        return Err(Error::shape("reliability_report", estimated.bins, oracle.bins));
    }
    let rows = (0..estimated.bins)
        .map(|k| ReliabilityRow {
            k,
            lower_edge: estimated.lower_edge(k),
            upper_edge: estimated.upper_edge(k),
            estimated_pos: estimated.r_pos[k],
            oracle_pos: oracle.r_pos[k],
            estimated_neg: estimated.r_neg[k],
            oracle_neg: oracle.r_neg[k],
            estimated_support: estimated.support_pos[k].max(estimated.support_neg[k]),
            oracle_support_pos: oracle.support_pos[k],
            oracle_support_neg: oracle.support_neg[k],
        })
        .collect();
    let (pos, n_pos) = side_gap(&estimated.r_pos, &estimated.support_pos, &oracle.r_pos, &oracle.support_pos);
    let (neg, n_neg) = side_gap(&estimated.r_neg, &estimated.support_neg, &oracle.r_neg, &oracle.support_neg);
    let linf_gap = match (pos, neg) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    };
    Ok(ReliabilityReport {
        rows,
        linf_gap,
        linf_gap_pos: pos,
        linf_gap_neg: neg,
        co_occupied: n_pos + n_neg,
    })
}

impl ReliabilityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "k,lower_edge,upper_edge,estimated_pos,oracle_pos,estimated_neg,oracle_neg,estimated_support,oracle_support_pos,oracle_support_neg\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.k,
                r.lower_edge,
                r.upper_edge,
                r.estimated_pos,
                r.oracle_pos,
                r.estimated_neg,
                r.oracle_neg,
                r.estimated_support,
                r.oracle_support_pos,
                r.oracle_support_neg
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{accumulate_bin_stats, oracle_weight_table, Provenance, DEFAULT_EPSILON};
    use crate::matrix::Matrix;
    use crate::thresholding::{PseudoLabel, PseudoLabelMatrix};

    #[test]
    fn self_comparison_has_zero_gap() {
        let t = WeightTable::from_proportions(vec![0.2, 0.9], vec![0.8, 0.1], Provenance::EstimationSet).unwrap();
        let r = reliability_report(&t, &t).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.linf_gap, Some(0.0));
    }

    #[test]
    fn estimate_from_the_oracle_pool_matches_oracle() {
        // every pair pseudo-labeled positive: the positive-side oracle is the
        // positive rate of each bin, exactly what the estimate counts
        let p = Matrix::from_vec(6, 1, vec![0.05, 0.1, 0.45, 0.5, 0.55, 0.95]).unwrap();
        let y = Matrix::from_vec(6, 1, vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let est = WeightTable::from_stats(&accumulate_bin_stats(&p, &y, 4, DEFAULT_EPSILON).unwrap(), Provenance::EstimationSet).unwrap();
        let orc = oracle_weight_table(&p, &y, &PseudoLabelMatrix::filled(6, 1, PseudoLabel::Positive), 4).unwrap();
        let r = reliability_report(&est, &orc).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.linf_gap_pos.unwrap() < 1e-9);
        assert_eq!(r.linf_gap_neg, None);
    }

    #[test]
    fn bin_count_mismatch() {
        let a = WeightTable::from_proportions(vec![0.5; 2], vec![0.5; 2], Provenance::Oracle).unwrap();
        let b = WeightTable::from_proportions(vec![0.5; 3], vec![0.5; 3], Provenance::Oracle).unwrap();
        assert!(reliability_report(&a, &b).is_err());
    }
}
