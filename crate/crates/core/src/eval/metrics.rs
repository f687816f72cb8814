use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Non-interpolated average precision; `None` when there is no positive.
///
/// Items are ranked by descending score with ties kept in input order, and
/// the precision at every positive's rank is averaged.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("average_precision", scores.len(), labels.len()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] > 0.5 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes without a positive label, excluded from the mean.
    pub skipped: Vec<usize>,
}

pub fn map_report(scores: &Matrix, labels: &Matrix) -> Result<MapReport> {
    if scores.shape() != labels.shape() {
        return Err(Error::shape(
            "mean_average_precision",
            format!("{:?}", scores.shape()),
            format!("{:?}", labels.shape()),
        ));
    }
    let n = scores.rows();
    let mut per_class = Vec::with_capacity(scores.cols());
    let mut col_s = vec![0.0; n];
    let mut col_y = vec![0.0; n];
    for c in 0..scores.cols() {
        for i in 0..n {
            col_s[i] = scores.get(i, c);
            col_y[i] = labels.get(i, c);
        }
        per_class.push(average_precision(&col_s, &col_y)?);
    }
    let skipped: Vec<usize> = (0..per_class.len()).filter(|&c| per_class[c].is_none()).collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Empty("no class has a positive label".into()));
    }
    Ok(MapReport {
        map: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
        skipped,
    })
}

/// Unweighted mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(scores: &Matrix, labels: &Matrix) -> Result<f64> {
    map_report(scores, labels).map(|r| r.map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(ap, Some(1.0));
    }

    #[test]
    fn hand_example() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1.0, 0.0, 1.0, 0.0]).unwrap().unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn ties_keep_input_order() {
        let first = average_precision(&[0.5, 0.5], &[1.0, 0.0]).unwrap().unwrap();
        let second = average_precision(&[0.5, 0.5], &[0.0, 1.0]).unwrap().unwrap();
        assert_eq!(first, 1.0);
        assert_eq!(second, 0.5);
    }

    #[test]
    fn no_positive_is_skipped() {
        assert_eq!(average_precision(&[0.3, 0.2], &[0.0, 0.0]).unwrap(), None);
        let s = Matrix::from_vec(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let y = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = map_report(&s, &y).unwrap();
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.map, 1.0);
        assert!(mean_average_precision(&s, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn mean_over_classes() {
        // class 0 perfect, class 1 AP 0.5
        let s = Matrix::from_vec(2, 2, vec![0.9, 0.9, 0.1, 0.1]).unwrap();
        let y = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((mean_average_precision(&s, &y).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(average_precision(&[0.1], &[1.0, 0.0]).is_err());
    }
}
