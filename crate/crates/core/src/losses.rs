//! Training objectives.
//!
//! Every loss comes in two forms: a plain evaluation on `f64` data, and a
//! builder that records the same computation on a [`Tape`] so gradients can
//! flow into the model. Tests tie the two together.

use serde::{Deserialize, Serialize};

use crate::calibration::Weighting;
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::matrix::Matrix;
use crate::thresholding::PseudoLabelMatrix;

/// Probability clip used inside logarithms on the tape.
const PROB_CLIP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        AslConfig {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
        }
    }
}

impl AslConfig {
    /// Plain binary cross-entropy.
    pub fn bce() -> Self {
        AslConfig {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_pos.is_finite()) {
            return Err(Error::config("asl.gamma_pos", "must be finite and >= 0"));
        }
        if !(self.gamma_neg >= 0.0 && self.gamma_neg.is_finite()) {
            return Err(Error::config("asl.gamma_neg", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::config("asl.margin", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Asymmetric loss of one score.
///
/// Positive: `-(1-p)^γ+ · ln p`. Negative: `-p_m^γ− · ln(1-p_m)` with
/// `p_m = max(p - m, 0)`.
pub fn asl(p: f64, y: bool, cfg: &AslConfig) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::OutOfRange {
            what: "score",
            range: "(0, 1)",
            value: p,
        });
    }
    let focal = |base: f64, gamma: f64| if gamma == 0.0 { 1.0 } else { base.powf(gamma) };
    if y {
        Ok(-focal(1.0 - p, cfg.gamma_pos) * p.ln())
    } else {
        let pm = (p - cfg.margin).max(0.0);
        if pm == 0.0 {
            return Ok(0.0);
        }
        Ok(-focal(pm, cfg.gamma_neg) * (1.0 - pm).ln())
    }
}

/// Records `sum(weights ⊙ asl(scores, targets)) / normalizer` on the tape.
///
/// `scores` holds probabilities; `targets` and `weights` are constants of the
/// same shape. Entries with zero weight contribute nothing.
pub fn asl_on_tape(
    tape: &mut Tape,
    scores: Var,
    targets: &Matrix,
    weights: &Matrix,
    cfg: &AslConfig,
    normalizer: f64,
) -> Result<Var> {
    let shape = tape.value(scores).shape();
    if targets.shape() != shape || weights.shape() != shape {
        return Err(Error::shape(
            "asl_on_tape",
            format!("{shape:?}"),
            format!("{:?} / {:?}", targets.shape(), weights.shape()),
        ));
    }
    let p = tape.clamp(scores, PROB_CLIP, 1.0 - PROB_CLIP);

    // positive branch
    let log_p = tape.log(p);
    let mut pos = tape.scale(log_p, -1.0);
    if cfg.gamma_pos != 0.0 {
        let q = tape.one_minus(p);
        let focal = tape.powf(q, cfg.gamma_pos);
        pos = tape.mul(focal, pos)?;
    }

    // negative branch
    let pm = if cfg.margin > 0.0 {
        let shifted = tape.add_scalar(p, -cfg.margin);
        tape.relu(shifted)
    } else {
        p
    };
    let q = tape.one_minus(pm);
    let log_q = tape.log(q);
    let mut neg = tape.scale(log_q, -1.0);
    if cfg.gamma_neg != 0.0 {
        let focal = tape.powf(pm, cfg.gamma_neg);
        neg = tape.mul(focal, neg)?;
    }

    let w_pos = weights.zip_map(targets, |w, y| if y > 0.5 { w } else { 0.0 });
    let w_neg = weights.zip_map(targets, |w, y| if y > 0.5 { 0.0 } else { w });
    let a = tape.weighted_sum(pos, w_pos)?;
    let b = tape.weighted_sum(neg, w_neg)?;
    let total = tape.add(a, b)?;
    Ok(tape.scale(total, 1.0 / normalizer.max(1.0)))
}

/// Mean ASL over every entry of a fully labeled batch.
pub fn supervised_on_tape(tape: &mut Tape, scores: Var, labels: &Matrix, cfg: &AslConfig) -> Result<Var> {
    let ones = Matrix::filled(labels.rows(), labels.cols(), 1.0);
    let n = labels.len() as f64;
    asl_on_tape(tape, scores, labels, &ones, cfg, n)
}

/// Weighted mean ASL over confident pseudo-labels.
///
/// Weights are evaluated at `preds` and treated as constants. Uncertain
/// entries are excluded; with no confident entry the loss is 0.
pub fn pseudo_loss(
    preds: &Matrix,
    pseudo: &PseudoLabelMatrix,
    weighting: &Weighting,
    cfg: &AslConfig,
) -> Result<f64> {
    check_pseudo_shape(preds, pseudo)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (&p, &pl) in preds.data().iter().zip(pseudo.as_slice()) {
        let Some(hard) = pl.hard() else { continue };
        total += weighting.weight(p, hard)? * asl(p, hard, cfg)?;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn check_pseudo_shape(preds: &Matrix, pseudo: &PseudoLabelMatrix) -> Result<()> {
    if preds.shape() != (pseudo.rows(), pseudo.cols()) {
        return Err(Error::shape(
            "pseudo_loss",
            format!("{:?}", preds.shape()),
            format!("{:?}", (pseudo.rows(), pseudo.cols())),
        ));
    }
    Ok(())
}

/// Tape form of [`pseudo_loss`] with precomputed per-entry weights
/// (uncertain entries must carry weight 0). Returns `None` when no entry is
/// confident.
pub fn pseudo_loss_on_tape(
    tape: &mut Tape,
    scores: Var,
    pseudo: &PseudoLabelMatrix,
    weights: &Matrix,
    cfg: &AslConfig,
) -> Result<Option<Var>> {
    let confident = pseudo.confident_count();
    if confident == 0 {
        return Ok(None);
    }
    let mut targets = Matrix::zeros(pseudo.rows(), pseudo.cols());
    let mut masked = weights.clone();
    for (i, pl) in pseudo.as_slice().iter().enumerate() {
        match pl.hard() {
            Some(h) => targets.data_mut()[i] = f64::from(u8::from(h)),
            None => masked.data_mut()[i] = 0.0,
        }
    }
    asl_on_tape(tape, scores, &targets, &masked, cfg, confident as f64).map(Some)
}

/// Unit embeddings arranged in positive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub embeddings: Matrix,
    pub partner: Vec<usize>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    /// Rows `0..B` are the weak views, rows `B..2B` the strong views; row `i`
    /// pairs with row `i + B`.
    pub fn paired(weak: &Matrix, strong: &Matrix, temperature: f64) -> Result<Self> {
        if weak.shape() != strong.shape() {
            return Err(Error::shape(
                "ContrastiveBatch::paired",
                format!("{:?}", weak.shape()),
                format!("{:?}", strong.shape()),
            ));
        }
        let embeddings = Matrix::vstack(&[weak, strong])?;
        let batch = Self {
            partner: paired_partners(weak.rows()),
            embeddings,
            temperature,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn new(embeddings: Matrix, partner: Vec<usize>, temperature: f64) -> Result<Self> {
        let batch = Self {
            embeddings,
            partner,
            temperature,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    fn validate(&self) -> Result<()> {
        let n = self.embeddings.rows();
        if n < 2 {
            return Err(Error::Empty("contrastive batch needs at least one pair".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::OutOfRange {
                what: "temperature",
                range: "(0, inf)",
                value: self.temperature,
            });
        }
        if self.partner.len() != n {
            return Err(Error::shape("ContrastiveBatch", n, self.partner.len()));
        }
        for (i, &j) in self.partner.iter().enumerate() {
            if j >= n || j == i || self.partner[j] != i {
                return Err(Error::Format {
                    what: "contrastive partner map".into(),
                    reason: format!("entry {i} -> {j} is not a fixed-point-free involution"),
                });
            }
        }
        for r in 0..n {
            let norm = self.embeddings.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::OutOfRange {
                    what: "embedding norm",
                    range: "1 ± 1e-6",
                    value: norm,
                });
            }
        }
        Ok(())
    }
}

/// Partner map for `B` weak rows followed by `B` strong rows.
pub fn paired_partners(pairs: usize) -> Vec<usize> {
    (0..2 * pairs)
        .map(|i| if i < pairs { i + pairs } else { i - pairs })
        .collect()
}

/// Class-wise InfoNCE:
/// `-(1/2B) Σ_i log( exp(z_i·z_i⁺/τ) / Σ_{j≠i} exp(z_i·z_j/τ) )`.
pub fn class_infonce(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let z = &batch.embeddings;
    let n = z.rows();
    let sims = z.gemm(false, z, true)?;
    let inv_t = 1.0 / batch.temperature;
    let mut total = 0.0;
    for i in 0..n {
        let row = sims.row(i);
        let max = (0..n)
            .filter(|&j| j != i)
            .map(|j| row[j] * inv_t)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..n)
                .filter(|&j| j != i)
                .map(|j| (row[j] * inv_t - max).exp())
                .sum::<f64>()
                .ln();
        total += lse - row[batch.partner[i]] * inv_t;
    }
    Ok(total / n as f64)
}

/// Tape form of [`class_infonce`] over already-normalized rows of `z`.
pub fn infonce_on_tape(tape: &mut Tape, z: Var, partner: &[usize], temperature: f64) -> Result<Var> {
    let n = tape.value(z).rows();
    if n < 2 || partner.len() != n {
        return Err(Error::Empty("contrastive batch needs at least one pair".into()));
    }
    tape.info_nce(z, partner, temperature)
}

/// `L_sup + L_pseudo + L_uncer`.
pub fn total_loss(sup: f64, pseudo: f64, uncer: f64) -> Result<f64> {
    for (name, v) in [("supervised", sup), ("pseudo", pseudo), ("uncertain", uncer)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss term")));
        }
    }
    Ok(sup + pseudo + uncer)
}
