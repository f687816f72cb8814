use proptest::prelude::*;

use dicap::calibration::{
    accumulate_bin_stats, bce_weight_objective, bin_index, weight_lookup, Provenance, WeightTable, DEFAULT_EPSILON,
};
use dicap::data::{augment, generate_synthetic, GenConfig, Strength};
use dicap::eval::{average_precision, mean_average_precision};
use dicap::grad::{ema_update, EmaState, ParamSet, ParamTag, Tape};
use dicap::losses::{class_infonce, paired_partners, pseudo_loss_on_tape, AslConfig, ContrastiveBatch};
use dicap::thresholding::{assign_pseudo_labels, derive_thresholds, ClassThresholds, PseudoLabel};
use dicap::Matrix;

fn rank(l: PseudoLabel) -> u8 {
    match l {
        PseudoLabel::Negative => 0,
        PseudoLabel::Uncertain => 1,
        PseudoLabel::Positive => 2,
    }
}

fn unit_rows(raw: &[f64], rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::from_vec(rows, cols, raw.to_vec()).unwrap();
    for r in 0..rows {
        let row = m.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    m
}

/// AP from its definition, with no sorting: each positive's rank counts
/// every item scored above it plus earlier ties.
fn brute_force_ap(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] > 0.5).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let rank = 1 + (0..scores.len()).filter(|&j| ahead(i, j)).count();
            let hits = 1 + positives.iter().filter(|&&j| ahead(i, j)).count();
            hits as f64 / rank as f64
        })
        .sum();
    Some(total / positives.len() as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pseudo_labels_are_ordered_by_score(
        a in 0.0..=1.0f64,
        b in 0.0..=1.0f64,
        x in 0.0..=1.0f64,
        y in 0.0..=1.0f64,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let thresholds = ClassThresholds::from_pairs(&[(hi, lo)]);
        let (p, q) = if x <= y { (x, y) } else { (y, x) };
        let labels = assign_pseudo_labels(&Matrix::from_vec(2, 1, vec![p, q]).unwrap(), &thresholds).unwrap();
        prop_assert!(rank(labels.get(0, 0)) <= rank(labels.get(1, 0)));
    }

    #[test]
    fn derived_thresholds_are_ordered_and_in_range(
        scores in prop::collection::vec(0.0..=1.0f64, 6..40),
        flags in prop::collection::vec(any::<bool>(), 40),
    ) {
        let n = scores.len();
        let preds = Matrix::from_vec(n, 1, scores).unwrap();
        let labels = Matrix::from_vec(n, 1, flags[..n].iter().map(|&f| f64::from(u8::from(f))).collect()).unwrap();
        let t = &derive_thresholds(&preds, &labels).unwrap().classes[0];
        prop_assert!((0.0..=1.0).contains(&t.tau_pos) && (0.0..=1.0).contains(&t.tau_neg));
        if t.valid {
            prop_assert!(t.tau_neg <= t.tau_pos);
        }
    }

    #[test]
    fn bins_are_monotone(p in 0.0..=1.0f64, q in 0.0..=1.0f64, k in 2usize..40) {
        let (a, b) = if p <= q { (p, q) } else { (q, p) };
        let (i, j) = (bin_index(a, k).unwrap(), bin_index(b, k).unwrap());
        prop_assert!(i <= j && j < k);
    }

    #[test]
    fn weights_are_continuous_and_complementary(
        scores in prop::collection::vec(0.0..=1.0f64, 1..80),
        flags in prop::collection::vec(any::<bool>(), 80),
        p in 0.0..=1.0f64,
        delta in 0.0..1e-4f64,
    ) {
        let n = scores.len();
        let preds = Matrix::from_vec(n, 1, scores).unwrap();
        let labels = Matrix::from_vec(n, 1, flags[..n].iter().map(|&f| f64::from(u8::from(f))).collect()).unwrap();
        let stats = accumulate_bin_stats(&preds, &labels, 20, DEFAULT_EPSILON).unwrap();
        let table = WeightTable::from_stats(&stats, Provenance::EstimationSet).unwrap();
        let w = weight_lookup(&table, p, true).unwrap();
        let complement = weight_lookup(&table, p, false).unwrap();
        prop_assert!((w + complement - 1.0).abs() < 1e-9);
        // adjacent bins differ by at most 1, so the slope is at most K
        let q = (p + delta).min(1.0);
        let moved = weight_lookup(&table, q, true).unwrap();
        prop_assert!((moved - w).abs() <= 20.0 * (q - p) + 1e-12);
    }

    #[test]
    fn constant_weight_objective_is_minimized_at_the_correct_fraction(
        flags in prop::collection::vec(any::<bool>(), 1..200),
    ) {
        let fraction = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        let best = (1..10_000)
            .map(|i| i as f64 * 1e-4)
            .min_by(|&a, &b| {
                bce_weight_objective(a, &flags).unwrap().total_cmp(&bce_weight_objective(b, &flags).unwrap())
            })
            .unwrap();
        prop_assert!((best - fraction).abs() <= 1e-3, "{} vs {}", best, fraction);
    }

    #[test]
    fn average_precision_matches_brute_force(
        scores in prop::collection::vec(prop::sample::select(vec![0.1, 0.2, 0.3, 0.5, 0.8, 0.9]), 1..40),
        flags in prop::collection::vec(any::<bool>(), 40),
    ) {
        let labels: Vec<f64> = flags[..scores.len()].iter().map(|&f| f64::from(u8::from(f))).collect();
        let fast = average_precision(&scores, &labels).unwrap();
        let slow = brute_force_ap(&scores, &labels);
        match (fast, slow) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn average_precision_ignores_monotone_transforms(
        scores in prop::collection::vec(-5.0..5.0f64, 1..50),
        flags in prop::collection::vec(any::<bool>(), 50),
        scale in 0.1..10.0f64,
        shift in -3.0..3.0f64,
    ) {
        let labels: Vec<f64> = flags[..scores.len()].iter().map(|&f| f64::from(u8::from(f))).collect();
        let moved: Vec<f64> = scores.iter().map(|s| (s * scale + shift).exp()).collect();
        prop_assert_eq!(average_precision(&scores, &labels).unwrap(), average_precision(&moved, &labels).unwrap());
    }

    #[test]
    fn infonce_is_invariant_to_pair_order(
        raw in prop::collection::vec(-1.0..1.0f64, 24),
        temperature in 0.1..2.0f64,
        rotate in 1usize..4,
    ) {
        // 4 pairs of 3-dimensional embeddings
        let weak = unit_rows(&raw[..12], 4, 3);
        let strong = unit_rows(&raw[12..], 4, 3);
        let base = class_infonce(&ContrastiveBatch::paired(&weak, &strong, temperature).unwrap()).unwrap();
        let order: Vec<usize> = (0..4).map(|i| (i + rotate) % 4).collect();
        let permuted = ContrastiveBatch::paired(&weak.select_rows(&order), &strong.select_rows(&order), temperature).unwrap();
        prop_assert!((class_infonce(&permuted).unwrap() - base).abs() < 1e-12);
        // swapping the roles of the two views changes nothing either
        let swapped = ContrastiveBatch::paired(&strong, &weak, temperature).unwrap();
        prop_assert!((class_infonce(&swapped).unwrap() - base).abs() < 1e-12);
        prop_assert_eq!(paired_partners(4), vec![4, 5, 6, 7, 0, 1, 2, 3]);
    }

    #[test]
    fn pseudo_loss_is_linear_in_the_weights(
        scores in prop::collection::vec(0.01..0.99f64, 12),
        codes in prop::collection::vec(prop::sample::select(vec![-1i8, 0, 1]), 12),
        weights in prop::collection::vec(0.0..1.0f64, 12),
        factor in 0.0..3.0f64,
    ) {
        let pseudo = dicap::thresholding::PseudoLabelMatrix::from_codes(4, 3, &codes).unwrap();
        let w = Matrix::from_vec(4, 3, weights).unwrap();
        let eval = |w: &Matrix| {
            let mut tape = Tape::new();
            let s = tape.leaf(Matrix::from_vec(4, 3, scores.clone()).unwrap());
            pseudo_loss_on_tape(&mut tape, s, &pseudo, w, &AslConfig::default())
                .unwrap()
                .map(|v| tape.value(v).item())
        };
        match (eval(&w), eval(&w.map(|v| v * factor))) {
            (Some(a), Some(b)) => prop_assert!((b - factor * a).abs() < 1e-12 * (1.0 + a.abs())),
            (None, None) => prop_assert_eq!(pseudo.confident_count(), 0),
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn ema_contracts_towards_the_parameters(
        shadow in prop::collection::vec(-3.0..3.0f64, 6),
        theta in prop::collection::vec(-3.0..3.0f64, 6),
        decay in 0.0..0.9999f64,
    ) {
        let set = |v: &[f64]| {
            let mut p = ParamSet::new();
            p.insert("w", ParamTag::Backbone, Matrix::from_vec(2, 3, v.to_vec()).unwrap()).unwrap();
            p
        };
        let target = set(&theta);
        let mut ema = EmaState::new(&set(&shadow), decay, false).unwrap();
        ema_update(&mut ema, &target).unwrap();
        for ((s, t), s0) in ema.shadow.value(0).data().iter().zip(&theta).zip(&shadow) {
            prop_assert!((s - t).abs() <= decay * (s0 - t).abs() + 1e-12);
        }
    }
}

#[test]
fn random_scores_give_map_near_the_positive_rate() {
    use rand::{Rng, SeedableRng};
    for seed in 0..50u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scores = Matrix::from_fn(200, 4, |_, _| rng.random::<f64>());
        let labels = Matrix::from_fn(200, 4, |_, _| f64::from(u8::from(rng.random_bool(0.5))));
        let map = mean_average_precision(&scores, &labels).unwrap();
        assert!((map - 0.5).abs() <= 0.1, "seed {seed}: {map}");
    }
}

#[test]
fn strong_views_distort_more_than_weak_ones() {
    let ds = generate_synthetic(&GenConfig::default()).unwrap();
    let rows: Vec<usize> = (0..1000).collect();
    let x = ds.features.select_rows(&rows);
    let distortion = |s: Strength| {
        let y = augment(&x, s, 9);
        x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 1000.0
    };
    assert!(distortion(Strength::Strong) > distortion(Strength::Weak));
}
