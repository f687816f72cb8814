//! Synthetic multi-label data, labeled/estimation/unlabeled splits, view
//! augmentation, and dataset files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::sigmoid;
use crate::matrix::Matrix;

const STREAM_TASK: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    /// Class biases are drawn uniformly from `[lo, hi]`.
    pub bias_range: [f64; 2],
    /// Norm scale of the class loading vectors.
    pub label_scale: f64,
    pub noise_std: f64,
    /// Size of the held-out test set drawn from the same task.
    pub n_test: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 20_000,
            input_dim: 64,
            num_classes: 10,
            latent_dim: 16,
            bias_range: [-3.0, -0.5],
            label_scale: 3.0,
            noise_std: 1.0,
            n_test: 5_000,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("data.n", self.n),
            ("data.input_dim", self.input_dim),
            ("data.num_classes", self.num_classes),
            ("data.latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        let [lo, hi] = self.bias_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config("data.bias_range", "need finite lo <= hi"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("data.noise_std", "must be finite and >= 0"));
        }
        if !(self.label_scale >= 0.0 && self.label_scale.is_finite()) {
            return Err(Error::config("data.label_scale", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Features and binary labels, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Matrix,
    pub seed: u64,
    pub config: Option<GenConfig>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Matrix, seed: u64) -> Result<Self> {
        if features.rows() != labels.rows() {
            return Err(Error::shape("Dataset::new", features.rows(), labels.rows()));
        }
        if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Format {
                what: "labels".into(),
                reason: "values must be 0 or 1".into(),
            });
        }
        Ok(Dataset {
            features,
            labels,
            seed,
            config: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.cols()
    }

    pub fn positive_rates(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        (0..self.num_classes())
            .map(|c| (0..self.len()).map(|i| self.labels.get(i, c)).sum::<f64>() / n)
            .collect()
    }

    fn header(&self) -> String {
        format!(
            "N={},d={},C={},seed={}",
            self.len(),
            self.input_dim(),
            self.num_classes(),
            self.seed
        )
    }

    /// Writes `features.csv`, `labels.csv`, and (when known) `generator.json`
    /// into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("features.csv"), &self.header(), &self.features, false)?;
        write_csv(&dir.join("labels.csv"), &self.header(), &self.labels, true)?;
        if let Some(cfg) = &self.config {
            let path = dir.join("generator.json");
            let text = serde_json::to_string_pretty(cfg)?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (fh, features) = read_csv(&dir.join("features.csv"))?;
        let (lh, labels) = read_csv(&dir.join("labels.csv"))?;
        if fh != lh {
            return Err(Error::Format {
                what: "dataset".into(),
                reason: format!("header mismatch: `{fh}` vs `{lh}`"),
            });
        }
        let header = parse_header(&fh)?;
        if header.n != features.rows() || header.d != features.cols() || header.c != labels.cols() {
            return Err(Error::Format {
                what: "dataset".into(),
                reason: format!(
                    "header `{fh}` disagrees with contents ({}x{} features, {} label columns)",
                    features.rows(),
                    features.cols(),
                    labels.cols()
                ),
            });
        }
        let mut ds = Dataset::new(features, labels, header.seed)?;
        let gen_path = dir.join("generator.json");
        if gen_path.exists() {
            let text = std::fs::read_to_string(&gen_path).map_err(|e| Error::io(&gen_path, e))?;
            ds.config = Some(serde_json::from_str(&text)?);
        }
        Ok(ds)
    }
}

struct Header {
    n: usize,
    d: usize,
    c: usize,
    seed: u64,
}

fn parse_header(line: &str) -> Result<Header> {
    let bad = |reason: &str| Error::Format {
        what: "dataset header".into(),
        reason: format!("{reason}: `{line}`"),
    };
    let mut fields = [None; 4];
    for part in line.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        let v: u64 = v.trim().parse().map_err(|_| bad("non-integer value"))?;
        let slot = match k.trim() {
            "N" => 0,
            "d" => 1,
            "C" => 2,
            "seed" => 3,
            _ => return Err(bad("unknown key")),
        };
        fields[slot] = Some(v);
    }
    match fields {
        [Some(n), Some(d), Some(c), Some(seed)] => Ok(Header {
            n: n as usize,
            d: d as usize,
            c: c as usize,
            seed,
        }),
        _ => Err(bad("missing key")),
    }
}

fn write_csv(path: &Path, header: &str, m: &Matrix, integral: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for r in 0..m.rows() {
        let mut line = String::new();
        for (j, v) in m.row(r).iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            if integral {
                line.push_str(if *v > 0.5 { "1" } else { "0" });
            } else {
                // `{}` prints the shortest string that parses back to the same f64
                line.push_str(&v.to_string());
            }
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_csv(path: &Path) -> Result<(String, Matrix)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format {
            what: path.display().to_string(),
            reason: "empty file".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (ln, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                what: path.display().to_string(),
                reason: format!("line {}: cannot parse `{field}`", ln + 2),
            })?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(Error::Format {
                    what: path.display().to_string(),
                    reason: format!("line {}: {width} fields, expected {c}", ln + 2),
                })
            }
            _ => {}
        }
        rows += 1;
    }
    Ok((header, Matrix::from_vec(rows, cols.unwrap_or(0), data)?))
}

/// Generative parameters shared by the training pool and the test set.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    config: GenConfig,
    mixing: Matrix,
    loadings: Matrix,
    biases: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(config: &GenConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_TASK);
        let l = config.latent_dim;
        let mix_scale = 1.0 / (l as f64).sqrt();
        let mixing = Matrix::from_fn(l, config.input_dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * mix_scale
        });
        let load_scale = config.label_scale / (l as f64).sqrt();
        let loadings = Matrix::from_fn(l, config.num_classes, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * load_scale
        });
        let [lo, hi] = config.bias_range;
        let biases = (0..config.num_classes)
            .map(|_| if lo == hi { lo } else { rng.random_range(lo..hi) })
            .collect();
        Ok(SyntheticTask {
            config: config.clone(),
            mixing,
            loadings,
            biases,
        })
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// Draws `n` samples: `h ~ N(0, I)`, `y_c = [sigmoid(a_c·h + b_c) > u]`
    /// with `u ~ U(0, 1)`, and `x = W h + σ ε`.
    pub fn sample(&self, n: usize, stream: u64) -> Result<Dataset> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let latent = Matrix::from_fn(n, cfg.latent_dim, |_, _| rng.sample(StandardNormal));
        let mut features = latent.matmul(&self.mixing)?;
        let logits = latent.matmul(&self.loadings)?;
        let mut labels = Matrix::zeros(n, cfg.num_classes);
        for i in 0..n {
            for c in 0..cfg.num_classes {
                let p = sigmoid(logits.get(i, c) + self.biases[c]);
                let u: f64 = rng.random();
                labels.set(i, c, if p > u { 1.0 } else { 0.0 });
            }
        }
        if cfg.noise_std > 0.0 {
            for v in features.data_mut() {
                *v += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut ds = Dataset::new(features, labels, cfg.seed)?;
        ds.config = Some(cfg.clone());
        Ok(ds)
    }
}

/// The `n`-sample training pool described by `cfg`.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<Dataset> {
    SyntheticTask::new(cfg)?.sample(cfg.n, STREAM_TRAIN)
}

/// A held-out `n_test`-sample set from the same task as [`generate_synthetic`].
pub fn generate_test_set(cfg: &GenConfig) -> Result<Dataset> {
    SyntheticTask::new(cfg)?.sample(cfg.n_test, STREAM_TEST)
}

/// Counts label reads by purpose so tests can prove the estimation-set
/// labels never supervise training before fine-tuning.
#[derive(Debug, Default)]
pub struct LabelAudit {
    est_counting: AtomicUsize,
    est_supervision: AtomicUsize,
    early_supervision: AtomicUsize,
    oracle: AtomicUsize,
    finetune_open: AtomicBool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AuditSnapshot {
    pub est_counting_reads: usize,
    pub est_supervision_reads: usize,
    /// Supervision reads of estimation labels before fine-tuning began.
    pub violations: usize,
    pub oracle_reads: usize,
}

impl LabelAudit {
    pub fn snapshot(&self) -> AuditSnapshot {
        AuditSnapshot {
            est_counting_reads: self.est_counting.load(Ordering::SeqCst),
            est_supervision_reads: self.est_supervision.load(Ordering::SeqCst),
            violations: self.early_supervision.load(Ordering::SeqCst),
            oracle_reads: self.oracle.load(Ordering::SeqCst),
        }
    }
}

/// Index sets of the semi-supervised split. `unsup` is `u` followed by `est`.
#[derive(Debug, Clone)]
pub struct SsmllSplits {
    pub sup: Vec<usize>,
    pub est: Vec<usize>,
    pub u: Vec<usize>,
    pub unsup: Vec<usize>,
    pub rho: f64,
    pub est_fraction: f64,
    pub seed: u64,
    audit: Arc<LabelAudit>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitsFile {
    sup: Vec<usize>,
    est: Vec<usize>,
    u: Vec<usize>,
    unsup: Vec<usize>,
    rho: f64,
    est_fraction: f64,
    seed: u64,
}

impl SsmllSplits {
    fn from_parts(sup: Vec<usize>, est: Vec<usize>, u: Vec<usize>, rho: f64, est_fraction: f64, seed: u64) -> Self {
        let unsup = u.iter().chain(&est).copied().collect();
        SsmllSplits {
            sup,
            est,
            u,
            unsup,
            rho,
            est_fraction,
            seed,
            audit: Arc::new(LabelAudit::default()),
        }
    }

    pub fn labeled_len(&self) -> usize {
        self.sup.len() + self.est.len()
    }

    pub fn total_len(&self) -> usize {
        self.labeled_len() + self.u.len()
    }

    pub fn audit(&self) -> AuditSnapshot {
        self.audit.snapshot()
    }

    /// Labels of `D_sup`.
    pub fn sup_labels(&self, ds: &Dataset) -> Matrix {
        ds.labels.select_rows(&self.sup)
    }

    /// `D_est` labels for counting correctness statistics (no gradients).
    pub fn est_labels_for_counting(&self, ds: &Dataset) -> Matrix {
        self.audit.est_counting.fetch_add(1, Ordering::SeqCst);
        ds.labels.select_rows(&self.est)
    }

    /// Marks the start of head fine-tuning; estimation labels may supervise
    /// from here on.
    pub fn open_finetune(&self) {
        self.audit.finetune_open.store(true, Ordering::SeqCst);
    }

    /// `D_est` labels as gradient targets. Reads before [`open_finetune`]
    /// are recorded as violations.
    ///
    /// [`open_finetune`]: SsmllSplits::open_finetune
    pub fn est_labels_for_supervision(&self, ds: &Dataset) -> Matrix {
        self.audit.est_supervision.fetch_add(1, Ordering::SeqCst);
        if !self.audit.finetune_open.load(Ordering::SeqCst) {
            self.audit.early_supervision.fetch_add(1, Ordering::SeqCst);
        }
        ds.labels.select_rows(&self.est)
    }

    /// Ground truth of arbitrary rows, for oracle and evaluation paths only.
    pub fn oracle_labels(&self, ds: &Dataset, rows: &[usize]) -> Matrix {
        self.audit.oracle.fetch_add(1, Ordering::SeqCst);
        ds.labels.select_rows(rows)
    }

    /// Checks the partition and the `unsup = u ∪ est` identity.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![0u8; n];
        for &i in self.sup.iter().chain(&self.est).chain(&self.u) {
            if i >= n {
                return Err(Error::Format {
                    what: "splits".into(),
                    reason: format!("index {i} out of range for {n} samples"),
                });
            }
            seen[i] += 1;
        }
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(Error::Format {
                what: "splits".into(),
                reason: format!("index {i} appears {} times", seen[i]),
            });
        }
        let expected: Vec<usize> = self.u.iter().chain(&self.est).copied().collect();
        if self.unsup != expected {
            return Err(Error::Format {
                what: "splits".into(),
                reason: "unsup must be u followed by est".into(),
            });
        }
        if self.sup.is_empty() || self.est.is_empty() {
            return Err(Error::Empty("labeled training or estimation split".into()));
        }
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = SplitsFile {
            sup: self.sup.clone(),
            est: self.est.clone(),
            u: self.u.clone(),
            unsup: self.unsup.clone(),
            rho: self.rho,
            est_fraction: self.est_fraction,
            seed: self.seed,
        };
        std::fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>, n: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: SplitsFile = serde_json::from_str(&text)?;
        let mut s = SsmllSplits::from_parts(f.sup, f.est, f.u, f.rho, f.est_fraction, f.seed);
        s.unsup = f.unsup;
        s.validate(n)?;
        Ok(s)
    }
}

/// Splits `ds` into `D_sup`, `D_est`, and `D_u`.
///
/// `ceil(rho * N)` samples are labeled; `round(est_fraction * labeled)` of
/// them form `D_est`.
pub fn split_ssmll(ds: &Dataset, rho: f64, est_fraction: f64, seed: u64) -> Result<SsmllSplits> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::config("split.rho", format!("must lie in (0, 1), got {rho}")));
    }
    if !(est_fraction > 0.0 && est_fraction < 1.0) {
        return Err(Error::config(
            "split.est_fraction",
            format!("must lie in (0, 1), got {est_fraction}"),
        ));
    }
    let n = ds.len();
    // tolerance absorbs representation error such as 0.05 * 1000 = 50.000000000000004
    let labeled = ((rho * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let est = (est_fraction * labeled as f64).round() as usize;
    let sup = labeled.saturating_sub(est);
    if sup == 0 || est == 0 {
        return Err(Error::Empty(format!(
            "split of {n} samples at rho={rho}, est_fraction={est_fraction} leaves D_sup={sup}, D_est={est}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sup_idx = order[..sup].to_vec();
    let est_idx = order[sup..labeled].to_vec();
    let u_idx = order[labeled..].to_vec();
    Ok(SsmllSplits::from_parts(sup_idx, est_idx, u_idx, rho, est_fraction, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Weak,
    Strong,
}

/// Additive gaussian noise followed by coordinate dropout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub noise_std: f64,
    pub dropout: f64,
}

impl Strength {
    pub fn params(self) -> AugmentParams {
        match self {
            Strength::Weak => AugmentParams {
                noise_std: 0.05,
                dropout: 0.0,
            },
            Strength::Strong => AugmentParams {
                noise_std: 0.2,
                dropout: 0.2,
            },
        }
    }
}

pub fn augment_with(features: &Matrix, params: AugmentParams, rng: &mut impl Rng) -> Matrix {
    let mut out = features.clone();
    for v in out.data_mut() {
        if params.noise_std > 0.0 {
            *v += params.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        if params.dropout > 0.0 && rng.random::<f64>() < params.dropout {
            *v = 0.0;
        }
    }
    out
}

pub fn augment(features: &Matrix, strength: Strength, seed: u64) -> Matrix {
    augment_with(features, strength.params(), &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GenConfig {
        GenConfig {
            n: 300,
            input_dim: 8,
            num_classes: 4,
            latent_dim: 3,
            n_test: 50,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&tiny()).unwrap();
        let b = generate_synthetic(&tiny()).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic(&GenConfig { seed: 2, ..tiny() }).unwrap();
        assert_ne!(a.features, other.features);
        let test = generate_test_set(&tiny()).unwrap();
        assert_eq!(test.len(), 50);
        assert_ne!(test.features.row(0), a.features.row(0));
    }

    #[test]
    fn very_negative_bias_silences_a_class() {
        let cfg = GenConfig {
            bias_range: [-60.0, -60.0],
            ..tiny()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert!(ds.positive_rates().iter().all(|&r| r < 0.01));
    }

    #[test]
    fn split_arithmetic_and_partition() {
        let ds = generate_synthetic(&GenConfig { n: 1000, ..tiny() }).unwrap();
        let s = split_ssmll(&ds, 0.05, 0.2, 3).unwrap();
        assert_eq!((s.sup.len(), s.est.len(), s.u.len(), s.unsup.len()), (40, 10, 950, 960));
        s.validate(1000).unwrap();
        for i in 0..1000 {
            let in_unsup = s.unsup.contains(&i);
            assert_eq!(in_unsup, s.u.contains(&i) || s.est.contains(&i));
        }
        let again = split_ssmll(&ds, 0.05, 0.2, 3).unwrap();
        assert_eq!((s.sup, s.est, s.u), (again.sup, again.est, again.u));
    }

    #[test]
    fn degenerate_splits_are_rejected() {
        let ds = generate_synthetic(&GenConfig { n: 10, ..tiny() }).unwrap();
        assert!(split_ssmll(&ds, 0.1, 0.2, 0).is_err());
        assert!(split_ssmll(&ds, 1.5, 0.2, 0).is_err());
        assert!(split_ssmll(&ds, 0.5, 0.0, 0).is_err());
    }

    #[test]
    fn audit_distinguishes_counting_from_supervision() {
        let ds = generate_synthetic(&tiny()).unwrap();
        let s = split_ssmll(&ds, 0.2, 0.2, 1).unwrap();
        s.est_labels_for_counting(&ds);
        assert_eq!(s.audit().violations, 0);
        s.est_labels_for_supervision(&ds);
        assert_eq!(s.audit().violations, 1);
        s.open_finetune();
        s.est_labels_for_supervision(&ds);
        let a = s.audit();
        assert_eq!((a.violations, a.est_supervision_reads, a.est_counting_reads), (1, 2, 1));
    }

    #[test]
    fn augmentation_identity_and_determinism() {
        let x = Matrix::from_fn(4, 3, |i, j| (i + j) as f64);
        let none = AugmentParams {
            noise_std: 0.0,
            dropout: 0.0,
        };
        assert_eq!(augment_with(&x, none, &mut ChaCha8Rng::seed_from_u64(1)), x);
        assert_eq!(augment(&x, Strength::Strong, 9), augment(&x, Strength::Strong, 9));
        assert_ne!(augment(&x, Strength::Weak, 9), x);
    }

    #[test]
    fn dataset_files_round_trip() {
        let ds = generate_synthetic(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::read_dir(dir.path()).unwrap();
        assert_eq!(back, ds);
        let first = std::fs::read_to_string(dir.path().join("features.csv")).unwrap();
        assert!(first.starts_with("N=300,d=8,C=4,seed=1\n"));
    }

    #[test]
    fn splits_file_round_trip() {
        let ds = generate_synthetic(&tiny()).unwrap();
        let s = split_ssmll(&ds, 0.1, 0.2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("splits.json");
        s.write_json(&path).unwrap();
        let back = SsmllSplits::read_json(&path, ds.len()).unwrap();
        assert_eq!((back.sup, back.est, back.u, back.unsup), (s.sup, s.est, s.u, s.unsup));
        assert!(SsmllSplits::read_json(&path, 10).is_err());
    }
}
