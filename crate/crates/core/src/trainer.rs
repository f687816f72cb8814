//! Warm-up, pseudo-labeling epochs, and head fine-tuning.
//!
//! Each pseudo-labeling epoch first refreshes, from the EMA model, the
//! correctness-weight table (estimation set), the class thresholds
//! (labeled training set), and the pseudo-labels of the unlabeled pool. It
//! then minimizes supervised + weighted pseudo-label + uncertain-contrastive
//! loss over mini-batches, with one EMA update per optimizer step.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    accumulate_bin_stats, oracle_weight_table, Provenance, WeightTable, Weighting, DEFAULT_BINS,
    DEFAULT_EPSILON,
};
use crate::data::{augment_with, Dataset, SsmllSplits, Strength};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, reliability_report};
use crate::grad::{adamw_step, bind_params, ema_update, AdamWConfig, OptimState, Tape, Var};
use crate::losses::{
    infonce_on_tape, paired_partners, pseudo_loss_on_tape, supervised_on_tape, total_loss, AslConfig,
};
use crate::matrix::Matrix;
use crate::model::{forward_on_tape, ModelConfig, ModelState};
use crate::thresholding::{assign_pseudo_labels, derive_thresholds, ClassThresholds, PseudoLabel, PseudoLabelMatrix};

/// Source of pseudo-label weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    Uniform,
    Confidence,
    Labeled,
    Ours,
    Optimal,
}

impl WeightPolicy {
    pub const ALL: [WeightPolicy; 5] = [
        WeightPolicy::Uniform,
        WeightPolicy::Confidence,
        WeightPolicy::Labeled,
        WeightPolicy::Ours,
        WeightPolicy::Optimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightPolicy::Uniform => "Uniform",
            WeightPolicy::Confidence => "Confidence",
            WeightPolicy::Labeled => "Labeled",
            WeightPolicy::Ours => "Ours",
            WeightPolicy::Optimal => "Optimal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name().eq_ignore_ascii_case(s))
    }
}

/// Which stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Warm-up, pseudo-labeling epochs, head fine-tuning.
    Full,
    /// Supervised training on `D_sup` for the same number of epochs; no
    /// unlabeled data, no fine-tuning.
    SupervisedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub finetune_batch_size: usize,
    pub optimizer: AdamWConfig,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub bins: usize,
    pub epsilon: f64,
    pub temperature: f64,
    pub asl: AslConfig,
    /// Contrastive loss over all samples during warm-up.
    pub warmup_contrastive: bool,
    /// Maximum number of positive pairs per contrastive batch.
    pub contrastive_cap: usize,
    pub policy: WeightPolicy,
    pub variant: Variant,
    /// Track the ground-truth correctness table of `D_u` in every report.
    pub track_oracle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 5,
            epochs: 20,
            finetune_epochs: 20,
            batch_size: 64,
            finetune_batch_size: 32,
            optimizer: AdamWConfig::default(),
            ema_decay: 0.9997,
            ema_warmup: true,
            bins: DEFAULT_BINS,
            epsilon: DEFAULT_EPSILON,
            temperature: 0.5,
            asl: AslConfig::default(),
            warmup_contrastive: true,
            contrastive_cap: 256,
            policy: WeightPolicy::Ours,
            variant: Variant::Full,
            track_oracle: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::config("train.bins", "must be >= 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.finetune_batch_size == 0 {
            return Err(Error::config("train.finetune_batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("train.ema_decay", "must lie in [0, 1)"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("train.temperature", "must be finite and > 0"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::config("train.epsilon", "must be >= 0"));
        }
        if self.contrastive_cap == 0 {
            return Err(Error::config("train.contrastive_cap", "must be >= 1"));
        }
        self.optimizer.validate()?;
        self.asl.validate()
    }

    pub fn new_model(&self, config: ModelConfig) -> Result<ModelState> {
        ModelState::new(config, self.optimizer, self.ema_decay, self.ema_warmup, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_uncer: f64,
    pub l_total: f64,
    pub test_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_pseudo: f64,
    pub l_uncer: f64,
    pub l_total: f64,
    pub positive: usize,
    pub negative: usize,
    pub uncertain: usize,
    pub confident: usize,
    /// Table estimated on `D_est` this epoch.
    pub estimated_table: WeightTable,
    /// Table actually used for weighting, when the policy is table-based.
    pub weight_table: Option<WeightTable>,
    pub oracle_table: Option<WeightTable>,
    pub reliability_gap: Option<f64>,
    pub thresholds: ClassThresholds,
    pub test_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epoch: usize,
    /// Mean ASL over all of `D_est` with the raw parameters after the epoch.
    pub l_ft: f64,
    pub test_map: Option<f64>,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum MetricsLine {
    Warmup(WarmupReport),
    Main(Box<EpochReport>),
    Finetune(FinetuneReport),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: ModelState,
    pub metrics: Vec<MetricsLine>,
    pub final_map: Option<f64>,
}

impl RunOutcome {
    pub fn main_reports(&self) -> impl Iterator<Item = &EpochReport> {
        self.metrics.iter().filter_map(|m| match m {
            MetricsLine::Main(r) => Some(r.as_ref()),
            _ => None,
        })
    }

    pub fn last_main_report(&self) -> Option<&EpochReport> {
        self.main_reports().last()
    }

    /// One JSON object per line.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for line in &self.metrics {
            out.push_str(&serde_json::to_string(line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

const STREAM_WARMUP: u64 = 1 << 20;
const STREAM_MAIN: u64 = 2 << 20;
const STREAM_FINETUNE: u64 = 3 << 20;

fn stage_rng(seed: u64, stage: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage + epoch as u64);
    rng
}

/// Endless reshuffled pass over a fixed index set.
struct Cycler<'a> {
    items: &'a [usize],
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Cycler<'a> {
    fn new(items: &'a [usize]) -> Self {
        Cycler {
            items,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.items.len()) {
            if self.pos >= self.order.len() {
                self.order = self.items.to_vec();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// State derived from the EMA model at the start of an epoch.
#[derive(Debug, Clone)]
pub struct EpochState {
    pub estimated: WeightTable,
    pub oracle: Option<WeightTable>,
    pub thresholds: ClassThresholds,
    /// EMA scores of `D_sup`.
    pub sup_scores: Matrix,
    /// EMA scores of `D_unsup`, rows in `unsup` order.
    pub unsup_scores: Matrix,
    pub pseudo: PseudoLabelMatrix,
}

/// Epoch-level snapshot of what the unlabeled pool is trained against.
struct PseudoTargets {
    pseudo: PseudoLabelMatrix,
    weights: Matrix,
}

/// Drives the stages over one dataset and split.
pub struct Trainer<'a> {
    pub data: &'a Dataset,
    pub test: Option<&'a Dataset>,
    pub splits: &'a SsmllSplits,
    pub cfg: TrainConfig,
    /// Replaces derived thresholds every epoch.
    pub fixed_thresholds: Option<ClassThresholds>,
    /// Replaces the policy's weighting every epoch.
    pub fixed_weighting: Option<Weighting>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, test: Option<&'a Dataset>, splits: &'a SsmllSplits, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        splits.validate(data.len())?;
        Ok(Trainer {
            data,
            test,
            splits,
            cfg,
            fixed_thresholds: None,
            fixed_weighting: None,
        })
    }

    fn steps_per_epoch(&self) -> usize {
        // both variants take the same number of steps per epoch
        let pool = if self.splits.unsup.is_empty() {
            self.splits.sup.len()
        } else {
            self.splits.unsup.len()
        };
        pool.div_ceil(self.cfg.batch_size).max(1)
    }

    pub fn test_map(&self, model: &ModelState) -> Result<Option<f64>> {
        match self.test {
            Some(test) => {
                let scores = model.predict(&test.features, true)?;
                mean_average_precision(&scores, &test.labels).map(Some)
            }
            None => Ok(None),
        }
    }

    /// Supervised warm-up on `D_sup`, optionally with the contrastive term
    /// over weak/strong views of every training sample.
    pub fn warmup(&self, model: &mut ModelState) -> Result<Vec<WarmupReport>> {
        let contrastive = self.cfg.warmup_contrastive && self.cfg.variant == Variant::Full;
        let all: Vec<usize> = self.splits.sup.iter().chain(&self.splits.unsup).copied().collect();
        let sup_labels = self.splits.sup_labels(self.data);
        let sup_local: Vec<usize> = (0..self.splits.sup.len()).collect();
        let mut reports = Vec::with_capacity(self.cfg.warmup_epochs);
        let mut sup_cycle = Cycler::new(&sup_local);
        let mut all_cycle = Cycler::new(&all);
        for epoch in 0..self.cfg.warmup_epochs {
            let mut rng = stage_rng(self.cfg.seed, STREAM_WARMUP, epoch);
            let mut acc = LossAcc::default();
            for _ in 0..self.steps_per_epoch() {
                let sup_batch = sup_cycle.next_batch(self.cfg.batch_size, &mut rng);
                let contrast = contrastive.then(|| all_cycle.next_batch(self.cfg.batch_size, &mut rng));
                let step = StepInput {
                    sup_local: &sup_batch,
                    sup_labels: &sup_labels,
                    unsup_rows: contrast.as_deref(),
                    targets: None,
                };
                acc.add(self.step(model, step, &mut rng)?);
            }
            let l = acc.mean();
            reports.push(WarmupReport {
                epoch,
                l_sup: l.sup,
                l_uncer: l.uncer,
                l_total: l.total,
                test_map: self.test_map(model)?,
            });
        }
        Ok(reports)
    }

    /// The weighting in force for this epoch, given EMA scores of the pools.
    fn weighting(
        &self,
        epoch: usize,
        estimated: &WeightTable,
        sup_scores: &Matrix,
        oracle: Option<&WeightTable>,
    ) -> Result<Weighting> {
        if let Some(w) = &self.fixed_weighting {
            return Ok(w.clone());
        }
        Ok(match self.cfg.policy {
            WeightPolicy::Uniform => Weighting::Uniform,
            WeightPolicy::Confidence => Weighting::Confidence,
            WeightPolicy::Ours => Weighting::Table(estimated.clone()),
            WeightPolicy::Labeled => {
                let labels = self.splits.sup_labels(self.data);
                let stats = accumulate_bin_stats(sup_scores, &labels, self.cfg.bins, self.cfg.epsilon)?;
                Weighting::Table(
                    WeightTable::from_stats(&stats, Provenance::LabeledSet)
                        .map_err(|_| Error::InvalidWeightTable { epoch })?,
                )
            }
            WeightPolicy::Optimal => match oracle {
                Some(t) => Weighting::Table(t.clone()),
                // nothing confident on D_u: no pseudo-label will need a weight
                None => Weighting::Uniform,
            },
        })
    }

    /// Weight table, thresholds, and pseudo-labels from the EMA model, as
    /// computed at the start of a pseudo-labeling epoch. The oracle table of
    /// `D_u` is included when `with_oracle` is set and anything on `D_u` is
    /// confident.
    pub fn refresh(&self, model: &ModelState, epoch: usize, with_oracle: bool) -> Result<EpochState> {
        let cfg = &self.cfg;
        let splits = self.splits;
        let feats = |rows: &[usize]| self.data.features.select_rows(rows);

        // (a) correctness weights from D_est
        let est_scores = model.predict(&feats(&splits.est), true)?;
        let est_labels = splits.est_labels_for_counting(self.data);
        let stats = accumulate_bin_stats(&est_scores, &est_labels, cfg.bins, cfg.epsilon)
            .map_err(|_| Error::InvalidWeightTable { epoch })?;
        let estimated = WeightTable::from_stats(&stats, Provenance::EstimationSet)
            .map_err(|_| Error::InvalidWeightTable { epoch })?;

        // (b) thresholds from D_sup
        let sup_scores = model.predict(&feats(&splits.sup), true)?;
        let thresholds = match &self.fixed_thresholds {
            Some(t) => t.clone(),
            None => derive_thresholds(&sup_scores, &splits.sup_labels(self.data))?,
        };

        // (c) pseudo-labels for D_unsup = D_u then D_est
        let unsup_scores = model.predict(&feats(&splits.unsup), true)?;
        let pseudo = assign_pseudo_labels(&unsup_scores, &thresholds)?;

        let n_u = splits.u.len();
        let oracle = if with_oracle && n_u > 0 {
            let u_rows: Vec<usize> = (0..n_u).collect();
            let u_scores = unsup_scores.select_rows(&u_rows);
            let u_truth = splits.oracle_labels(self.data, &splits.u);
            let u_pseudo = pseudo.select_rows(&u_rows);
            oracle_weight_table(&u_scores, &u_truth, &u_pseudo, cfg.bins).ok()
        } else {
            None
        };
        Ok(EpochState {
            estimated,
            oracle,
            thresholds,
            sup_scores,
            unsup_scores,
            pseudo,
        })
    }

    /// One pseudo-labeling epoch.
    pub fn train_epoch(&self, model: &mut ModelState, epoch: usize) -> Result<EpochReport> {
        let cfg = &self.cfg;
        let splits = self.splits;
        let classes = model.config.num_classes;
        let EpochState {
            estimated,
            oracle,
            thresholds,
            sup_scores,
            unsup_scores,
            pseudo,
        } = self.refresh(model, epoch, cfg.track_oracle || cfg.policy == WeightPolicy::Optimal)?;
        let weighting = self.weighting(epoch, &estimated, &sup_scores, oracle.as_ref())?;
        let weights = weighting.weight_matrix(&unsup_scores, &pseudo)?;
        let targets = PseudoTargets { pseudo, weights };

        // (d) optimization
        let sup_labels = splits.sup_labels(self.data);
        let sup_local: Vec<usize> = (0..splits.sup.len()).collect();
        let local: Vec<usize> = (0..splits.unsup.len()).collect();
        let mut rng = stage_rng(cfg.seed, STREAM_MAIN, epoch);
        let mut unsup_order = local.clone();
        unsup_order.shuffle(&mut rng);
        let mut sup_cycle = Cycler::new(&sup_local);
        let mut acc = LossAcc::default();
        let steps = self.steps_per_epoch();
        for s in 0..steps {
            let sup_batch = sup_cycle.next_batch(cfg.batch_size, &mut rng);
            let unsup_batch: Option<Vec<usize>> = if cfg.variant == Variant::Full && !unsup_order.is_empty() {
                let start = (s * cfg.batch_size) % unsup_order.len();
                let end = (start + cfg.batch_size).min(unsup_order.len());
                Some(unsup_order[start..end].to_vec())
            } else {
                None
            };
            let step = StepInput {
                sup_local: &sup_batch,
                sup_labels: &sup_labels,
                unsup_rows: unsup_batch.as_deref(),
                targets: Some(&targets),
            };
            acc.add(self.step(model, step, &mut rng)?);
        }
        let l = acc.mean();

        let reliability_gap = match &oracle {
            Some(o) => reliability_report(&estimated, o)?.linf_gap,
            None => None,
        };
        let positive = targets.pseudo.count(PseudoLabel::Positive);
        let negative = targets.pseudo.count(PseudoLabel::Negative);
        let uncertain = targets.pseudo.count(PseudoLabel::Uncertain);
        debug_assert_eq!(positive + negative + uncertain, splits.unsup.len() * classes);
        Ok(EpochReport {
            epoch,
            l_sup: l.sup,
            l_pseudo: l.pseudo,
            l_uncer: l.uncer,
            l_total: l.total,
            positive,
            negative,
            uncertain,
            confident: positive + negative,
            weight_table: weighting.table().cloned(),
            estimated_table: estimated,
            oracle_table: oracle,
            reliability_gap,
            thresholds,
            test_map: self.test_map(model)?,
        })
    }

    /// Head-only fine-tuning on `D_est` with mean ASL.
    ///
    /// Starts from the EMA weights, which are what evaluation uses, and
    /// restarts the EMA so the tuned head reaches the evaluated model.
    pub fn finetune_head(&self, model: &mut ModelState) -> Result<Vec<FinetuneReport>> {
        if self.splits.est.is_empty() {
            return Err(Error::Empty("estimation set for fine-tuning".into()));
        }
        if self.cfg.finetune_epochs == 0 {
            return Ok(Vec::new());
        }
        self.splits.open_finetune();
        let labels_all = self.splits.est_labels_for_supervision(self.data);
        let local: Vec<usize> = (0..self.splits.est.len()).collect();
        let features_all = self.data.features.select_rows(&self.splits.est);

        model.params = model.ema.shadow.clone();
        model.set_head_only(true);
        model.optim = OptimState::new(&model.params, self.cfg.optimizer);
        let params = model.params.clone();
        model.ema.reset(&params);

        let mut reports = Vec::with_capacity(self.cfg.finetune_epochs);
        for epoch in 0..self.cfg.finetune_epochs {
            let mut rng = stage_rng(self.cfg.seed, STREAM_FINETUNE, epoch);
            let mut order = local.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.finetune_batch_size) {
                let x = features_all.select_rows(chunk);
                let y = labels_all.select_rows(chunk);
                let mut tape = Tape::new();
                let vars = bind_params(&mut tape, &model.params);
                let fwd = forward_on_tape(&mut tape, &vars, &model.config, &x, false)?;
                let loss = supervised_on_tape(&mut tape, fwd.scores, &y, &self.cfg.asl)?;
                self.apply(model, &tape, &vars, loss)?;
            }
            reports.push(FinetuneReport {
                epoch,
                l_ft: objective(model, &features_all, &labels_all, &self.cfg.asl)?,
                test_map: self.test_map(model)?,
            });
        }
        model.set_head_only(false);
        Ok(reports)
    }

    /// Warm-up, then the main epochs, then fine-tuning (per [`Variant`]).
    pub fn run(&self, mut model: ModelState) -> Result<RunOutcome> {
        let metrics = self.warmup(&mut model)?.into_iter().map(MetricsLine::Warmup).collect();
        self.continue_after_warmup(model, metrics)
    }

    /// Main epochs and fine-tuning for a model that has finished warm-up.
    pub fn continue_after_warmup(&self, mut model: ModelState, mut metrics: Vec<MetricsLine>) -> Result<RunOutcome> {
        for epoch in 0..self.cfg.epochs {
            let report = self.main_epoch(&mut model, epoch)?;
            metrics.push(MetricsLine::Main(Box::new(report)));
        }
        if self.cfg.variant == Variant::Full {
            for r in self.finetune_head(&mut model)? {
                metrics.push(MetricsLine::Finetune(r));
            }
        }
        let final_map = self.test_map(&model)?;
        Ok(RunOutcome {
            model,
            metrics,
            final_map,
        })
    }

    /// One main epoch of the configured [`Variant`].
    pub fn main_epoch(&self, model: &mut ModelState, epoch: usize) -> Result<EpochReport> {
        match self.cfg.variant {
            Variant::Full => self.train_epoch(model, epoch),
            Variant::SupervisedOnly => self.supervised_epoch(model, epoch),
        }
    }

    /// A main epoch of the supervised-only variant: same bookkeeping, every
    /// unlabeled entry left uncertain and unused.
    fn supervised_epoch(&self, model: &mut ModelState, epoch: usize) -> Result<EpochReport> {
        let cfg = &self.cfg;
        let splits = self.splits;
        let sup_labels = splits.sup_labels(self.data);
        let sup_scores = model.predict(&self.data.features.select_rows(&splits.sup), true)?;
        let thresholds = derive_thresholds(&sup_scores, &sup_labels)?;
        let stats = accumulate_bin_stats(&sup_scores, &sup_labels, cfg.bins, cfg.epsilon)?;
        let table = WeightTable::from_stats(&stats, Provenance::LabeledSet)?;

        let sup_local: Vec<usize> = (0..splits.sup.len()).collect();
        let mut rng = stage_rng(cfg.seed, STREAM_MAIN, epoch);
        let mut sup_cycle = Cycler::new(&sup_local);
        let mut acc = LossAcc::default();
        for _ in 0..self.steps_per_epoch() {
            let sup_batch = sup_cycle.next_batch(cfg.batch_size, &mut rng);
            let step = StepInput {
                sup_local: &sup_batch,
                sup_labels: &sup_labels,
                unsup_rows: None,
                targets: None,
            };
            acc.add(self.step(model, step, &mut rng)?);
        }
        let l = acc.mean();
        Ok(EpochReport {
            epoch,
            l_sup: l.sup,
            l_pseudo: 0.0,
            l_uncer: 0.0,
            l_total: l.total,
            positive: 0,
            negative: 0,
            uncertain: splits.unsup.len() * model.config.num_classes,
            confident: 0,
            estimated_table: table,
            weight_table: None,
            oracle_table: None,
            reliability_gap: None,
            thresholds,
            test_map: self.test_map(model)?,
        })
    }

    fn apply(&self, model: &mut ModelState, tape: &Tape, vars: &[Var], loss: Var) -> Result<()> {
        let grads = tape.backward(loss)?;
        let grads: Vec<Matrix> = vars
            .iter()
            .zip(model.params.iter())
            .map(|(v, p)| grads.get_or_zeros(*v, &p.value))
            .collect();
        adamw_step(&mut model.params, &grads, &mut model.optim)?;
        let params = &model.params;
        ema_update(&mut model.ema, params)?;
        if !model.params.is_finite() {
            return Err(Error::NonFinite("parameters after optimizer step".into()));
        }
        Ok(())
    }

    /// One optimizer step. `unsup_rows` index the dataset during warm-up
    /// (contrastive only) and `D_unsup` positions when `targets` is set.
    fn step(&self, model: &mut ModelState, input: StepInput<'_>, rng: &mut ChaCha8Rng) -> Result<StepLosses> {
        let cfg = &self.cfg;
        let classes = model.config.num_classes;
        let weak = Strength::Weak.params();
        let strong = Strength::Strong.params();

        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &model.params);

        let sup_rows: Vec<usize> = input.sup_local.iter().map(|&i| self.splits.sup[i]).collect();
        let sup_x = augment_with(&self.data.features.select_rows(&sup_rows), weak, rng);
        let sup_y = input.sup_labels.select_rows(input.sup_local);
        let sup_fwd = forward_on_tape(&mut tape, &vars, &model.config, &sup_x, false)?;
        let l_sup = supervised_on_tape(&mut tape, sup_fwd.scores, &sup_y, &cfg.asl)?;

        let mut losses = StepLosses {
            sup: tape.value(l_sup).item(),
            ..Default::default()
        };
        let mut total = l_sup;

        if let Some(rows) = input.unsup_rows.filter(|r| !r.is_empty()) {
            let b = rows.len();
            let data_rows: Vec<usize> = match input.targets {
                Some(_) => rows.iter().map(|&i| self.splits.unsup[i]).collect(),
                None => rows.to_vec(),
            };
            let x = self.data.features.select_rows(&data_rows);
            let xw = augment_with(&x, weak, rng);
            let xs = augment_with(&x, strong, rng);
            let stacked = Matrix::vstack(&[&xw, &xs])?;
            let fwd = forward_on_tape(&mut tape, &vars, &model.config, &stacked, true)?;
            let emb = fwd.embeddings.expect("requested");

            // (sample, class) pairs that feed the contrastive term
            let candidates: Vec<(usize, usize)> = match input.targets {
                Some(t) => {
                    let strong_scores = tape.gather_rows(fwd.scores, (b..2 * b).collect())?;
                    let pseudo = t.pseudo.select_rows(rows);
                    let w = t.weights.select_rows(rows);
                    if let Some(lp) = pseudo_loss_on_tape(&mut tape, strong_scores, &pseudo, &w, &cfg.asl)? {
                        losses.pseudo = tape.value(lp).item();
                        total = tape.add(total, lp)?;
                    }
                    (0..b)
                        .flat_map(|i| (0..classes).map(move |c| (i, c)))
                        .filter(|&(i, c)| pseudo.get(i, c) == PseudoLabel::Uncertain)
                        .collect()
                }
                None => (0..b).flat_map(|i| (0..classes).map(move |c| (i, c))).collect(),
            };
            let chosen: Vec<(usize, usize)> = if candidates.len() > cfg.contrastive_cap {
                let mut picked = index::sample(rng, candidates.len(), cfg.contrastive_cap).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|k| candidates[k]).collect()
            } else {
                candidates
            };
            if !chosen.is_empty() {
                let mut idx: Vec<usize> = chosen.iter().map(|&(i, c)| i * classes + c).collect();
                idx.extend(chosen.iter().map(|&(i, c)| (b + i) * classes + c));
                let z = tape.gather_rows(emb, idx)?;
                let lu = infonce_on_tape(&mut tape, z, &paired_partners(chosen.len()), cfg.temperature)?;
                losses.uncer = tape.value(lu).item();
                total = tape.add(total, lu)?;
            }
        }
        losses.total = total_loss(losses.sup, losses.pseudo, losses.uncer)?;
        self.apply(model, &tape, &vars, total)?;
        Ok(losses)
    }
}

/// Mean ASL of the raw parameters over a whole labeled set.
fn objective(model: &ModelState, features: &Matrix, labels: &Matrix, asl: &AslConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &model.params);
    let fwd = forward_on_tape(&mut tape, &vars, &model.config, features, false)?;
    let loss = supervised_on_tape(&mut tape, fwd.scores, labels, asl)?;
    Ok(tape.value(loss).item())
}

struct StepInput<'a> {
    /// Positions within `D_sup`.
    sup_local: &'a [usize],
    sup_labels: &'a Matrix,
    unsup_rows: Option<&'a [usize]>,
    targets: Option<&'a PseudoTargets>,
}

#[derive(Debug, Default, Clone, Copy)]
struct StepLosses {
    sup: f64,
    pseudo: f64,
    uncer: f64,
    total: f64,
}

#[derive(Default)]
struct LossAcc {
    sum: StepLosses,
    n: usize,
}

impl LossAcc {
    fn add(&mut self, l: StepLosses) {
        self.sum.sup += l.sup;
        self.sum.pseudo += l.pseudo;
        self.sum.uncer += l.uncer;
        self.sum.total += l.total;
        self.n += 1;
    }

    fn mean(&self) -> StepLosses {
        let n = self.n.max(1) as f64;
        StepLosses {
            sup: self.sum.sup / n,
            pseudo: self.sum.pseudo / n,
            uncer: self.sum.uncer / n,
            total: self.sum.total / n,
        }
    }
}
