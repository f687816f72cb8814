use dicap::calibration::{Provenance, WeightTable, Weighting};
use dicap::data::{generate_synthetic, generate_test_set, split_ssmll, Dataset, GenConfig, SsmllSplits};
use dicap::grad::{bind_params, ParamTag, Tape};
use dicap::losses::supervised_on_tape;
use dicap::model::{forward_on_tape, ModelConfig, ModelState};
use dicap::thresholding::ClassThresholds;
use dicap::trainer::{MetricsLine, TrainConfig, Trainer, Variant, WeightPolicy};

struct Fixture {
    train: Dataset,
    test: Dataset,
    splits: SsmllSplits,
    model: ModelConfig,
}

fn small() -> Fixture {
    let gen = GenConfig {
        n: 400,
        input_dim: 8,
        num_classes: 3,
        latent_dim: 4,
        n_test: 200,
        seed: 5,
        ..GenConfig::default()
    };
    let train = generate_synthetic(&gen).unwrap();
    let test = generate_test_set(&gen).unwrap();
    let splits = split_ssmll(&train, 0.2, 0.25, 5).unwrap();
    let model = ModelConfig {
        input_dim: 8,
        hidden_dim: 12,
        num_classes: 3,
        embedding_dim: 4,
        hidden_layers: 1,
    };
    Fixture { train, test, splits, model }
}

fn reference() -> Fixture {
    let gen = GenConfig::default();
    let train = generate_synthetic(&gen).unwrap();
    let test = generate_test_set(&gen).unwrap();
    let splits = split_ssmll(&train, 0.05, 0.2, 1).unwrap();
    Fixture { train, test, splits, model: ModelConfig::default() }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        warmup_epochs: 1,
        epochs: 2,
        finetune_epochs: 2,
        batch_size: 32,
        contrastive_cap: 32,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn sup_objective(f: &Fixture, model: &ModelState, cfg: &TrainConfig) -> f64 {
    let x = f.train.features.select_rows(&f.splits.sup);
    let y = f.splits.sup_labels(&f.train);
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &model.params);
    let fwd = forward_on_tape(&mut tape, &vars, &model.config, &x, false).unwrap();
    let loss = supervised_on_tape(&mut tape, fwd.scores, &y, &cfg.asl).unwrap();
    tape.value(loss).item()
}

#[test]
fn zero_warmup_epochs_leave_the_model_untouched() {
    let f = small();
    let cfg = TrainConfig { warmup_epochs: 0, ..small_cfg() };
    let trainer = Trainer::new(&f.train, None, &f.splits, cfg.clone()).unwrap();
    let mut model = cfg.new_model(f.model).unwrap();
    let before = model.clone();
    assert!(trainer.warmup(&mut model).unwrap().is_empty());
    assert_eq!(model, before);
}

#[test]
fn warmup_without_contrastive_is_supervised_only() {
    let f = small();
    let cfg = TrainConfig { warmup_epochs: 2, warmup_contrastive: false, ..small_cfg() };
    let trainer = Trainer::new(&f.train, None, &f.splits, cfg.clone()).unwrap();
    let mut model = cfg.new_model(f.model).unwrap();
    for r in trainer.warmup(&mut model).unwrap() {
        assert_eq!(r.l_uncer, 0.0);
        assert_eq!(r.l_total, r.l_sup);
    }
}

#[test]
fn warmup_lowers_supervised_loss_on_the_reference_benchmark() {
    let f = reference();
    let cfg = TrainConfig::default();
    let trainer = Trainer::new(&f.train, None, &f.splits, cfg.clone()).unwrap();
    let mut model = cfg.new_model(f.model).unwrap();
    let before = sup_objective(&f, &model, &cfg);
    trainer.warmup(&mut model).unwrap();
    let after = sup_objective(&f, &model, &cfg);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn epoch_counts_cover_every_unlabeled_entry() {
    let f = small();
    let cfg = small_cfg();
    let trainer = Trainer::new(&f.train, Some(&f.test), &f.splits, cfg.clone()).unwrap();
    let out = trainer.run(cfg.new_model(f.model).unwrap()).unwrap();
    let reports: Vec<_> = out.main_reports().collect();
    assert_eq!(reports.len(), 2);
    for r in reports {
        assert_eq!(r.positive + r.negative + r.uncertain, f.splits.unsup.len() * 3);
        assert_eq!(r.confident, r.positive + r.negative);
        assert!(r.test_map.is_some());
        assert!((r.l_total - (r.l_sup + r.l_pseudo + r.l_uncer)).abs() < 1e-9);
    }
}

#[test]
fn sentinel_thresholds_leave_everything_uncertain() {
    let f = small();
    let cfg = small_cfg();
    let mut trainer = Trainer::new(&f.train, None, &f.splits, cfg.clone()).unwrap();
    trainer.fixed_thresholds = Some(ClassThresholds::sentinel(3));
    let mut model = cfg.new_model(f.model).unwrap();
    let r = trainer.train_epoch(&mut model, 0).unwrap();
    assert_eq!(r.confident, 0);
    assert_eq!(r.uncertain, f.splits.unsup.len() * 3);
    assert_eq!(r.l_pseudo, 0.0);
}

#[test]
fn uniform_policy_equals_a_table_of_ones() {
    let f = small();
    let uniform_cfg = TrainConfig { policy: WeightPolicy::Uniform, ..small_cfg() };
    let uniform = Trainer::new(&f.train, Some(&f.test), &f.splits, uniform_cfg.clone()).unwrap();
    let a = uniform.run(uniform_cfg.new_model(f.model).unwrap()).unwrap();

    let table_cfg = TrainConfig { policy: WeightPolicy::Ours, ..small_cfg() };
    let mut forced = Trainer::new(&f.train, Some(&f.test), &f.splits, table_cfg.clone()).unwrap();
    let ones = WeightTable::from_proportions(vec![1.0; 20], vec![1.0; 20], Provenance::Oracle).unwrap();
    forced.fixed_weighting = Some(Weighting::Table(ones));
    let b = forced.run(table_cfg.new_model(f.model).unwrap()).unwrap();

    assert_eq!(a.model, b.model);
    assert_eq!(a.final_map, b.final_map);
    for (x, y) in a.main_reports().zip(b.main_reports()) {
        assert_eq!((x.l_total, x.l_pseudo, x.confident), (y.l_total, y.l_pseudo, y.confident));
    }
}

#[test]
fn optimal_policy_uses_the_oracle_table() {
    let f = small();
    let cfg = TrainConfig { policy: WeightPolicy::Optimal, epochs: 1, ..small_cfg() };
    let trainer = Trainer::new(&f.train, None, &f.splits, cfg.clone()).unwrap();
    let mut model = cfg.new_model(f.model).unwrap();
    trainer.warmup(&mut model).unwrap();
    let r = trainer.train_epoch(&mut model, 0).unwrap();
    assert_eq!(r.weight_table, r.oracle_table);
    assert!(r.weight_table.is_some());
}

#[test]
fn estimation_labels_supervise_only_during_finetuning() {
    let f = small();
    let cfg = small_cfg();
    let trainer = Trainer::new(&f.train, None, &f.splits, cfg.clone()).unwrap();
    let mut model = cfg.new_model(f.model).unwrap();
    trainer.warmup(&mut model).unwrap();
    trainer.train_epoch(&mut model, 0).unwrap();
    let mid = f.splits.audit();
    assert_eq!(mid.est_supervision_reads, 0);
    assert!(mid.est_counting_reads > 0);
    trainer.finetune_head(&mut model).unwrap();
    let end = f.splits.audit();
    assert!(end.est_supervision_reads > 0);
    assert_eq!(end.violations, 0);
}

#[test]
fn zero_finetune_epochs_change_nothing() {
    let f = small();
    let cfg = TrainConfig { finetune_epochs: 0, ..small_cfg() };
    let trainer = Trainer::new(&f.train, None, &f.splits, cfg.clone()).unwrap();
    let mut model = cfg.new_model(f.model).unwrap();
    trainer.warmup(&mut model).unwrap();
    let before = model.clone();
    assert!(trainer.finetune_head(&mut model).unwrap().is_empty());
    assert_eq!(model, before);
}

#[test]
fn finetuning_freezes_the_backbone_and_lowers_its_loss() {
    let f = reference();
    let cfg = TrainConfig { warmup_epochs: 1, epochs: 1, ..TrainConfig::default() };
    let trainer = Trainer::new(&f.train, None, &f.splits, cfg.clone()).unwrap();
    let mut model = cfg.new_model(f.model).unwrap();
    trainer.warmup(&mut model).unwrap();
    trainer.train_epoch(&mut model, 0).unwrap();
    // fine-tuning starts from the EMA weights
    let start = model.ema.shadow.clone();
    let reports = trainer.finetune_head(&mut model).unwrap();
    assert_eq!(reports.len(), 20);
    for (p, q) in model.params.iter().zip(start.iter()) {
        match p.tag {
            ParamTag::Backbone => assert_eq!(p.value, q.value, "{} moved", p.name),
            ParamTag::Head => assert_ne!(p.value, q.value, "{} frozen", p.name),
        }
    }
    for pair in reports.windows(2) {
        assert!(pair[1].l_ft < pair[0].l_ft, "{} -> {}", pair[0].l_ft, pair[1].l_ft);
    }
    assert!(model.params.iter().all(|p| p.trainable));
}

#[test]
fn empty_estimation_set_is_rejected() {
    let f = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("splits.json");
    let mut value: serde_json::Value = {
        f.splits.write_json(&path).unwrap();
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
    };
    let est = value["est"].take();
    let mut u: Vec<serde_json::Value> = value["u"].as_array().unwrap().clone();
    u.extend(est.as_array().unwrap().iter().cloned());
    value["est"] = serde_json::json!([]);
    value["u"] = serde_json::Value::Array(u.clone());
    value["unsup"] = serde_json::Value::Array(u);
    std::fs::write(&path, value.to_string()).unwrap();
    assert!(SsmllSplits::read_json(&path, f.train.len()).is_err());
}

#[test]
fn supervised_only_variant_ignores_unlabeled_data() {
    let f = small();
    let cfg = TrainConfig { variant: Variant::SupervisedOnly, ..small_cfg() };
    let trainer = Trainer::new(&f.train, Some(&f.test), &f.splits, cfg.clone()).unwrap();
    let out = trainer.run(cfg.new_model(f.model).unwrap()).unwrap();
    assert!(out.metrics.iter().all(|m| !matches!(m, MetricsLine::Finetune(_))));
    for r in out.main_reports() {
        assert_eq!((r.l_pseudo, r.l_uncer, r.confident), (0.0, 0.0, 0));
    }
    assert_eq!(f.splits.audit().est_counting_reads, 0);
}

#[test]
fn runs_are_deterministic() {
    let f = small();
    let cfg = small_cfg();
    let run = || {
        let splits = split_ssmll(&f.train, 0.2, 0.25, 5).unwrap();
        let trainer = Trainer::new(&f.train, Some(&f.test), &splits, cfg.clone()).unwrap();
        trainer.run(cfg.new_model(f.model).unwrap()).unwrap().metrics_jsonl().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn confident_counts_grow_on_the_reference_run() {
    let f = reference();
    let cfg = TrainConfig { epochs: 10, track_oracle: false, ..TrainConfig::default() };
    let trainer = Trainer::new(&f.train, None, &f.splits, cfg.clone()).unwrap();
    let mut model = cfg.new_model(f.model).unwrap();
    trainer.warmup(&mut model).unwrap();
    let counts: Vec<usize> = (0..10).map(|e| trainer.train_epoch(&mut model, e).unwrap().confident).collect();
    let rising = counts.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rising >= 8, "{counts:?}");
}
