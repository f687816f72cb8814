use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dicap::config::RunConfig;
use dicap::data::{generate_synthetic, generate_test_set, split_ssmll, Dataset, SsmllSplits};
use dicap::eval::{compare_policies, map_report, reliability_report};
use dicap::grad::AdamWConfig;
use dicap::model::ModelState;
use dicap::trainer::{MetricsLine, Trainer, WeightPolicy};

#[derive(Parser)]
#[command(name = "dicap", version, about = "Distribution-calibrated pseudo-labeling on synthetic multi-label data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and test sets described by a config.
    GenData(Common),
    /// Warm-up, pseudo-labeling epochs, and head fine-tuning.
    Train(TrainArgs),
    /// mAP of a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Run every weighting policy over the configured seeds.
    ComparePolicies(Common),
    /// Estimated vs oracle correctness per confidence bin for a checkpoint.
    CalibReport(CalibArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed relevant to the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory written by `gen-data`; data are generated in memory otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Weighting policy: uniform, confidence, labeled, ours, optimal.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory holding features.csv and labels.csv.
    #[arg(long)]
    data: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate the raw parameters instead of the EMA shadow.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct CalibArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ComparePolicies(a) => compare(a),
        Command::CalibReport(a) => calib_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_file(path).with_context(|| format!("loading config {}", path.display()))
}

fn out_dir(arg: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match (arg, &cfg.out_dir) {
        (Some(d), _) | (None, Some(d)) => d.clone(),
        (None, None) => bail!("no output directory: pass --out or set out_dir in the config"),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Training and test sets, from `--data` or freshly generated.
fn datasets(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<(Dataset, Dataset)> {
    let (train, test) = match data {
        Some(dir) => {
            let train = Dataset::read_dir(dir.join("train")).with_context(|| format!("reading {}", dir.join("train").display()))?;
            let test = Dataset::read_dir(dir.join("test")).with_context(|| format!("reading {}", dir.join("test").display()))?;
            (train, test)
        }
        None => (generate_synthetic(&cfg.data)?, generate_test_set(&cfg.data)?),
    };
    if train.input_dim() != cfg.model.input_dim || train.num_classes() != cfg.model.num_classes {
        bail!(
            "dataset is {}-dimensional with {} classes but the model expects {} and {}",
            train.input_dim(),
            train.num_classes(),
            cfg.model.input_dim,
            cfg.model.num_classes
        );
    }
    Ok((train, test))
}

fn splits(cfg: &RunConfig, train: &Dataset) -> Result<SsmllSplits> {
    Ok(split_ssmll(train, cfg.split.rho, cfg.split.est_fraction, cfg.split.seed)?)
}

fn gen_data(a: Common) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.data.seed = seed;
    }
    let out = out_dir(&a.out, &cfg)?;
    let train = generate_synthetic(&cfg.data)?;
    let test = generate_test_set(&cfg.data)?;
    train.write_dir(out.join("train"))?;
    test.write_dir(out.join("test"))?;
    cfg.write_snapshot(out.join("config.json"))?;
    println!(
        "wrote {} training and {} test samples to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch_{epoch:03}.json")
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common.config)?;
    if let Some(seed) = a.common.seed {
        cfg.train.seed = seed;
    }
    if let Some(name) = &a.policy {
        cfg.train.policy = WeightPolicy::parse(name).with_context(|| format!("unknown policy `{name}`"))?;
    }
    let out = out_dir(&a.common.out, &cfg)?;
    let (train, test) = datasets(&cfg, &a.common.data)?;
    let splits = splits(&cfg, &train)?;
    cfg.write_snapshot(out.join("config.json"))?;
    splits.write_json(out.join("splits.json"))?;

    let trainer = Trainer::new(&train, Some(&test), &splits, cfg.train.clone())?;
    let mut model = cfg.train.new_model(cfg.model)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut emit = |line: MetricsLine| -> Result<()> {
        writeln!(metrics, "{}", serde_json::to_string(&line)?)?;
        Ok(())
    };

    for r in trainer.warmup(&mut model)? {
        emit(MetricsLine::Warmup(r))?;
    }
    let mut last = None;
    for epoch in 0..cfg.train.epochs {
        let report = trainer.main_epoch(&mut model, epoch)?;
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            model.save(out.join(checkpoint_name(epoch)))?;
        }
        eprintln!(
            "epoch {epoch}: loss {:.4}, confident {}, test mAP {:.4}",
            report.l_total,
            report.confident,
            report.test_map.unwrap_or(f64::NAN)
        );
        last = Some(report.clone());
        emit(MetricsLine::Main(Box::new(report)))?;
    }
    if cfg.train.variant == dicap::trainer::Variant::Full {
        for r in trainer.finetune_head(&mut model)? {
            emit(MetricsLine::Finetune(r))?;
        }
    }
    model.save(out.join("model.json"))?;

    if let Some(report) = &last {
        report.estimated_table.write_csv(out.join("weight_table.csv"))?;
        report.thresholds.write_csv(out.join("thresholds.csv"))?;
        if let Some(oracle) = &report.oracle_table {
            oracle.write_csv(out.join("oracle_table.csv"))?;
            reliability_report(&report.estimated_table, oracle)?.write_csv(out.join("reliability.csv"))?;
        }
    }
    let final_map = trainer.test_map(&model)?;
    let summary = serde_json::json!({ "final_map": final_map, "policy": cfg.train.policy.name() });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("final test mAP {:.4}", final_map.unwrap_or(f64::NAN));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = ModelState::load(&a.checkpoint, AdamWConfig::default())
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let data = Dataset::read_dir(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let scores = model.predict(&data.features, !a.raw)?;
    let report = map_report(&scores, &data.labels)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.out {
        fs::write(path, text.clone() + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn compare(a: Common) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seeds = vec![seed];
    }
    let out = out_dir(&a.out, &cfg)?;
    let (train, test) = datasets(&cfg, &a.data)?;
    let splits = splits(&cfg, &train)?;
    cfg.write_snapshot(out.join("config.json"))?;
    let report = compare_policies(&train, &test, &splits, &cfg.model, &cfg.train, &cfg.seeds, &cfg.policies)?;
    report.write_csv(out.join("policies.csv"))?;
    report.write_summary_json(out.join("policies_summary.json"))?;
    for s in &report.summary {
        println!("{:<10} mAP {:.4} ± {:.4} over {} runs", s.policy.name(), s.mean_map, s.std_map, s.runs);
    }
    Ok(())
}

fn calib_report(a: CalibArgs) -> Result<()> {
    let cfg = load_config(&a.common.config)?;
    let out = out_dir(&a.common.out, &cfg)?;
    let model = ModelState::load(&a.checkpoint, cfg.train.optimizer)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let (train, _) = datasets(&cfg, &a.common.data)?;
    let splits = splits(&cfg, &train)?;
    let trainer = Trainer::new(&train, None, &splits, cfg.train.clone())?;
    let state = trainer.refresh(&model, 0, true)?;
    state.estimated.write_csv(out.join("weight_table.csv"))?;
    let Some(oracle) = &state.oracle else {
        bail!("no confident pseudo-label on the unlabeled pool; the oracle table is undefined");
    };
    oracle.write_csv(out.join("oracle_table.csv"))?;
    let report = reliability_report(&state.estimated, oracle)?;
    report.write_csv(out.join("reliability.csv"))?;
    match report.linf_gap {
        Some(g) => println!("L-inf gap over {} co-occupied bins: {g:.4}", report.co_occupied),
        None => println!("no co-occupied bins"),
    }
    Ok(())
}
