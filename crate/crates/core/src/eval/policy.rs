use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SsmllSplits};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{MetricsLine, TrainConfig, Trainer, Variant, WeightPolicy};

/// One pipeline run under a single weighting policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub policy: WeightPolicy,
    pub seed: u64,
    pub final_map: f64,
    /// Test mAP after each main epoch.
    pub map_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: WeightPolicy,
    pub runs: usize,
    pub mean_map: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<PolicyRun>,
    pub summary: Vec<PolicySummary>,
}

impl PolicyReport {
    pub fn mean_map(&self, policy: WeightPolicy) -> Option<f64> {
        self.summary.iter().find(|s| s.policy == policy).map(|s| s.mean_map)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,seed,final_map,map_trace\n");
        for r in &self.runs {
            let trace: Vec<String> = r.map_trace.iter().map(|m| m.to_string()).collect();
            out.push_str(&format!("{},{},{},{}\n", r.policy.name(), r.seed, r.final_map, trace.join(";")));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn write_summary_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.summary)?;
        write_file(path.as_ref(), &json)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

fn summarize(policy: WeightPolicy, runs: &[PolicyRun]) -> PolicySummary {
    let maps: Vec<f64> = runs.iter().filter(|r| r.policy == policy).map(|r| r.final_map).collect();
    let n = maps.len() as f64;
    let mean = maps.iter().sum::<f64>() / n;
    let std = if maps.len() > 1 {
        (maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    PolicySummary {
        policy,
        runs: maps.len(),
        mean_map: mean,
        std_map: std,
    }
}

/// Runs the full pipeline once per (seed, policy), changing only the source
/// of pseudo-label weights. Splits stay fixed; the seed drives model
/// initialization and batching. The warm-up does not depend on the policy
/// and is shared by all policies of a seed.
pub fn compare_policies(
    data: &Dataset,
    test: &Dataset,
    splits: &SsmllSplits,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    policies: &[WeightPolicy],
) -> Result<PolicyReport> {
    if seeds.is_empty() || policies.is_empty() {
        return Err(Error::Empty("seeds or policies for comparison".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len() * policies.len());
    for &seed in seeds {
        let base = TrainConfig {
            seed,
            variant: Variant::Full,
            ..cfg.clone()
        };
        let warm = Trainer::new(data, Some(test), splits, base.clone())?;
        let mut model = base.new_model(*model_config)?;
        let warmup: Vec<MetricsLine> = warm.warmup(&mut model)?.into_iter().map(MetricsLine::Warmup).collect();
        for &policy in policies {
            let trainer = Trainer::new(data, Some(test), splits, TrainConfig { policy, ..base.clone() })?;
            let outcome = trainer.continue_after_warmup(model.clone(), warmup.clone())?;
            let map_trace = outcome.main_reports().filter_map(|r| r.test_map).collect();
            runs.push(PolicyRun {
                policy,
                seed,
                final_map: outcome.final_map.expect("test set given"),
                map_trace,
            });
        }
    }
    let summary = policies.iter().map(|&p| summarize(p, &runs)).collect();
    Ok(PolicyReport {
        seeds: seeds.to_vec(),
        runs,
        summary,
    })
}
