//! Paired-seed ablations over prototype count, kernel and model arms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use crate::em::Kernel;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::net::{ModelConfig, PmmNet};
use crate::seed;
use crate::train::{RunConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    K,
    Kernel,
    Arms,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(Axis::K),
            "kernel" => Ok(Axis::Kernel),
            "arms" => Ok(Axis::Arms),
            other => Err(Error::InvalidArgument(format!("unknown axis {other:?}"))),
        }
    }
}

impl Axis {
    /// Model fields an arm of this axis may change.
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            Axis::K => &["k"],
            Axis::Kernel => &["kernel"],
            Axis::Arms => &["k", "use_p_conv", "branches"],
        }
    }
}

/// Labelled model variants of `axis` derived from `base`. For arms, the
/// prototype count of the mixture arms and the branch count of the residual
/// arm come from `base`.
pub fn arm_configs(axis: Axis, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    match axis {
        Axis::K => (1..=5)
            .map(|k| (format!("k={k}"), ModelConfig { k, ..base.clone() }))
            .collect(),
        Axis::Kernel => [Kernel::Vmf, Kernel::Gaussian]
            .into_iter()
            .map(|kernel| {
                let label = match kernel {
                    Kernel::Vmf => "vmf",
                    Kernel::Gaussian => "gaussian",
                };
                (label.to_string(), ModelConfig { kernel, ..base.clone() })
            })
            .collect(),
        Axis::Arms => {
            let arm = |k, use_p_conv, branches| ModelConfig {
                k,
                use_p_conv,
                branches,
                ..base.clone()
            };
            vec![
                ("baseline".into(), arm(1, false, 1)),
                ("p_match".into(), arm(base.k, false, 1)),
                ("p_match+p_conv".into(), arm(base.k, true, 1)),
                ("rpmm".into(), arm(base.k, true, base.branches)),
            ]
        }
    }
}

/// Top-level model fields whose values differ between `a` and `b`.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Result<Vec<String>> {
    let (serde_json::Value::Object(a), serde_json::Value::Object(b)) = (serde_json::to_value(a)?, serde_json::to_value(b)?)
    else {
        unreachable!("model config serializes to an object");
    };
    Ok(a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).map(|(k, _)| k.clone()).collect())
}

/// Checks that every arm differs from the base only in the axis fields.
pub fn audit_arms(axis: Axis, base: &ModelConfig, arms: &[(String, ModelConfig)]) -> Result<()> {
    for (label, cfg) in arms {
        let diff = config_diff(base, cfg)?;
        if let Some(field) = diff.iter().find(|f| !axis.fields().contains(&f.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "arm {label} changes {field}, outside the {axis:?} axis"
            )));
        }
    }
    Ok(())
}

/// Seeds shared by every arm for one paired replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedSeeds {
    pub replicate: u64,
    pub init: u64,
    pub em: u64,
    pub train: u64,
    pub eval: u64,
}

impl PairedSeeds {
    pub fn new(replicate: u64) -> Self {
        Self {
            replicate,
            init: seed::derive(replicate, 0),
            em: seed::derive(replicate, 1),
            train: seed::derive(replicate, 2),
            eval: seed::derive(replicate, 3),
        }
    }

    pub fn apply(&self, base: &RunConfig, model: &ModelConfig) -> RunConfig {
        let mut run = base.clone();
        run.model = ModelConfig {
            init_seed: self.init,
            em_seed: self.em,
            ..model.clone()
        };
        run.train.seed = self.train;
        run.eval.seed = self.eval;
        run
    }
}

/// Trains from scratch and evaluates once.
pub fn train_and_evaluate(run: &RunConfig) -> Result<EvalReport> {
    run.validate()?;
    let net = PmmNet::new(run.model.clone())?;
    let mut trainer = Trainer::new(net, run.train.clone())?;
    trainer.run(&mut std::io::sink(), |_| Ok(()))?;
    evaluate(trainer.net(), &run.eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Fields changed relative to the base model config.
    pub diff: BTreeMap<String, serde_json::Value>,
    pub seeds: Vec<PairedSeeds>,
    pub mean_ious: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub base: RunConfig,
    pub rows: Vec<AblationRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs every arm of `axis` for each replicate; `run_one` does the training
/// and evaluation (swap it out to reuse cached results).
pub fn run_ablation_with(
    axis: Axis,
    base: &RunConfig,
    replicates: &[u64],
    mut run_one: impl FnMut(&RunConfig) -> Result<f64>,
) -> Result<AblationTable> {
    if replicates.is_empty() {
        return Err(Error::InvalidArgument("an ablation needs at least one seed".into()));
    }
    let arms = arm_configs(axis, &base.model);
    audit_arms(axis, &base.model, &arms)?;
    let mut rows = Vec::with_capacity(arms.len());
    for (label, model) in arms {
        let seeds: Vec<PairedSeeds> = replicates.iter().map(|&r| PairedSeeds::new(r)).collect();
        let mut mean_ious = Vec::with_capacity(seeds.len());
        for s in &seeds {
            let miou = run_one(&s.apply(base, &model))?;
            info!("{label} replicate {}: mIoU {miou:.4}", s.replicate);
            mean_ious.push(miou);
        }
        let model_json = serde_json::to_value(&model)?;
        let diff = config_diff(&base.model, &model)?
            .into_iter()
            .map(|f| {
                let v = model_json[&f].clone();
                (f, v)
            })
            .collect();
        let (mean, std) = mean_std(&mean_ious);
        rows.push(AblationRow {
            label,
            diff,
            seeds,
            mean_ious,
            mean,
            std,
        });
    }
    Ok(AblationTable {
        axis,
        base: base.clone(),
        rows,
    })
}

pub fn run_ablation(axis: Axis, base: &RunConfig, replicates: &[u64]) -> Result<AblationTable> {
    run_ablation_with(axis, base, replicates, |run| train_and_evaluate(run).map(|r| r.mean_iou))
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let n = self.rows.first().map_or(0, |r| r.mean_ious.len());
        let _ = write!(out, "| arm | changed | mean mIoU | std |");
        for i in 0..n {
            let _ = write!(out, " seed {} |", self.rows[0].seeds[i].replicate);
        }
        out.push('\n');
        out.push_str(&"|---".repeat(4 + n));
        out.push_str("|\n");
        for row in &self.rows {
            let changed: Vec<String> = row.diff.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let changed = if changed.is_empty() { "-".to_string() } else { changed.join(", ") };
            let _ = write!(out, "| {} | {} | {:.4} | {:.4} |", row.label, changed, row.mean, row.std);
            for v in &row.mean_ious {
                let _ = write!(out, " {v:.4} |");
            }
            out.push('\n');
        }
        out
    }
}
