//! Loss-term ablation: trains matched runs (full objective, minus the
//! temperature triplet, minus the patch triplet) from the same seed and data
//! order, evaluates each on the test split, and writes a comparative report.

use super::config::{Ablation, TrainConfig};
use super::eval::{evaluate, GanTranslator};
use super::gan::{GanTrainer, StepRecord};
use crate::dataio::{Manifest, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_MD: &str = "ablation.md";

/// One trained arm of the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub removed: Vec<Ablation>,
    pub fid: f64,
    pub mse_spec: f64,
    /// Mean pixel Huber distance over the last quarter of training steps.
    pub smooth_l1_tail: f64,
}

/// All arms plus the shared step budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: super::config::Variant,
    pub steps: u64,
    pub arms: Vec<AblationArm>,
}

impl AblationReport {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let json_path = dir.join(ABLATION_JSON);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&json_path, text).map_err(|e| Error::io(json_path.display().to_string(), e))?;
        let md_path = dir.join(ABLATION_MD);
        fs::write(&md_path, self.to_markdown())
            .map_err(|e| Error::io(md_path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(ABLATION_JSON);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Loss-term ablation\n\n");
        out.push_str(&format!(
            "Variant `{}`, {} steps per arm, shared seed and data order.\n\n",
            self.variant, self.steps
        ));
        out.push_str("| arm | removed terms | FID | spectrum MSE | pixel Huber (tail mean) |\n");
        out.push_str("|-----|---------------|-----|--------------|-------------------------|\n");
        for arm in &self.arms {
            let removed = if arm.removed.is_empty() {
                "—".to_string()
            } else {
                arm.removed
                    .iter()
                    .map(|a| a.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            out.push_str(&format!(
                "| {} | {} | {:.6} | {:.6} | {:.6} |\n",
                arm.name, removed, arm.fid, arm.mse_spec, arm.smooth_l1_tail
            ));
        }
        out
    }
}

fn tail_mean(records: &[StepRecord]) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    let k = (records.len() / 4).max(1);
    records[records.len() - k..]
        .iter()
        .map(|r| r.smooth_l1)
        .sum::<f64>()
        / k as f64
}

/// Trains and evaluates the three arms. Each arm runs in
/// `out_dir/<arm-name>/` with the base config's seed, so data order,
/// initialization, and every random draw are shared; only the objective
/// differs.
pub fn run_ablation<S: Scalar>(base: &TrainConfig) -> Result<AblationReport> {
    base.validate()?;
    if !base.variant.is_gan() {
        return Err(Error::Config(
            "ablation studies target the GAN variants".into(),
        ));
    }
    if !base.ablate.is_empty() {
        return Err(Error::Config(
            "the base ablation config must keep every loss term (the arms remove them)".into(),
        ));
    }
    let manifest = Manifest::load(&base.data_manifest)?;
    let arms: [(&str, Vec<Ablation>); 3] = [
        ("full", vec![]),
        ("no_temperature", vec![Ablation::Temp]),
        ("no_patch", vec![Ablation::Patch]),
    ];
    let mut report = AblationReport {
        variant: base.variant,
        steps: 0,
        arms: Vec::with_capacity(arms.len()),
    };
    let mut reference_order: Option<Vec<usize>> = None;
    for (name, removed) in arms {
        let mut config = base.clone();
        config.ablate = removed.clone();
        config.out_dir = base.out_dir.join(name);
        let mut trainer = GanTrainer::<S>::new(config)?;
        let order = trainer.data_order(0);
        match &reference_order {
            None => reference_order = Some(order),
            Some(reference) => {
                if *reference != order {
                    return Err(Error::InvalidArgument {
                        context: "run_ablation",
                        message: format!("arm {name} does not share the reference data order"),
                    });
                }
            }
        }
        trainer.train()?;
        report.steps = trainer.completed_steps();
        let smooth_l1_tail = tail_mean(trainer.records());
        let hash = trainer.config_hash().to_string();
        let eval_dir = base.out_dir.join(name).join("eval");
        let mut translator = GanTranslator::new(trainer.into_generator());
        let metrics = evaluate(&mut translator, &manifest, Split::Test, &eval_dir, &hash)?;
        report.arms.push(AblationArm {
            name: name.to_string(),
            removed,
            fid: metrics.fid,
            mse_spec: metrics.mse_spec,
            smooth_l1_tail,
        });
    }
    report.save(&base.out_dir)?;
    Ok(report)
}
