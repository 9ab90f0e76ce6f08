use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, EvalReport, SplitKind};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{inject_noise, NoiseSpec, SequenceDataset};
use crate::error::{Error, Result};
use crate::trainer::fit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Single view, `α = β = 0`.
    #[serde(rename = "-clkl")]
    NoClKl,
    #[serde(rename = "-cl")]
    NoCl,
    #[serde(rename = "-kl")]
    NoKl,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoClKl, Variant::NoCl, Variant::NoKl, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NoClKl => "-clkl",
            Variant::NoCl => "-cl",
            Variant::NoKl => "-kl",
            Variant::Full => "full",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::NoClKl => {
                c.twin = false;
                c.alpha = 0.0;
                c.beta = 0.0;
            }
            Variant::NoCl => c.alpha = 0.0,
            Variant::NoKl => c.beta = 0.0,
            Variant::Full => {}
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub ratio: f64,
    pub report: EvalReport,
}

/// Trains each variant with the same data and seeds and reports test metrics
/// of its best validation checkpoint.
pub fn run_ablation(ds: &SequenceDataset, base: &ModelConfig, train: &TrainConfig) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let (state, _) = fit(ds, v.apply(base), train.clone())?;
            Ok(AblationRow {
                variant: v,
                report: evaluate(&state.best_model(), ds, SplitKind::Test)?,
                epochs: state.epoch,
            })
        })
        .collect()
}

/// Trains on a noisy copy of `ds` per ratio and evaluates on the clean test
/// split. Ratio 0 trains on `ds` itself.
pub fn run_noise_robustness(
    ds: &SequenceDataset,
    ratios: &[f64],
    model: &ModelConfig,
    train: &TrainConfig,
    noise_seed: u64,
) -> Result<Vec<NoiseRow>> {
    ratios
        .iter()
        .map(|&ratio| {
            if !(0.0..=0.5).contains(&ratio) {
                return Err(Error::Config(format!("noise ratio {ratio} outside [0, 0.5]")));
            }
            let noisy;
            let train_ds = if ratio == 0.0 {
                ds
            } else {
                noisy = inject_noise(
                    ds,
                    NoiseSpec {
                        ratio,
                        seed: noise_seed,
                    },
                )?
                .0;
                &noisy
            };
            let (state, _) = fit(train_ds, model.clone(), train.clone())?;
            Ok(NoiseRow {
                ratio,
                report: evaluate(&state.best_model(), ds, SplitKind::Test)?,
            })
        })
        .collect()
}

/// TSV with columns `<key>, HR@5, HR@10, NDCG@5, NDCG@10`.
pub fn write_table(path: &Path, key: &str, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut out = format!("{key}\tHR@5\tHR@10\tNDCG@5\tNDCG@10\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\n",
            r.hr_at(5),
            r.hr_at(10),
            r.ndcg_at(5),
            r.ndcg_at(10)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
