use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use meta_sgcl::config::{Pooling, Precision, Similarity, Stage2Granularity, TrainMode};
use meta_sgcl::{ModelConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Fully resolved settings of one run, written to `config.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub experiment: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
    }

    /// Sets one model or training field by name from a JSON literal; `seed`
    /// sets both.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut model = serde_json::to_value(&self.model)?;
        let mut train = serde_json::to_value(&self.train)?;
        let mut hit = false;
        for obj in [&mut model, &mut train] {
            if let Some(slot) = obj.get_mut(key) {
                *slot = value.clone();
                hit = true;
            }
        }
        if !hit {
            bail!("unknown setting {key:?}");
        }
        self.model = serde_json::from_value(model).with_context(|| format!("bad value {raw:?} for {key}"))?;
        self.train = serde_json::from_value(train).with_context(|| format!("bad value {raw:?} for {key}"))?;
        Ok(())
    }
}

fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "meta" => Ok(TrainMode::MetaTwoStep),
        "joint" => Ok(TrainMode::Joint),
        _ => Err(format!("expected meta or joint, got {s}")),
    }
}

/// Model and training flags shared by the training commands. Unset flags
/// fall back to the config file, then to the built-in defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct HyperArgs {
    /// JSON run config; flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed for initialization, shuffling and noise draws
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding and latent width d
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Attention heads per block
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Contrastive weight
    #[arg(long)]
    pub alpha: Option<f64>,
    /// KL weight
    #[arg(long)]
    pub beta: Option<f64>,
    /// InfoNCE temperature
    #[arg(long)]
    pub tau: Option<f64>,
    /// dot or cosine
    #[arg(long, value_parser = serde_enum::<Similarity>)]
    pub similarity: Option<Similarity>,
    /// anchor or mean
    #[arg(long, value_parser = serde_enum::<Pooling>)]
    pub pooling: Option<Pooling>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum number of epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation NDCG@10 improvement before stopping
    #[arg(long)]
    pub patience: Option<usize>,
    /// meta (two-step) or joint
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TrainMode>,
    /// per-batch or per-epoch second stage
    #[arg(long, value_parser = serde_enum::<Stage2Granularity>)]
    pub stage2: Option<Stage2Granularity>,
    /// Checkpoint precision: f64 or f32
    #[arg(long, value_parser = serde_enum::<Precision>)]
    pub precision: Option<Precision>,
}

impl HyperArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let (m, t) = (&mut rc.model, &mut rc.train);
        if let Some(s) = self.seed {
            m.seed = s;
            t.seed = s;
        }
        macro_rules! over {
            ($($flag:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag { $dst = v; })*
            };
        }
        over!(
            hidden_dim => m.hidden_dim,
            heads => m.num_heads,
            enc_layers => m.enc_layers,
            dec_layers => m.dec_layers,
            dropout => m.dropout,
            alpha => m.alpha,
            beta => m.beta,
            tau => m.tau,
            similarity => m.similarity,
            pooling => m.pooling,
            lr => t.lr,
            batch_size => t.batch_size,
            epochs => t.max_epochs,
            patience => t.patience,
            mode => t.mode,
            stage2 => t.stage2,
            precision => t.precision,
        );
        Ok(rc)
    }
}

/// Parses `key=v1,v2,...`.
pub fn parse_grid_axis(s: &str) -> Result<(String, Vec<String>), String> {
    let (k, vs) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=v1,v2, got {s}"))?;
    let values: Vec<String> = vs
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if k.trim().is_empty() || values.is_empty() {
        return Err(format!("expected key=v1,v2, got {s}"));
    }
    Ok((k.trim().to_string(), values))
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn expand_grid(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut out: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, values) in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((k.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_reaches_both_sections() {
        let mut rc = RunConfig::default();
        rc.set("alpha", "0.5").unwrap();
        rc.set("lr", "0.01").unwrap();
        rc.set("seed", "9").unwrap();
        rc.set("similarity", "cosine").unwrap();
        assert_eq!(rc.model.alpha, 0.5);
        assert_eq!(rc.train.lr, 0.01);
        assert_eq!((rc.model.seed, rc.train.seed), (9, 9));
        assert_eq!(rc.model.similarity, Similarity::Cosine);
        assert!(rc.set("nope", "1").is_err());
        assert!(rc.set("hidden_dim", "wide").is_err());
    }

    #[test]
    fn grid_expansion_order() {
        let axes = vec![
            parse_grid_axis("alpha=0.1,0.2").unwrap(),
            parse_grid_axis("beta=1").unwrap(),
        ];
        let g = expand_grid(&axes);
        assert_eq!(g.len(), 2);
        assert_eq!(g[1], vec![("alpha".into(), "0.2".into()), ("beta".into(), "1".into())]);
        assert!(parse_grid_axis("alpha").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"model": {"hidden_dim": 16, "beta": 0.5}}"#).unwrap();
        let args = HyperArgs {
            config: Some(path),
            beta: Some(0.1),
            ..Default::default()
        };
        let rc = args.resolve().unwrap();
        assert_eq!(rc.model.hidden_dim, 16);
        assert_eq!(rc.model.beta, 0.1);
        assert_eq!(rc.model.num_heads, 2);
    }
}
