use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use log::info;
use meta_sgcl::data::{
    build_sequences, ingest_with, read_dataset, synth_markov_dataset, synth_preference_dataset, write_dataset,
    Delimiter, IngestOptions, SequenceDataset,
};
use meta_sgcl::eval::{
    emit_embedding_projection, evaluate, popularity_report, run_ablation, run_noise_robustness, write_projection,
    write_table, EvalReport, SplitKind, REPORT_KS,
};
use meta_sgcl::trainer::{load_checkpoint, save_checkpoint, train_epochs, LogRecord, TrainState};
use meta_sgcl::verification::{run_suite, AnnealSetup, SuiteOptions};
use meta_sgcl::{ModelConfig, TrainConfig};

use crate::config::{expand_grid, parse_grid_axis, HyperArgs, RunConfig};

/// What a finished command reports to the process exit code.
pub enum Outcome {
    Ok,
    CheckFailed,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DelimiterArg {
    Tab,
    Comma,
    DoubleColon,
}

impl From<DelimiterArg> for Delimiter {
    fn from(d: DelimiterArg) -> Self {
        match d {
            DelimiterArg::Tab => Delimiter::Tab,
            DelimiterArg::Comma => Delimiter::Comma,
            DelimiterArg::DoubleColon => Delimiter::DoubleColon,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Synthetic {
    /// One shared Markov chain
    Markov,
    /// Each user follows one of several chains
    Preference,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Validation,
    Test,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Validation => SplitKind::Validation,
            SplitArg::Test => SplitKind::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Interaction log (user, item, timestamp[, rating]); gzip is detected
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading a log
    #[arg(long, value_enum)]
    pub synthetic: Option<Synthetic>,
    /// Dataset file to write
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "tab")]
    pub delimiter: DelimiterArg,
    /// Drop rows rated below this value
    #[arg(long)]
    pub min_rating: Option<f64>,
    /// Drop users with fewer interactions
    #[arg(long, default_value_t = 5)]
    pub min_user_len: usize,
    /// Drop items with fewer interactions
    #[arg(long, default_value_t = 5)]
    pub min_item_len: usize,
    /// Training prefix length n
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    #[arg(long, default_value_t = 100)]
    pub users: usize,
    #[arg(long, default_value_t = 20)]
    pub items: usize,
    /// Synthetic sequence length
    #[arg(long, default_value_t = 30)]
    pub seq_len: usize,
    /// Log-odds of the preferred successor
    #[arg(long, default_value_t = 5.0)]
    pub sharpness: f64,
    /// Number of chains for preference data
    #[arg(long, default_value_t = 3)]
    pub prefs: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

fn stats_table(users: usize, items: usize, interactions: usize, avg: f64, sparsity: f64) -> String {
    format!(
        "{:<10}{:<10}{:<15}{:<12}{}\n{:<10}{:<10}{:<15}{:<12.1}{:.2}%",
        "users",
        "items",
        "interactions",
        "avg_len",
        "sparsity",
        users,
        items,
        interactions,
        avg,
        sparsity * 100.0
    )
}

pub fn prepare(args: &PrepareArgs) -> Result<Outcome> {
    let ds = if let Some(kind) = args.synthetic {
        let ds = match kind {
            Synthetic::Markov => synth_markov_dataset(args.users, args.items, args.seq_len, args.sharpness, args.seed)?,
            Synthetic::Preference => synth_preference_dataset(
                args.users,
                args.items,
                args.seq_len,
                args.prefs,
                args.sharpness,
                args.seed,
            )?,
        };
        let s = ds.stats();
        println!(
            "{}",
            stats_table(s.users, s.items, s.interactions, s.avg_length, s.sparsity)
        );
        ds
    } else {
        let input = args.input.as_ref().expect("clap requires input");
        let opts = IngestOptions {
            min_rating: args.min_rating,
            min_user_len: args.min_user_len,
            min_item_len: args.min_item_len,
            delimiter: args.delimiter.into(),
        };
        let (records, rep) = ingest_with(input, &opts)?;
        println!(
            "{}",
            stats_table(rep.users, rep.items, rep.rows, rep.avg_length(), rep.sparsity())
        );
        let (ds, build) = build_sequences(&records, args.max_len)?;
        if build.excluded_short > 0 {
            println!("excluded {} users with fewer than 3 interactions", build.excluded_short);
        }
        ds
    };
    write_dataset(&ds, &args.output)?;
    println!(
        "wrote {} ({} users, {} items, max_len {})",
        args.output.display(),
        ds.num_users(),
        ds.num_items(),
        ds.max_len
    );
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset written by `prepare`
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory (config.json, train.jsonl, eval.json, checkpoints/)
    #[arg(long)]
    pub run_dir: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Continue from run_dir/checkpoints/last.ckpt
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs in this invocation
    #[arg(long, value_name = "N")]
    pub stop_after_epochs: Option<usize>,
    /// Sweep axis `key=v1,v2`; repeat for a cartesian grid
    #[arg(long, value_parser = parse_grid_axis, value_name = "KEY=V1,V2")]
    pub grid: Vec<(String, Vec<String>)>,
    /// Print the resolved config and exit
    #[arg(long)]
    pub dry_run: bool,
}

fn load_data(path: &Path) -> Result<SequenceDataset> {
    read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn bind_dataset(rc: &mut RunConfig, ds: &SequenceDataset, path: &Path) {
    rc.data = Some(path.to_path_buf());
    rc.model.num_items = ds.num_items();
    rc.model.max_len = ds.max_len;
}

pub fn train(args: &TrainArgs) -> Result<Outcome> {
    let mut rc = args.hyper.resolve()?;
    rc.experiment = "train".into();
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&rc)?);
        return Ok(Outcome::Ok);
    }
    let ds = load_data(&args.data)?;
    bind_dataset(&mut rc, &ds, &args.data);
    if args.grid.is_empty() {
        let report = train_run(&args.run_dir, &rc, &ds, args.resume, args.stop_after_epochs)?;
        if let Some(r) = report {
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        return Ok(Outcome::Ok);
    }
    let mut rows = Vec::new();
    for point in expand_grid(&args.grid) {
        let mut sub = rc.clone();
        let mut name = Vec::new();
        for (k, v) in &point {
            sub.set(k, v)?;
            name.push(format!("{k}={v}"));
        }
        let name = name.join(",");
        let dir = args.run_dir.join(name.replace(',', "_"));
        println!("grid point {name}");
        if let Some(r) = train_run(&dir, &sub, &ds, args.resume, args.stop_after_epochs)? {
            rows.push((name, r));
        }
    }
    if !rows.is_empty() {
        let path = args.run_dir.join("grid.tsv");
        write_table(&path, "run", &rows)?;
        print!("{}", fs::read_to_string(&path)?);
    }
    Ok(Outcome::Ok)
}

/// Log records of `path` that belong to completed epochs.
fn completed_log(path: &Path, epochs: usize) -> Result<Vec<String>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut keep = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let rec: LogRecord =
            serde_json::from_str(&line).with_context(|| format!("bad log line in {}", path.display()))?;
        if rec.epoch() < epochs {
            keep.push(line);
        }
    }
    Ok(keep)
}

fn save_atomic(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    save_checkpoint(state, &tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))
}

/// Trains in `dir`, checkpointing after every epoch. Returns the test report
/// of the best parameters once training has finished.
fn train_run(
    dir: &Path,
    rc: &RunConfig,
    ds: &SequenceDataset,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<Option<EvalReport>> {
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let last = ckpt_dir.join("last.ckpt");
    let log_path = dir.join("train.jsonl");
    let mut state = if resume {
        let saved = RunConfig::load(&dir.join("config.json"))?;
        if saved.model != rc.model || saved.train != rc.train {
            bail!("settings differ from the run in {}", dir.display());
        }
        let state = load_checkpoint(&last)?;
        let mut lines = completed_log(&log_path, state.epoch)?.join("\n");
        if !lines.is_empty() {
            lines.push('\n');
        }
        fs::write(&log_path, lines)?;
        info!("resuming {} after epoch {}", dir.display(), state.epoch);
        state
    } else {
        rc.save(&dir.join("config.json"))?;
        fs::write(&log_path, "")?;
        TrainState::new(rc.model.clone(), rc.train.clone())?
    };

    let mut log = BufWriter::new(OpenOptions::new().append(true).open(&log_path)?);
    let mut ran = 0;
    while !state.finished && stop_after.is_none_or(|n| ran < n) {
        train_epochs(&mut state, ds, Some(1), &mut |r| {
            if let LogRecord::Epoch(e) = &r {
                info!("epoch {} ndcg@10 {:.4} best {:.4}", e.epoch, e.ndcg10, e.best_ndcg10);
            }
            log.write_all(r.to_json_line().as_bytes())
                .map_err(|e| meta_sgcl::Error::io(&log_path, e))
        })?;
        log.flush()?;
        save_atomic(&state, &last)?;
        ran += 1;
    }
    if !state.finished {
        println!("stopped after epoch {} in {}", state.epoch, dir.display());
        return Ok(None);
    }
    let report = evaluate(&state.best_model(), ds, SplitKind::Test)?;
    write_json(&dir.join("eval.json"), &report)?;
    Ok(Some(report))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to score; its best validation parameters are used
    #[arg(long, required_unless_present = "popularity")]
    pub checkpoint: Option<PathBuf>,
    /// Rank by training-set item frequency instead of a model
    #[arg(long)]
    pub popularity: bool,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also write the report here
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> Result<Outcome> {
    let ds = load_data(&args.data)?;
    let report = if args.popularity {
        popularity_report(&ds, args.split.into(), &REPORT_KS)?
    } else {
        let path = args.checkpoint.as_ref().expect("clap requires checkpoint");
        let state = load_checkpoint(path)?;
        evaluate(&state.best_model(), &ds, args.split.into())?
    };
    if let Some(out) = &args.output {
        write_json(out, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

impl ExperimentArgs {
    fn setup(&self, experiment: &str) -> Result<(RunConfig, SequenceDataset)> {
        let mut rc = self.hyper.resolve()?;
        rc.experiment = experiment.into();
        let ds = load_data(&self.data)?;
        bind_dataset(&mut rc, &ds, &self.data);
        fs::create_dir_all(&self.run_dir).with_context(|| format!("creating {}", self.run_dir.display()))?;
        rc.save(&self.run_dir.join("config.json"))?;
        Ok((rc, ds))
    }
}

pub fn ablate(args: &ExperimentArgs) -> Result<Outcome> {
    let (rc, ds) = args.setup("ablate")?;
    let rows = run_ablation(&ds, &rc.model, &rc.train)?;
    let table: Vec<(String, EvalReport)> = rows
        .iter()
        .map(|r| (r.variant.label().to_string(), r.report.clone()))
        .collect();
    let path = args.run_dir.join("ablation.tsv");
    write_table(&path, "variant", &table)?;
    print!("{}", fs::read_to_string(&path)?);
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Inserted-item ratios, each in [0, 0.5]
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
    pub ratios: Vec<f64>,
}

pub fn noise(args: &NoiseArgs) -> Result<Outcome> {
    let (rc, ds) = args.exp.setup("noise")?;
    let rows = run_noise_robustness(&ds, &args.ratios, &rc.model, &rc.train, rc.train.seed)?;
    let table: Vec<(String, EvalReport)> = rows.iter().map(|r| (r.ratio.to_string(), r.report.clone())).collect();
    let path = args.exp.run_dir.join("noise.tsv");
    write_table(&path, "ratio", &table)?;
    print!("{}", fs::read_to_string(&path)?);
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    /// Dataset the checkpoint was trained on (for item frequencies)
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, short, default_value = "projection.tsv")]
    pub output: PathBuf,
}

pub fn project(args: &ProjectArgs) -> Result<Outcome> {
    let ds = load_data(&args.data)?;
    let state = load_checkpoint(&args.checkpoint)?;
    let p = emit_embedding_projection(&state.best_model(), &ds.item_frequencies())?;
    write_projection(&p, &args.output)?;
    println!(
        "wrote {} items to {}; explained variance {:.3} / {:.3}",
        p.rows.len(),
        args.output.display(),
        p.explained.first().copied().unwrap_or(0.0),
        p.explained.get(1).copied().unwrap_or(0.0)
    );
    Ok(Outcome::Ok)
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Randomized Gaussian toy models for the ELBO check
    #[arg(long, default_value_t = 20)]
    pub toys: usize,
    /// Also run the KL-weight sweep (trains small models)
    #[arg(long)]
    pub anneal: bool,
    /// Write the JSON report here
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

pub fn verify(args: &VerifyArgs) -> Result<Outcome> {
    let anneal = args.anneal.then(|| {
        let setup = AnnealSetup {
            users: 60,
            items: 12,
            seq_len: 12,
            sharpness: 4.0,
            epochs: 30,
            seeds: vec![args.seed, args.seed + 1, args.seed + 2],
            model: ModelConfig {
                hidden_dim: 16,
                enc_layers: 1,
                dec_layers: 1,
                dropout: 0.1,
                ..Default::default()
            },
            train: TrainConfig {
                lr: 0.005,
                batch_size: 32,
                ..Default::default()
            },
        };
        (vec![0.0, 0.1, 0.5, 1.0], setup)
    });
    let opts = SuiteOptions {
        seed: args.seed,
        toys: args.toys,
        anneal,
        ..Default::default()
    };
    let report = run_suite(&opts)?;
    for c in &report.checks {
        println!(
            "{} {}: {:.3e} (threshold {:.3e}) {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.estimate,
            c.threshold,
            c.detail
        );
    }
    let json = serde_json::to_string_pretty(&report)?;
    match &args.output {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(if report.all_pass() {
        Outcome::Ok
    } else {
        Outcome::CheckFailed
    })
}
