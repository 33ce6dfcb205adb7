//! Command-line driver: config resolution, checkpoints and result files.
//!
//! Every command resolves its config (file or defaults), writes
//! `resolved-config.json`, `summary.json` and a CSV of per-step or
//! per-episode records into the output directory.

mod checkpoint;
mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub use checkpoint::Checkpoint;
pub use config::{DatasetSource, ExperimentConfig, Seeds};

use crate::analysis::{analyze, export_features, write_tables, SseMode};
use crate::data::{sample_episode, save_dataset, DatasetSplits, Dtype, Phase, Split};
use crate::error::{Error, Result};
use crate::networks::{Networks, Stages};
use crate::numerics::ParamStore;
use crate::tar::Pipeline;
use crate::train::{episode_seeds, evaluate, meta_train, pretrain, run_ablation, MetricsReport};

#[derive(Parser, Debug)]
#[command(name = "xtar", version, about = "Incremental few-shot learning with task-adaptive representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON); defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the configured synthetic dataset as tensor files.
    Synth(Common),
    /// Pretrains the backbone and base classifier.
    Pretrain(Common),
    /// Meta-trains the enabled modules from a pretrained checkpoint.
    MetaTrain(WithCheckpoint),
    /// Evaluates a checkpoint on test episodes.
    Eval(WithCheckpoint),
    /// Meta-trains and evaluates every stage prefix; pretrains first
    /// without a checkpoint.
    Ablate(WithCheckpoint),
    /// Clustering and entropy analysis of a checkpoint and its Imprint
    /// baseline.
    Analyze(WithCheckpoint),
    /// Exports the feature vectors of one test episode.
    ExportFeatures {
        #[command(flatten)]
        inner: WithCheckpoint,
        /// Index of the analysis episode to export.
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 on success, 2 on usage errors, 1 on runtime errors. Errors are
/// printed to stderr as one `error: ...` line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", line.trim_start_matches("error: "));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{}", summary.display());
            0
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

struct Run {
    config: ExperimentConfig,
    dir: PathBuf,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &common.out {
            config.output_dir = out.clone();
        }
        config.validate()?;
        let dir = config.output_dir.clone();
        write_file(&dir.join("resolved-config.json"), config.to_json()?.as_bytes())?;
        Ok(Self { config, dir })
    }

    fn network(&self, splits: &DatasetSplits) -> Result<Networks> {
        Networks::new(self.config.model(&splits.input_shape, splits.n_base()))
    }

    fn checkpoint(&self, path: &Option<PathBuf>) -> std::result::Result<Checkpoint, Failure> {
        let path = path.as_ref().ok_or_else(|| Failure::Usage("missing required: checkpoint".into()))?;
        let ck = Checkpoint::load(path)?;
        let current = self.config.hash()?;
        let written = serde_json::from_str::<ExperimentConfig>(&ck.config_json).ok().and_then(|c| c.hash().ok());
        if written != Some(current) {
            eprintln!("warning: checkpoint {} was written under a different config", path.display());
        }
        Ok(ck)
    }

    fn save_checkpoint(&self, name: &str, params: &ParamStore, episodes: u64, optimizer: Option<crate::numerics::OptimizerState>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        Checkpoint {
            config_json: self.config.to_json()?,
            episodes,
            params: params.clone(),
            optimizer,
        }
        .save(&path)?;
        Ok(path)
    }

    fn summary(&self, value: serde_json::Value) -> Result<PathBuf> {
        let path = self.dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(path, out.as_bytes())
}

fn metrics_json(r: &MetricsReport) -> serde_json::Value {
    serde_json::to_value(r.summary()).expect("metrics serialize")
}

fn dispatch(command: Command) -> std::result::Result<PathBuf, Failure> {
    match command {
        Command::Synth(c) => synth(&Run::new(&c)?).map_err(Into::into),
        Command::Pretrain(c) => pretrain_cmd(&Run::new(&c)?).map_err(Into::into),
        Command::MetaTrain(w) => {
            let run = Run::new(&w.common)?;
            let ck = run.checkpoint(&w.checkpoint)?;
            meta_cmd(&run, ck).map_err(Into::into)
        }
        Command::Eval(w) => {
            let run = Run::new(&w.common)?;
            let ck = run.checkpoint(&w.checkpoint)?;
            eval_cmd(&run, ck).map_err(Into::into)
        }
        Command::Ablate(w) => {
            let run = Run::new(&w.common)?;
            let ck = match w.checkpoint {
                Some(_) => Some(run.checkpoint(&w.checkpoint)?),
                None => None,
            };
            ablate_cmd(&run, ck).map_err(Into::into)
        }
        Command::Analyze(w) => {
            let run = Run::new(&w.common)?;
            let ck = run.checkpoint(&w.checkpoint)?;
            analyze_cmd(&run, ck).map_err(Into::into)
        }
        Command::ExportFeatures { inner, episode } => {
            let run = Run::new(&inner.common)?;
            let ck = run.checkpoint(&inner.checkpoint)?;
            export_cmd(&run, ck, episode).map_err(Into::into)
        }
    }
}

fn split_counts(splits: &DatasetSplits) -> serde_json::Value {
    let counts: serde_json::Map<String, serde_json::Value> = Split::ALL
        .iter()
        .map(|&s| (s.as_str().to_string(), json!(splits.split(s).len())))
        .collect();
    serde_json::Value::Object(counts)
}

fn synth(run: &Run) -> Result<PathBuf> {
    if !matches!(run.config.dataset, DatasetSource::Synthetic(_)) {
        return Err(Error::Invalid("synth needs a synthetic dataset config".into()));
    }
    let splits = run.config.load_dataset()?;
    let manifest = run.dir.join("dataset/manifest.json");
    save_dataset(&splits, &manifest, Dtype::F64)?;
    write_file(&run.dir.join("losses.csv"), b"step,loss\n")?;
    run.summary(json!({
        "command": "synth",
        "manifest": manifest,
        "samples": split_counts(&splits),
    }))
}

/// Pretrained parameters under the run's seeds.
fn pretrained(run: &Run, net: &Networks, splits: &DatasetSplits) -> Result<(ParamStore, crate::train::PretrainReport)> {
    let seeds = run.config.seeds;
    let mut params = net.init_params(&mut ChaCha8Rng::seed_from_u64(seeds.init));
    let report = pretrain(net, &mut params, splits, &run.config.train.pretrain, seeds.init.wrapping_add(1))?;
    Ok((params, report))
}

fn pretrain_cmd(run: &Run) -> Result<PathBuf> {
    let splits = run.config.load_dataset()?;
    let net = run.network(&splits)?;
    let (params, report) = pretrained(run, &net, &splits)?;
    let ck = run.save_checkpoint("pretrained.xtck", &params, 0, None)?;
    write_losses(&run.dir.join("losses.csv"), &report.losses)?;
    run.summary(json!({
        "command": "pretrain",
        "checkpoint": ck,
        "steps": report.steps,
        "final_loss": report.losses.last(),
        "base_val_accuracy": report.val_accuracy,
    }))
}

fn meta_cmd(run: &Run, ck: Checkpoint) -> Result<PathBuf> {
    let splits = run.config.load_dataset()?;
    let net = run.network(&splits)?;
    let mut params = ck.params;
    let report = meta_train(&net, &mut params, &splits, run.config.stages, &run.config.train.meta, run.config.seeds.episode)?;
    let episodes = ck.episodes + report.losses.len() as u64;
    let path = run.save_checkpoint("meta.xtck", &params, episodes, Some(report.optimizer.clone()))?;
    write_losses(&run.dir.join("losses.csv"), &report.losses)?;
    run.summary(json!({
        "command": "meta-train",
        "checkpoint": path,
        "stages": run.config.stages,
        "episodes": report.losses.len(),
        "val_history": report.val_history,
        "best_episode": report.best_episode,
    }))
}

fn eval_seed(run: &Run) -> u64 {
    run.config.seeds.episode.wrapping_add(1)
}

fn eval_cmd(run: &Run, ck: Checkpoint) -> Result<PathBuf> {
    let splits = run.config.load_dataset()?;
    let net = run.network(&splits)?;
    let report = evaluate(&net, &ck.params, &splits, run.config.stages, Phase::Test, &run.config.train.eval, eval_seed(run))?;
    report.write_csv(&run.dir.join("episodes.csv"))?;
    run.summary(json!({
        "command": "eval",
        "stages": run.config.stages,
        "metrics": metrics_json(&report),
    }))
}

fn ablate_cmd(run: &Run, ck: Option<Checkpoint>) -> Result<PathBuf> {
    let splits = run.config.load_dataset()?;
    let net = run.network(&splits)?;
    let params = match ck {
        Some(ck) => ck.params,
        None => {
            let (params, _) = pretrained(run, &net, &splits)?;
            run.save_checkpoint("pretrained.xtck", &params, 0, None)?;
            params
        }
    };
    let stage_sets = (0..=run.config.stages.count()).map(Stages::prefix).collect::<Result<Vec<_>>>()?;
    let results = run_ablation(&net, &params, &splits, &stage_sets, &run.config.train, run.config.seeds.episode)?;
    let mut table = String::from("stage,joint,joint_ci95,base_ind,novel_ind,delta_a,delta_b,delta\n");
    let mut stages = Vec::new();
    for r in &results {
        let m = &r.report;
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.label, m.joint_accuracy.mean, m.joint_accuracy.ci95, m.base_individual.mean, m.novel_individual.mean, m.delta_a, m.delta_b, m.delta
        ));
        m.write_csv(&run.dir.join(format!("episodes-{}.csv", r.label.trim_start_matches('+'))))?;
        stages.push(json!({
            "label": r.label,
            "stages": r.stages,
            "best_episode": r.meta.as_ref().and_then(|m| m.best_episode),
            "metrics": metrics_json(m),
        }));
    }
    write_file(&run.dir.join("ablation.csv"), table.as_bytes())?;
    run.summary(json!({ "command": "ablate", "results": stages }))
}

fn analysis_seed(run: &Run) -> u64 {
    run.config.seeds.episode.wrapping_add(2)
}

fn analyze_cmd(run: &Run, ck: Checkpoint) -> Result<PathBuf> {
    let splits = run.config.load_dataset()?;
    let net = run.network(&splits)?;
    let cfg = &run.config.analysis;
    let seed = analysis_seed(run);
    // backbone and base weights are frozen by meta-training, so the same
    // parameters also give the Imprint baseline
    let base = analyze(&net, &ck.params, &splits, Stages::none(), SseMode::BaseOnly, cfg, seed)?;
    let tar = analyze(&net, &ck.params, &splits, run.config.stages, SseMode::Tar, cfg, seed)?;
    let reductions = tar.reductions_from(&base);
    write_tables(&run.dir, &[("imprint".into(), base.clone()), ("tar".into(), tar.clone())])?;
    let mut rows = String::from("method,label,novel,sse,nsse\n");
    for (name, r) in [("imprint", &base), ("tar", &tar)] {
        for c in &r.clusters.classes {
            rows.push_str(&format!("{name},{},{},{},{}\n", c.label, c.novel, c.sse, c.nsse));
        }
    }
    write_file(&run.dir.join("classes.csv"), rows.as_bytes())?;
    let brief = |r: &crate::analysis::AnalysisReport| {
        json!({
            "stages": r.stages,
            "mode": r.mode,
            "sse": { "base": r.clusters.base.sse, "novel": r.clusters.novel.sse },
            "nsse": { "base": r.clusters.base.nsse, "novel": r.clusters.novel.nsse },
            "entropy": r.entropy,
        })
    };
    run.summary(json!({
        "command": "analyze",
        "imprint": brief(&base),
        "tar": brief(&tar),
        "reductions": reductions,
    }))
}

fn export_cmd(run: &Run, ck: Checkpoint, episode: usize) -> Result<PathBuf> {
    let splits = run.config.load_dataset()?;
    let net = run.network(&splits)?;
    let spec = run.config.analysis.episode_spec(net.d());
    let seed = episode_seeds(analysis_seed(run), episode + 1)[episode];
    let ep = sample_episode(&splits, Phase::Test, &spec, seed)?;
    let pipe = Pipeline::new(&net, run.config.stages)?;
    let state = pipe.process_support(&ck.params, &splits, &ep)?;
    let dir = run.dir.join("features");
    let index = export_features(&pipe, &ck.params, &splits, &ep, &state, &dir)?;
    let mut csv = String::from("row,label\n");
    for (i, l) in index.labels.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_file(&run.dir.join("queries.csv"), csv.as_bytes())?;
    run.summary(json!({
        "command": "export-features",
        "episode": episode,
        "episode_seed": seed,
        "directory": dir,
        "index": index,
    }))
}
