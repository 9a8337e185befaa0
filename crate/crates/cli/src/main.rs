//! `mint` command-line tool: generate, train, evaluate, recommend and export.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;

use mint_core::baseline::train_baseline;
use mint_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mint_core::config::RunConfig;
use mint_core::data::{ingest_bundle, BundleMeta, Dataset, PatientId, META_FILE};
use mint_core::eval::{
    metrics_csv, query_set_hash, random_top1_senior_fraction, rank_all, seniority_diagnostics, sort_candidates,
    EmbeddingScorer, MetricReport, Scorer,
};
use mint_core::model::Ablation;
use mint_core::synth::{generate, report_for, write_generated};
use mint_core::trainer::{train_prepared, trace_csv, EpochRecord, Prepared};

const CHECKPOINT_FILE: &str = "checkpoint.mint";
const TRACE_FILE: &str = "loss_trace.csv";
const PLOT_MAX_K: usize = 20;
const METRICS_FILE: &str = "metrics.csv";
const SUMMARY_FILE: &str = "metrics_summary.json";

#[derive(Parser)]
#[command(name = "mint", version, about = "Seniority-aware helper recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle with a ground-truth sidecar.
    Generate(GenerateArgs),
    /// Train a model on a bundle and write a checkpoint and loss trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Evaluate(EvaluateArgs),
    /// Print the top-K helpers for one seeker.
    Recommend(RecommendArgs),
    /// Write per-patient, per-role embeddings as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    interactions: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    seniority_gap: Option<f64>,
    #[arg(long)]
    seekers: Option<usize>,
    #[arg(long)]
    helpers: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// full, w_vae or wo_senior.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file, or a training output directory holding one.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long)]
    ks: Option<String>,
    /// Expected model variant; a mismatch is an error.
    #[arg(long)]
    ablation: Option<String>,
    /// Also train and report the BPR-MF baseline.
    #[arg(long)]
    baseline: bool,
    /// Emit per-epoch and per-K series as CSV.
    #[arg(long)]
    plot_data: bool,
    /// Score the validation split instead of the test split.
    #[arg(long)]
    validation: bool,
}

#[derive(Args)]
struct RecommendArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seeker: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Time (epoch seconds) at which seniority is read; defaults to the
    /// latest timestamp in the dataset.
    #[arg(long)]
    at: Option<i64>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let diverged = error
            .chain()
            .any(|e| matches!(e.downcast_ref::<mint_core::Error>(), Some(mint_core::Error::Divergence { .. })));
        Failure {
            code: if diverged { 3 } else { 2 },
            error,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Recommend(a) => cmd_recommend(a),
        Command::ExportEmbeddings(a) => cmd_export(a),
    };
    match result.map_err(Failure::from) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

/// Defaults, then the bundle's own step count and epoch, then the config
/// file, then `--seed`.
fn base_config(common: &Common, bundle: Option<&Path>) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(meta) = bundle.map(|d| d.join(META_FILE)).filter(|p| p.exists()) {
        let text = fs::read_to_string(&meta).with_context(|| format!("reading {}", meta.display()))?;
        let meta: BundleMeta = serde_json::from_str(&text).with_context(|| format!("parsing {}", meta.display()))?;
        c.data.steps = meta.steps;
        c.data.epoch = meta.epoch;
    }
    if let Some(p) = &common.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        c.merge_text(&text)?;
    }
    if let Some(s) = common.seed {
        c.set("seed", &s.to_string())?;
    }
    Ok(c)
}

fn apply<T: ToString>(c: &mut RunConfig, key: &str, v: &Option<T>) -> Result<()> {
    if let Some(v) = v {
        c.set(key, &v.to_string())?;
    }
    Ok(())
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("output directory {} is not empty (use --force to overwrite)", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn echo_config(dir: &Path, name: &str, config: &RunConfig) -> Result<()> {
    write(&dir.join(format!("{name}.config")), &config.to_text())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut c = base_config(&a.common, None)?;
    apply(&mut c, "patients", &a.patients)?;
    apply(&mut c, "interactions", &a.interactions)?;
    apply(&mut c, "threads", &a.threads)?;
    apply(&mut c, "stages", &a.stages)?;
    apply(&mut c, "steps", &a.steps)?;
    apply(&mut c, "noise_rate", &a.noise_rate)?;
    apply(&mut c, "seniority_gap", &a.seniority_gap)?;
    apply(&mut c, "seekers", &a.seekers)?;
    apply(&mut c, "helpers", &a.helpers)?;
    prepare_out_dir(&a.out, a.force)?;
    let g = generate(&c.generator)?;
    write_generated(&a.out, &g)?;
    echo_config(&a.out, "generate", &c)?;
    let ds = g.to_dataset()?;
    let r = report_for(&ds, &g.truth);
    println!("patients      {}", ds.n_patients);
    println!("seekers       {}", ds.graph.roles.seekers().len());
    println!("helpers       {}", ds.graph.roles.helpers().len());
    println!("interactions  {}", ds.interactions.len());
    println!("activities    {}", ds.activities.len());
    println!("satisfaction  {:.4}", r.satisfaction_rate);
    println!("overlap       {:.4}", r.thread_overlap_rate);
    Ok(())
}

fn load_data(dir: &Path, c: &RunConfig) -> Result<Dataset> {
    let ds = ingest_bundle(dir, c.data.clone()).with_context(|| format!("loading bundle {}", dir.display()))?;
    for w in &ds.warnings {
        warn!("{w}");
    }
    Ok(ds)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut c = base_config(&a.common, Some(&a.data))?;
    apply(&mut c, "epochs", &a.epochs)?;
    apply(&mut c, "patience", &a.patience)?;
    apply(&mut c, "ablation", &a.ablation)?;
    apply(&mut c, "alpha", &a.alpha)?;
    apply(&mut c, "beta", &a.beta)?;
    apply(&mut c, "gamma", &a.gamma)?;
    apply(&mut c, "lambda", &a.lambda)?;
    apply(&mut c, "batch_size", &a.batch_size)?;
    apply(&mut c, "learning_rate", &a.learning_rate)?;
    if c.train.model.ablation == Ablation::WoSenior {
        c.train.weights.beta = 0.0;
    }
    c.train.validate()?;
    let ds = load_data(&a.data, &c)?;
    prepare_out_dir(&a.out, a.force)?;
    echo_config(&a.out, "train", &c)?;
    let prepared = Prepared::for_config(&ds, &c.train)?;
    let outcome = train_prepared(&ds, &prepared, &c.train)?;
    save_checkpoint(&outcome.checkpoint, &a.out.join(CHECKPOINT_FILE))?;
    let mut trace = trace_csv(&outcome.history);
    if trace.ends_with('\n') {
        trace.pop();
    }
    write(&a.out.join(TRACE_FILE), &(trace + "\n"))?;
    let summary = serde_json::json!({
        "initial": outcome.initial,
        "final": outcome.history.last(),
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
    });
    write(&a.out.join("train_summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    println!(
        "trained {} epochs, best epoch {}, loss {:.6} -> {:.6}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.initial.total,
        outcome.history.last().map_or(f64::NAN, |r| r.total)
    );
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn open_checkpoint(p: &Path) -> Result<Checkpoint> {
    let path = checkpoint_path(p);
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Ok(load_checkpoint(&path)?)
}

/// Dataset, checkpoint and shared preparation, with the checkpoint's own
/// data settings.
fn open_run(checkpoint: &Path, data: &Path, common: &Common) -> Result<(Checkpoint, Dataset, Prepared, RunConfig)> {
    let ck = open_checkpoint(checkpoint)?;
    let mut c = base_config(common, Some(data))?;
    c.train = ck.train.clone();
    let ds = load_data(data, &c)?;
    if ds.n_patients != ck.model.n_patients || ds.n_threads > ck.model.n_threads || ds.n_stages > ck.model.n_stages {
        bail!(
            "dataset ({} patients) does not match the checkpoint ({} patients)",
            ds.n_patients,
            ck.model.n_patients
        );
    }
    let prepared = Prepared::new(&ds, ck.split, &ck.train.model)?;
    Ok((ck, ds, prepared, c))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (ck, ds, prepared, mut c) = open_run(&a.checkpoint, &a.data, &a.common)?;
    if let Some(ab) = &a.ablation {
        ck.expect_variant(ab.parse()?)?;
    }
    apply(&mut c, "ks", &a.ks)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    echo_config(&a.out, "evaluate", &c)?;

    let queries = if a.validation { &prepared.val_queries } else { &prepared.test_queries };
    if queries.is_empty() {
        bail!("no evaluable queries in the held-out split");
    }
    let model = &ck.model;
    let enc = model.encode(&ds.timelines);
    let e = model.propagated(&enc, &prepared.ctx);
    let scorer = EmbeddingScorer::from_propagated(&e, &prepared.train_graph.roles);
    let name = match model.config.ablation {
        Ablation::Full => "mint".to_string(),
        other => format!("mint_{other}"),
    };
    let mut ranked = vec![(name, rank_all(&scorer, queries, &prepared.candidates)?)];
    let mut baseline_losses = None;
    if a.baseline {
        let b = train_baseline(&ds, &prepared, &ck.train)?;
        ranked.push(("bpr_mf".to_string(), rank_all(&b.model, queries, &prepared.candidates)?));
        baseline_losses = Some(b.losses);
    }
    let reports: Vec<MetricReport> = ranked
        .iter()
        .map(|(n, r)| MetricReport::from_results(n, r, &c.ks))
        .collect();
    write(&a.out.join(METRICS_FILE), &metrics_csv(&reports))?;

    let results = &ranked[0].1;
    let random = MetricReport::random_reference(results.len(), prepared.candidates.len(), &c.ks);
    let models: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|r| (r.model.clone(), serde_json::json!(r.summary())))
        .collect();
    let summary = serde_json::json!({
        "split": if a.validation { "validation" } else { "test" },
        "models": models,
        "random": random.summary(),
        "n_queries": results.len(),
        "n_candidates": prepared.candidates.len(),
        "query_set_hash": query_set_hash(queries, &prepared.candidates),
        "seniority": seniority_diagnostics(&enc, &ds.timelines, results),
        "random_top1_senior_fraction": random_top1_senior_fraction(queries, &prepared.candidates, &ds.timelines),
    });
    write(&a.out.join(SUMMARY_FILE), &(serde_json::to_string_pretty(&summary)? + "\n"))?;

    if a.plot_data {
        let mut epochs: Vec<EpochRecord> = ck.initial.into_iter().collect();
        epochs.extend(ck.history.iter().copied());
        let mut s = trace_csv(&epochs);
        for r in &epochs {
            if let Some(v) = r.val_ndcg {
                s.push_str(&format!("{},val_ndcg,{v}\n", r.epoch));
            }
        }
        if let Some(losses) = &baseline_losses {
            for (i, l) in losses.iter().enumerate() {
                s.push_str(&format!("{},bpr_mf_loss,{l}\n", i + 1));
            }
        }
        write(&a.out.join("plot_epochs.csv"), &s)?;

        let ks: Vec<usize> = (1..=PLOT_MAX_K).collect();
        let mut s = String::from("model,K,NDCG,HIT\n");
        for (n, r) in &ranked {
            let full = MetricReport::from_results(n, r, &ks);
            for k in &ks {
                s.push_str(&format!("{n},{k},{},{}\n", full.ndcg[k], full.hit[k]));
            }
        }
        write(&a.out.join("plot_k.csv"), &s)?;
    }
    for r in &reports {
        let line: Vec<String> = r.summary().iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("{:<16} {}", r.model, line.join(" "));
    }
    Ok(())
}

fn cmd_recommend(a: RecommendArgs) -> Result<()> {
    let (ck, ds, prepared, _) = open_run(&a.checkpoint, &a.data, &a.common)?;
    let seeker = PatientId(a.seeker);
    if a.seeker >= ds.n_patients {
        bail!("unknown seeker {}", a.seeker);
    }
    let enc = ck.model.encode(&ds.timelines);
    let e = ck.model.propagated(&enc, &prepared.ctx);
    let scorer = EmbeddingScorer::from_propagated(&e, &prepared.train_graph.roles);
    if !scorer.knows_seeker(seeker) {
        bail!("seeker {} has no training interactions", a.seeker);
    }
    let mut scored: Vec<(PatientId, f64)> = prepared
        .candidates
        .iter()
        .filter(|h| **h != seeker)
        .map(|&h| (h, scorer.score(seeker, h)))
        .collect();
    sort_candidates(&mut scored);
    if a.k > scored.len() {
        warn!("k = {} exceeds the {} available helpers; listing all", a.k, scored.len());
    }
    let at = a
        .at
        .unwrap_or_else(|| ds.activities.iter().map(|e| e.timestamp).chain(ds.interactions.iter().map(|i| i.timestamp)).max().unwrap_or(0));
    let s_t = ds.timelines[seeker.0].seniority_at_time(at);
    println!("rank,helper,score,helper_seniority,seeker_seniority,helper_more_senior");
    for (i, (h, score)) in scored.iter().take(a.k).enumerate() {
        let o_t = ds.timelines[h.0].seniority_at_time(at);
        println!("{},{},{score:.6},{o_t:.6},{s_t:.6},{}", i + 1, h, o_t > s_t);
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let (ck, ds, prepared, c) = open_run(&a.checkpoint, &a.data, &a.common)?;
    let enc = ck.model.encode(&ds.timelines);
    let e = ck.model.propagated(&enc, &prepared.ctx);
    let z = mint_core::eval::final_z(&enc, &ds.timelines);
    let m = ds.n_patients;
    let dx = e.ncols();
    let dz = z.ncols();
    let mut out = String::from("patient,role");
    for i in 0..dx {
        out.push_str(&format!(",x_{i}"));
    }
    for i in 0..dz {
        out.push_str(&format!(",z_{i}"));
    }
    out.push('\n');
    for p in 0..m {
        for (role, row) in [("seeker", p), ("helper", m + p)] {
            out.push_str(&format!("{p},{role}"));
            for v in e.row(row) {
                out.push_str(&format!(",{v}"));
            }
            for v in z.row(p) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write(&a.out, &out)?;
    let echo = a.out.with_extension("config");
    write(&echo, &c.to_text())?;
    if dx + dz == 0 {
        return Err(anyhow!("model has no embedding columns"));
    }
    Ok(())
}
