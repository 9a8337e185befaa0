use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mint_core::checkpoint::load_checkpoint;
use mint_core::data::ingest_bundle;
use mint_core::eval::{metrics_csv, rank_all, EmbeddingScorer, MetricReport, DEFAULT_KS};
use mint_core::trainer::Prepared;

fn mint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mint")).args(args).output().expect("spawn mint")
}

fn ok(args: &[&str]) -> String {
    let out = mint(args);
    assert!(
        out.status.success(),
        "mint {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_bundle(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "generate",
        "--out",
        s(&data),
        "--patients",
        "80",
        "--interactions",
        "600",
        "--threads",
        "30",
        "--stages",
        "4",
        "--seed",
        "3",
    ]);
    data
}

fn trained(dir: &Path, epochs: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let data = small_bundle(dir);
    let run = dir.join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--epochs", epochs, "--patience", "0"];
    args.extend_from_slice(extra);
    ok(&args);
    (data, run)
}

fn count_csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn generate_bladder_scale_counts_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut stdout = String::new();
    for out in [&a, &b] {
        stdout = ok(&["generate", "--out", s(out), "--patients", "296", "--interactions", "9867", "--seed", "7"]);
    }
    let stat = |name: &str| -> usize {
        let line = stdout.lines().find(|l| l.starts_with(name)).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert_eq!((stat("patients"), stat("seekers"), stat("helpers")), (296, 189, 243));
    assert_eq!(count_csv_rows(&a.join("interactions.csv")), 9867);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("meta.json")).unwrap()).unwrap();
    assert!(meta.to_string().contains("296"), "{meta}");
    for f in ["interactions.csv", "activities.csv", "meta.json", "ground_truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert!(a.join("generate.config").exists());
}

#[test]
fn generate_refuses_non_empty_directory_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_bundle(dir.path());
    let out = mint(&["generate", "--out", s(&data), "--patients", "80", "--interactions", "600"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mint(&["generate", "--out", s(&data), "--patients", "80", "--interactions", "600", "--threads", "30", "--force"]);
    assert!(out.status.success());
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = mint(&["generate", "--patients", "10"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_full_trace_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(dir.path(), "50", &[]);
    let trace = fs::read_to_string(run.join("loss_trace.csv")).unwrap();
    let mut epochs: Vec<usize> = trace.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    epochs.dedup();
    assert_eq!(epochs, (1..=50).collect::<Vec<_>>());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs_run"], 50);
    assert!(run.join("checkpoint.mint").exists());
    assert!(fs::read_to_string(run.join("train.config")).unwrap().contains("epochs = 50"));
}

#[test]
fn wo_senior_echoes_zero_beta() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(dir.path(), "2", &["--ablation", "wo_senior", "--beta", "0.5"]);
    let echo = fs::read_to_string(run.join("train.config")).unwrap();
    let beta = echo.lines().find(|l| l.starts_with("beta")).expect("beta line");
    let v: f64 = beta.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn evaluate_matches_library_and_reports_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path(), "3", &[]);
    let eval = dir.path().join("eval");
    ok(&["evaluate", "--checkpoint", s(&run), "--data", s(&data), "--out", s(&eval), "--baseline", "--plot-data"]);

    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    let per_model = 2 * DEFAULT_KS.len() + 1;
    assert_eq!(rows.len(), 2 * per_model);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",mint")).count(), per_model);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",bpr_mf")).count(), per_model);

    let ck = load_checkpoint(&run.join("checkpoint.mint")).unwrap();
    let ds = ingest_bundle(&data, Default::default()).unwrap();
    let prepared = Prepared::new(&ds, ck.split, &ck.train.model).unwrap();
    let enc = ck.model.encode(&ds.timelines);
    let e = ck.model.propagated(&enc, &prepared.ctx);
    let scorer = EmbeddingScorer::from_propagated(&e, &prepared.train_graph.roles);
    let results = rank_all(&scorer, &prepared.test_queries, &prepared.candidates).unwrap();
    let direct = metrics_csv(&[MetricReport::from_results("mint", &results, &DEFAULT_KS)]);
    for line in direct.lines().skip(1) {
        assert!(rows.contains(&line), "missing {line}");
    }

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("metrics_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_queries"], results.len());
    assert!(summary["models"]["bpr_mf"].is_object());
    assert_eq!(count_csv_rows(&eval.join("plot_k.csv")), 2 * 20);
    assert!(eval.join("plot_epochs.csv").exists());
}

#[test]
fn recommend_lists_k_helpers_by_descending_score() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path(), "2", &[]);
    let ck = load_checkpoint(&run.join("checkpoint.mint")).unwrap();
    let ds = ingest_bundle(&data, Default::default()).unwrap();
    let prepared = Prepared::new(&ds, ck.split, &ck.train.model).unwrap();
    let seeker = prepared.train_graph.roles.seekers()[0];
    let seeker_arg = seeker.0.to_string();
    let out = ok(&["recommend", "--checkpoint", s(&run), "--data", s(&data), "--seeker", &seeker_arg, "--k", "5"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "rank,helper,score,helper_seniority,seeker_seniority,helper_more_senior");
    assert_eq!(lines.len(), 6);
    let scores: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
    for l in &lines[1..] {
        assert_ne!(l.split(',').nth(1).unwrap(), seeker_arg);
    }

    let all = ok(&["recommend", "--checkpoint", s(&run), "--data", s(&data), "--seeker", &seeker_arg, "--k", "100000"]);
    assert_eq!(all.lines().count() - 1, prepared.candidates.iter().filter(|h| **h != seeker).count());

    let unknown = mint(&["recommend", "--checkpoint", s(&run), "--data", s(&data), "--seeker", "100000"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn export_writes_two_rows_per_patient_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path(), "2", &[]);
    let a = dir.path().join("emb_a.csv");
    let b = dir.path().join("emb_b.csv");
    for out in [&a, &b] {
        ok(&["export-embeddings", "--checkpoint", s(&run), "--data", s(&data), "--out", s(out)]);
    }
    let text = fs::read_to_string(&a).unwrap();
    let ck = load_checkpoint(&run.join("checkpoint.mint")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let dx = header.iter().filter(|c| c.starts_with("x_")).count();
    let dz = header.iter().filter(|c| c.starts_with("z_")).count();
    assert_eq!(header.len(), dx + dz + 2);
    assert_eq!(dz, ck.model.config.vae.z_dim);
    assert_eq!(text.lines().count() - 1, 2 * 80);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("emb_a.config").exists());
}

#[test]
fn missing_checkpoint_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_bundle(dir.path());
    let out = mint(&[
        "evaluate",
        "--checkpoint",
        s(&dir.path().join("nope")),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}
