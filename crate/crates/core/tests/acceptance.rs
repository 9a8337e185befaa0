//! Acceptance suite. Each test prints one `PASS`/`FAIL` line and asserts it.
//!
//! Run with `cargo test -p mint-core --test acceptance -- --nocapture`.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mint_core::autodiff::{Mat, Tape};
use mint_core::baseline::train_baseline;
use mint_core::checkpoint::{Checkpoint, RngState};
use mint_core::data::PatientId;
use mint_core::eval::{
    hit_at_k, mean_hinge_violation, metrics_csv, mrr, ndcg_at_k, rank_all, rank_helpers, EmbeddingScorer, MetricReport, Query,
    RankingResult, Scorer, DEFAULT_KS,
};
use mint_core::graph_prop::{normalize_symmetric, propagate, LayerAverage};
use mint_core::model::{Ablation, BatchPair, MintModel, ModelConfig, Noise};
use mint_core::nn::Params;
use mint_core::objectives::{monotonic_regularizer, LossComponents, LossWeights};
use mint_core::sparse::CsrMatrix;
use mint_core::synth::{generate, GeneratorConfig};
use mint_core::trainer::{batch_patients, train_prepared, Prepared, TrainConfig};
use mint_core::vae::{kl_diag_gaussians, GaussianParams, VaeConfig};

fn report(name: &str, ok: bool, detail: String) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

// ---------------------------------------------------------------------------
// gradient check

fn tiny_setup(seed: u64) -> (mint_core::data::Dataset, Prepared, ModelConfig, Vec<BatchPair>) {
    let g = generate(&GeneratorConfig {
        n_patients: 20,
        n_threads: 5,
        n_stages: 3,
        n_interactions: 60,
        steps: 4,
        noise_rate: 0.2,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let ds = g.to_dataset().unwrap();
    let model_cfg = ModelConfig {
        vae: VaeConfig {
            thread_dim: 2,
            stage_dim: 2,
            x_dim: 3,
            z_dim: 2,
            hidden: 3,
            decoder_hidden: 3,
            graph_conditioning: true,
        },
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        model: model_cfg.clone(),
        ..TrainConfig::default()
    };
    let prepared = Prepared::for_config(&ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<BatchPair> = prepared
        .train_graph
        .pairs
        .iter()
        .take(6)
        .map(|p| {
            let neg = loop {
                let h = prepared.candidates[rng.random_range(0..prepared.candidates.len())];
                if h != p.helper {
                    break h;
                }
            };
            BatchPair {
                seeker: p.seeker,
                pos: p.helper,
                neg,
                seeker_step: p.seeker_step,
                helper_step: p.helper_step,
            }
        })
        .collect();
    (ds, prepared, model_cfg, pairs)
}

fn components_at(
    model: &MintModel,
    params: &Params,
    ds: &mint_core::data::Dataset,
    prepared: &Prepared,
    pairs: &[BatchPair],
    noise: &Noise,
) -> [f64; 5] {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let patients = batch_patients(pairs);
    let loss = model.batch_objective(
        &mut tape,
        &bound,
        &prepared.ctx,
        &ds.timelines,
        &patients,
        pairs,
        noise,
        &LossWeights::default(),
    );
    loss.components(&tape).values()
}

#[test]
fn gradient_check() {
    let start = Instant::now();
    let h = 1e-6;
    let mut worst = [0.0f64; 5];
    for point in 0..10u64 {
        let (ds, prepared, cfg, pairs) = tiny_setup(100 + point);
        let mut rng = ChaCha8Rng::seed_from_u64(point);
        let model = MintModel::new(cfg.clone(), ds.n_patients, ds.n_threads, ds.n_stages, &mut rng);
        let patients = batch_patients(&pairs);
        let noise = Noise::draw(&mut rng, ds.n_patients, patients.len(), ds.config.steps, &cfg.vae);

        let mut analytic: Vec<Vec<f64>> = Vec::new();
        for name in LossComponents::NAMES {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let loss = model.batch_objective(
                &mut tape,
                &bound,
                &prepared.ctx,
                &ds.timelines,
                &patients,
                &pairs,
                &noise,
                &LossWeights::default(),
            );
            let g = tape.backward(loss.component(name));
            let flat: Vec<f64> = model
                .params
                .iter()
                .zip(bound.vars())
                .flat_map(|((_, p), v)| g.get_or_zeros(*v, p.dim()).into_iter().collect::<Vec<_>>())
                .collect();
            analytic.push(flat);
        }

        let mut numeric = vec![Vec::new(); 5];
        let names: Vec<String> = model.params.names().to_vec();
        for name in &names {
            let n = model.params.get(name).unwrap().len();
            for i in 0..n {
                let mut plus = model.params.clone();
                plus.get_mut(name).unwrap().as_slice_mut().unwrap()[i] += h;
                let mut minus = model.params.clone();
                minus.get_mut(name).unwrap().as_slice_mut().unwrap()[i] -= h;
                let fp = components_at(&model, &plus, &ds, &prepared, &pairs, &noise);
                let fm = components_at(&model, &minus, &ds, &prepared, &pairs, &noise);
                for c in 0..5 {
                    numeric[c].push((fp[c] - fm[c]) / (2.0 * h));
                }
            }
        }
        for c in 0..5 {
            let diff: f64 = analytic[c].iter().zip(&numeric[c]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let na: f64 = analytic[c].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nn: f64 = numeric[c].iter().map(|a| a * a).sum::<f64>().sqrt();
            let rel = if na.max(nn) == 0.0 { 0.0 } else { diff / na.max(nn) };
            worst[c] = worst[c].max(rel);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst.iter().all(|w| *w < 1e-4) && secs < 120.0;
    let detail = LossComponents::NAMES
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report("gradient check", ok, format!("worst relative error {detail} (limit 1e-4), {secs:.1}s"));
}

// ---------------------------------------------------------------------------
// propagation and metric oracles

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &(a, b) in edges {
            for (p, q) in [(a, b), (b, a)] {
                if p == v && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    seen.iter().all(|s| *s)
}

fn dense_propagation(n: usize, edges: &[(usize, usize)], x: &Mat, layers: usize, weight: f64) -> Mat {
    let mut a = Mat::zeros((n, n));
    for &(p, q) in edges {
        a[[p, q]] = 1.0;
        a[[q, p]] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let norm = Mat::from_shape_fn((n, n), |(i, j)| {
        if a[[i, j]] == 0.0 {
            0.0
        } else {
            a[[i, j]] / (deg[i] * deg[j]).sqrt()
        }
    });
    let mut power = Mat::eye(n);
    let mut total = Mat::zeros(x.dim());
    for _ in 0..=layers {
        total += &power.dot(x);
        power = norm.dot(&power);
    }
    total * weight
}

#[test]
fn oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut graphs = 0;
    let mut worst: f64 = 0.0;
    for n in 1..=5usize {
        let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        for mask in 0u32..(1 << all.len()) {
            let edges: Vec<(usize, usize)> =
                all.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, e)| *e).collect();
            if !connected(n, &edges) {
                continue;
            }
            graphs += 1;
            let triplets: Vec<(usize, usize, f64)> =
                edges.iter().flat_map(|&(p, q)| [(p, q, 1.0), (q, p, 1.0)]).collect();
            let norm = normalize_symmetric(&CsrMatrix::from_triplets(n, n, &triplets));
            let x = Mat::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
            for layers in 0..=3 {
                for avg in [LayerAverage::Uniform, LayerAverage::OneOverL] {
                    let got = propagate(&x, &norm, layers, avg).unwrap().averaged;
                    let want = dense_propagation(n, &edges, &x, layers, avg.weight(layers));
                    for (a, b) in got.iter().zip(want.iter()) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
    }

    struct Table(Vec<f64>);
    impl Scorer for Table {
        fn knows_seeker(&self, _: PatientId) -> bool {
            true
        }
        fn score(&self, _: PatientId, h: PatientId) -> f64 {
            self.0[h.0]
        }
    }
    let mut metric_worst: f64 = 0.0;
    let mut rank_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        let n_queries = rng.random_range(1..20);
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        let table = Table(scores.clone());
        let candidates: Vec<PatientId> = (0..n).map(PatientId).collect();
        let mut results: Vec<RankingResult> = Vec::new();
        let mut brute_ranks = Vec::new();
        for _ in 0..n_queries {
            let target = rng.random_range(0..n);
            let q = Query {
                seeker: PatientId(n),
                helper: PatientId(target),
                seeker_step: 0,
                helper_step: 0,
                timestamp: 0,
            };
            results.push(rank_helpers(&table, q, &candidates).unwrap());
            let ahead = (0..n)
                .filter(|&c| scores[c] > scores[target] || (scores[c] == scores[target] && c < target))
                .count();
            brute_ranks.push(ahead + 1);
        }
        for (r, b) in results.iter().zip(&brute_ranks) {
            if r.rank != *b {
                rank_mismatch += 1;
            }
        }
        let nq = brute_ranks.len() as f64;
        let b_mrr = brute_ranks.iter().map(|r| 1.0 / *r as f64).sum::<f64>() / nq;
        metric_worst = metric_worst.max((mrr(&results) - b_mrr).abs());
        for k in [1, 3, 5, 10, 20] {
            let b_ndcg = brute_ranks
                .iter()
                .map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 })
                .sum::<f64>()
                / nq;
            let b_hit = brute_ranks.iter().filter(|&&r| r <= k).count() as f64 / nq;
            metric_worst = metric_worst.max((ndcg_at_k(&results, k) - b_ndcg).abs());
            metric_worst = metric_worst.max((hit_at_k(&results, k) - b_hit).abs());
        }
    }
    let ok = worst <= 1e-12 && metric_worst <= 1e-12 && rank_mismatch == 0;
    report(
        "oracle equivalence",
        ok,
        format!(
            "{graphs} connected graphs, max propagation error {worst:.1e}; 100 metric instances, \
             {rank_mismatch} rank mismatches, max metric error {metric_worst:.1e} (limit 1e-12)"
        ),
    );
}

// ---------------------------------------------------------------------------
// closed-form KL against Monte Carlo

#[test]
fn kl_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples = 1_000_000;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let dim = rng.random_range(1..=4);
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| Array1::from_shape_fn(dim, |_| rng.random_range(lo..hi));
        let q = GaussianParams {
            mu: draw(&mut rng, -1.0, 1.0),
            log_sigma: draw(&mut rng, -0.5, 0.5),
        };
        let p = GaussianParams {
            mu: draw(&mut rng, -1.0, 1.0),
            log_sigma: draw(&mut rng, -0.5, 0.5),
        };
        let closed = kl_diag_gaussians(&q, &p);
        let (sq, sp) = (q.sigma(), p.sigma());
        let mut total = 0.0;
        for _ in 0..samples {
            let mut lq = 0.0;
            let mut lp = 0.0;
            for i in 0..dim {
                let e: f64 = StandardNormal.sample(&mut rng);
                let v = q.mu[i] + sq[i] * e;
                lq += -0.5 * e * e - q.log_sigma[i];
                let d = (v - p.mu[i]) / sp[i];
                lp += -0.5 * d * d - p.log_sigma[i];
            }
            total += lq - lp;
        }
        let mc = total / samples as f64;
        worst = worst.max((mc - closed).abs() / closed);
    }
    report(
        "KL closed form vs Monte Carlo",
        worst < 0.01,
        format!("20 pairs, 1e6 samples each, worst relative gap {:.3}% (limit 1%)", worst * 100.0),
    );
}

// ---------------------------------------------------------------------------
// monotonic regularizer sign patterns

#[test]
fn monotonic_sign_patterns() {
    let signs = [-1.0, 0.0, 1.0];
    let mut cases = 0;
    let mut wrong = 0;
    for &ds1 in &signs {
        for &ds2 in &signs {
            let seniority = vec![vec![0.5, 0.5 + 0.2 * ds1, 0.5 + 0.2 * ds1 + 0.3 * ds2]];
            for pattern in 0..81usize {
                // per (dimension, transition) sign of the z change
                let dz: Vec<f64> = (0..4).map(|j| signs[pattern / 3usize.pow(j) % 3]).collect();
                let mut z = Mat::zeros((3, 2));
                for i in 0..2 {
                    z[[1, i]] = z[[0, i]] + 0.7 * dz[2 * i];
                    z[[2, i]] = z[[1, i]] + 0.4 * dz[2 * i + 1];
                }
                let violated = (0..2).any(|i| ds1 * dz[2 * i] < 0.0 || ds2 * dz[2 * i + 1] < 0.0);
                let r = monotonic_regularizer(&[z], &seniority, &[vec![true; 3]]);
                cases += 1;
                if (violated && r <= 0.0) || (!violated && r != 0.0) {
                    wrong += 1;
                }
            }
        }
    }
    report(
        "monotonic regularizer sign patterns",
        wrong == 0,
        format!("{cases} patterns (2 dimensions, 3 steps), {wrong} misclassified"),
    );
}

// ---------------------------------------------------------------------------
// end-to-end runs shared by the learning and seniority criteria

const E2E_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const E2E_EPOCHS: usize = 200;

#[derive(Debug, Clone)]
struct SeedRun {
    mint_ndcg: f64,
    mint_hit: f64,
    null_hit: f64,
    bpr_ndcg: f64,
    initial_loss: f64,
    final_loss: f64,
    violation_init: f64,
    violation_full: f64,
    violation_wo: f64,
    best_full: usize,
    best_wo: usize,
}

struct E2e {
    runs: Vec<SeedRun>,
    seconds: f64,
}

fn e2e_bundle(seed: u64) -> mint_core::data::Dataset {
    generate(&GeneratorConfig {
        n_patients: 500,
        n_interactions: 5000,
        noise_rate: 0.05,
        steps: 10,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
    .to_dataset()
    .unwrap()
}

fn evaluate(model: &MintModel, ds: &mint_core::data::Dataset, prepared: &Prepared, name: &str) -> (MetricReport, f64) {
    let enc = model.encode(&ds.timelines);
    let e = model.propagated(&enc, &prepared.ctx);
    let scorer = EmbeddingScorer::from_propagated(&e, &prepared.train_graph.roles);
    let results = rank_all(&scorer, &prepared.test_queries, &prepared.candidates).unwrap();
    (
        MetricReport::from_results(name, &results, &DEFAULT_KS),
        mean_hinge_violation(&enc, &prepared.test_queries),
    )
}

fn run_seed(seed: u64) -> SeedRun {
    let ds = e2e_bundle(seed);
    let cfg = TrainConfig {
        epochs: E2E_EPOCHS,
        seed,
        ..TrainConfig::default()
    };
    let prepared = Prepared::for_config(&ds, &cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = MintModel::new(cfg.model.clone(), ds.n_patients, ds.n_threads, ds.n_stages, &mut rng);
    let (_, violation_init) = evaluate(&init, &ds, &prepared, "init");

    let full = train_prepared(&ds, &prepared, &cfg).unwrap();
    let (full_report, violation_full) = evaluate(&full.model, &ds, &prepared, "mint");

    let mut wo_cfg = cfg.clone();
    wo_cfg.model.ablation = Ablation::WoSenior;
    let wo = train_prepared(&ds, &prepared, &wo_cfg).unwrap();
    let (_, violation_wo) = evaluate(&wo.model, &ds, &prepared, "mint_wo_senior");

    let b = train_baseline(&ds, &prepared, &cfg).unwrap();
    let b_results = rank_all(&b.model, &prepared.test_queries, &prepared.candidates).unwrap();
    let null = MetricReport::random_reference(b_results.len(), prepared.candidates.len(), &DEFAULT_KS);

    SeedRun {
        mint_ndcg: full_report.ndcg[&10],
        mint_hit: full_report.hit[&10],
        null_hit: null.hit[&10],
        bpr_ndcg: ndcg_at_k(&b_results, 10),
        initial_loss: full.initial.total,
        final_loss: full.history.last().map_or(f64::NAN, |r| r.total),
        violation_init,
        violation_full,
        violation_wo,
        best_full: full.best_epoch,
        best_wo: wo.best_epoch,
    }
}

fn e2e() -> &'static E2e {
    static CELL: OnceLock<E2e> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(E2E_SEEDS.len());
        let mut runs = Vec::new();
        for chunk in E2E_SEEDS.chunks(workers) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || run_seed(seed))).collect();
                runs.extend(handles.into_iter().map(|h| h.join().expect("seed run")));
            });
        }
        E2e {
            runs,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn end_to_end_learning_signal() {
    let e = e2e();
    let r = &e.runs;
    let hit = mean(r.iter().map(|s| s.mint_hit));
    let null = mean(r.iter().map(|s| s.null_hit));
    let ndcg = mean(r.iter().map(|s| s.mint_ndcg));
    let bpr = mean(r.iter().map(|s| s.bpr_ndcg));
    let loss_down = r.iter().all(|s| s.final_loss < s.initial_loss);
    for s in r {
        println!(
            "    seed run: NDCG@10 mint {:.4} bpr_mf {:.4}; HIT@10 {:.4} null {:.4}; loss {:.4} -> {:.4}",
            s.mint_ndcg, s.bpr_ndcg, s.mint_hit, s.null_hit, s.initial_loss, s.final_loss
        );
    }
    let a = hit >= 2.0 * null;
    let b = ndcg >= bpr;
    let c = loss_down;
    println!("[{}] learning signal / HIT@10 vs null: {hit:.4} vs 2 x {null:.4}", if a { "PASS" } else { "FAIL" });
    println!("[{}] learning signal / NDCG@10 vs BPR-MF: {ndcg:.4} vs {bpr:.4}", if b { "PASS" } else { "FAIL" });
    println!("[{}] learning signal / final loss below initial on every seed", if c { "PASS" } else { "FAIL" });
    report(
        "end-to-end learning signal",
        a && b && c,
        format!("5 seeds, {E2E_EPOCHS} max epochs, {:.0}s wall clock", e.seconds),
    );
}

#[test]
fn seniority_behavior() {
    let r = &e2e().runs;
    let init = mean(r.iter().map(|s| s.violation_init));
    let full = mean(r.iter().map(|s| s.violation_full));
    let wo = mean(r.iter().map(|s| s.violation_wo));
    for s in r {
        println!(
            "    seed run: violation init {:.4} full {:.4} (best epoch {}) wo_senior {:.4} (best epoch {})",
            s.violation_init, s.violation_full, s.best_full, s.violation_wo, s.best_wo
        );
    }
    let halved = full <= 0.5 * init;
    let ablation = wo > full;
    println!("[{}] seniority / violation {full:.5} <= 0.5 x init {init:.5}", if halved { "PASS" } else { "FAIL" });
    println!("[{}] seniority / wo_senior violation {wo:.5} > full {full:.5}", if ablation { "PASS" } else { "FAIL" });
    report(
        "seniority behavior",
        halved && ablation,
        "mean hinge violation of held-out pairs, 5 seeds".into(),
    );
}

// ---------------------------------------------------------------------------
// determinism and persistence

#[test]
fn determinism_and_persistence() {
    let ds = generate(&GeneratorConfig {
        n_patients: 60,
        n_threads: 30,
        n_interactions: 400,
        seed: 3,
        ..GeneratorConfig::default()
    })
    .unwrap()
    .to_dataset()
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let prepared = Prepared::for_config(&ds, &cfg).unwrap();
    let a = train_prepared(&ds, &prepared, &cfg).unwrap();
    let b = train_prepared(&ds, &prepared, &cfg).unwrap();
    let same_trace = a.initial == b.initial && a.history == b.history;

    let bytes = a.checkpoint.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<BatchPair> = mint_core::trainer::epoch_batches(&prepared.train_graph.pairs, &prepared, 32, &mut rng)
        .remove(0);
    let patients = batch_patients(&pairs);
    let noise = Noise::draw(&mut rng, ds.n_patients, patients.len(), ds.config.steps, &cfg.model.vae);
    let before = components_at(&a.checkpoint.model, &a.checkpoint.model.params, &ds, &prepared, &pairs, &noise);
    let after = components_at(&back.model, &back.model.params, &ds, &prepared, &pairs, &noise);
    let bit_identical = before.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits())
        && a.checkpoint.model.encode(&ds.timelines) == back.model.encode(&ds.timelines);
    let rng_same = RngState::capture(&back.rng.restore()) == a.checkpoint.rng;
    report(
        "determinism and persistence",
        same_trace && bit_identical && rng_same,
        format!("identical traces {same_trace}, bit-identical forward after reload {bit_identical}, rng state {rng_same}"),
    );
}

// ---------------------------------------------------------------------------
// ablation harness

#[test]
fn ablation_harness() {
    let ds = generate(&GeneratorConfig {
        n_patients: 80,
        n_threads: 40,
        n_interactions: 600,
        noise_rate: 0.05,
        seed: 5,
        ..GeneratorConfig::default()
    })
    .unwrap()
    .to_dataset()
    .unwrap();
    let mut schemas = Vec::new();
    for ablation in [Ablation::Full, Ablation::WVae, Ablation::WoSenior] {
        let mut cfg = TrainConfig {
            epochs: 2,
            seed: 1,
            ..TrainConfig::default()
        };
        cfg.model.ablation = ablation;
        let prepared = Prepared::for_config(&ds, &cfg).unwrap();
        let out = train_prepared(&ds, &prepared, &cfg).unwrap();
        let (rep, _) = evaluate(&out.model, &ds, &prepared, &ablation.to_string());
        let keys: BTreeSet<String> = rep.summary().keys().cloned().collect();
        let csv = metrics_csv(&[rep]);
        let columns: Vec<String> = csv
            .lines()
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{}", f[0], f[1])
            })
            .collect();
        let finite = out.history.iter().all(|r| r.total.is_finite());
        schemas.push((ablation, keys, columns, finite));
    }
    let same = schemas.windows(2).all(|w| w[0].1 == w[1].1 && w[0].2 == w[1].2);
    let finite = schemas.iter().all(|s| s.3);
    report(
        "ablation harness",
        same && finite,
        format!(
            "full, w_vae, wo_senior trained and evaluated; schema {:?}",
            schemas[0].1.iter().collect::<Vec<_>>()
        ),
    );
}
