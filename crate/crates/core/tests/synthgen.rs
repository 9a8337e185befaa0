use std::collections::BTreeSet;

use mint_core::data::PatientId;
use mint_core::eval::{sort_candidates, EmbeddingScorer, Scorer};
use mint_core::synth::{generate, report_for, GeneratorConfig};
use mint_core::trainer::{train_prepared, Prepared, TrainConfig};

#[test]
fn breast_scale_graph_counts() {
    let g = generate(&GeneratorConfig {
        n_patients: 3948,
        n_interactions: 16360,
        n_threads: 600,
        n_seekers: Some(719),
        n_helpers: Some(3827),
        seniority_gap: 0.02,
        seed: 2,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let ds = g.to_dataset().unwrap();
    assert_eq!(ds.n_patients, 3948);
    assert_eq!(ds.interactions.len(), 16360);
    assert_eq!(ds.graph.pairs.len(), 16360);
    assert_eq!(ds.graph.roles.seekers().len(), 719);
    assert_eq!(ds.graph.roles.helpers().len(), 3827);
}

#[test]
fn bladder_scale_pools_by_default() {
    let g = generate(&GeneratorConfig {
        n_patients: 296,
        n_interactions: 9867,
        seed: 7,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let ds = g.to_dataset().unwrap();
    assert_eq!(ds.interactions.len(), 9867);
    assert_eq!(ds.graph.roles.seekers().len(), 189);
    assert_eq!(ds.graph.roles.helpers().len(), 243);
}

#[test]
fn noisy_bundle_satisfaction_rate() {
    for seed in 0..3 {
        let g = generate(&GeneratorConfig {
            n_interactions: 5000,
            noise_rate: 0.1,
            seed,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let ds = g.to_dataset().unwrap();
        let r = report_for(&ds, &g.truth);
        assert!((0.88..=0.92).contains(&r.satisfaction_rate), "seed {seed}: {}", r.satisfaction_rate);
    }
}

#[test]
fn clean_bundle_top3_mostly_more_senior() {
    let mut fractions = Vec::new();
    for seed in 1..=5u64 {
        let ds = generate(&GeneratorConfig {
            n_patients: 200,
            n_threads: 80,
            n_interactions: 2000,
            noise_rate: 0.0,
            seed,
            ..GeneratorConfig::default()
        })
        .unwrap()
        .to_dataset()
        .unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            patience: 0,
            seed,
            ..TrainConfig::default()
        };
        let prepared = Prepared::for_config(&ds, &cfg).unwrap();
        let out = train_prepared(&ds, &prepared, &cfg).unwrap();
        let enc = out.model.encode(&ds.timelines);
        let e = out.model.propagated(&enc, &prepared.ctx);
        let scorer = EmbeddingScorer::from_propagated(&e, &prepared.train_graph.roles);

        let (mut flagged, mut rows) = (0usize, 0usize);
        let mut seen = BTreeSet::new();
        for q in &prepared.test_queries {
            if !seen.insert(q.seeker) {
                continue;
            }
            let mut scored: Vec<(PatientId, f64)> = prepared
                .candidates
                .iter()
                .filter(|h| **h != q.seeker)
                .map(|&h| (h, scorer.score(q.seeker, h)))
                .collect();
            sort_candidates(&mut scored);
            let s_t = ds.timelines[q.seeker.0].seniority_at_time(q.timestamp);
            for (h, _) in scored.iter().take(3) {
                rows += 1;
                flagged += usize::from(ds.timelines[h.0].seniority_at_time(q.timestamp) > s_t);
            }
        }
        fractions.push(flagged as f64 / rows as f64);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!(mean > 0.5, "top-3 senior fraction {mean:.3} per seed {fractions:?}");
}
