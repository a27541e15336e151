use std::sync::{Arc, LazyLock};

use durcast_core::aggregation::AggregationStrategy;
use durcast_core::encoder;
use durcast_core::evaluation::evaluate_pipeline;
use durcast_core::llm::{answer_text, ChatRequest, EnsembleConfig, LlmError, MockScripted};
use durcast_core::prior::{prior_strength, PriorStrengthMode};
use durcast_core::prompt::PromptError;
use durcast_core::retrieval::cosine_similarity;
use durcast_core::schema::ingest_csv_reader;
use durcast_core::stats::IqrBounds;
use durcast_core::{
    build_prompt, compute_metrics, compute_prior, derive_weights, fit_pca, generate_synthetic, postprocess,
    predict_ensemble, schedule_temperatures, split, BackendSpec, CaseSet, ChatBackend, FeatureKind, FlatIndex,
    Pipeline, PipelineConfig, PromptMode, PromptTemplate, Reference, ReferenceSet, RetrievalCandidate,
    StatisticalPrior, StratumCache, StratumLadder, SurgicalCase, SyntheticSpec, Value, WeightedEmbedding,
};
use proptest::prelude::*;

static CORPUS: LazyLock<CaseSet> =
    LazyLock::new(|| generate_synthetic(&SyntheticSpec::standard(400, 6), 17).expect("corpus"));

fn ladder() -> StratumLadder {
    StratumLadder::new(&CORPUS.schema)
}

// data ------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn csv_round_trip(seed in 0u64..1000, n in 1usize..60) {
        let cs = generate_synthetic(&SyntheticSpec::standard(n, 8), seed).unwrap();
        let mut buf = Vec::new();
        cs.write_csv(&mut buf).unwrap();
        let back = ingest_csv_reader(buf.as_slice(), &cs.schema).unwrap();
        prop_assert_eq!(back, cs);
    }

    #[test]
    fn split_partitions(seed in 0u64..1000, n in 1usize..200, a in 0.1f64..0.8) {
        let cs = generate_synthetic(&SyntheticSpec::standard(n, 3), seed).unwrap();
        let b = (1.0 - a) / 2.0;
        let (train, val, test) = split(&cs, (a, b, 1.0 - a - b), seed).unwrap();
        let mut ids: Vec<&str> = [&train, &val, &test].iter().flat_map(|p| p.cases.iter().map(|c| c.id.as_str())).collect();
        ids.sort_unstable();
        let mut want: Vec<&str> = cs.cases.iter().map(|c| c.id.as_str()).collect();
        want.sort_unstable();
        prop_assert_eq!(ids, want);
    }

    #[test]
    fn generator_is_pure(seed in 0u64..1000) {
        let spec = SyntheticSpec::standard(30, 4);
        prop_assert_eq!(generate_synthetic(&spec, seed).unwrap(), generate_synthetic(&spec, seed).unwrap());
    }
}

// encoder ---------------------------------------------------------------

#[test]
fn segments_are_alpha_scaled_raw_blocks() {
    let enc = encoder::fit(&CORPUS).unwrap();
    for case in CORPUS.cases.iter().take(50) {
        let raw = enc.encode_raw(case).unwrap();
        let emb = enc.encode(case).unwrap();
        assert_eq!(emb, enc.encode(case).unwrap());
        for (kind, block) in raw {
            let seg = enc.layout().segment(kind).unwrap();
            assert_eq!(seg.len, block.len());
            let alpha = 1.0 / (block.len() as f64).sqrt();
            for (i, x) in block.iter().enumerate() {
                assert_eq!(emb.vector[seg.offset + i], alpha * x);
            }
        }
    }
}

#[test]
fn numeric_block_is_standardized_on_train() {
    let mut spec = SyntheticSpec::standard(300, 5);
    spec.missing_rate = 0.0;
    let train = generate_synthetic(&spec, 4).unwrap();
    let enc = encoder::fit(&train).unwrap();
    let blocks: Vec<Vec<f64>> = train
        .cases
        .iter()
        .map(|c| {
            enc.encode_raw(c)
                .unwrap()
                .into_iter()
                .find(|(k, _)| *k == FeatureKind::Numerical)
                .unwrap()
                .1
        })
        .collect();
    let n = blocks.len() as f64;
    for j in 0..blocks[0].len() {
        let mean = blocks.iter().map(|b| b[j]).sum::<f64>() / n;
        let var = blocks.iter().map(|b| (b[j] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "coordinate {j} mean {mean}");
        if var > 0.0 {
            assert!((var - 1.0).abs() < 1e-6, "coordinate {j} variance {var}");
        }
    }
}

// pca -------------------------------------------------------------------

fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..30, 1usize..8).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-50.0f64..50.0, d), n))
}

proptest! {
    #[test]
    fn weights_ignore_component_signs(rows in matrix(), flips in prop::collection::vec(any::<bool>(), 8)) {
        prop_assume!(rows.iter().any(|r| r != &rows[0]));
        let model = fit_pca(&rows).unwrap();
        let mut flipped = model.clone();
        for j in 0..model.dim {
            for k in 0..model.dim {
                if flips[k] {
                    flipped.components[j * model.dim + k] *= -1.0;
                }
            }
        }
        for k in 1..=model.dim {
            prop_assert_eq!(derive_weights(&model, k).unwrap(), derive_weights(&flipped, k).unwrap());
        }
    }

    #[test]
    fn weights_are_linear_in_variance(rows in matrix(), c in 0.01f64..100.0) {
        prop_assume!(rows.iter().any(|r| r != &rows[0]));
        let model = fit_pca(&rows).unwrap();
        let mut scaled = model.clone();
        scaled.explained_variance_ratio.iter_mut().for_each(|r| *r *= c);
        let k = model.dim;
        let a = derive_weights(&model, k).unwrap();
        let b = derive_weights(&scaled, k).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x * c - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }
}

// retrieval -------------------------------------------------------------

fn index_entries() -> impl Strategy<Value = (Vec<Vec<i8>>, Vec<i8>, usize)> {
    (1usize..6).prop_flat_map(|d| {
        (
            prop::collection::vec(prop::collection::vec(-2i8..=2, d), 1..200),
            prop::collection::vec(-2i8..=2, d).prop_filter("non-zero query", |q| q.iter().any(|&x| x != 0)),
            1usize..220,
        )
    })
}

proptest! {
    #[test]
    fn retrieve_matches_scan((rows, q, m) in index_entries()) {
        let entries = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let id = format!("e{:03}", (i * 7919) % 1000);
                (
                    WeightedEmbedding { vector: r.iter().map(|&x| x as f64).collect(), source_case_id: id.clone() },
                    SurgicalCase::new(format!("{id}-{i}")).with_duration(60.0),
                )
            })
            .collect::<Vec<_>>();
        let ids: Vec<String> = entries.iter().map(|e| e.1.id.clone()).collect();
        let index = FlatIndex::build(entries).unwrap();
        let qv: Vec<f64> = q.iter().map(|&x| x as f64).collect();
        let got = index.retrieve(&WeightedEmbedding { vector: qv.clone(), source_case_id: "q".into() }, m).unwrap();

        let sims: Vec<f64> = rows
            .iter()
            .map(|r| {
                let v: Vec<f64> = r.iter().map(|&x| x as f64).collect();
                cosine_similarity(&v, &qv).unwrap_or(0.0)
            })
            .collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then_with(|| ids[a].cmp(&ids[b])));
        order.truncate(m);
        prop_assert_eq!(got.len(), order.len());
        for (c, &i) in got.iter().zip(&order) {
            prop_assert_eq!(&c.case.id, &ids[i]);
            prop_assert!((c.similarity - sims[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        a in prop::collection::vec(-100.0f64..100.0, 1..20),
        c in 1e-3f64..1e3,
        seed in any::<u64>(),
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-6));
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.5 + ((seed >> (i % 60)) & 7) as f64 - 3.0).collect();
        prop_assume!(b.iter().any(|x| x.abs() > 1e-6));
        let scaled: Vec<f64> = a.iter().map(|x| c * x).collect();
        let s1 = cosine_similarity(&a, &b).unwrap();
        let s2 = cosine_similarity(&scaled, &b).unwrap();
        prop_assert!((s1 - s2).abs() <= 1e-12);
    }
}

fn candidate_lists() -> impl Strategy<Value = (Vec<(usize, usize, f64)>, usize)> {
    (
        prop::collection::vec((0usize..2, 0usize..3, 30.0f64..600.0), 1..60),
        1usize..12,
    )
}

proptest! {
    #[test]
    fn postprocess_bounds((rows, k) in candidate_lists()) {
        let depts = ["Urology", "Orthopedics"];
        let names = ["a", "b", "c"];
        let cands: Vec<RetrievalCandidate> = rows
            .iter()
            .enumerate()
            .map(|(i, &(d, n, dur))| RetrievalCandidate {
                case: SurgicalCase::new(format!("c{i:03}"))
                    .with("department", Value::Text(depts[d].into()))
                    .with("surgery_name", Value::Text(names[n].into()))
                    .with("surgery_level", Value::Text("II".into()))
                    .with_duration(dur.round()),
                similarity: 1.0 - i as f64 / 100.0,
            })
            .collect();
        let query = SurgicalCase::new("q")
            .with("department", Value::Text("Urology".into()))
            .with("surgery_name", Value::Text("a".into()))
            .with("surgery_level", Value::Text("II".into()));
        let ladder = StratumLadder::from_attributes(vec!["department".into(), "surgery_name".into(), "surgery_level".into()]);
        let out = postprocess(&cands, &query, k, &ladder).unwrap();
        prop_assert!(out.len() <= k);
        if let Some((lo, hi)) = out.iqr {
            for d in out.durations() {
                prop_assert!(d >= lo && d <= hi);
            }
        }
        let positions: Vec<usize> = out
            .references
            .iter()
            .map(|r| cands.iter().position(|c| c.case.id == r.case.id).expect("output drawn from input"))
            .collect();
        prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }
}

// priors ----------------------------------------------------------------

fn oracle_prior(query: &SurgicalCase, train: &CaseSet, min_cohort: usize) -> (usize, Vec<f64>) {
    let ladder = ladder();
    for (level, tier) in ladder.tiers().iter().enumerate() {
        let attrs: Vec<&str> = tier.iter().map(|&a| CORPUS.schema.key_attributes[a].as_str()).collect();
        if attrs.iter().any(|a| query.value(a).is_missing()) {
            continue;
        }
        let cohort: Vec<f64> = train
            .cases
            .iter()
            .filter(|c| attrs.iter().all(|a| c.value(a) == query.value(a)))
            .filter_map(|c| c.duration_min)
            .collect();
        if cohort.len() >= min_cohort {
            return (level, cohort);
        }
    }
    (ladder.unfiltered_level(), train.durations())
}

#[test]
fn prior_matches_brute_force() {
    let cache = StratumCache::build(&CORPUS, &ladder(), 5);
    for q in CORPUS.cases.iter().step_by(7) {
        let (level, cohort) = oracle_prior(q, &CORPUS, 5);
        let mut s = cohort.clone();
        s.sort_by(f64::total_cmp);
        let p = compute_prior(q, &CORPUS, 5, &ladder());
        assert_eq!(p.level, level);
        assert_eq!(p.cohort_size, cohort.len());
        assert_eq!(p.range_min, (s[0], s[s.len() - 1]));
        let b = IqrBounds::of(&cohort);
        assert_eq!(p.iqr_min, (b.q1, b.q3));
        assert_eq!(cache.lookup(q), p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn adding_stratum_members_never_coarsens(pick in 0usize..400, extra in 1usize..10) {
        let q = &CORPUS.cases[pick % CORPUS.len()];
        let before = compute_prior(q, &CORPUS, 5, &ladder());
        let mut grown = CORPUS.clone();
        for i in 0..extra {
            let mut c = q.clone();
            c.id = format!("{}-copy{i}", q.id);
            c.duration_min = Some(100.0 + i as f64);
            grown.cases.push(c);
        }
        let after = compute_prior(q, &grown, 5, &ladder());
        prop_assert!(after.level <= before.level);
    }

    #[test]
    fn calibrated_strength_is_bounded(durations in prop::collection::vec(1.0f64..800.0, 1..80), base in 0.0f64..5.0) {
        let p = StatisticalPrior::from_durations(&durations, 0, "s".into());
        let w = prior_strength(&p, base, PriorStrengthMode::Calibrated);
        prop_assert!((0.0..=base).contains(&w));
    }
}

// prompts ---------------------------------------------------------------

fn reference_set(durations: &[f64]) -> ReferenceSet {
    ReferenceSet {
        references: durations
            .iter()
            .enumerate()
            .map(|(i, &d)| Reference {
                case: CORPUS.cases[i].clone().with_duration(d),
                similarity: 0.9 - i as f64 * 0.01,
            })
            .collect(),
        fallback_level: 0,
        iqr: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distinct_references_give_distinct_prompts(
        a in prop::collection::vec(10u32..700, 1..8),
        b in prop::collection::vec(10u32..700, 1..8),
    ) {
        prop_assume!(a != b);
        let q = &CORPUS.cases[50];
        let t = PromptTemplate::default();
        let render = |d: &[u32]| {
            let d: Vec<f64> = d.iter().map(|&x| x as f64).collect();
            build_prompt(q, Some(&reference_set(&d)), None, PromptMode::RandomFewShot, &CORPUS.schema, &t).unwrap()
        };
        prop_assert_ne!(render(&a).user_text, render(&b).user_text);
    }

    #[test]
    fn prompts_respect_the_length_limit(max in 200usize..6000, n in 1usize..8) {
        let q = &CORPUS.cases[3];
        let mut t = PromptTemplate::default();
        t.max_chars = max;
        let refs = reference_set(&vec![120.0; n]);
        match build_prompt(q, Some(&refs), None, PromptMode::RandomFewShot, &CORPUS.schema, &t) {
            Ok(p) => prop_assert!(p.len() <= max),
            Err(PromptError::TooLong { len, max: m }) => prop_assert!(len > m),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

// model calls -----------------------------------------------------------

fn sample_prompt() -> durcast_core::Prompt {
    let refs = reference_set(&[115.0, 120.0, 130.0, 150.0]);
    build_prompt(&CORPUS.cases[9], Some(&refs), None, PromptMode::RandomFewShot, &CORPUS.schema, &PromptTemplate::default())
        .unwrap()
}

proptest! {
    #[test]
    fn schedule_law(n in 1usize..12, seed in any::<u64>()) {
        let t = schedule_temperatures(n, seed).unwrap();
        prop_assert_eq!(t.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        prop_assert!(t.iter().all(|&x| x <= 0.4));
    }

    #[test]
    fn ensemble_is_pure(seed in any::<u64>(), noise in 0.0f64..0.5) {
        let backend = BackendSpec::MockReferenceMean { noise_sd: noise }.build(150.0).unwrap();
        let p = sample_prompt();
        let cfg = EnsembleConfig::default();
        prop_assert_eq!(
            predict_ensemble(&p, backend.as_ref(), &cfg, seed),
            predict_ensemble(&p, backend.as_ref(), &cfg, seed)
        );
    }

    #[test]
    fn retry_budget(pattern in prop::collection::vec(any::<bool>(), 1..10), n in 1usize..6, retries in 0usize..4) {
        let replies = pattern.iter().map(|&ok| ok.then(|| answer_text(120.0))).collect();
        let backend = MockScripted::new(replies);
        let cfg = EnsembleConfig { rounds: n, max_retries: retries, ..Default::default() };
        let _ = predict_ensemble(&sample_prompt(), &backend, &cfg, 1);
        prop_assert!(backend.calls() <= n * (retries + 1));
    }
}

// evaluation ------------------------------------------------------------

proptest! {
    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((1.0f64..900.0, 0.0f64..900.0), 2..100)) {
        let m = compute_metrics(&pairs).unwrap();
        prop_assert!(m.rmse_min >= m.mae_min - 1e-12);
        prop_assert!(m.mae_min >= 0.0 && m.r2 <= 1.0);
    }
}

/// Answers with the query's recorded duration.
struct Oracle;

impl ChatBackend for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, LlmError> {
        let y = request.prompt.metadata.query.duration_min.ok_or(LlmError::Config("no truth".into()))?;
        Ok(answer_text(y))
    }
}

#[test]
fn perfect_oracle_scores_perfectly() {
    let (train, _, test) = split(&CORPUS, (0.7, 0.1, 0.2), 3).unwrap();
    let cfg = PipelineConfig {
        strategy: AggregationStrategy::Mean,
        ..Default::default()
    };
    let pipeline = Pipeline::fit(&train, cfg).unwrap().with_backend(Arc::new(Oracle));
    let report = evaluate_pipeline(&pipeline, &test, "oracle").unwrap();
    assert_eq!(report.metrics.mae_min, 0.0);
    assert_eq!(report.metrics.r2, 1.0);
}

#[test]
fn identical_runs_give_identical_predictions() {
    let (train, _, test) = split(&CORPUS, (0.7, 0.1, 0.2), 8).unwrap();
    let cfg = PipelineConfig {
        backend: BackendSpec::MockReferenceMean { noise_sd: 0.2 },
        ..Default::default()
    };
    let dump = || {
        let r = durcast_core::run_experiment(&cfg, &train, &test).unwrap();
        let mut out = Vec::new();
        durcast_core::evaluation::write_predictions_jsonl(&r, &mut out).unwrap();
        out
    };
    assert_eq!(dump(), dump());
}
