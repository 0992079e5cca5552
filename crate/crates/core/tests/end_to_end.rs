use qres_core::eval::{compare, RegistryEstimator};
use qres_core::features::write_features_csv;
use qres_core::gbrt::TrainConfig;
use qres_core::plan::{read_corpus, write_corpus};
use qres_core::registry::Selection;
use qres_core::workload::{corpus_features, fit_scaling_choices, generate_corpus, CorpusSpec, OracleSpec};
use qres_core::{extract_features, CardinalitySource, ModelRegistry, QueryPlan, RegistryConfig, ResourceKind};

fn corpus(queries: usize, seed: u64) -> Vec<QueryPlan> {
    generate_corpus(&CorpusSpec { queries, seed, ..CorpusSpec::default() }).unwrap()
}

fn trained(plans: &[QueryPlan]) -> ModelRegistry {
    let cfg = RegistryConfig {
        train: TrainConfig { iterations: 80, rng_seed: 4, ..TrainConfig::default() },
        combined_models: true,
        choices: fit_scaling_choices(&OracleSpec::default(), &corpus_features(plans).unwrap(), &ResourceKind::ALL),
    };
    ModelRegistry::train(plans, &ResourceKind::ALL, CardinalitySource::True, &cfg).unwrap()
}

#[test]
fn corpus_survives_a_text_round_trip() {
    let plans = corpus(50, 1);
    let mut buf = Vec::new();
    write_corpus(&mut buf, &plans).unwrap();
    assert_eq!(read_corpus(&buf[..]).unwrap(), plans);
}

#[test]
fn saved_registry_estimates_like_the_original() {
    let plans = corpus(150, 2);
    let registry = trained(&plans);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.qres");
    registry.save(&path).unwrap();
    let loaded = ModelRegistry::load(&path).unwrap();
    assert_eq!(loaded, registry);

    for plan in corpus(20, 3) {
        for resource in ResourceKind::ALL {
            let a = registry.estimate_query(&plan, resource, CardinalitySource::True).unwrap();
            let b = loaded.estimate_query(&plan, resource, CardinalitySource::True).unwrap();
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }
}

#[test]
fn query_totals_are_sums_over_pipelines_and_operators() {
    let plans = corpus(120, 5);
    let registry = trained(&plans);
    for plan in corpus(30, 6) {
        let est = registry.estimate_query(&plan, ResourceKind::CpuTime, CardinalitySource::True).unwrap();
        assert_eq!(est.per_operator.len(), plan.node_count());
        let by_op: f64 = est.per_operator.iter().map(|o| o.estimate).sum();
        let by_pipe: f64 = est.per_pipeline.iter().map(|p| p.estimate).sum();
        assert!((by_op - est.total).abs() <= 1e-9 * est.total.max(1.0));
        assert!((by_pipe - est.total).abs() <= 1e-9 * est.total.max(1.0));
        assert!(est.per_operator.iter().all(|o| o.estimate >= 0.0));
        let mut covered: Vec<usize> = est.per_pipeline.iter().flat_map(|p| p.nodes.clone()).collect();
        covered.sort_unstable();
        assert_eq!(covered, (0..plan.node_count()).collect::<Vec<_>>());
    }
}

#[test]
fn training_plans_select_models_within_their_ranges() {
    let plans = corpus(150, 7);
    let registry = trained(&plans);
    for plan in &plans {
        let nodes = plan.nodes();
        for r in &nodes {
            let fv = extract_features(r.node, r.parent.map(|p| nodes[p].node.op), CardinalitySource::True).unwrap();
            for resource in ResourceKind::ALL {
                let family = registry.family(fv.op, resource).unwrap();
                // Every training vector lies inside the default model's box.
                assert_eq!(family.select(&fv, Selection::Heuristic), family.default);
                assert_eq!(family.select(&fv, Selection::MartOnly), 0);
            }
        }
    }
}

#[test]
fn estimated_cardinalities_change_estimates_under_bias() {
    let spec = CorpusSpec {
        queries: 150,
        seed: 8,
        card_error: qres_core::workload::CardErrorSpec { sigma: 0.0, bias: 4.0 },
        ..CorpusSpec::default()
    };
    let plans = generate_corpus(&spec).unwrap();
    let registry = trained(&plans);
    let probe = &plans[0];
    let t = registry.estimate_query(probe, ResourceKind::CpuTime, CardinalitySource::True).unwrap();
    let e = registry.estimate_query(probe, ResourceKind::CpuTime, CardinalitySource::Estimated).unwrap();
    assert_ne!(t.total, e.total);
}

#[test]
fn reports_cover_every_test_query() {
    let registry = trained(&corpus(150, 9));
    let test = corpus(40, 10);
    let s = RegistryEstimator::scaling(&registry, ResourceKind::LogicalIo, CardinalitySource::True);
    let m = RegistryEstimator::mart(&registry, ResourceKind::LogicalIo, CardinalitySource::True);
    let reports = compare(&[&s, &m], &test).unwrap();
    for r in &reports {
        assert_eq!(r.n + r.excluded, test.len());
        let buckets = r.r_below_1_5 + r.r_1_5_to_2 + r.r_above_2;
        assert!((buckets - 1.0).abs() < 1e-12, "{buckets}");
    }
    assert!(compare(&[&s], &[]).is_err());
}

#[test]
fn feature_csv_has_one_row_per_operator() {
    let plans = corpus(10, 11);
    let mut rows = Vec::new();
    for plan in &plans {
        let nodes = plan.nodes();
        for r in &nodes {
            let fv = extract_features(r.node, r.parent.map(|p| nodes[p].node.op), CardinalitySource::True).unwrap();
            rows.push((plan.query_id.clone(), r.id, fv));
        }
    }
    let mut buf = Vec::new();
    write_features_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), rows.len() + 1);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 3 + 24);
}
