//! Shared fixtures for the criterion benchmarks.

use qres_core::gbrt::{train, TrainConfig};
use qres_core::workload::{corpus_features, fit_scaling_choices, generate_corpus, CorpusSpec};
use qres_core::CardinalitySource;
use qres_core::{
    FeatureId, FeatureVector, MartModel, ModelRegistry, OperatorType, QueryPlan, RegistryConfig, ResourceKind,
};

/// Deterministic sort-operator examples with an n·log n CPU label.
pub fn sort_examples(n: usize) -> Vec<(FeatureVector, f64)> {
    (0..n)
        .map(|i| {
            // Cheap scrambling keeps the sequence deterministic without an RNG.
            let h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let cin = 1.0 + (h >> 44) as f64;
            let width = 8.0 + ((h >> 20) & 0x1ff) as f64;
            let cout = (cin * (1 + (h & 0xff)) as f64 / 256.0).ceil();
            let fv = FeatureVector::from_pairs(
                OperatorType::Sort,
                &[
                    (FeatureId::Cin1, cin),
                    (FeatureId::SinAvg1, width),
                    (FeatureId::SinTot1, cin * width),
                    (FeatureId::Cout, cout),
                    (FeatureId::SoutAvg, width),
                    (FeatureId::SoutTot, cout * width),
                    (FeatureId::MinComp, 2.0 * cin),
                    (FeatureId::CSortCol, 1.0 + (h % 3) as f64),
                ],
            );
            (fv, 2.0 * cin * cin.max(2.0).log2())
        })
        .collect()
}

/// A model with the default configuration: 1000 trees of 10 leaves.
pub fn default_model(examples: &[(FeatureVector, f64)]) -> MartModel {
    train(examples, &TrainConfig::default()).expect("fixture trains")
}

pub fn corpus(queries: usize, seed: u64) -> Vec<QueryPlan> {
    generate_corpus(&CorpusSpec { queries, seed, ..CorpusSpec::default() }).expect("fixture corpus")
}

/// A full registry with combined models for both resources.
pub fn registry(corpus: &[QueryPlan], iterations: usize) -> ModelRegistry {
    let features = corpus_features(corpus).expect("fixture features");
    let cfg = RegistryConfig {
        train: TrainConfig { iterations, ..TrainConfig::default() },
        combined_models: true,
        choices: fit_scaling_choices(&Default::default(), &features, &ResourceKind::ALL),
    };
    ModelRegistry::train(corpus, &ResourceKind::ALL, CardinalitySource::True, &cfg).expect("fixture registry")
}
