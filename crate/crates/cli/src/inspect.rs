//! Human-readable JSON view of a model file.

use std::collections::BTreeMap;
use std::path::Path;

use qres_core::gbrt::{FeatureRange, NodeView, Tree};
use qres_core::registry::FORMAT_VERSION;
use qres_core::scaling::ScalingForm;
use qres_core::{MartModel, Model, ModelRegistry};
use serde::Serialize;

use crate::CliError;

#[derive(Serialize)]
struct ModelFile {
    format_version: u8,
    families: Vec<FamilyDump>,
}

#[derive(Serialize)]
struct FamilyDump {
    op: String,
    resource: String,
    default: usize,
    models: Vec<ModelDump>,
}

#[derive(Serialize)]
struct ModelDump {
    index: usize,
    kind: &'static str,
    training_error: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    scale_terms: Vec<TermDump>,
    mart: MartDump,
}

#[derive(Serialize)]
struct TermDump {
    features: Vec<&'static str>,
    form: ScalingForm,
}

#[derive(Serialize)]
struct MartDump {
    init: f64,
    learning_rate: f64,
    tree_count: usize,
    feature_stats: BTreeMap<&'static str, FeatureRange>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trees: Option<Vec<Vec<NodeDump>>>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum NodeDump {
    Split { feature: &'static str, threshold: f32, left: usize, right: usize },
    Leaf { leaf: f32 },
}

fn tree_nodes(tree: &Tree) -> Vec<NodeDump> {
    (0..tree.node_count())
        .map(|i| match tree.view(i) {
            NodeView::Split { feature, threshold, left, right } => {
                NodeDump::Split { feature: feature.name(), threshold, left, right }
            }
            NodeView::Leaf { value } => NodeDump::Leaf { leaf: value },
        })
        .collect()
}

fn mart_dump(m: &MartModel, with_trees: bool) -> MartDump {
    MartDump {
        init: m.init,
        learning_rate: m.learning_rate,
        tree_count: m.trees().len(),
        feature_stats: m.feature_stats().map(|(f, r)| (f.name(), r)).collect(),
        trees: with_trees.then(|| m.trees().iter().map(tree_nodes).collect()),
    }
}

pub fn dump_model(path: &Path, with_trees: bool, out: Option<&Path>) -> Result<(), CliError> {
    let registry = ModelRegistry::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let families = registry
        .families()
        .map(|fam| FamilyDump {
            op: fam.op.name().to_string(),
            resource: fam.resource.key().to_string(),
            default: fam.default,
            models: fam
                .models
                .iter()
                .enumerate()
                .map(|(index, m)| match &m.model {
                    Model::Mart(mart) => ModelDump {
                        index,
                        kind: "mart",
                        training_error: m.training_error,
                        scale_terms: Vec::new(),
                        mart: mart_dump(mart, with_trees),
                    },
                    Model::Combined(c) => ModelDump {
                        index,
                        kind: "combined",
                        training_error: m.training_error,
                        scale_terms: c
                            .terms()
                            .iter()
                            .map(|t| TermDump { features: t.features.iter().map(|f| f.name()).collect(), form: t.form })
                            .collect(),
                        mart: mart_dump(c.scaled_model(), with_trees),
                    },
                })
                .collect(),
        })
        .collect();
    crate::commands::emit_json(&ModelFile { format_version: FORMAT_VERSION, families }, out)
}
