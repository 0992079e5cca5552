//! Per-operator model families, runtime model selection and query-level
//! aggregation.
//!
//! A family holds the plain MART model (always index 0) and the combined
//! models trained for one (operator, resource) pair. The family's default is
//! the model with the lowest training error. At estimation time the default
//! is used whenever the feature vector lies inside its training box;
//! otherwise the model whose own training ranges are exceeded the least is
//! picked.

mod codec;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use codec::{decode_tree, encode_tree, FORMAT_VERSION, MAGIC};

use crate::error::{Error, Result};
use crate::features::{extract_features, normalize_for_outliers, CardinalitySource, FeatureId, FeatureVector};
use crate::gbrt::{self, FeatureRange, MartModel, TrainConfig};
use crate::plan::{decompose_pipelines, OperatorType, QueryPlan, ResourceKind};
use crate::scaling::{eligible_scale_features, scale_pairs, ScaleTerm, ScalingChoices};

/// Normalized distance of `value` outside `[low, high]`.
pub fn out_ratio(value: f64, range: FeatureRange) -> f64 {
    let FeatureRange { low, high } = range;
    if value >= low && value <= high {
        return 0.0;
    }
    if high == low {
        return f64::INFINITY;
    }
    let excursion = if value < low { low - value } else { value - high };
    excursion / (high - low)
}

/// A MART model over normalized features multiplied by scaling terms of the
/// raw feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedModel {
    terms: Vec<ScaleTerm>,
    scaled: MartModel,
}

impl CombinedModel {
    pub fn new(terms: Vec<ScaleTerm>, scaled: MartModel) -> Result<Self> {
        let model = CombinedModel { terms, scaled };
        let features = model.scale_features();
        if features.is_empty() || features.len() > 2 {
            return Err(Error::InvalidConfig("a combined model scales by one or two features".into()));
        }
        if let Some(f) = features.iter().find(|f| model.scaled.schema().contains(f)) {
            return Err(Error::SchemaMismatch(format!("scale feature {f} is also a model input")));
        }
        Ok(model)
    }

    pub fn terms(&self) -> &[ScaleTerm] {
        &self.terms
    }

    pub fn scaled_model(&self) -> &MartModel {
        &self.scaled
    }

    /// Scale features in normalization order.
    pub fn scale_features(&self) -> Vec<FeatureId> {
        self.terms.iter().flat_map(|t| t.features.iter().copied()).collect()
    }

    pub fn normalize(&self, fv: &FeatureVector) -> Result<FeatureVector> {
        normalize_for_outliers(fv, &self.scale_features())
    }

    /// Product of the scaling terms at the raw values of `fv`.
    pub fn scale_factor(&self, fv: &FeatureVector) -> Result<f64> {
        self.terms.iter().try_fold(1.0, |acc, t| Ok(acc * t.eval(fv)?))
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<f64> {
        let factor = self.scale_factor(fv)?;
        Ok(factor * self.scaled.predict(&self.normalize(fv)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mart(MartModel),
    Combined(CombinedModel),
}

impl Model {
    /// Raw (unclamped) estimate.
    pub fn predict(&self, fv: &FeatureVector) -> Result<f64> {
        match self {
            Model::Mart(m) => m.predict(fv),
            Model::Combined(c) => c.predict(fv),
        }
    }

    pub fn scale_features(&self) -> Vec<FeatureId> {
        match self {
            Model::Mart(_) => Vec::new(),
            Model::Combined(c) => c.scale_features(),
        }
    }

    /// The tree ensemble evaluated inside the model.
    pub fn mart(&self) -> &MartModel {
        match self {
            Model::Mart(m) => m,
            Model::Combined(c) => &c.scaled,
        }
    }

    /// out_ratio of every ranged input feature, evaluated in the model's own
    /// (normalized) feature space. `None` when the model cannot be applied.
    pub fn out_ratios(&self, fv: &FeatureVector) -> Option<Vec<f64>> {
        let local;
        let input = match self {
            Model::Mart(_) => fv,
            Model::Combined(c) => {
                local = c.normalize(fv).ok()?;
                &local
            }
        };
        self.mart()
            .feature_stats()
            .filter(|(f, _)| !f.is_categorical())
            .map(|(f, range)| input.get(f).map(|v| out_ratio(v, range)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyModel {
    pub model: Model,
    /// Σ|estimate − target| / Σ|target| over the training examples.
    pub training_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFamily {
    pub op: OperatorType,
    pub resource: ResourceKind,
    pub default: usize,
    pub models: Vec<FamilyModel>,
}

/// How a family picks the model for a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    /// Default inside its training box, least out-of-range model otherwise.
    #[default]
    Heuristic,
    /// Always the default model.
    DefaultOnly,
    /// Always the plain MART model.
    MartOnly,
}

impl ModelFamily {
    pub fn select(&self, fv: &FeatureVector, selection: Selection) -> usize {
        match selection {
            Selection::MartOnly => return 0,
            Selection::DefaultOnly => return self.default,
            Selection::Heuristic => {}
        }
        let default_ratios = self.models[self.default].model.out_ratios(fv);
        if let Some(r) = &default_ratios {
            if r.iter().all(|v| *v == 0.0) {
                return self.default;
            }
        }
        let mut best: Option<(usize, Vec<f64>, usize)> = None;
        for (i, m) in self.models.iter().enumerate() {
            let Some(mut ratios) = m.model.out_ratios(fv) else { continue };
            ratios.sort_by(|a, b| b.total_cmp(a));
            let scale_count = m.model.scale_features().len();
            let better = match &best {
                None => true,
                Some((_, best_ratios, best_count)) => {
                    let max = ratios.first().copied().unwrap_or(0.0);
                    let best_max = best_ratios.first().copied().unwrap_or(0.0);
                    max.total_cmp(&best_max)
                        .then(scale_count.cmp(best_count))
                        .then_with(|| compare_desc(&ratios, best_ratios))
                        == Ordering::Less
                }
            };
            if better {
                best = Some((i, ratios, scale_count));
            }
        }
        best.map_or(self.default, |(i, _, _)| i)
    }

    pub fn estimate(&self, fv: &FeatureVector, selection: Selection) -> Result<(usize, f64)> {
        let i = self.select(fv, selection);
        let v = self.models[i].model.predict(fv)?;
        Ok((i, v.max(0.0)))
    }
}

/// Lexicographic comparison of descending ratio lists; a missing entry
/// counts as 0.
fn compare_desc(a: &[f64], b: &[f64]) -> Ordering {
    for k in 1..a.len().max(b.len()) {
        let x = a.get(k).copied().unwrap_or(0.0);
        let y = b.get(k).copied().unwrap_or(0.0);
        match x.total_cmp(&y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryConfig {
    pub train: TrainConfig,
    /// Train combined models next to the plain MART model.
    pub combined_models: bool,
    pub choices: ScalingChoices,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig { train: TrainConfig::default(), combined_models: true, choices: ScalingChoices::new() }
    }
}

fn model_seed(base: u64, op: OperatorType, resource: ResourceKind, index: usize) -> u64 {
    // splitmix64 finalizer over the packed identifiers
    let mut z = base ^ (u64::from(op.code()) << 40) ^ (u64::from(resource.code()) << 32) ^ index as u64;
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn training_error(model: &Model, examples: &[(FeatureVector, f64)]) -> Result<f64> {
    let (mut abs_err, mut abs_y) = (0.0, 0.0);
    for (fv, y) in examples {
        abs_err += (model.predict(fv)?.max(0.0) - y).abs();
        abs_y += y.abs();
    }
    Ok(if abs_y > 0.0 { abs_err / abs_y } else { abs_err })
}

/// Trains the scaled MART of a combined model: each target is divided by
/// the product of the unit scaling terms and the scale features'
/// dependents are normalized.
pub fn build_combined(
    examples: &[(FeatureVector, f64)],
    terms: Vec<ScaleTerm>,
    cfg: &TrainConfig,
) -> Result<CombinedModel> {
    let terms: Vec<ScaleTerm> = terms.into_iter().map(|t| ScaleTerm { form: t.form.without_alpha(), ..t }).collect();
    let probe = CombinedModel { terms, scaled: MartModel::from_parts(0.0, 1.0, vec![], vec![], vec![])? };
    let scaled_examples = examples
        .iter()
        .map(|(fv, y)| Ok((probe.normalize(fv)?, y / probe.scale_factor(fv)?)))
        .collect::<Result<Vec<_>>>()?;
    let scaled = gbrt::train(&scaled_examples, cfg)?;
    CombinedModel::new(probe.terms, scaled)
}

/// Trains the plain model plus, when enabled, one combined model per
/// eligible scale feature and per join feature pair.
pub fn build_family(
    op: OperatorType,
    resource: ResourceKind,
    examples: &[(FeatureVector, f64)],
    cfg: &RegistryConfig,
) -> Result<ModelFamily> {
    if examples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let seeded = |index: usize| TrainConfig {
        rng_seed: model_seed(cfg.train.rng_seed, op, resource, index),
        ..cfg.train.clone()
    };
    let mut models = vec![Model::Mart(gbrt::train(examples, &seeded(0))?)];

    if cfg.combined_models {
        let positive = |f: FeatureId| examples.iter().all(|(fv, _)| fv.get(f).is_some_and(|v| v > 0.0));
        let mut scale_sets: Vec<Vec<FeatureId>> =
            eligible_scale_features(op, resource).into_iter().filter(|f| positive(*f)).map(|f| vec![f]).collect();
        scale_sets.extend(
            scale_pairs(op, resource).into_iter().filter(|p| p.iter().all(|f| positive(*f))).map(|p| p.to_vec()),
        );
        for features in scale_sets {
            let form = cfg.choices.form_for(op, resource, &features);
            let term = ScaleTerm::new(form, features)?;
            let index = models.len();
            models.push(Model::Combined(build_combined(examples, vec![term], &seeded(index))?));
        }
    }

    let models = models
        .into_iter()
        .map(|model| {
            let training_error = training_error(&model, examples)?;
            Ok(FamilyModel { model, training_error })
        })
        .collect::<Result<Vec<_>>>()?;
    let default =
        models
            .iter()
            .enumerate()
            .fold(0, |best, (i, m)| if m.training_error < models[best].training_error { i } else { best });
    Ok(ModelFamily { op, resource, default, models })
}

/// Per-operator training examples of a corpus for one resource.
pub fn collect_examples(
    corpus: &[QueryPlan],
    resource: ResourceKind,
    source: CardinalitySource,
) -> Result<BTreeMap<OperatorType, Vec<(FeatureVector, f64)>>> {
    let mut out: BTreeMap<OperatorType, Vec<(FeatureVector, f64)>> = BTreeMap::new();
    for plan in corpus {
        let nodes = plan.nodes();
        for r in &nodes {
            let label = r.node.observed.get(&resource).copied().ok_or_else(|| Error::MissingLabel {
                path: format!("{}: {}", plan.query_id, plan.node_path(r.id)),
                resource,
            })?;
            let parent = r.parent.map(|p| nodes[p].node.op);
            let fv = extract_features(r.node, parent, source)?;
            out.entry(r.node.op).or_default().push((fv, label));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct OperatorEstimate {
    pub node: usize,
    pub op: OperatorType,
    pub model: usize,
    pub estimate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineEstimate {
    pub nodes: Vec<usize>,
    pub boundary: Option<usize>,
    pub estimate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryEstimate {
    pub query_id: String,
    pub resource: ResourceKind,
    pub total: f64,
    pub per_pipeline: Vec<PipelineEstimate>,
    pub per_operator: Vec<OperatorEstimate>,
}

/// Model families keyed by (operator, resource).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelRegistry {
    families: BTreeMap<(OperatorType, ResourceKind), ModelFamily>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trains one family per operator type present in the corpus, for each
    /// requested resource.
    pub fn train(
        corpus: &[QueryPlan],
        resources: &[ResourceKind],
        source: CardinalitySource,
        cfg: &RegistryConfig,
    ) -> Result<Self> {
        cfg.train.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let mut registry = ModelRegistry::new();
        for &resource in resources {
            for (op, examples) in collect_examples(corpus, resource, source)? {
                registry.insert(build_family(op, resource, &examples, cfg)?);
            }
        }
        Ok(registry)
    }

    pub fn insert(&mut self, family: ModelFamily) {
        self.families.insert((family.op, family.resource), family);
    }

    pub fn family(&self, op: OperatorType, resource: ResourceKind) -> Result<&ModelFamily> {
        self.families.get(&(op, resource)).ok_or(Error::NoModel(op, resource))
    }

    pub fn families(&self) -> impl Iterator<Item = &ModelFamily> {
        self.families.values()
    }

    pub fn resources(&self) -> Vec<ResourceKind> {
        let mut r: Vec<_> = self.families.keys().map(|(_, r)| *r).collect();
        r.dedup();
        r.sort();
        r.dedup();
        r
    }

    pub fn select_model(&self, op: OperatorType, resource: ResourceKind, fv: &FeatureVector) -> Result<usize> {
        Ok(self.family(op, resource)?.select(fv, Selection::Heuristic))
    }

    pub fn estimate_features(
        &self,
        fv: &FeatureVector,
        resource: ResourceKind,
        selection: Selection,
    ) -> Result<(usize, f64)> {
        self.family(fv.op, resource)?.estimate(fv, selection)
    }

    pub fn estimate_operator(
        &self,
        node: &crate::plan::PlanNode,
        parent: Option<OperatorType>,
        resource: ResourceKind,
        source: CardinalitySource,
    ) -> Result<f64> {
        let fv = extract_features(node, parent, source)?;
        Ok(self.estimate_features(&fv, resource, Selection::Heuristic)?.1)
    }

    pub fn estimate_query(
        &self,
        plan: &QueryPlan,
        resource: ResourceKind,
        source: CardinalitySource,
    ) -> Result<QueryEstimate> {
        self.estimate_query_with(plan, resource, source, Selection::Heuristic)
    }

    pub fn estimate_query_with(
        &self,
        plan: &QueryPlan,
        resource: ResourceKind,
        source: CardinalitySource,
        selection: Selection,
    ) -> Result<QueryEstimate> {
        let nodes = plan.nodes();
        let mut per_operator = Vec::with_capacity(nodes.len());
        for r in &nodes {
            let parent = r.parent.map(|p| nodes[p].node.op);
            let fv = extract_features(r.node, parent, source)?;
            let (model, estimate) = self.estimate_features(&fv, resource, selection)?;
            per_operator.push(OperatorEstimate { node: r.id, op: r.node.op, model, estimate });
        }
        let per_pipeline: Vec<PipelineEstimate> = decompose_pipelines(plan)
            .into_iter()
            .map(|p| PipelineEstimate {
                estimate: p.nodes.iter().map(|&i| per_operator[i].estimate).sum(),
                nodes: p.nodes,
                boundary: p.boundary,
            })
            .collect();
        let total = per_pipeline.iter().map(|p| p.estimate).sum();
        Ok(QueryEstimate { query_id: plan.query_id.clone(), resource, total, per_pipeline, per_operator })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        codec::decode(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
