//! Error metrics, the optimizer-cost and linear-regression baselines, and
//! side-by-side comparison of query-level estimators.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_features, CardinalitySource, FeatureId, FeatureVector};
use crate::plan::{OperatorType, PlanNode, QueryPlan, ResourceKind};
use crate::registry::{collect_examples, ModelRegistry, Selection};

/// Ratio error: the larger of est/true and true/est.
pub fn ratio_err(estimate: f64, truth: f64) -> f64 {
    (estimate / truth).max(truth / estimate)
}

fn included(pairs: &[(f64, f64)]) -> impl Iterator<Item = (f64, f64)> + '_ {
    pairs.iter().copied().filter(|(e, t)| *e > 0.0 && *t > 0.0 && e.is_finite() && t.is_finite())
}

/// Mean of |estimate − true| / estimate over `(estimate, true)` pairs with
/// both values positive.
pub fn l1_err(pairs: &[(f64, f64)]) -> Result<f64> {
    let (sum, n) = included(pairs).fold((0.0, 0usize), |(s, n), (e, t)| (s + (e - t).abs() / e, n + 1));
    if n == 0 {
        return Err(Error::EmptyInput("no pairs with positive estimate and true value"));
    }
    Ok(sum / n as f64)
}

/// Fractions of pairs with R < 1.5, 1.5 ≤ R ≤ 2 and R > 2.
pub fn ratio_buckets(pairs: &[(f64, f64)]) -> Result<[f64; 3]> {
    let mut counts = [0usize; 3];
    for (e, t) in included(pairs) {
        let r = ratio_err(e, t);
        let b = if r < 1.5 {
            0
        } else if r <= 2.0 {
            1
        } else {
            2
        };
        counts[b] += 1;
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::EmptyInput("no pairs with positive estimate and true value"));
    }
    Ok(counts.map(|c| c as f64 / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub query_id: String,
    pub resource: ResourceKind,
    pub estimate: f64,
    pub true_usage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub technique: String,
    pub resource: ResourceKind,
    /// NaN (JSON null) when no pair could be scored.
    pub l1_err: f64,
    pub r_below_1_5: f64,
    pub r_1_5_to_2: f64,
    pub r_above_2: f64,
    pub n: usize,
    pub excluded: usize,
}

impl EvalReport {
    pub fn from_pairs(technique: &str, resource: ResourceKind, pairs: &[(f64, f64)], failed: usize) -> Self {
        let n = included(pairs).count();
        let excluded = pairs.len() - n + failed;
        let (l1, b) = match (l1_err(pairs), ratio_buckets(pairs)) {
            (Ok(l1), Ok(b)) => (l1, b),
            _ => (f64::NAN, [f64::NAN; 3]),
        };
        EvalReport {
            technique: technique.to_string(),
            resource,
            l1_err: l1,
            r_below_1_5: b[0],
            r_1_5_to_2: b[1],
            r_above_2: b[2],
            n,
            excluded,
        }
    }
}

/// Anything that produces a query-level estimate of one resource.
pub trait QueryEstimator {
    fn name(&self) -> &str;
    fn resource(&self) -> ResourceKind;
    fn estimate_query(&self, plan: &QueryPlan) -> Result<f64>;
}

/// Registry-backed estimator.
pub struct RegistryEstimator<'a> {
    pub name: String,
    pub registry: &'a ModelRegistry,
    pub resource: ResourceKind,
    pub source: CardinalitySource,
    pub selection: Selection,
}

impl<'a> RegistryEstimator<'a> {
    /// Full model selection over default and combined models.
    pub fn scaling(registry: &'a ModelRegistry, resource: ResourceKind, source: CardinalitySource) -> Self {
        RegistryEstimator { name: "SCALING".into(), registry, resource, source, selection: Selection::Heuristic }
    }

    /// Plain MART models only.
    pub fn mart(registry: &'a ModelRegistry, resource: ResourceKind, source: CardinalitySource) -> Self {
        RegistryEstimator { name: "MART".into(), registry, resource, source, selection: Selection::MartOnly }
    }
}

impl QueryEstimator for RegistryEstimator<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn resource(&self) -> ResourceKind {
        self.resource
    }

    fn estimate_query(&self, plan: &QueryPlan) -> Result<f64> {
        Ok(self.registry.estimate_query_with(plan, self.resource, self.source, self.selection)?.total)
    }
}

/// Query estimates for every plan in `test`, paired with observed usage.
/// Plans whose estimate fails are counted in the second value.
pub fn query_pairs(estimator: &dyn QueryEstimator, test: &[QueryPlan]) -> Result<(Vec<EvalPair>, usize)> {
    let resource = estimator.resource();
    let mut pairs = Vec::with_capacity(test.len());
    let mut failed = 0;
    for plan in test {
        let truth = *plan
            .observed
            .get(&resource)
            .ok_or_else(|| Error::MissingLabel { path: format!("{}: observed", plan.query_id), resource })?;
        match estimator.estimate_query(plan) {
            Ok(estimate) => {
                pairs.push(EvalPair { query_id: plan.query_id.clone(), resource, estimate, true_usage: truth })
            }
            Err(_) => failed += 1,
        }
    }
    Ok((pairs, failed))
}

/// One report per estimator, in the given order.
pub fn compare(estimators: &[&dyn QueryEstimator], test: &[QueryPlan]) -> Result<Vec<EvalReport>> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test corpus"));
    }
    estimators
        .iter()
        .map(|e| {
            let (pairs, failed) = query_pairs(*e, test)?;
            let raw: Vec<(f64, f64)> = pairs.iter().map(|p| (p.estimate, p.true_usage)).collect();
            Ok(EvalReport::from_pairs(e.name(), e.resource(), &raw, failed))
        })
        .collect()
}

pub fn write_reports_csv<W: Write>(writer: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["technique", "resource", "l1_err", "r_lt_1.5", "r_1.5_to_2", "r_gt_2", "n", "excluded"])?;
    for r in reports {
        w.write_record([
            r.technique.clone(),
            r.resource.key().to_string(),
            r.l1_err.to_string(),
            r.r_below_1_5.to_string(),
            r.r_1_5_to_2.to_string(),
            r.r_above_2.to_string(),
            r.n.to_string(),
            r.excluded.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares factor α = Σxy / Σx² per operator type.
pub fn fit_opt_baseline(pairs: &BTreeMap<OperatorType, Vec<(f64, f64)>>) -> Result<BTreeMap<OperatorType, f64>> {
    pairs
        .iter()
        .map(|(op, xy)| {
            if xy.is_empty() {
                return Err(Error::EmptyInput("optimizer-estimate pairs"));
            }
            let (sxy, sxx) = xy.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x * y, b + x * x));
            if !(sxx > 0.0) {
                return Err(Error::DegenerateFit(format!("{op}: all optimizer estimates are zero")));
            }
            Ok((*op, sxy / sxx))
        })
        .collect()
}

fn optimizer_estimate(node: &PlanNode, resource: ResourceKind) -> f64 {
    match resource {
        ResourceKind::CpuTime => node.est_cpu_cost,
        ResourceKind::LogicalIo => node.est_io_cost,
    }
}

/// Optimizer cost estimates rescaled by a per-operator factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptBaseline {
    pub resource: ResourceKind,
    pub alphas: BTreeMap<OperatorType, f64>,
}

impl OptBaseline {
    /// Operator types whose optimizer estimates are all zero get no factor
    /// and contribute nothing at estimation time.
    pub fn fit(corpus: &[QueryPlan], resource: ResourceKind) -> Result<Self> {
        let mut pairs: BTreeMap<OperatorType, Vec<(f64, f64)>> = BTreeMap::new();
        for plan in corpus {
            let nodes = plan.nodes();
            for r in &nodes {
                let y = r.node.observed.get(&resource).copied().ok_or_else(|| Error::MissingLabel {
                    path: format!("{}: {}", plan.query_id, plan.node_path(r.id)),
                    resource,
                })?;
                pairs.entry(r.node.op).or_default().push((optimizer_estimate(r.node, resource), y));
            }
        }
        pairs.retain(|_, xy| xy.iter().any(|(x, _)| *x != 0.0));
        Ok(OptBaseline { resource, alphas: fit_opt_baseline(&pairs)? })
    }
}

impl QueryEstimator for OptBaseline {
    fn name(&self) -> &str {
        "OPT"
    }

    fn resource(&self) -> ResourceKind {
        self.resource
    }

    fn estimate_query(&self, plan: &QueryPlan) -> Result<f64> {
        Ok(plan
            .nodes()
            .iter()
            .map(|r| self.alphas.get(&r.node.op).map_or(0.0, |a| a * optimizer_estimate(r.node, self.resource)))
            .sum())
    }
}

/// Ordinary least squares with intercept over a selected feature subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub features: Vec<FeatureId>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, fv: &FeatureVector) -> Result<f64> {
        self.features.iter().zip(&self.coefficients).try_fold(self.intercept, |acc, (f, c)| {
            let v = fv.get(*f).ok_or_else(|| Error::MissingFeature(f.name().to_string()))?;
            Ok(acc + c * v)
        })
    }
}

const RANK_TOL: f64 = 1e-10;

/// Least squares on the given rows; `None` if the design is rank deficient.
fn ols(rows: &[&(FeatureVector, f64)], features: &[FeatureId]) -> Option<LinearModel> {
    let n = rows.len();
    let p = features.len() + 1;
    if n == 0 {
        return None;
    }
    // Columns are scaled to unit max-magnitude for conditioning.
    let scales: Vec<f64> = features
        .iter()
        .map(|f| {
            let m = rows.iter().map(|(fv, _)| fv.get(*f).unwrap_or(0.0).abs()).fold(0.0, f64::max);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect();
    let x = DMatrix::from_fn(n, p, |i, j| {
        if j == 0 {
            1.0
        } else {
            rows[i].0.get(features[j - 1]).unwrap_or(0.0) / scales[j - 1]
        }
    });
    let y = DVector::from_iterator(n, rows.iter().map(|(_, y)| *y));
    let svd = x.svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = RANK_TOL * max_sv.max(f64::MIN_POSITIVE);
    if svd.rank(tol) < p {
        return None;
    }
    let beta = svd.solve(&y, tol).ok()?;
    Some(LinearModel {
        features: features.to_vec(),
        coefficients: (1..p).map(|j| beta[j] / scales[j - 1]).collect(),
        intercept: beta[0],
    })
}

fn sse(model: &LinearModel, rows: &[&(FeatureVector, f64)]) -> f64 {
    rows.iter().map(|(fv, y)| (model.predict(fv).unwrap_or(f64::NAN) - y).powi(2)).sum()
}

/// Greedy forward selection: a feature is added while it strictly lowers
/// the SSE on a seeded held-out fifth. The chosen subset is refit on all
/// examples.
pub fn fit_linear(examples: &[(FeatureVector, f64)], seed: u64) -> Result<LinearModel> {
    if examples.len() < 2 {
        return Err(Error::EmptyInput("linear fit needs at least two examples"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let holdout = (examples.len() / 5).max(1);
    let valid: Vec<_> = order[..holdout].iter().map(|&i| &examples[i]).collect();
    let train: Vec<_> = order[holdout..].iter().map(|&i| &examples[i]).collect();

    let candidates: Vec<FeatureId> = examples[0].0.features().filter(|f| !f.is_categorical()).collect();
    let mut selected: Vec<FeatureId> = Vec::new();
    let mut current = ols(&train, &selected).ok_or_else(|| Error::DegenerateFit("intercept-only fit".into()))?;
    let mut current_sse = sse(&current, &valid);
    loop {
        let mut best: Option<(LinearModel, f64)> = None;
        for f in candidates.iter().filter(|f| !selected.contains(f)) {
            let mut trial = selected.clone();
            trial.push(*f);
            let Some(m) = ols(&train, &trial) else { continue };
            let e = sse(&m, &valid);
            if e.is_finite() && best.as_ref().is_none_or(|(_, b)| e < *b) {
                best = Some((m, e));
            }
        }
        match best {
            Some((m, e)) if e < current_sse - 1e-9 * current_sse.abs() => {
                selected = m.features.clone();
                current = m;
                current_sse = e;
            }
            _ => break,
        }
    }
    let all: Vec<_> = examples.iter().collect();
    Ok(ols(&all, &selected).unwrap_or(current))
}

/// Per-operator linear models over plan features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub resource: ResourceKind,
    pub source: CardinalitySource,
    pub models: BTreeMap<OperatorType, LinearModel>,
}

impl LinearBaseline {
    pub fn fit(corpus: &[QueryPlan], resource: ResourceKind, source: CardinalitySource, seed: u64) -> Result<Self> {
        let mut models = BTreeMap::new();
        for (op, examples) in collect_examples(corpus, resource, source)? {
            if examples.len() >= 2 {
                models.insert(op, fit_linear(&examples, seed)?);
            }
        }
        Ok(LinearBaseline { resource, source, models })
    }
}

impl QueryEstimator for LinearBaseline {
    fn name(&self) -> &str {
        "LINEAR"
    }

    fn resource(&self) -> ResourceKind {
        self.resource
    }

    fn estimate_query(&self, plan: &QueryPlan) -> Result<f64> {
        let nodes = plan.nodes();
        let mut total = 0.0;
        for r in &nodes {
            let model = self.models.get(&r.node.op).ok_or(Error::NoModel(r.node.op, self.resource))?;
            let parent = r.parent.map(|p| nodes[p].node.op);
            let fv = extract_features(r.node, parent, self.source)?;
            total += model.predict(&fv)?.max(0.0);
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn l1_examples() {
        assert_eq!(l1_err(&[(1.0, 1.0)]).unwrap(), 0.0);
        assert_eq!(l1_err(&[(2.0, 1.0)]).unwrap(), 0.5);
        assert_eq!(l1_err(&[(4.0, 2.0), (2.0, 4.0)]).unwrap(), 0.75);
        assert!(l1_err(&[]).is_err());
        assert!(l1_err(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(ratio_buckets(&[(1.0, 1.0)]).unwrap(), [1.0, 0.0, 0.0]);
        assert_eq!(ratio_buckets(&[(1.6, 1.0)]).unwrap(), [0.0, 1.0, 0.0]);
        assert_eq!(ratio_buckets(&[(3.0, 1.0)]).unwrap(), [0.0, 0.0, 1.0]);
        assert_eq!(ratio_buckets(&[(1.5, 1.0), (2.0, 1.0)]).unwrap(), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn report_counts_exclusions() {
        let r = EvalReport::from_pairs("x", ResourceKind::CpuTime, &[(0.0, 5.0), (1.0, 1.0), (2.0, 0.0)], 1);
        assert_eq!((r.n, r.excluded), (1, 3));
        let none = EvalReport::from_pairs("zero", ResourceKind::CpuTime, &[(0.0, 5.0)], 0);
        assert!(none.l1_err.is_nan());
        assert_eq!(none.excluded, 1);
    }

    #[test]
    fn opt_examples() {
        let fit = |xy: Vec<(f64, f64)>| {
            fit_opt_baseline(&BTreeMap::from([(OperatorType::Filter, xy)])).unwrap()[&OperatorType::Filter]
        };
        assert_eq!(fit(vec![(2.0, 4.0)]), 2.0);
        assert_eq!(fit(vec![(1.0, 1.0), (2.0, 2.0)]), 1.0);
        assert_eq!(fit(vec![(1.0, 0.0), (1.0, 2.0)]), 1.0);
        assert!(fit_opt_baseline(&BTreeMap::from([(OperatorType::Sort, vec![(0.0, 1.0)])])).is_err());
    }

    fn cin(x: f64) -> FeatureVector {
        FeatureVector::from_pairs(OperatorType::Filter, &[(FeatureId::Cin1, x)])
    }

    #[test]
    fn linear_recovers_exact_line() {
        let ex: Vec<_> = (1..=20).map(|i| (cin(f64::from(i)), 3.0 * f64::from(i) + 7.0)).collect();
        let m = fit_linear(&ex, 0).unwrap();
        assert_eq!(m.features, vec![FeatureId::Cin1]);
        assert!((m.coefficients[0] - 3.0).abs() < 1e-9);
        assert!((m.intercept - 7.0).abs() < 1e-9);
    }

    #[test]
    fn linear_constant_target_is_intercept_only() {
        let ex: Vec<_> = (1..=20).map(|i| (cin(f64::from(i)), 4.0)).collect();
        let m = fit_linear(&ex, 0).unwrap();
        assert!(m.features.is_empty());
        assert!((m.intercept - 4.0).abs() < 1e-12);
    }

    #[test]
    fn linear_keeps_one_of_collinear_features() {
        let ex: Vec<_> = (1..=30)
            .map(|i| {
                let x = f64::from(i);
                let fv = FeatureVector::from_pairs(
                    OperatorType::Filter,
                    &[(FeatureId::Cout, 2.0 * x), (FeatureId::Cin1, x)],
                );
                (fv, 5.0 * x + 1.0 + if i % 2 == 0 { 0.1 } else { -0.1 })
            })
            .collect();
        let m = fit_linear(&ex, 3).unwrap();
        assert_eq!(m.features.len(), 1);
    }

    fn pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((1e-3..1e6f64, 1e-3..1e6f64), 1..50)
    }

    proptest! {
        #[test]
        fn metrics_are_scale_and_order_invariant(p in pairs(), k in 1e-3..1e3f64, rot in 0usize..50) {
            let scaled: Vec<_> = p.iter().map(|(e, t)| (e * k, t * k)).collect();
            let mut rotated = p.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            let base = l1_err(&p).unwrap();
            prop_assert!((l1_err(&scaled).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
            prop_assert!((l1_err(&rotated).unwrap() - base).abs() <= 1e-9 * base.max(1.0));
            let b = ratio_buckets(&p).unwrap();
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(ratio_buckets(&rotated).unwrap(), b);
        }

        #[test]
        fn opt_alpha_minimizes_squared_error(xy in prop::collection::vec((0.1..100.0f64, 0.0..1000.0f64), 1..30)) {
            let alpha = fit_opt_baseline(&BTreeMap::from([(OperatorType::Sort, xy.clone())])).unwrap()[&OperatorType::Sort];
            let loss = |a: f64| xy.iter().map(|(x, y)| (a * x - y).powi(2)).sum::<f64>();
            let best = loss(alpha);
            for step in [-1e-3, -1e-6, 1e-6, 1e-3] {
                prop_assert!(loss(alpha * (1.0 + step) + step) >= best * (1.0 - 1e-12));
            }
        }
    }
}
