//! Synthetic labelled plan corpora.
//!
//! Plans are drawn from a weighted mix of templates over a scaled table
//! catalog. Every node is labelled by an analytic cost oracle evaluated on
//! its true-cardinality features, with multiplicative lognormal noise, and
//! carries optimizer-style cost estimates computed from (possibly biased)
//! estimated cardinalities.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{dependents, extract_features, CardinalitySource, FeatureId, FeatureVector};
use crate::plan::{ColumnCounts, OperatorType, PlanNode, QueryPlan, ResourceKind, TableMeta};
use crate::scaling::{
    eligible_scale_features, log2c, scale_pairs, select_form, ScalingChoices, ScalingKind, ScalingObservation,
};

use FeatureId::*;
use OperatorType as Op;

/// One multiplicative factor of an oracle term: `v^exponent`, or
/// `log2(max(v, 2))` when `log` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFactor {
    pub feature: FeatureId,
    #[serde(default = "one")]
    pub exponent: f64,
    #[serde(default)]
    pub log: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTerm {
    pub coef: f64,
    pub factors: Vec<OracleFactor>,
    /// Round the term up to an integer (page counts).
    #[serde(default)]
    pub ceil: bool,
}

impl OracleTerm {
    fn eval(&self, fv: &FeatureVector) -> f64 {
        let v = self.factors.iter().fold(self.coef, |acc, f| {
            let x = fv.get(f.feature).unwrap_or(0.0);
            acc * if f.log { log2c(x) } else { x.powf(f.exponent) }
        });
        if self.ceil {
            v.ceil()
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub op: OperatorType,
    pub resource: ResourceKind,
    pub terms: Vec<OracleTerm>,
    /// Overrides the corpus-wide noise level for this entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
}

/// Ground-truth cost functions. Pairs without an entry cost nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub entries: Vec<OracleEntry>,
}

fn pow(feature: FeatureId) -> OracleFactor {
    OracleFactor { feature, exponent: 1.0, log: false }
}

fn lg(feature: FeatureId) -> OracleFactor {
    OracleFactor { feature, exponent: 1.0, log: true }
}

fn term(coef: f64, factors: Vec<OracleFactor>) -> OracleTerm {
    OracleTerm { coef, factors, ceil: false }
}

impl Default for OracleSpec {
    fn default() -> Self {
        let cpu = |op, terms| OracleEntry { op, resource: ResourceKind::CpuTime, terms, noise_sigma: None };
        let io = |op, terms| OracleEntry { op, resource: ResourceKind::LogicalIo, terms, noise_sigma: None };
        OracleSpec {
            entries: vec![
                cpu(Op::TableScan, vec![term(0.5, vec![pow(TSize)]), term(0.1, vec![pow(Cout), pow(TColumns)])]),
                io(Op::TableScan, vec![term(1.0, vec![pow(Pages)])]),
                cpu(Op::IndexScan, vec![term(0.4, vec![pow(TSize)]), term(0.1, vec![pow(Cout), pow(TColumns)])]),
                io(Op::IndexScan, vec![term(1.0, vec![pow(Pages)])]),
                cpu(Op::IndexSeek, vec![term(20.0, vec![pow(IndexDepth)]), term(1.5, vec![pow(Cout)])]),
                io(
                    Op::IndexSeek,
                    vec![
                        term(1.0, vec![pow(IndexDepth)]),
                        OracleTerm { coef: 1.0 / 8192.0, factors: vec![pow(Cout), pow(SoutAvg)], ceil: true },
                    ],
                ),
                cpu(Op::Filter, vec![term(1.0, vec![pow(Cin1)])]),
                cpu(Op::Sort, vec![term(2.0, vec![pow(Cin1), lg(Cin1)])]),
                cpu(
                    Op::HashAggregate,
                    vec![term(1.0, vec![pow(Cin1)]), term(0.5, vec![pow(HashOpTot)]), term(2.0, vec![pow(Cout)])],
                ),
                cpu(Op::StreamAggregate, vec![term(0.8, vec![pow(Cin1)])]),
                cpu(
                    Op::HashJoin,
                    vec![term(1.0, vec![pow(Cin1)]), term(0.8, vec![pow(Cin2)]), term(0.5, vec![pow(HashOpTot)])],
                ),
                cpu(Op::MergeJoin, vec![term(0.05, vec![pow(SinSum)])]),
                cpu(Op::NestedLoopJoin, vec![term(1.5, vec![pow(Cin1), lg(SSekTable)])]),
                cpu(Op::ComputeScalar, vec![term(0.3, vec![pow(Cin1)])]),
            ],
        }
    }
}

impl OracleSpec {
    fn entry(&self, op: OperatorType, resource: ResourceKind) -> Option<&OracleEntry> {
        self.entries.iter().find(|e| e.op == op && e.resource == resource)
    }

    /// Noiseless cost; never negative.
    pub fn cost(&self, op: OperatorType, resource: ResourceKind, fv: &FeatureVector) -> f64 {
        self.entry(op, resource).map_or(0.0, |e| e.terms.iter().map(|t| t.eval(fv)).sum::<f64>()).max(0.0)
    }

    pub fn noise_sigma(&self, op: OperatorType, resource: ResourceKind, default: f64) -> f64 {
        self.entry(op, resource).and_then(|e| e.noise_sigma).unwrap_or(default)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Scan,
    Filter,
    Sort,
    HashAggregate,
    StreamAggregate,
    HashJoin,
    MergeJoin,
    IndexNestedLoop,
    Seek,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 9] = [
        TemplateKind::Scan,
        TemplateKind::Filter,
        TemplateKind::Sort,
        TemplateKind::HashAggregate,
        TemplateKind::StreamAggregate,
        TemplateKind::HashJoin,
        TemplateKind::MergeJoin,
        TemplateKind::IndexNestedLoop,
        TemplateKind::Seek,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::Scan => "scan",
            TemplateKind::Filter => "filter",
            TemplateKind::Sort => "sort",
            TemplateKind::HashAggregate => "hash_aggregate",
            TemplateKind::StreamAggregate => "stream_aggregate",
            TemplateKind::HashJoin => "hash_join",
            TemplateKind::MergeJoin => "merge_join",
            TemplateKind::IndexNestedLoop => "index_nested_loop",
            TemplateKind::Seek => "seek",
        }
    }

    /// Default selectivity range of the template's predicate.
    fn default_selectivity(self) -> [f64; 2] {
        match self {
            TemplateKind::Scan | TemplateKind::Sort | TemplateKind::StreamAggregate | TemplateKind::MergeJoin => {
                [1.0, 1.0]
            }
            TemplateKind::Seek => [1e-5, 1e-2],
            TemplateKind::IndexNestedLoop => [1e-5, 1e-1],
            _ => [1e-3, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub name: TemplateKind,
    #[serde(default = "one")]
    pub weight: f64,
    /// Log-uniform selectivity range `[low, high]` of the template predicate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selectivity: Option<[f64; 2]>,
    /// Restricts the tables the template draws from; empty means any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tables: Vec<String>,
}

impl TemplateSpec {
    pub fn new(name: TemplateKind) -> Self {
        TemplateSpec { name, weight: 1.0, selectivity: None, tables: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub id: String,
    /// Tuple count at scale 1.
    pub base_tuples: f64,
    pub row_bytes: f64,
    pub columns: f64,
    /// Fraction of each page holding row data. The optimizer's page
    /// estimate assumes full pages; the catalog reports the real count.
    #[serde(default = "one")]
    pub fill_factor: f64,
}

impl TableSpec {
    pub fn new(id: &str, base_tuples: f64, row_bytes: f64, columns: f64) -> Self {
        TableSpec { id: id.into(), base_tuples, row_bytes, columns, fill_factor: 1.0 }
    }

    pub fn with_fill_factor(mut self, fill_factor: f64) -> Self {
        self.fill_factor = fill_factor;
        self
    }

    /// Page count an optimizer derives from tuple count and row width.
    pub fn packed_pages(tuples: f64, row_bytes: f64, page_bytes: f64) -> f64 {
        (tuples * row_bytes / page_bytes).ceil().max(1.0)
    }

    /// Table statistics at a data scale factor.
    pub fn at_scale(&self, scale: f64, page_bytes: f64) -> TableMeta {
        let tuples = (self.base_tuples * scale).round().max(1.0);
        TableMeta {
            table_id: self.id.clone(),
            tuple_count: tuples,
            page_count: Self::packed_pages(tuples, self.row_bytes, page_bytes * self.fill_factor),
            column_count: self.columns,
            avg_row_bytes: self.row_bytes,
            index_depth: (tuples.ln() / 256f64.ln()).ceil().max(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CardErrorSpec {
    /// Standard deviation of the log-scale estimation error.
    pub sigma: f64,
    /// Systematic multiplicative bias.
    pub bias: f64,
}

impl Default for CardErrorSpec {
    fn default() -> Self {
        CardErrorSpec { sigma: 0.0, bias: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub queries: usize,
    pub seed: u64,
    pub scales: Vec<f64>,
    pub templates: Vec<TemplateSpec>,
    pub tables: Vec<TableSpec>,
    pub card_error: CardErrorSpec,
    pub noise_sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
    pub page_bytes: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            queries: 1000,
            seed: 0,
            scales: vec![1.0],
            templates: TemplateKind::ALL.into_iter().map(TemplateSpec::new).collect(),
            tables: default_catalog(),
            card_error: CardErrorSpec::default(),
            noise_sigma: 0.05,
            oracle: None,
            page_bytes: 8192.0,
        }
    }
}

/// A small decision-support style catalog (tuple counts at scale 1).
pub fn default_catalog() -> Vec<TableSpec> {
    vec![
        TableSpec::new("lineitem", 60_000.0, 120.0, 16.0).with_fill_factor(0.9),
        TableSpec::new("orders", 15_000.0, 100.0, 9.0).with_fill_factor(0.75),
        TableSpec::new("partsupp", 8_000.0, 140.0, 5.0).with_fill_factor(0.8),
        TableSpec::new("part", 2_000.0, 150.0, 9.0).with_fill_factor(0.7),
        TableSpec::new("customer", 1_500.0, 160.0, 8.0).with_fill_factor(0.65),
        TableSpec::new("supplier", 100.0, 140.0, 7.0).with_fill_factor(0.6),
    ]
}

impl CorpusSpec {
    pub fn oracle(&self) -> OracleSpec {
        self.oracle.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.templates.iter().map(|t| t.weight.max(0.0)).sum();
        if self.templates.is_empty() || !(total > 0.0) {
            return Err(Error::EmptyTemplateMix);
        }
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.tables.is_empty() {
            return bad("table catalog is empty");
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0)) {
            return bad("scales must be a non-empty list of positive factors");
        }
        if self.tables.iter().any(|t| !(t.base_tuples > 0.0 && t.row_bytes > 0.0 && t.columns > 0.0)) {
            return bad("table sizes must be positive");
        }
        if self.tables.iter().any(|t| !(t.fill_factor > 0.0 && t.fill_factor <= 1.0)) {
            return bad("fill_factor must lie in (0, 1]");
        }
        if !(self.card_error.sigma >= 0.0) || !(self.card_error.bias > 0.0) {
            return bad("card_error needs sigma >= 0 and bias > 0");
        }
        if !(self.noise_sigma >= 0.0) || !(self.page_bytes > 0.0) {
            return bad("noise_sigma must be >= 0 and page_bytes > 0");
        }
        for t in &self.templates {
            if let Some([lo, hi]) = t.selectivity {
                if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                    return bad("template selectivity must satisfy 0 < low <= high <= 1");
                }
            }
            if let Some(missing) = t.tables.iter().find(|id| !self.tables.iter().any(|s| &s.id == *id)) {
                return Err(Error::InvalidConfig(format!("template references unknown table {missing}")));
            }
        }
        Ok(())
    }
}

fn query_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn log_uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo.ln()..=hi.ln()).exp()
    }
}

/// Per-query generation state.
struct Builder<'a> {
    spec: &'a CorpusSpec,
    rng: ChaCha8Rng,
    scale: f64,
    card_noise: Normal<f64>,
}

impl Builder<'_> {
    fn table(&mut self, allowed: &[String]) -> TableMeta {
        let pool: Vec<&TableSpec> = if allowed.is_empty() {
            self.spec.tables.iter().collect()
        } else {
            self.spec.tables.iter().filter(|t| allowed.contains(&t.id)).collect()
        };
        let t = pool[self.rng.random_range(0..pool.len())];
        t.at_scale(self.scale, self.spec.page_bytes)
    }

    fn node(&mut self, op: OperatorType, card: f64, row_bytes: f64) -> PlanNode {
        let card = card.round().max(1.0);
        let err = self.card_noise.sample(&mut self.rng).exp();
        let mut n = PlanNode::new(op, card, row_bytes.round().max(1.0));
        n.est_out_cardinality = (card * self.spec.card_error.bias * err).ceil().max(1.0);
        n
    }

    fn scan(&mut self, op: OperatorType, table: TableMeta, selectivity: f64) -> PlanNode {
        let projection = self.rng.random_range(0.3..=1.0);
        let card = table.tuple_count * selectivity;
        let mut n = self.node(op, card, table.avg_row_bytes * projection);
        n.est_io_cost = TableSpec::packed_pages(table.tuple_count, table.avg_row_bytes, self.spec.page_bytes);
        n.est_cpu_cost = 1.1e-6 * table.tuple_count;
        n.table = Some(table);
        n
    }

    fn seek(&mut self, table: TableMeta, rows: f64) -> PlanNode {
        let projection = self.rng.random_range(0.3..=1.0);
        let mut n = self.node(Op::IndexSeek, rows.min(table.tuple_count), table.avg_row_bytes * projection);
        n.est_io_cost = table.index_depth + (n.est_out_cardinality * n.out_row_bytes / self.spec.page_bytes).ceil();
        n.est_cpu_cost = 1e-6 * (table.index_depth + n.est_out_cardinality);
        n.table = Some(table);
        n
    }

    fn unary(&mut self, op: OperatorType, child: PlanNode, card: f64, row_bytes: f64) -> PlanNode {
        let est_in = child.est_out_cardinality;
        let mut n = self.node(op, card, row_bytes);
        n.est_cpu_cost = match op {
            Op::Sort => 1e-5 * est_in * log2c(est_in),
            Op::HashAggregate => 2e-6 * est_in,
            Op::ComputeScalar => 1e-7 * est_in,
            _ => 1e-6 * est_in,
        };
        n.children = vec![child];
        n
    }

    fn binary(&mut self, op: OperatorType, left: PlanNode, right: PlanNode, card: f64) -> PlanNode {
        let width = left.out_row_bytes + right.out_row_bytes;
        let (c1, c2) = (left.est_out_cardinality, right.est_out_cardinality);
        let mut n = self.node(op, card, width);
        n.est_cpu_cost = match op {
            Op::HashJoin => 2e-6 * (c1 + c2),
            Op::NestedLoopJoin => 1e-6 * c1 * log2c(c2),
            _ => 1e-6 * (c1 + c2),
        };
        n.children = vec![left, right];
        n
    }

    fn filtered_scan(&mut self, tables: &[String], selectivity: [f64; 2]) -> PlanNode {
        let table = self.table(tables);
        let scan = self.scan(Op::TableScan, table, 1.0);
        let s = log_uniform(&mut self.rng, selectivity);
        let (card, width) = (scan.true_out_cardinality * s, scan.out_row_bytes);
        self.unary(Op::Filter, scan, card, width)
    }

    fn build(&mut self, t: &TemplateSpec) -> PlanNode {
        let sel = t.selectivity.unwrap_or_else(|| t.name.default_selectivity());
        match t.name {
            TemplateKind::Scan => {
                let table = self.table(&t.tables);
                let s = log_uniform(&mut self.rng, sel);
                self.scan(Op::TableScan, table, s)
            }
            TemplateKind::Filter => self.filtered_scan(&t.tables, sel),
            TemplateKind::Sort => {
                let table = self.table(&t.tables);
                let s = log_uniform(&mut self.rng, sel);
                let scan = self.scan(Op::TableScan, table, s);
                let (card, width) = (scan.true_out_cardinality, scan.out_row_bytes);
                let mut sort = self.unary(Op::Sort, scan, card, width);
                sort.columns.sort = f64::from(self.rng.random_range(1..=3u8));
                sort
            }
            TemplateKind::HashAggregate => {
                let input = self.filtered_scan(&t.tables, sel);
                let hash = f64::from(self.rng.random_range(1..=3u8));
                let groups = input.true_out_cardinality * log_uniform(&mut self.rng, [1e-4, 0.1]);
                let mut agg = self.unary(Op::HashAggregate, input, groups, 8.0 * (hash + 1.0));
                agg.columns = ColumnCounts { hash, hash_ops_per_tuple: hash, ..Default::default() };
                agg
            }
            TemplateKind::StreamAggregate => {
                let table = self.table(&t.tables);
                let s = log_uniform(&mut self.rng, sel);
                let scan = self.scan(Op::TableScan, table, s);
                let (card, width) = (scan.true_out_cardinality, scan.out_row_bytes);
                let mut sort = self.unary(Op::Sort, scan, card, width);
                let keys = f64::from(self.rng.random_range(1..=2u8));
                sort.columns.sort = keys;
                let groups = card * log_uniform(&mut self.rng, [1e-4, 0.1]);
                self.unary(Op::StreamAggregate, sort, groups, 8.0 * (keys + 1.0))
            }
            TemplateKind::HashJoin => {
                let build = self.filtered_scan(&t.tables, sel);
                let table = self.table(&t.tables);
                let probe = self.scan(Op::TableScan, table, 1.0);
                let card =
                    build.true_out_cardinality.min(probe.true_out_cardinality) * log_uniform(&mut self.rng, [0.1, 1.0]);
                let keys = f64::from(self.rng.random_range(1..=2u8));
                let mut join = self.binary(Op::HashJoin, build, probe, card);
                join.columns =
                    ColumnCounts { join_inner: keys, join_outer: keys, hash_ops_per_tuple: keys, ..Default::default() };
                join
            }
            TemplateKind::MergeJoin => {
                let (ta, tb) = (self.table(&t.tables), self.table(&t.tables));
                let s = log_uniform(&mut self.rng, sel);
                let left = self.scan(Op::IndexScan, ta, s);
                let right = self.scan(Op::IndexScan, tb, 1.0);
                let card =
                    left.true_out_cardinality.min(right.true_out_cardinality) * log_uniform(&mut self.rng, [0.1, 1.0]);
                let keys = f64::from(self.rng.random_range(1..=2u8));
                let mut join = self.binary(Op::MergeJoin, left, right, card);
                join.columns = ColumnCounts { join_inner: keys, join_outer: keys, ..Default::default() };
                join
            }
            TemplateKind::IndexNestedLoop => {
                let outer = self.filtered_scan(&t.tables, sel);
                let table = self.table(&t.tables);
                let matches = log_uniform(&mut self.rng, [1.0, 4.0]);
                let inner = self.seek(table, outer.true_out_cardinality * matches);
                let card = inner.true_out_cardinality;
                let keys = f64::from(self.rng.random_range(1..=2u8));
                let mut join = self.binary(Op::NestedLoopJoin, outer, inner, card);
                join.columns = ColumnCounts { join_inner: keys, join_outer: keys, ..Default::default() };
                join
            }
            TemplateKind::Seek => {
                let table = self.table(&t.tables);
                let rows = table.tuple_count * log_uniform(&mut self.rng, sel);
                let seek = self.seek(table, rows);
                let (card, width) = (seek.true_out_cardinality, seek.out_row_bytes + 8.0);
                self.unary(Op::ComputeScalar, seek, card, width)
            }
        }
    }
}

/// Labels every node of `plan` with oracle costs (one noise draw per node
/// and resource) and sets the query totals.
fn label(plan: &mut QueryPlan, oracle: &OracleSpec, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    fn walk(
        node: &mut PlanNode,
        parent: Option<OperatorType>,
        oracle: &OracleSpec,
        noise_sigma: f64,
        rng: &mut ChaCha8Rng,
        totals: &mut BTreeMap<ResourceKind, f64>,
    ) -> Result<()> {
        let fv = extract_features(node, parent, CardinalitySource::True)?;
        for resource in ResourceKind::ALL {
            let sigma = oracle.noise_sigma(node.op, resource, noise_sigma);
            let noise = Normal::new(0.0, sigma)
                .map_err(|e| Error::InvalidConfig(format!("noise sigma: {e}")))?
                .sample(rng)
                .exp();
            let v = oracle.cost(node.op, resource, &fv) * noise;
            node.observed.insert(resource, v);
            *totals.entry(resource).or_default() += v;
        }
        let op = node.op;
        for child in &mut node.children {
            walk(child, Some(op), oracle, noise_sigma, rng, totals)?;
        }
        Ok(())
    }
    let mut totals = BTreeMap::new();
    walk(&mut plan.root, None, oracle, noise_sigma, rng, &mut totals)?;
    plan.observed = totals;
    Ok(())
}

/// Generates the corpus described by `spec`; identical specs give identical
/// corpora.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<QueryPlan>> {
    spec.validate()?;
    let oracle = spec.oracle();
    let card_noise =
        Normal::new(0.0, spec.card_error.sigma).map_err(|e| Error::InvalidConfig(format!("card_error: {e}")))?;
    let weights: Vec<f64> = spec.templates.iter().map(|t| t.weight.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    (0..spec.queries)
        .map(|i| {
            let mut rng = query_rng(spec.seed, i);
            let mut pick = rng.random_range(0.0..total);
            let template = spec
                .templates
                .iter()
                .zip(&weights)
                .find(|(_, w)| {
                    if pick < **w {
                        true
                    } else {
                        pick -= **w;
                        false
                    }
                })
                .map_or_else(|| spec.templates.iter().rfind(|t| t.weight > 0.0).unwrap(), |(t, _)| t);
            let scale = spec.scales[rng.random_range(0..spec.scales.len())];
            let mut b = Builder { spec, rng, scale, card_noise };
            let root = b.build(template);
            let mut plan = QueryPlan::new(format!("q{i:06}"), root);
            plan.template = Some(template.name.name().to_string());
            plan.scale = scale;
            label(&mut plan, &oracle, spec.noise_sigma, &mut b.rng)?;
            Ok(plan)
        })
        .collect()
}

/// Splits a corpus into queries at scale ≤ `threshold` and the rest.
pub fn split_by_scale(corpus: &[QueryPlan], threshold: f64) -> (Vec<QueryPlan>, Vec<QueryPlan>) {
    corpus.iter().cloned().partition(|q| q.scale <= threshold)
}

/// Factors applied to the base value in a single-feature scaling experiment.
pub const SCALING_FACTORS: [f64; 11] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0];
/// Per-axis factors of a two-feature experiment grid.
pub const PAIR_FACTORS: [f64; 6] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

/// Multiplies `f` and all of its dependents by `k`, keeping the ratios
/// between them fixed.
pub fn co_scale(fv: &FeatureVector, f: FeatureId, k: f64) -> FeatureVector {
    let mut out = fv.clone();
    for g in std::iter::once(f).chain(dependents(f)) {
        if let Some(v) = out.get(g) {
            out.set(g, v * k);
        }
    }
    out
}

/// Varies `features` of `base` over the experiment factors and records the
/// oracle's cost at each point.
pub fn scaling_observations(
    oracle: &OracleSpec,
    resource: ResourceKind,
    base: &FeatureVector,
    features: &[FeatureId],
) -> Vec<ScalingObservation> {
    let op = base.op;
    let value = |fv: &FeatureVector, f: FeatureId| fv.get(f).unwrap_or(0.0);
    match features {
        [f] => SCALING_FACTORS
            .iter()
            .map(|&k| {
                let fv = co_scale(base, *f, k);
                ScalingObservation::new(vec![value(&fv, *f)], oracle.cost(op, resource, &fv))
            })
            .collect(),
        [f1, f2] => {
            let mut out = Vec::new();
            for &k1 in &PAIR_FACTORS {
                for &k2 in &PAIR_FACTORS {
                    let fv = co_scale(&co_scale(base, *f1, k1), *f2, k2);
                    out.push(ScalingObservation::new(
                        vec![value(&fv, *f1), value(&fv, *f2)],
                        oracle.cost(op, resource, &fv),
                    ));
                }
            }
            out
        }
        _ => Vec::new(),
    }
}

/// Median example of `examples` ranked by feature `f`.
fn median_by(examples: &[FeatureVector], f: FeatureId) -> Option<&FeatureVector> {
    let mut ranked: Vec<&FeatureVector> = examples.iter().filter(|fv| fv.get(f).is_some_and(|v| v > 0.0)).collect();
    ranked.sort_by(|a, b| a.get(f).unwrap_or(0.0).total_cmp(&b.get(f).unwrap_or(0.0)));
    ranked.get(ranked.len() / 2).copied()
}

/// Runs a scaling experiment for every eligible scale feature (and join
/// feature pair) of every operator in `examples`, starting from the median
/// training example, and records the best-fitting form.
pub fn fit_scaling_choices(
    oracle: &OracleSpec,
    examples: &BTreeMap<OperatorType, Vec<FeatureVector>>,
    resources: &[ResourceKind],
) -> ScalingChoices {
    let mut choices = ScalingChoices::new();
    for &resource in resources {
        for (&op, fvs) in examples {
            let singles = eligible_scale_features(op, resource).into_iter().map(|f| vec![f]);
            let pairs = scale_pairs(op, resource).into_iter().map(|p| p.to_vec());
            for features in singles.chain(pairs) {
                let Some(base) = median_by(fvs, features[0]) else { continue };
                if features.iter().any(|f| !base.get(*f).is_some_and(|v| v > 0.0)) {
                    continue;
                }
                let obs = scaling_observations(oracle, resource, base, &features);
                let candidates: &[ScalingKind] =
                    if features.len() == 2 { &ScalingKind::PAIR } else { &ScalingKind::SINGLE };
                if let Ok(form) = select_form(candidates, &obs) {
                    choices.insert(op, resource, features, form);
                }
            }
        }
    }
    choices
}

/// Feature vectors (true cardinalities) per operator type in a corpus.
pub fn corpus_features(corpus: &[QueryPlan]) -> Result<BTreeMap<OperatorType, Vec<FeatureVector>>> {
    let mut out: BTreeMap<OperatorType, Vec<FeatureVector>> = BTreeMap::new();
    for plan in corpus {
        let nodes = plan.nodes();
        for r in &nodes {
            let parent = r.parent.map(|p| nodes[p].node.op);
            out.entry(r.node.op).or_default().push(extract_features(r.node, parent, CardinalitySource::True)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(queries: usize) -> CorpusSpec {
        CorpusSpec { queries, ..Default::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_corpus(&spec(50)).unwrap();
        let b = generate_corpus(&spec(50)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusSpec { seed: 1, ..spec(50) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_labels_match_oracle() {
        let s = CorpusSpec { noise_sigma: 0.0, ..spec(60) };
        let oracle = s.oracle();
        for plan in generate_corpus(&s).unwrap() {
            plan.validate().unwrap();
            let nodes = plan.nodes();
            for r in &nodes {
                assert_eq!(r.node.est_out_cardinality, r.node.true_out_cardinality);
                let parent = r.parent.map(|p| nodes[p].node.op);
                let fv = extract_features(r.node, parent, CardinalitySource::True).unwrap();
                for res in ResourceKind::ALL {
                    assert_eq!(r.node.observed[&res], oracle.cost(r.node.op, res, &fv));
                }
            }
            let total: f64 = nodes.iter().map(|r| r.node.observed[&ResourceKind::CpuTime]).sum();
            assert_eq!(plan.observed[&ResourceKind::CpuTime], total);
        }
    }

    #[test]
    fn sort_oracle_example() {
        let fv = FeatureVector::from_pairs(Op::Sort, &[(Cin1, 1024.0), (MinComp, 2048.0)]);
        assert_eq!(OracleSpec::default().cost(Op::Sort, ResourceKind::CpuTime, &fv), 20480.0);
    }

    #[test]
    fn empty_template_mix() {
        let s = CorpusSpec { templates: vec![], ..spec(5) };
        assert!(matches!(generate_corpus(&s), Err(Error::EmptyTemplateMix)));
        let zero = CorpusSpec {
            templates: vec![TemplateSpec { weight: 0.0, ..TemplateSpec::new(TemplateKind::Scan) }],
            ..spec(5)
        };
        assert_eq!(generate_corpus(&zero).unwrap_err().to_string(), "empty template mix");
    }

    #[test]
    fn split_examples() {
        let s = CorpusSpec { scales: vec![1.0, 2.0, 4.0, 6.0, 8.0, 10.0], ..spec(120) };
        let corpus = generate_corpus(&s).unwrap();
        let (small, large) = split_by_scale(&corpus, 4.0);
        assert!(small.iter().all(|q| q.scale <= 4.0));
        assert!(large.iter().all(|q| q.scale >= 6.0));
        assert_eq!(small.len() + large.len(), corpus.len());
        assert_eq!(split_by_scale(&corpus, 11.0).1.len(), 0);
        assert_eq!(split_by_scale(&corpus, 0.0).0.len(), 0);
    }

    #[test]
    fn bias_shifts_estimates() {
        let s = CorpusSpec { card_error: CardErrorSpec { sigma: 0.3, bias: 2.0 }, ..spec(300) };
        let mut log_ratios = Vec::new();
        for plan in generate_corpus(&s).unwrap() {
            for r in plan.nodes() {
                if r.node.true_out_cardinality >= 1000.0 {
                    log_ratios.push((r.node.est_out_cardinality / r.node.true_out_cardinality).ln());
                }
            }
        }
        let mean = log_ratios.iter().sum::<f64>() / log_ratios.len() as f64;
        assert!((mean.exp() - 2.0).abs() < 0.1, "geometric mean ratio {}", mean.exp());
    }

    #[test]
    fn every_template_generates() {
        for kind in TemplateKind::ALL {
            let s = CorpusSpec { templates: vec![TemplateSpec::new(kind)], ..spec(10) };
            for plan in generate_corpus(&s).unwrap() {
                plan.validate().unwrap();
                assert_eq!(plan.template.as_deref(), Some(kind.name()));
            }
        }
    }

    #[test]
    fn spec_json_defaults() {
        let s: CorpusSpec = serde_json::from_str(r#"{"queries": 3, "templates": [{"name": "sort"}]}"#).unwrap();
        assert_eq!(s.queries, 3);
        assert_eq!(s.templates[0].weight, 1.0);
        assert_eq!(s.page_bytes, 8192.0);
        let back: CorpusSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn experiments_recover_planted_forms() {
        let corpus = generate_corpus(&CorpusSpec { noise_sigma: 0.0, ..spec(300) }).unwrap();
        let choices =
            fit_scaling_choices(&OracleSpec::default(), &corpus_features(&corpus).unwrap(), &[ResourceKind::CpuTime]);
        let kind = |op, fs: &[FeatureId]| choices.get(op, ResourceKind::CpuTime, fs).unwrap().kind;
        assert_eq!(kind(Op::Sort, &[Cin1]), ScalingKind::NLogN);
        assert_eq!(kind(Op::Filter, &[Cin1]), ScalingKind::Linear);
        let nlj = choices.get(Op::NestedLoopJoin, ResourceKind::CpuTime, &[Cin1, SSekTable]).unwrap();
        assert_eq!((nlj.kind, nlj.swapped), (ScalingKind::FLogSecond, false));
    }

    fn oracle_probe() -> impl Strategy<Value = (OperatorType, Vec<f64>)> {
        (prop::sample::select(OperatorType::ALL.to_vec()), prop::collection::vec(1.0..1e6f64, FEATURE_SLOTS))
    }

    const FEATURE_SLOTS: usize = crate::features::FEATURE_COUNT;

    proptest! {
        #[test]
        fn default_oracle_is_monotone(
            (op, values) in oracle_probe(),
            which in 0usize..FEATURE_SLOTS,
            k in 1.0..100.0f64,
        ) {
            let oracle = OracleSpec::default();
            let mut fv = FeatureVector::new(op, CardinalitySource::True);
            for (f, v) in FeatureId::ALL.iter().zip(&values) {
                fv.set(*f, *v);
            }
            let f = FeatureId::ALL[which];
            prop_assume!(!f.is_categorical());
            let mut bigger = fv.clone();
            bigger.set(f, values[which] * k);
            for res in ResourceKind::ALL {
                prop_assert!(oracle.cost(op, res, &bigger) >= oracle.cost(op, res, &fv));
            }
        }

        #[test]
        fn derived_identities_hold(seed in 0u64..1000) {
            let corpus = generate_corpus(&CorpusSpec { seed, ..spec(8) }).unwrap();
            for plan in &corpus {
                let nodes = plan.nodes();
                for r in &nodes {
                    let parent = r.parent.map(|p| nodes[p].node.op);
                    let fv = extract_features(r.node, parent, CardinalitySource::True).unwrap();
                    let g = |f| fv.get(f).unwrap();
                    prop_assert_eq!(g(SoutTot), g(Cout) * g(SoutAvg));
                    if let Some(h) = fv.get(HashOpTot) {
                        prop_assert_eq!(h, g(HashOpAvg) * g(Cin1));
                    }
                    if let Some(m) = fv.get(MinComp) {
                        prop_assert_eq!(m, g(Cin1) * g(CSortCol));
                    }
                    if let Some(s) = fv.get(SinSum) {
                        prop_assert_eq!(s, g(SinTot1) + g(SinTot2));
                    }
                }
            }
        }
    }
}
