//! Physical query plans, the line-delimited JSON corpus format, and pipeline
//! decomposition.
//!
//! A corpus file holds one query per line:
//!
//! ```json
//! {"query_id":"q1","scale":4,"root":{"op":"Sort","children":[...],
//!  "card_true":1024,"card_est":1100,"row_bytes":40,"est_io_cost":0,
//!  "cols":{"sort":2},"observed":{"cpu_us":20480}},"observed":{"cpu_us":...}}
//! ```
//!
//! Node keys are `op`, `children`, `card_true`, `card_est`, `row_bytes`,
//! `table`, `est_io_cost`, `cols` and `observed`. Nodes may also carry
//! `est_cpu_cost`, the optimizer's CPU estimate used by the OPT baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical operator taxonomy. Codes are dense, start at 1 and fit in a byte;
/// code 0 is reserved for "no parent" (the root's OUTPUTUSAGE).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum OperatorType {
    TableScan = 1,
    IndexScan = 2,
    IndexSeek = 3,
    Filter = 4,
    Sort = 5,
    HashAggregate = 6,
    StreamAggregate = 7,
    HashJoin = 8,
    MergeJoin = 9,
    NestedLoopJoin = 10,
    ComputeScalar = 11,
}

/// OUTPUTUSAGE value of the root node.
pub const ROOT_PARENT_CODE: u8 = 0;

impl OperatorType {
    pub const ALL: [OperatorType; 11] = [
        OperatorType::TableScan,
        OperatorType::IndexScan,
        OperatorType::IndexSeek,
        OperatorType::Filter,
        OperatorType::Sort,
        OperatorType::HashAggregate,
        OperatorType::StreamAggregate,
        OperatorType::HashJoin,
        OperatorType::MergeJoin,
        OperatorType::NestedLoopJoin,
        OperatorType::ComputeScalar,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorType::TableScan => "TableScan",
            OperatorType::IndexScan => "IndexScan",
            OperatorType::IndexSeek => "IndexSeek",
            OperatorType::Filter => "Filter",
            OperatorType::Sort => "Sort",
            OperatorType::HashAggregate => "HashAggregate",
            OperatorType::StreamAggregate => "StreamAggregate",
            OperatorType::HashJoin => "HashJoin",
            OperatorType::MergeJoin => "MergeJoin",
            OperatorType::NestedLoopJoin => "NestedLoopJoin",
            OperatorType::ComputeScalar => "ComputeScalar",
        }
    }

    /// Scans and seeks read a base table and have no children.
    pub fn is_access(self) -> bool {
        matches!(self, OperatorType::TableScan | OperatorType::IndexScan | OperatorType::IndexSeek)
    }

    pub fn is_join(self) -> bool {
        matches!(self, OperatorType::HashJoin | OperatorType::MergeJoin | OperatorType::NestedLoopJoin)
    }

    pub fn arity(self) -> usize {
        if self.is_access() {
            0
        } else if self.is_join() {
            2
        } else {
            1
        }
    }

    /// Whether the edge to child `index` is a pipeline boundary. Sort and
    /// hash aggregation consume their whole input before producing output,
    /// as does the build side (child 0) of a hash join.
    pub fn blocks_child(self, index: usize) -> bool {
        match self {
            OperatorType::Sort | OperatorType::HashAggregate => true,
            OperatorType::HashJoin => index == 0,
            _ => false,
        }
    }
}

impl fmt::Display for OperatorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown operator {s:?}"))
    }
}

impl Serialize for OperatorType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OperatorType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Resources the models predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResourceKind {
    /// CPU time in microseconds.
    #[serde(rename = "cpu_us")]
    CpuTime,
    /// Page read requests, regardless of buffer-pool hits.
    #[serde(rename = "logical_io")]
    LogicalIo,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 2] = [ResourceKind::CpuTime, ResourceKind::LogicalIo];

    pub fn key(self) -> &'static str {
        match self {
            ResourceKind::CpuTime => "cpu_us",
            ResourceKind::LogicalIo => "logical_io",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ResourceKind::CpuTime => 0,
            ResourceKind::LogicalIo => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ResourceKind::CpuTime),
            1 => Some(ResourceKind::LogicalIo),
            _ => None,
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ResourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cpu" | "cpu_us" => Ok(ResourceKind::CpuTime),
            "io" | "logical_io" => Ok(ResourceKind::LogicalIo),
            other => Err(format!("unknown resource {other:?} (expected cpu or io)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    #[serde(rename = "id")]
    pub table_id: String,
    #[serde(rename = "tuples")]
    pub tuple_count: f64,
    #[serde(rename = "pages")]
    pub page_count: f64,
    #[serde(rename = "columns")]
    pub column_count: f64,
    #[serde(rename = "row_bytes")]
    pub avg_row_bytes: f64,
    #[serde(default)]
    pub index_depth: f64,
}

/// Per-operator column counts (the `cols` object).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnCounts {
    #[serde(default, skip_serializing_if = "is_zero")]
    pub sort: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub hash: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub join_inner: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub join_outer: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub hash_ops_per_tuple: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

pub type Observed = BTreeMap<ResourceKind, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub op: OperatorType,
    #[serde(default)]
    pub children: Vec<PlanNode>,
    #[serde(rename = "card_true")]
    pub true_out_cardinality: f64,
    #[serde(rename = "card_est")]
    pub est_out_cardinality: f64,
    #[serde(rename = "row_bytes")]
    pub out_row_bytes: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<TableMeta>,
    #[serde(default)]
    pub est_io_cost: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub est_cpu_cost: f64,
    #[serde(rename = "cols", default)]
    pub columns: ColumnCounts,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub observed: Observed,
}

impl PlanNode {
    /// A childless node with every count zeroed; used by builders and tests.
    pub fn new(op: OperatorType, cardinality: f64, row_bytes: f64) -> Self {
        PlanNode {
            op,
            children: Vec::new(),
            true_out_cardinality: cardinality,
            est_out_cardinality: cardinality,
            out_row_bytes: row_bytes,
            table: None,
            est_io_cost: 0.0,
            est_cpu_cost: 0.0,
            columns: ColumnCounts::default(),
            observed: Observed::new(),
        }
    }

    pub fn with_children(mut self, children: Vec<PlanNode>) -> Self {
        self.children = children;
        self
    }

    pub fn with_table(mut self, table: TableMeta) -> Self {
        self.table = Some(table);
        self
    }

    pub fn cardinality(&self, estimated: bool) -> f64 {
        if estimated {
            self.est_out_cardinality
        } else {
            self.true_out_cardinality
        }
    }

    /// Base table of the first access path reached by following first
    /// children from this node.
    pub fn leading_table(&self) -> Option<&TableMeta> {
        let mut node = self;
        loop {
            if let Some(t) = &node.table {
                return Some(t);
            }
            node = node.children.first()?;
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        let expected = self.op.arity();
        if self.children.len() != expected {
            return Err(Error::Arity { path: path.to_string(), op: self.op, expected, found: self.children.len() });
        }
        let check = |name: &str, v: f64| -> Result<()> {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidValue {
                    path: path.to_string(),
                    message: format!("{name} must be a nonnegative number, got {v}"),
                });
            }
            Ok(())
        };
        check("card_true", self.true_out_cardinality)?;
        check("card_est", self.est_out_cardinality)?;
        check("row_bytes", self.out_row_bytes)?;
        check("est_io_cost", self.est_io_cost)?;
        check("est_cpu_cost", self.est_cpu_cost)?;
        let c = &self.columns;
        for (name, v) in [
            ("cols.sort", c.sort),
            ("cols.hash", c.hash),
            ("cols.join_inner", c.join_inner),
            ("cols.join_outer", c.join_outer),
            ("cols.hash_ops_per_tuple", c.hash_ops_per_tuple),
        ] {
            check(name, v)?;
        }
        for (resource, v) in &self.observed {
            check(&format!("observed.{resource}"), *v)?;
        }
        if self.op.is_access() {
            let table = self.table.as_ref().ok_or_else(|| Error::InvalidValue {
                path: path.to_string(),
                message: format!("{} requires table metadata", self.op),
            })?;
            check("table.tuples", table.tuple_count)?;
            check("table.pages", table.page_count)?;
            check("table.columns", table.column_count)?;
            check("table.row_bytes", table.avg_row_bytes)?;
            check("table.index_depth", table.index_depth)?;
            if table.tuple_count > 0.0 && table.page_count < 1.0 {
                return Err(Error::InvalidValue {
                    path: path.to_string(),
                    message: "a nonempty table needs at least one page".into(),
                });
            }
            if self.op == OperatorType::IndexSeek && table.index_depth < 1.0 {
                return Err(Error::InvalidValue {
                    path: path.to_string(),
                    message: "IndexSeek requires index_depth >= 1".into(),
                });
            }
        }
        for (i, child) in self.children.iter().enumerate() {
            child.validate(&format!("{path}.children[{i}]"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Data scale factor the query ran at.
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub root: PlanNode,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub observed: Observed,
}

fn default_scale() -> f64 {
    1.0
}

/// A node visited in pre-order, with its position in the tree.
#[derive(Debug, Clone, Copy)]
pub struct NodeRef<'a> {
    pub id: usize,
    pub parent: Option<usize>,
    /// Index of this node among its parent's children.
    pub child_index: usize,
    pub node: &'a PlanNode,
}

impl QueryPlan {
    pub fn new(query_id: impl Into<String>, root: PlanNode) -> Self {
        QueryPlan { query_id: query_id.into(), template: None, scale: 1.0, root, observed: Observed::new() }
    }

    pub fn validate(&self) -> Result<()> {
        self.root.validate("root")?;
        for (resource, v) in &self.observed {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::InvalidValue {
                    path: "observed".into(),
                    message: format!("{resource} must be nonnegative, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// All nodes in pre-order; ids are positions in this list.
    pub fn nodes(&self) -> Vec<NodeRef<'_>> {
        let mut out = Vec::new();
        let mut stack = vec![(&self.root, None, 0usize)];
        while let Some((node, parent, child_index)) = stack.pop() {
            let id = out.len();
            out.push(NodeRef { id, parent, child_index, node });
            for (i, child) in node.children.iter().enumerate().rev() {
                stack.push((child, Some(id), i));
            }
        }
        out
    }

    pub fn node_count(&self) -> usize {
        fn count(n: &PlanNode) -> usize {
            1 + n.children.iter().map(count).sum::<usize>()
        }
        count(&self.root)
    }

    /// Path string (`root.children[0]...`) of a pre-order node id.
    pub fn node_path(&self, id: usize) -> String {
        let nodes = self.nodes();
        let mut parts = Vec::new();
        let mut cur = id;
        while let Some(parent) = nodes[cur].parent {
            parts.push(format!("children[{}]", nodes[cur].child_index));
            cur = parent;
        }
        parts.push("root".into());
        parts.reverse();
        parts.join(".")
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plan serialization cannot fail")
    }
}

/// Parses and validates one plan document.
pub fn parse_plan(document: &str) -> Result<QueryPlan> {
    let plan: QueryPlan = serde_json::from_str(document)
        .map_err(|e| Error::MalformedPlan { path: "document".into(), message: e.to_string() })?;
    plan.validate()?;
    Ok(plan)
}

/// Reads a line-delimited corpus. Blank lines are skipped; errors name the
/// offending line.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<QueryPlan>> {
    let mut plans = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let plan = parse_plan(&line).map_err(|e| match e {
            Error::MalformedPlan { path, message } => {
                Error::MalformedPlan { path: format!("line {}: {path}", lineno + 1), message }
            }
            Error::Arity { path, op, expected, found } => {
                Error::Arity { path: format!("line {}: {path}", lineno + 1), op, expected, found }
            }
            Error::InvalidValue { path, message } => {
                Error::InvalidValue { path: format!("line {}: {path}", lineno + 1), message }
            }
            other => other,
        })?;
        plans.push(plan);
    }
    Ok(plans)
}

pub fn write_corpus<W: Write>(mut writer: W, plans: &[QueryPlan]) -> Result<()> {
    for plan in plans {
        writeln!(writer, "{}", plan.to_json_line())?;
    }
    writer.flush()?;
    Ok(())
}

/// A maximal group of concurrently executing operators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pipeline {
    /// Pre-order node ids, head first.
    pub nodes: Vec<usize>,
    /// Blocking parent that consumes this pipeline; `None` for the root's.
    pub boundary: Option<usize>,
}

/// Splits a plan into pipelines at blocking edges. Pipelines are ordered by
/// the pre-order position of their head node, so the root pipeline is first.
pub fn decompose_pipelines(plan: &QueryPlan) -> Vec<Pipeline> {
    let nodes = plan.nodes();
    let mut pipeline_of = vec![0usize; nodes.len()];
    let mut pipelines: Vec<Pipeline> = Vec::new();
    for r in &nodes {
        let boundary = match r.parent {
            None => None,
            Some(p) if nodes[p].node.op.blocks_child(r.child_index) => Some(p),
            Some(p) => {
                pipeline_of[r.id] = pipeline_of[p];
                pipelines[pipeline_of[p]].nodes.push(r.id);
                continue;
            }
        };
        pipeline_of[r.id] = pipelines.len();
        pipelines.push(Pipeline { nodes: vec![r.id], boundary });
    }
    pipelines
}
