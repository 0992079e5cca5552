//! Operator feature vectors and the feature-dependency table.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{OperatorType, PlanNode, ROOT_PARENT_CODE};

pub const FEATURE_COUNT: usize = 24;

/// Numeric plan features. Per-child input features are materialised once per
/// child (suffix 1 = first/outer/build child, 2 = second/inner/probe child).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum FeatureId {
    Cout = 0,
    SoutAvg = 1,
    SoutTot = 2,
    Cin1 = 3,
    SinAvg1 = 4,
    SinTot1 = 5,
    Cin2 = 6,
    SinAvg2 = 7,
    SinTot2 = 8,
    OutputUsage = 9,
    TSize = 10,
    Pages = 11,
    TColumns = 12,
    EstIoCost = 13,
    IndexDepth = 14,
    HashOpAvg = 15,
    HashOpTot = 16,
    CHashCol = 17,
    CInnerCol = 18,
    COuterCol = 19,
    SSekTable = 20,
    MinComp = 21,
    CSortCol = 22,
    SinSum = 23,
}

use FeatureId::*;

impl FeatureId {
    pub const ALL: [FeatureId; FEATURE_COUNT] = [
        Cout,
        SoutAvg,
        SoutTot,
        Cin1,
        SinAvg1,
        SinTot1,
        Cin2,
        SinAvg2,
        SinTot2,
        OutputUsage,
        TSize,
        Pages,
        TColumns,
        EstIoCost,
        IndexDepth,
        HashOpAvg,
        HashOpTot,
        CHashCol,
        CInnerCol,
        COuterCol,
        SSekTable,
        MinComp,
        CSortCol,
        SinSum,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Cout => "COUT",
            SoutAvg => "SOUTAVG",
            SoutTot => "SOUTTOT",
            Cin1 => "CIN1",
            SinAvg1 => "SINAVG1",
            SinTot1 => "SINTOT1",
            Cin2 => "CIN2",
            SinAvg2 => "SINAVG2",
            SinTot2 => "SINTOT2",
            OutputUsage => "OUTPUTUSAGE",
            TSize => "TSIZE",
            Pages => "PAGES",
            TColumns => "TCOLUMNS",
            EstIoCost => "ESTIOCOST",
            IndexDepth => "INDEXDEPTH",
            HashOpAvg => "HASHOPAVG",
            HashOpTot => "HASHOPTOT",
            CHashCol => "CHASHCOL",
            CInnerCol => "CINNERCOL",
            COuterCol => "COUTERCOL",
            SSekTable => "SSEKTABLE",
            MinComp => "MINCOMP",
            CSortCol => "CSORTCOL",
            SinSum => "SINSUM",
        }
    }

    /// OUTPUTUSAGE holds the parent's operator code; it is never scaled,
    /// normalised or range-checked.
    pub fn is_categorical(self) -> bool {
        self == OutputUsage
    }

    fn bit(self) -> u32 {
        1 << self.code()
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.to_ascii_uppercase();
        // Unsuffixed per-child names refer to the first child.
        let canonical = match upper.as_str() {
            "CIN" => "CIN1",
            "SINAVG" => "SINAVG1",
            "SINTOT" => "SINTOT1",
            other => other,
        };
        Self::ALL.iter().copied().find(|f| f.name() == canonical).ok_or_else(|| format!("unknown feature {s:?}"))
    }
}

impl Serialize for FeatureId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for FeatureId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Whether tuple-count features come from post-execution counts or from the
/// optimizer's estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CardinalitySource {
    #[default]
    True,
    Estimated,
}

impl FromStr for CardinalitySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "true" => Ok(CardinalitySource::True),
            "estimated" | "est" => Ok(CardinalitySource::Estimated),
            other => Err(format!("unknown cardinality source {other:?}")),
        }
    }
}

/// Sparse feature map backed by a fixed array and a presence mask.
#[derive(Clone, PartialEq)]
pub struct FeatureVector {
    pub op: OperatorType,
    pub source: CardinalitySource,
    mask: u32,
    values: [f64; FEATURE_COUNT],
}

impl FeatureVector {
    pub fn new(op: OperatorType, source: CardinalitySource) -> Self {
        FeatureVector { op, source, mask: 0, values: [0.0; FEATURE_COUNT] }
    }

    pub fn from_pairs(op: OperatorType, pairs: &[(FeatureId, f64)]) -> Self {
        let mut fv = FeatureVector::new(op, CardinalitySource::True);
        for &(f, v) in pairs {
            fv.set(f, v);
        }
        fv
    }

    pub fn get(&self, f: FeatureId) -> Option<f64> {
        self.contains(f).then(|| self.values[f as usize])
    }

    pub fn set(&mut self, f: FeatureId, v: f64) {
        self.mask |= f.bit();
        self.values[f as usize] = v;
    }

    pub fn remove(&mut self, f: FeatureId) -> Option<f64> {
        let old = self.get(f);
        self.mask &= !f.bit();
        self.values[f as usize] = 0.0;
        old
    }

    pub fn contains(&self, f: FeatureId) -> bool {
        self.mask & f.bit() != 0
    }

    pub fn len(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    /// Bit `i` is set when the feature with code `i` is present.
    pub fn mask(&self) -> u32 {
        self.mask
    }

    /// Raw slot array; absent features read as 0.
    pub fn raw(&self) -> &[f64; FEATURE_COUNT] {
        &self.values
    }

    pub fn features(&self) -> impl Iterator<Item = FeatureId> + '_ {
        FeatureId::ALL.into_iter().filter(|f| self.contains(*f))
    }

    pub fn iter(&self) -> impl Iterator<Item = (FeatureId, f64)> + '_ {
        self.features().map(|f| (f, self.values[f as usize]))
    }
}

impl fmt::Debug for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (id, v) in self.iter() {
            m.entry(&id.name(), &v);
        }
        m.finish()
    }
}

/// Features an operator type exposes, in code order.
pub fn schema(op: OperatorType) -> Vec<FeatureId> {
    let mut set = vec![Cout, SoutAvg, SoutTot, OutputUsage];
    if op.arity() >= 1 {
        set.extend([Cin1, SinAvg1, SinTot1]);
    }
    if op.arity() == 2 {
        set.extend([Cin2, SinAvg2, SinTot2]);
    }
    match op {
        OperatorType::TableScan | OperatorType::IndexScan => set.extend([TSize, Pages, TColumns, EstIoCost]),
        OperatorType::IndexSeek => set.extend([TSize, Pages, TColumns, EstIoCost, IndexDepth]),
        OperatorType::HashAggregate => set.extend([HashOpAvg, HashOpTot, CHashCol]),
        OperatorType::HashJoin => set.extend([HashOpAvg, HashOpTot, CInnerCol, COuterCol]),
        OperatorType::MergeJoin => set.extend([CInnerCol, COuterCol, SinSum]),
        OperatorType::NestedLoopJoin => set.extend([CInnerCol, COuterCol, SSekTable]),
        OperatorType::Sort => set.extend([MinComp, CSortCol]),
        OperatorType::Filter | OperatorType::StreamAggregate | OperatorType::ComputeScalar => {}
    }
    set.sort();
    set
}

/// Builds the feature vector of one plan node. `parent` is `None` at the
/// root. Tuple-count features follow `source`; base-table sizes are always
/// exact.
pub fn extract_features(
    node: &PlanNode,
    parent: Option<OperatorType>,
    source: CardinalitySource,
) -> Result<FeatureVector> {
    let est = source == CardinalitySource::Estimated;
    let op = node.op;
    let mut fv = FeatureVector::new(op, source);

    let cout = node.cardinality(est);
    fv.set(Cout, cout);
    fv.set(SoutAvg, node.out_row_bytes);
    fv.set(SoutTot, cout * node.out_row_bytes);
    fv.set(OutputUsage, f64::from(parent.map_or(ROOT_PARENT_CODE, OperatorType::code)));

    let slots = [(Cin1, SinAvg1, SinTot1), (Cin2, SinAvg2, SinTot2)];
    for (child, (cin, sinavg, sintot)) in node.children.iter().zip(slots) {
        let c = child.cardinality(est);
        fv.set(cin, c);
        fv.set(sinavg, child.out_row_bytes);
        fv.set(sintot, c * child.out_row_bytes);
    }

    let cin = fv.get(Cin1).unwrap_or(0.0);
    match op {
        OperatorType::TableScan | OperatorType::IndexScan | OperatorType::IndexSeek => {
            let table = node.table.as_ref().ok_or(Error::MissingTable(op))?;
            fv.set(TSize, table.tuple_count);
            fv.set(Pages, table.page_count);
            fv.set(TColumns, table.column_count);
            fv.set(EstIoCost, node.est_io_cost);
            if op == OperatorType::IndexSeek {
                fv.set(IndexDepth, table.index_depth);
            }
        }
        OperatorType::HashAggregate | OperatorType::HashJoin => {
            let per_tuple = node.columns.hash_ops_per_tuple;
            fv.set(HashOpAvg, per_tuple);
            // Build input for joins, the only input for aggregates.
            fv.set(HashOpTot, per_tuple * cin);
            if op == OperatorType::HashAggregate {
                fv.set(CHashCol, node.columns.hash);
            }
        }
        OperatorType::Sort => {
            fv.set(CSortCol, node.columns.sort);
            fv.set(MinComp, cin * node.columns.sort);
        }
        _ => {}
    }
    if op.is_join() {
        fv.set(CInnerCol, node.columns.join_inner);
        fv.set(COuterCol, node.columns.join_outer);
    }
    match op {
        OperatorType::MergeJoin => {
            let total = fv.get(SinTot1).unwrap_or(0.0) + fv.get(SinTot2).unwrap_or(0.0);
            fv.set(SinSum, total);
        }
        OperatorType::NestedLoopJoin => {
            let inner = node.children[1].leading_table().ok_or(Error::MissingTable(op))?;
            fv.set(SSekTable, inner.tuple_count);
        }
        _ => {}
    }
    Ok(fv)
}

/// Features that change when `f` changes, directly or through another
/// dependent. Derived products depend on their factors; counts that move
/// with an input size depend on it.
fn direct_dependents(f: FeatureId) -> &'static [FeatureId] {
    match f {
        Cout => &[SoutTot, EstIoCost],
        SoutAvg => &[SoutTot],
        Cin1 => &[SinTot1, Cout, EstIoCost, HashOpTot, MinComp, SinSum],
        Cin2 => &[SinTot2, Cout, EstIoCost, SinSum, SSekTable],
        SinAvg1 => &[SinTot1],
        SinAvg2 => &[SinTot2],
        SinTot1 | SinTot2 => &[SinSum, EstIoCost],
        TSize | Pages => &[TSize, Pages, Cout, EstIoCost],
        HashOpAvg => &[HashOpTot],
        CSortCol => &[MinComp],
        SSekTable => &[Cin2],
        _ => &[],
    }
}

fn dependency_masks() -> &'static [u32; FEATURE_COUNT] {
    static MASKS: OnceLock<[u32; FEATURE_COUNT]> = OnceLock::new();
    MASKS.get_or_init(|| {
        let mut masks = [0u32; FEATURE_COUNT];
        for f in FeatureId::ALL {
            let mut seen = 0u32;
            let mut stack: Vec<FeatureId> = direct_dependents(f).to_vec();
            while let Some(g) = stack.pop() {
                if seen & g.bit() != 0 {
                    continue;
                }
                seen |= g.bit();
                stack.extend_from_slice(direct_dependents(g));
            }
            masks[f as usize] = seen & !f.bit();
        }
        masks
    })
}

/// Dependents of `f`, in code order. Never contains `f` itself.
pub fn dependents(f: FeatureId) -> Vec<FeatureId> {
    let mask = dependency_masks()[f as usize];
    FeatureId::ALL.into_iter().filter(|g| mask & g.bit() != 0).collect()
}

pub fn is_dependent(of: FeatureId, candidate: FeatureId) -> bool {
    dependency_masks()[of as usize] & candidate.bit() != 0
}

/// Removes `outlier` and divides each of its dependents by its value.
pub fn normalize_for_outlier(fv: &FeatureVector, outlier: FeatureId) -> Result<FeatureVector> {
    normalize_for_outliers(fv, &[outlier])
}

/// Sequential normalisation by several scale features. Each step divides by
/// the *raw* value of its feature as it appears in `fv`.
pub fn normalize_for_outliers(fv: &FeatureVector, outliers: &[FeatureId]) -> Result<FeatureVector> {
    let mut out = fv.clone();
    for &f in outliers {
        let raw = match fv.get(f) {
            Some(v) if v > 0.0 && v.is_finite() && !f.is_categorical() => v,
            _ => return Err(Error::DegenerateScaling(f.name().to_string())),
        };
        let mask = dependency_masks()[f as usize];
        for g in FeatureId::ALL {
            if mask & g.bit() != 0 {
                if let Some(v) = out.get(g) {
                    out.set(g, v / raw);
                }
            }
        }
        out.remove(f);
    }
    Ok(out)
}

/// One CSV row per operator instance; feature columns in code order, absent
/// features left empty.
pub fn write_features_csv<W: Write>(writer: W, rows: &[(String, usize, FeatureVector)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["query_id".to_string(), "node".into(), "op".into()];
    header.extend(FeatureId::ALL.iter().map(|f| f.name().to_string()));
    w.write_record(&header)?;
    for (query, node, fv) in rows {
        let mut record = vec![query.clone(), node.to_string(), fv.op.name().to_string()];
        record.extend(FeatureId::ALL.iter().map(|f| fv.get(*f).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::TableMeta;

    fn table(tuples: f64, pages: f64, columns: f64) -> TableMeta {
        TableMeta {
            table_id: "t".into(),
            tuple_count: tuples,
            page_count: pages,
            column_count: columns,
            avg_row_bytes: 40.0,
            index_depth: 2.0,
        }
    }

    fn scan(tuples: f64) -> PlanNode {
        PlanNode::new(OperatorType::TableScan, tuples, 40.0).with_table(table(tuples, 50.0, 8.0))
    }

    #[test]
    fn table_scan_features() {
        let mut node = scan(1000.0);
        node.est_io_cost = 12.5;
        let fv = extract_features(&node, Some(OperatorType::Filter), CardinalitySource::True).unwrap();
        let expect = [
            (Cout, 1000.0),
            (SoutAvg, 40.0),
            (SoutTot, 40000.0),
            (OutputUsage, f64::from(OperatorType::Filter.code())),
            (TSize, 1000.0),
            (Pages, 50.0),
            (TColumns, 8.0),
            (EstIoCost, 12.5),
        ];
        assert_eq!(fv.len(), expect.len());
        for (f, v) in expect {
            assert_eq!(fv.get(f), Some(v), "{f}");
        }
        assert_eq!(fv.features().collect::<Vec<_>>(), schema(OperatorType::TableScan));
    }

    #[test]
    fn root_parent_uses_sentinel() {
        let fv = extract_features(&scan(10.0), None, CardinalitySource::True).unwrap();
        assert_eq!(fv.get(OutputUsage), Some(0.0));
    }

    #[test]
    fn sort_min_comparisons() {
        let mut sort = PlanNode::new(OperatorType::Sort, 64.0, 40.0).with_children(vec![scan(64.0)]);
        sort.columns.sort = 3.0;
        let fv = extract_features(&sort, None, CardinalitySource::True).unwrap();
        assert_eq!(fv.get(Cin1), Some(64.0));
        assert_eq!(fv.get(MinComp), Some(192.0));
        assert_eq!(fv.get(CSortCol), Some(3.0));
    }

    #[test]
    fn merge_join_input_sum() {
        let mut a = scan(20.0);
        a.out_row_bytes = 40.0;
        let mut b = scan(30.0);
        b.out_row_bytes = 40.0;
        let join = PlanNode::new(OperatorType::MergeJoin, 10.0, 80.0).with_children(vec![a, b]);
        let fv = extract_features(&join, None, CardinalitySource::True).unwrap();
        assert_eq!(fv.get(SinTot1), Some(800.0));
        assert_eq!(fv.get(SinTot2), Some(1200.0));
        assert_eq!(fv.get(SinSum), Some(2000.0));
    }

    #[test]
    fn nested_loop_reads_inner_table() {
        let mut seek = PlanNode::new(OperatorType::IndexSeek, 50.0, 40.0).with_table(table(5000.0, 100.0, 4.0));
        seek.est_out_cardinality = 70.0;
        let join = PlanNode::new(OperatorType::NestedLoopJoin, 50.0, 80.0).with_children(vec![scan(10.0), seek]);
        let fv = extract_features(&join, None, CardinalitySource::Estimated).unwrap();
        assert_eq!(fv.get(SSekTable), Some(5000.0));
        assert_eq!(fv.get(Cin2), Some(70.0));
    }

    #[test]
    fn estimated_source_changes_counts_only() {
        let mut node = scan(1000.0);
        node.est_out_cardinality = 250.0;
        let fv = extract_features(&node, None, CardinalitySource::Estimated).unwrap();
        assert_eq!(fv.get(Cout), Some(250.0));
        assert_eq!(fv.get(SoutTot), Some(10000.0));
        assert_eq!(fv.get(TSize), Some(1000.0));
    }

    #[test]
    fn scan_without_table_is_an_error() {
        let node = PlanNode::new(OperatorType::TableScan, 10.0, 40.0);
        assert!(matches!(
            extract_features(&node, None, CardinalitySource::True),
            Err(Error::MissingTable(OperatorType::TableScan))
        ));
    }

    #[test]
    fn anchored_dependencies() {
        let cin = dependents(Cin1);
        assert!(cin.contains(&SinTot1));
        assert!(!cin.contains(&SinAvg1));
        assert!(dependents(SoutAvg).contains(&SoutTot));
        assert!(dependents(CSortCol).contains(&MinComp));
        // The generic CIN row, split across the two child slots.
        let both: Vec<_> = dependents(Cin1).into_iter().chain(dependents(Cin2)).collect();
        for f in [SinTot1, HashOpTot, SSekTable, MinComp, SinSum, Cout, EstIoCost] {
            assert!(both.contains(&f), "{f}");
        }
    }

    #[test]
    fn dependencies_are_irreflexive_and_skip_categorical() {
        for f in FeatureId::ALL {
            let deps = dependents(f);
            assert!(!deps.contains(&f), "{f}");
            assert!(!deps.contains(&OutputUsage));
        }
        assert!(dependents(OutputUsage).is_empty());
    }

    #[test]
    fn normalize_divides_dependents() {
        let fv = FeatureVector::from_pairs(OperatorType::Filter, &[(Cin1, 100.0), (SinTot1, 1000.0), (SinAvg1, 10.0)]);
        let out = normalize_for_outlier(&fv, Cin1).unwrap();
        assert_eq!(out.get(Cin1), None);
        assert_eq!(out.get(SinTot1), Some(10.0));
        assert_eq!(out.get(SinAvg1), Some(10.0));
        assert_eq!(out.len(), 2);

        let unit = FeatureVector::from_pairs(OperatorType::Filter, &[(Cin1, 1.0), (SinTot1, 7.0)]);
        let out = normalize_for_outlier(&unit, Cin1).unwrap();
        assert_eq!(out.get(SinTot1), Some(7.0));
    }

    #[test]
    fn normalize_rejects_zero_or_absent() {
        let zero = FeatureVector::from_pairs(OperatorType::Filter, &[(Cin1, 0.0), (SinTot1, 5.0)]);
        assert!(matches!(normalize_for_outlier(&zero, Cin1), Err(Error::DegenerateScaling(_))));
        assert!(normalize_for_outlier(&zero, Cin2).is_err());
    }

    #[test]
    fn csv_export_columns_in_code_order() {
        let fv = extract_features(&scan(10.0), None, CardinalitySource::True).unwrap();
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &[("q".into(), 0, fv)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header: Vec<_> = lines.next().unwrap().split(',').collect();
        assert_eq!(&header[..4], &["query_id", "node", "op", "COUT"]);
        assert_eq!(header.len(), 3 + FEATURE_COUNT);
        assert!(lines.next().unwrap().starts_with("q,0,TableScan,10,"));
    }
}
