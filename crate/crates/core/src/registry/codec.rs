//! Binary model file.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! file    := "QRES" version:u8 family_count:u16 family*
//! family  := op:u8 resource:u8 default:u16 model_count:u16 model*
//! model   := 0:u8 mart | 1:u8 term_count:u8 term* mart
//! term    := kind:u8 swapped:u8 beta:f64 feature_count:u8 feature:u8*
//! mart    := schema_len:u8 feature:u8* (low:f64 high:f64)* init:f64
//!            learning_rate:f64 training_error:f64 tree_count:u32 tree*
//! tree    := node_count:u8 (offset:u8 feature:u8 value:f32)*
//! ```

use crate::error::{Error, Result};
use crate::features::FeatureId;
use crate::gbrt::{FeatureRange, MartModel, PackedNode, Tree};
use crate::plan::{OperatorType, ResourceKind};
use crate::scaling::{ScaleTerm, ScalingForm, ScalingKind};

use super::{CombinedModel, FamilyModel, Model, ModelFamily, ModelRegistry};

pub const MAGIC: &[u8; 4] = b"QRES";
pub const FORMAT_VERSION: u8 = 1;

const KIND_MART: u8 = 0;
const KIND_COMBINED: u8 = 1;

/// Appends the packed form of `tree`: 1 + 6 bytes per node.
pub fn encode_tree(tree: &Tree, out: &mut Vec<u8>) {
    let nodes = tree.nodes();
    out.push(u8::try_from(nodes.len()).expect("trees hold at most 255 nodes"));
    for n in nodes {
        out.push(n.offset);
        out.push(n.feature);
        out.extend_from_slice(&n.value.to_le_bytes());
    }
}

/// Decodes one tree and returns it with the number of bytes consumed.
pub fn decode_tree(bytes: &[u8]) -> Result<(Tree, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    let tree = r.tree()?;
    Ok((tree, r.pos))
}

pub(super) fn encode(registry: &ModelRegistry) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    let families: Vec<&ModelFamily> = registry.families().collect();
    put_u16(&mut out, families.len());
    for fam in families {
        out.push(fam.op.code());
        out.push(fam.resource.code());
        put_u16(&mut out, fam.default);
        put_u16(&mut out, fam.models.len());
        for m in &fam.models {
            match &m.model {
                Model::Mart(mart) => {
                    out.push(KIND_MART);
                    encode_mart(mart, m.training_error, &mut out);
                }
                Model::Combined(c) => {
                    out.push(KIND_COMBINED);
                    out.push(c.terms().len() as u8);
                    for t in c.terms() {
                        out.push(t.form.kind.code());
                        out.push(u8::from(t.form.swapped));
                        out.extend_from_slice(&t.form.beta.to_le_bytes());
                        out.push(t.features.len() as u8);
                        out.extend(t.features.iter().map(|f| f.code()));
                    }
                    encode_mart(c.scaled_model(), m.training_error, &mut out);
                }
            }
        }
    }
    out
}

fn put_u16(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u16::try_from(v).expect("count fits in u16").to_le_bytes());
}

fn encode_mart(m: &MartModel, training_error: f64, out: &mut Vec<u8>) {
    out.push(m.schema().len() as u8);
    out.extend(m.schema().iter().map(|f| f.code()));
    for (_, r) in m.feature_stats() {
        out.extend_from_slice(&r.low.to_le_bytes());
        out.extend_from_slice(&r.high.to_le_bytes());
    }
    out.extend_from_slice(&m.init.to_le_bytes());
    out.extend_from_slice(&m.learning_rate.to_le_bytes());
    out.extend_from_slice(&training_error.to_le_bytes());
    out.extend_from_slice(&(m.trees().len() as u32).to_le_bytes());
    for t in m.trees() {
        encode_tree(t, out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Codec(format!("truncated payload at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn feature(&mut self) -> Result<FeatureId> {
        let code = self.u8()?;
        FeatureId::from_code(code).ok_or_else(|| Error::Codec(format!("unknown feature code {code}")))
    }

    fn tree(&mut self) -> Result<Tree> {
        let count = self.u8()? as usize;
        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            nodes.push(PackedNode { offset: self.u8()?, feature: self.u8()?, value: self.f32()? });
        }
        Tree::from_nodes(nodes)
    }

    fn mart(&mut self) -> Result<(MartModel, f64)> {
        let len = self.u8()? as usize;
        let schema = (0..len).map(|_| self.feature()).collect::<Result<Vec<_>>>()?;
        let stats =
            (0..len).map(|_| Ok(FeatureRange { low: self.f64()?, high: self.f64()? })).collect::<Result<Vec<_>>>()?;
        let init = self.f64()?;
        let learning_rate = self.f64()?;
        let training_error = self.f64()?;
        let tree_count = self.u32()?;
        // Each tree takes at least seven bytes; reject absurd counts early.
        if tree_count > (self.bytes.len() - self.pos) / 7 {
            return Err(Error::Codec("truncated payload: tree count exceeds remaining bytes".into()));
        }
        let trees = (0..tree_count).map(|_| self.tree()).collect::<Result<Vec<_>>>()?;
        Ok((MartModel::from_parts(init, learning_rate, schema, stats, trees)?, training_error))
    }

    fn term(&mut self) -> Result<ScaleTerm> {
        let code = self.u8()?;
        let kind = ScalingKind::from_code(code).ok_or_else(|| Error::Codec(format!("unknown scaling kind {code}")))?;
        let swapped = match self.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Codec(format!("bad orientation flag {b}"))),
        };
        let beta = self.f64()?;
        let n = self.u8()? as usize;
        let features = (0..n).map(|_| self.feature()).collect::<Result<Vec<_>>>()?;
        let form = ScalingForm { kind, alpha: 1.0, beta, swapped };
        ScaleTerm::new(form, features).map_err(|e| Error::Codec(e.to_string()))
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<ModelRegistry> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::Codec("bad magic bytes (not a QRES model file)".into()));
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::Codec(format!("version mismatch: file has {version}, expected {FORMAT_VERSION}")));
    }
    let mut registry = ModelRegistry::new();
    for _ in 0..r.u16()? {
        let op_code = r.u8()?;
        let op = OperatorType::from_code(op_code).ok_or_else(|| Error::Codec(format!("unknown operator {op_code}")))?;
        let res_code = r.u8()?;
        let resource =
            ResourceKind::from_code(res_code).ok_or_else(|| Error::Codec(format!("unknown resource {res_code}")))?;
        let default = r.u16()?;
        let count = r.u16()?;
        let mut models = Vec::with_capacity(count);
        for _ in 0..count {
            let (model, training_error) = match r.u8()? {
                KIND_MART => {
                    let (m, e) = r.mart()?;
                    (Model::Mart(m), e)
                }
                KIND_COMBINED => {
                    let n = r.u8()? as usize;
                    let terms = (0..n).map(|_| r.term()).collect::<Result<Vec<_>>>()?;
                    let (m, e) = r.mart()?;
                    (Model::Combined(CombinedModel::new(terms, m)?), e)
                }
                k => return Err(Error::Codec(format!("unknown model kind {k}"))),
            };
            models.push(FamilyModel { model, training_error });
        }
        if default >= models.len() || !matches!(models[0].model, Model::Mart(_)) {
            return Err(Error::Codec(format!("inconsistent family for {op}/{resource}")));
        }
        registry.insert(ModelFamily { op, resource, default, models });
    }
    if r.pos != bytes.len() {
        return Err(Error::Codec(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(registry)
}
