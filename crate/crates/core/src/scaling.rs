//! Scaling functions: closed-form least-squares fitting of a fixed family of
//! monotone forms and selection of the best-fitting one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureId, FeatureVector};
use crate::plan::{OperatorType, ResourceKind};

/// Exponents tried for [`ScalingKind::Power`].
pub const POWER_BETAS: [f64; 5] = [0.5, 1.25, 1.5, 2.0, 3.0];

/// Relative SSE tolerance under which two candidates count as tied.
const SSE_TIE: f64 = 1e-9;

/// Base-2 logarithm with arguments clamped at 2, so the result is at least 1.
pub fn log2c(x: f64) -> f64 {
    x.max(2.0).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum ScalingKind {
    Linear = 0,
    NLogN = 1,
    Power = 2,
    Log = 3,
    Product2 = 4,
    Sum2 = 5,
    FLogSecond = 6,
}

impl ScalingKind {
    pub const ALL: [ScalingKind; 7] = [
        ScalingKind::Linear,
        ScalingKind::NLogN,
        ScalingKind::Power,
        ScalingKind::Log,
        ScalingKind::Product2,
        ScalingKind::Sum2,
        ScalingKind::FLogSecond,
    ];
    pub const SINGLE: [ScalingKind; 4] =
        [ScalingKind::Linear, ScalingKind::NLogN, ScalingKind::Power, ScalingKind::Log];
    pub const PAIR: [ScalingKind; 3] = [ScalingKind::Product2, ScalingKind::Sum2, ScalingKind::FLogSecond];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Number of feature values the form consumes.
    pub fn arity(self) -> usize {
        match self {
            ScalingKind::Product2 | ScalingKind::Sum2 | ScalingKind::FLogSecond => 2,
            _ => 1,
        }
    }

    pub fn parameter_count(self) -> usize {
        if self == ScalingKind::Power {
            2
        } else {
            1
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalingKind::Linear => "linear",
            ScalingKind::NLogN => "nlogn",
            ScalingKind::Power => "power",
            ScalingKind::Log => "log",
            ScalingKind::Product2 => "product2",
            ScalingKind::Sum2 => "sum2",
            ScalingKind::FLogSecond => "flogsecond",
        }
    }
}

impl fmt::Display for ScalingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScalingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Self::ALL.into_iter().find(|k| k.name() == lower).ok_or_else(|| Error::InvalidValue {
            path: "scaling kind".into(),
            message: format!("unknown scaling kind `{s}`"),
        })
    }
}

/// A fitted (or unit) scaling function. `swapped` reverses the argument
/// order of the asymmetric two-feature form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingForm {
    pub kind: ScalingKind,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub swapped: bool,
}

impl ScalingForm {
    /// The form with α = 1 (β = 1 for every kind except Power).
    pub fn unit(kind: ScalingKind) -> Self {
        ScalingForm { kind, alpha: 1.0, beta: 1.0, swapped: false }
    }

    pub fn power(beta: f64) -> Self {
        ScalingForm { beta, ..Self::unit(ScalingKind::Power) }
    }

    pub fn without_alpha(self) -> Self {
        ScalingForm { alpha: 1.0, ..self }
    }

    /// Form value with α = 1. The caller guarantees the arity.
    fn basis(&self, x: &[f64]) -> f64 {
        match self.kind {
            ScalingKind::Linear => x[0],
            ScalingKind::NLogN => x[0] * log2c(x[0]),
            ScalingKind::Power => x[0].powf(self.beta),
            ScalingKind::Log => log2c(x[0]),
            ScalingKind::Product2 => x[0] * x[1],
            ScalingKind::Sum2 => x[0] + x[1],
            ScalingKind::FLogSecond => {
                let (f, s) = if self.swapped { (x[1], x[0]) } else { (x[0], x[1]) };
                f * log2c(s)
            }
        }
    }

    pub fn eval(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.kind.arity() {
            return Err(Error::InvalidValue {
                path: self.kind.name().into(),
                message: format!("expected {} values, got {}", self.kind.arity(), values.len()),
            });
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::DegenerateScaling(format!("{} evaluated at nonpositive value {v}", self.kind)));
        }
        Ok(self.alpha * self.basis(values))
    }
}

impl fmt::Display for ScalingForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScalingKind::Power => write!(f, "{}·x^{}", self.alpha, self.beta),
            ScalingKind::FLogSecond if self.swapped => write!(f, "{}·flogsecond(swapped)", self.alpha),
            k => write!(f, "{}·{}", self.alpha, k),
        }
    }
}

/// One sample of a scaling experiment: the varied feature value(s) and the
/// measured resource usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingObservation {
    pub values: Vec<f64>,
    pub usage: f64,
}

impl ScalingObservation {
    pub fn new(values: impl Into<Vec<f64>>, usage: f64) -> Self {
        ScalingObservation { values: values.into(), usage }
    }
}

/// A fitted candidate together with its residual sum of squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub form: ScalingForm,
    pub sse: f64,
}

fn check_observations(kind: ScalingKind, obs: &[ScalingObservation]) -> Result<()> {
    if obs.len() < 2 {
        return Err(Error::DegenerateFit(format!("{kind}: at least two observations are required")));
    }
    for o in obs {
        if o.values.len() != kind.arity() {
            return Err(Error::DegenerateFit(format!(
                "{kind}: observation has {} values, form takes {}",
                o.values.len(),
                kind.arity()
            )));
        }
        if o.values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || !o.usage.is_finite() {
            return Err(Error::DegenerateFit(format!("{kind}: nonpositive or non-finite observation")));
        }
    }
    let first = &obs[0].values;
    if obs.iter().all(|o| &o.values == first) {
        return Err(Error::DegenerateFit(format!("{kind}: feature values never vary")));
    }
    Ok(())
}

fn fit_alpha(form: ScalingForm, obs: &[ScalingObservation]) -> Result<FitResult> {
    let (mut by, mut bb) = (0.0, 0.0);
    for o in obs {
        let b = form.basis(&o.values);
        by += b * o.usage;
        bb += b * b;
    }
    if !(bb > 0.0) || !bb.is_finite() {
        return Err(Error::DegenerateFit(format!("{}: all-zero basis", form.kind)));
    }
    let alpha = by / bb;
    let fitted = ScalingForm { alpha, ..form };
    let sse = obs.iter().map(|o| (o.usage - alpha * form.basis(&o.values)).powi(2)).sum();
    Ok(FitResult { form: fitted, sse })
}

/// Least-squares fit of one kind. Power searches the β grid; FLogSecond uses
/// the given orientation (see [`fit_candidates`] for both).
pub fn fit_form(kind: ScalingKind, observations: &[ScalingObservation]) -> Result<FitResult> {
    fit_oriented(ScalingForm::unit(kind), observations)
}

fn fit_oriented(unit: ScalingForm, observations: &[ScalingObservation]) -> Result<FitResult> {
    check_observations(unit.kind, observations)?;
    if unit.kind != ScalingKind::Power {
        return fit_alpha(unit, observations);
    }
    let mut best: Option<FitResult> = None;
    for beta in POWER_BETAS {
        let r = fit_alpha(ScalingForm::power(beta), observations)?;
        if best.is_none_or(|b| r.sse < b.sse - SSE_TIE * b.sse.abs()) {
            best = Some(r);
        }
    }
    Ok(best.expect("β grid is non-empty"))
}

/// Fits every candidate kind, expanding FLogSecond into both orientations.
/// Candidates whose fit is degenerate are skipped.
pub fn fit_candidates(candidates: &[ScalingKind], observations: &[ScalingObservation]) -> Vec<FitResult> {
    let mut out = Vec::new();
    for &kind in candidates {
        let mut units = vec![ScalingForm::unit(kind)];
        if kind == ScalingKind::FLogSecond {
            units.push(ScalingForm { swapped: true, ..ScalingForm::unit(kind) });
        }
        for u in units {
            if let Ok(r) = fit_oriented(u, observations) {
                out.push(r);
            }
        }
    }
    out
}

/// Returns the candidate with the lowest SSE; near-ties prefer fewer
/// parameters and then the lower kind code (unswapped before swapped).
pub fn select_form(candidates: &[ScalingKind], observations: &[ScalingObservation]) -> Result<ScalingForm> {
    pick_best(&fit_candidates(candidates, observations))
        .map(|r| r.form)
        .ok_or_else(|| Error::DegenerateFit("no candidate form could be fitted".into()))
}

pub fn pick_best(fits: &[FitResult]) -> Option<FitResult> {
    let rank = |r: &FitResult| (r.form.kind.parameter_count(), r.form.kind.code(), r.form.swapped);
    let mut best: Option<FitResult> = None;
    for r in fits {
        best = match best {
            None => Some(*r),
            Some(b) => {
                let tol = SSE_TIE * b.sse.abs().max(r.sse.abs()) + f64::MIN_POSITIVE;
                if r.sse < b.sse - tol || ((r.sse - b.sse).abs() <= tol && rank(r) < rank(&b)) {
                    Some(*r)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// A scaling function applied to specific features of an operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTerm {
    pub form: ScalingForm,
    pub features: Vec<FeatureId>,
}

impl ScaleTerm {
    pub fn new(form: ScalingForm, features: Vec<FeatureId>) -> Result<Self> {
        if features.len() != form.kind.arity() {
            return Err(Error::InvalidConfig(format!(
                "{} takes {} features, got {}",
                form.kind,
                form.kind.arity(),
                features.len()
            )));
        }
        Ok(ScaleTerm { form, features })
    }

    /// Evaluates the term on the raw feature values of `fv`.
    pub fn eval(&self, fv: &FeatureVector) -> Result<f64> {
        let mut values = [0.0; 2];
        for (slot, f) in values.iter_mut().zip(&self.features) {
            *slot = match fv.get(*f) {
                Some(v) if v > 0.0 => v,
                _ => return Err(Error::DegenerateScaling(f.name().to_string())),
            };
        }
        self.form.eval(&values[..self.features.len()])
    }
}

/// Scale-feature candidates of an operator for a resource, in code order.
pub fn eligible_scale_features(op: OperatorType, resource: ResourceKind) -> Vec<FeatureId> {
    crate::features::schema(op)
        .into_iter()
        .filter(|f| !f.is_categorical())
        .filter(|f| resource != ResourceKind::LogicalIo || !never_scaled_for_io(*f))
        .collect()
}

/// Features describing per-tuple work that never grows with data size.
pub fn never_scaled_for_io(f: FeatureId) -> bool {
    matches!(
        f,
        FeatureId::HashOpAvg
            | FeatureId::HashOpTot
            | FeatureId::CHashCol
            | FeatureId::CInnerCol
            | FeatureId::COuterCol
            | FeatureId::MinComp
            | FeatureId::CSortCol
    )
}

/// Feature pairs that receive a two-feature combined model.
pub fn scale_pairs(op: OperatorType, resource: ResourceKind) -> Vec<[FeatureId; 2]> {
    if !op.is_join() {
        return Vec::new();
    }
    let eligible = eligible_scale_features(op, resource);
    let mut pairs = vec![[FeatureId::Cin1, FeatureId::Cin2]];
    if op == OperatorType::NestedLoopJoin {
        pairs.push([FeatureId::Cin1, FeatureId::SSekTable]);
    }
    pairs.retain(|p| p.iter().all(|f| eligible.contains(f)));
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingChoice {
    pub op: OperatorType,
    pub resource: ResourceKind,
    pub features: Vec<FeatureId>,
    pub form: ScalingForm,
}

/// Offline scaling-experiment outcome: chosen form per
/// (operator, resource, feature set). Missing entries fall back to Linear
/// (single feature) or Sum2 (pairs).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScalingChoices {
    map: BTreeMap<(OperatorType, ResourceKind, Vec<FeatureId>), ScalingForm>,
}

impl ScalingChoices {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, op: OperatorType, resource: ResourceKind, features: Vec<FeatureId>, form: ScalingForm) {
        self.map.insert((op, resource, features), form);
    }

    pub fn get(&self, op: OperatorType, resource: ResourceKind, features: &[FeatureId]) -> Option<ScalingForm> {
        self.map.get(&(op, resource, features.to_vec())).copied()
    }

    /// Chosen form with α dropped, or the fallback.
    pub fn form_for(&self, op: OperatorType, resource: ResourceKind, features: &[FeatureId]) -> ScalingForm {
        self.get(op, resource, features).map(ScalingForm::without_alpha).unwrap_or_else(|| {
            ScalingForm::unit(if features.len() == 2 { ScalingKind::Sum2 } else { ScalingKind::Linear })
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn entries(&self) -> Vec<ScalingChoice> {
        self.map
            .iter()
            .map(|((op, resource, features), form)| ScalingChoice {
                op: *op,
                resource: *resource,
                features: features.clone(),
                form: *form,
            })
            .collect()
    }
}

impl Serialize for ScalingChoices {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.entries().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ScalingChoices {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<ScalingChoice>::deserialize(d)?;
        let mut c = ScalingChoices::new();
        for e in entries {
            c.insert(e.op, e.resource, e.features, e.form);
        }
        Ok(c)
    }
}
