//! Hyperparameter values, assignments, segments and trials.
//!
//! Decimal values are kept as exact canonical decimal strings. Two trials
//! can only share a stage when their values compare equal, so binary floats
//! are never used for identity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Maximum number of fractional digits an exact decimal may carry.
const MAX_SCALE: u32 = 28;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HpError {
    #[error("invalid {kind} value {raw:?}")]
    InvalidValue { raw: String, kind: HpKind },
    #[error("decimal arithmetic on {0} is not exactly representable")]
    Inexact(String),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
    #[error("invalid trial {id}: {reason}")]
    InvalidTrial { id: String, reason: String },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid study {id}: {reason}")]
    InvalidStudy { id: String, reason: String },
}

pub type Result<T, E = HpError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HpKind {
    Integer,
    Decimal,
    Symbol,
}

impl fmt::Display for HpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HpKind::Integer => "integer",
            HpKind::Decimal => "decimal",
            HpKind::Symbol => "symbol",
        })
    }
}

/// A single hyperparameter value in canonical textual form.
///
/// Equality, ordering and hashing use the canonical text only, so the
/// integer `1` and the decimal `1.0` are the same value.
#[derive(Debug, Clone)]
pub struct HpValue {
    kind: HpKind,
    text: String,
}

impl PartialEq for HpValue {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Eq for HpValue {}

impl std::hash::Hash for HpValue {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.text.hash(state);
    }
}

impl PartialOrd for HpValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HpValue {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.text.cmp(&other.text)
    }
}

fn parse_decimal(raw: &str) -> Option<Decimal> {
    let raw = raw.trim();
    let raw = raw.strip_prefix('+').unwrap_or(raw);
    if raw.is_empty() {
        return None;
    }
    if raw.contains(['e', 'E']) {
        Decimal::from_scientific(raw).ok()
    } else {
        Decimal::from_str_exact(raw).ok()
    }
}

fn canonical_decimal(d: Decimal) -> String {
    let n = d.normalize();
    if n.is_zero() {
        "0".to_string()
    } else {
        n.to_string()
    }
}

/// Parses `raw` as the given kind and returns its canonical form.
pub fn canonicalize_value(raw: &str, kind: HpKind) -> Result<HpValue> {
    let invalid = || HpError::InvalidValue {
        raw: raw.to_string(),
        kind,
    };
    let text = match kind {
        HpKind::Integer => {
            let t = raw.trim();
            let t = t.strip_prefix('+').unwrap_or(t);
            if t.is_empty() || !t.trim_start_matches('-').bytes().all(|b| b.is_ascii_digit()) {
                return Err(invalid());
            }
            t.parse::<i64>().map_err(|_| invalid())?.to_string()
        }
        HpKind::Decimal => canonical_decimal(parse_decimal(raw).ok_or_else(invalid)?),
        HpKind::Symbol => {
            let t = raw.trim();
            if t.is_empty() || t.chars().any(char::is_control) {
                return Err(invalid());
            }
            t.to_string()
        }
    };
    Ok(HpValue { kind, text })
}

impl HpValue {
    /// Infers the kind: integer if the text is an integer, decimal if it
    /// is a finite decimal, symbol otherwise.
    pub fn parse(raw: &str) -> Result<Self> {
        canonicalize_value(raw, HpKind::Integer)
            .or_else(|_| canonicalize_value(raw, HpKind::Decimal))
            .or_else(|_| canonicalize_value(raw, HpKind::Symbol))
    }

    pub fn integer(v: i64) -> Self {
        HpValue {
            kind: HpKind::Integer,
            text: v.to_string(),
        }
    }

    pub fn decimal(d: Decimal) -> Self {
        HpValue {
            kind: HpKind::Decimal,
            text: canonical_decimal(d),
        }
    }

    pub fn symbol(s: &str) -> Result<Self> {
        canonicalize_value(s, HpKind::Symbol)
    }

    pub fn kind(&self) -> HpKind {
        self.kind
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn is_numeric(&self) -> bool {
        self.kind != HpKind::Symbol
    }

    pub fn to_decimal(&self) -> Option<Decimal> {
        match self.kind {
            HpKind::Symbol => None,
            _ => parse_decimal(&self.text),
        }
    }

    pub fn to_f64(&self) -> Option<f64> {
        match self.kind {
            HpKind::Symbol => None,
            _ => self.text.parse().ok(),
        }
    }

    pub fn to_i64(&self) -> Option<i64> {
        match self.kind {
            HpKind::Integer => self.text.parse().ok(),
            _ => None,
        }
    }

    /// Exact product with `factor`. Integers stay integers when the result
    /// is integral.
    pub fn scaled(&self, factor: Decimal) -> Result<HpValue> {
        let v = self.to_decimal().ok_or_else(|| HpError::InvalidValue {
            raw: self.text.clone(),
            kind: HpKind::Decimal,
        })?;
        let product = exact_mul(v, factor)?;
        if self.kind == HpKind::Integer && product.fract().is_zero() {
            let i = i64::try_from(product)
                .map_err(|_| HpError::Inexact(format!("{v} * {factor}")))?;
            Ok(HpValue::integer(i))
        } else {
            Ok(HpValue::decimal(product))
        }
    }
}

/// Multiplies two decimals, failing instead of rounding.
pub fn exact_mul(a: Decimal, b: Decimal) -> Result<Decimal> {
    let (a, b) = (a.normalize(), b.normalize());
    let scale = a.scale() + b.scale();
    let inexact = || HpError::Inexact(format!("{a} * {b}"));
    if scale > MAX_SCALE {
        return Err(inexact());
    }
    let mantissa = a.mantissa().checked_mul(b.mantissa()).ok_or_else(inexact)?;
    Decimal::try_from_i128_with_scale(mantissa, scale).map_err(|_| inexact())
}

impl fmt::Display for HpValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl FromStr for HpValue {
    type Err = HpError;
    fn from_str(s: &str) -> Result<Self> {
        HpValue::parse(s)
    }
}

impl Serialize for HpValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for HpValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        // Accept both JSON strings and JSON numbers; numbers go through their
        // shortest textual form.
        let v = serde_json::Value::deserialize(d)?;
        let raw = match v {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Bool(b) => b.to_string(),
            other => {
                return Err(serde::de::Error::custom(format!(
                    "expected a string or number, found {other}"
                )))
            }
        };
        HpValue::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// A non-empty set of named hyperparameter values, iterated in name order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct HpAssignment(BTreeMap<String, HpValue>);

impl HpAssignment {
    pub fn new(entries: BTreeMap<String, HpValue>) -> Result<Self> {
        if entries.is_empty() {
            return Err(HpError::InvalidAssignment("assignment is empty".into()));
        }
        if let Some(name) = entries.keys().find(|k| k.trim().is_empty()) {
            return Err(HpError::InvalidAssignment(format!(
                "invalid hyperparameter name {name:?}"
            )));
        }
        Ok(HpAssignment(entries))
    }

    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, HpValue)>,
    {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if map.insert(k.to_string(), v).is_some() {
                return Err(HpError::InvalidAssignment(format!("duplicate name {k:?}")));
            }
        }
        HpAssignment::new(map)
    }

    /// Convenience constructor that infers value kinds from text.
    pub fn parse_pairs(pairs: &[(&str, &str)]) -> Result<Self> {
        let mut values = Vec::with_capacity(pairs.len());
        for (k, v) in pairs {
            values.push((*k, HpValue::parse(v)?));
        }
        HpAssignment::from_pairs(values)
    }

    pub fn get(&self, name: &str) -> Option<&HpValue> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &HpValue)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Returns a copy with `name` set to `value`.
    pub fn with(&self, name: &str, value: HpValue) -> HpAssignment {
        let mut m = self.0.clone();
        m.insert(name.to_string(), value);
        HpAssignment(m)
    }

    pub fn entries(&self) -> &BTreeMap<String, HpValue> {
        &self.0
    }
}

impl fmt::Display for HpAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for HpAssignment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, HpValue>::deserialize(d)?;
        HpAssignment::new(map).map_err(serde::de::Error::custom)
    }
}

/// A run of `epochs` epochs under one constant assignment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Segment {
    pub assignment: HpAssignment,
    pub epochs: u32,
}

impl Segment {
    pub fn new(assignment: HpAssignment, epochs: u32) -> Result<Self> {
        if epochs == 0 {
            return Err(HpError::InvalidSegment(format!(
                "segment {assignment} has zero epochs"
            )));
        }
        Ok(Segment { assignment, epochs })
    }
}

impl<'de> Deserialize<'de> for Segment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            hp: HpAssignment,
            epochs: u32,
        }
        let raw = Raw::deserialize(d)?;
        Segment::new(raw.hp, raw.epochs).map_err(serde::de::Error::custom)
    }
}

/// Merges adjacent segments with equal assignments.
pub fn normalize_segments(segments: Vec<Segment>) -> Result<Vec<Segment>> {
    if segments.is_empty() {
        return Err(HpError::InvalidSegment("segment list is empty".into()));
    }
    let mut out: Vec<Segment> = Vec::with_capacity(segments.len());
    for seg in segments {
        if seg.epochs == 0 {
            return Err(HpError::InvalidSegment(format!(
                "segment {} has zero epochs",
                seg.assignment
            )));
        }
        match out.last_mut() {
            Some(last) if last.assignment == seg.assignment => {
                last.epochs = last.epochs.checked_add(seg.epochs).ok_or_else(|| {
                    HpError::InvalidSegment("epoch count overflow".into())
                })?;
            }
            _ => out.push(seg),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrialId(String);

impl TrialId {
    pub fn new(id: impl Into<String>) -> Self {
        TrialId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TrialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TrialId {
    fn from(s: &str) -> Self {
        TrialId(s.to_string())
    }
}

/// A trial in normalized form: adjacent segments always differ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrialSpec {
    id: TrialId,
    segments: Vec<Segment>,
    priority: i64,
}

impl TrialSpec {
    pub fn new(id: impl Into<TrialId>, segments: Vec<Segment>, priority: i64) -> Result<Self> {
        let id = id.into();
        let segments = normalize_segments(segments).map_err(|e| HpError::InvalidTrial {
            id: id.to_string(),
            reason: e.to_string(),
        })?;
        Ok(TrialSpec {
            id,
            segments,
            priority,
        })
    }

    pub fn id(&self) -> &TrialId {
        &self.id
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn priority(&self) -> i64 {
        self.priority
    }

    pub fn with_priority(mut self, priority: i64) -> Self {
        self.priority = priority;
        self
    }

    pub fn with_id(mut self, id: impl Into<TrialId>) -> Self {
        self.id = id.into();
        self
    }

    pub fn total_epochs(&self) -> u64 {
        self.segments.iter().map(|s| u64::from(s.epochs)).sum()
    }

    /// The assignment in effect at every epoch, in order.
    pub fn per_epoch(&self) -> impl Iterator<Item = &HpAssignment> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(&s.assignment, s.epochs as usize))
    }
}

impl From<String> for TrialId {
    fn from(s: String) -> Self {
        TrialId(s)
    }
}

impl<'de> Deserialize<'de> for TrialSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            id: String,
            segments: Vec<Segment>,
            #[serde(default)]
            priority: i64,
        }
        let raw = Raw::deserialize(d)?;
        TrialSpec::new(raw.id, raw.segments, raw.priority).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StudySpec {
    pub study_id: String,
    pub model_key: String,
    pub dataset_key: String,
    pub trials: Vec<TrialSpec>,
    pub horizon_epochs: u32,
}

impl StudySpec {
    pub fn new(
        study_id: impl Into<String>,
        model_key: impl Into<String>,
        dataset_key: impl Into<String>,
        trials: Vec<TrialSpec>,
        horizon_epochs: u32,
    ) -> Result<Self> {
        let study_id = study_id.into();
        let err = |reason: String| HpError::InvalidStudy {
            id: study_id.clone(),
            reason,
        };
        if horizon_epochs == 0 {
            return Err(err("horizon_epochs must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &trials {
            if !seen.insert(t.id()) {
                return Err(err(format!("duplicate trial id {}", t.id())));
            }
        }
        Ok(StudySpec {
            study_id: study_id.clone(),
            model_key: model_key.into(),
            dataset_key: dataset_key.into(),
            trials,
            horizon_epochs,
        })
    }
}

/// A parameterized step schedule for one hyperparameter.
///
/// `change_epochs` are period lengths: the value holds for
/// `change_epochs[0]` epochs, is multiplied by `factor`, holds for
/// `change_epochs[1]` epochs, and so on. The last value fills the remaining
/// epochs up to `horizon`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleParams {
    pub hp_name: String,
    pub initial: HpValue,
    pub factor: Decimal,
    pub change_epochs: Vec<u32>,
    pub horizon: u32,
    pub constants: Option<HpAssignment>,
}

impl ScheduleParams {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HpError::InvalidSchedule(format!("{}: {m}", self.hp_name)));
        if !self.initial.is_numeric() {
            return bad("initial value is not numeric");
        }
        if self.factor <= Decimal::ZERO {
            return bad("factor must be positive");
        }
        if self.factor == Decimal::ONE {
            return bad("factor must differ from 1");
        }
        if self.change_epochs.is_empty() {
            return bad("change_epochs is empty");
        }
        if self.change_epochs.contains(&0) {
            return bad("change_epochs must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if let Some(c) = &self.constants {
            if c.get(&self.hp_name).is_some() {
                return bad("scheduled hyperparameter also appears among constants");
            }
        }
        Ok(())
    }
}

/// Expands a step schedule into segments truncated at the horizon.
pub fn expand_step_schedule(params: &ScheduleParams) -> Result<Vec<Segment>> {
    params.validate()?;
    let assignment = |v: HpValue| match &params.constants {
        Some(c) => Ok(c.with(&params.hp_name, v)),
        None => HpAssignment::from_pairs([(params.hp_name.as_str(), v)]),
    };
    let mut out = Vec::with_capacity(params.change_epochs.len() + 1);
    let mut value = params.initial.clone();
    let mut used = 0u32;
    for &period in &params.change_epochs {
        let len = period.min(params.horizon - used);
        if len == 0 {
            break;
        }
        out.push(Segment::new(assignment(value.clone())?, len)?);
        used += len;
        value = value.scaled(params.factor)?;
    }
    if used < params.horizon {
        out.push(Segment::new(assignment(value)?, params.horizon - used)?);
    }
    Ok(out)
}

/// Names the grid axes that parameterize a step schedule. Axes not named
/// here become constant hyperparameters of every segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleTemplate {
    pub hp_name: String,
    pub initial_axis: String,
    pub factor_axis: String,
    pub period_axes: Vec<String>,
}

impl ScheduleTemplate {
    fn axes(&self) -> impl Iterator<Item = &str> {
        [self.initial_axis.as_str(), self.factor_axis.as_str()]
            .into_iter()
            .chain(self.period_axes.iter().map(String::as_str))
    }

    pub fn check_axes(&self, space: &BTreeMap<String, Vec<HpValue>>) -> Result<()> {
        if self.period_axes.is_empty() {
            return Err(HpError::InvalidSpace("schedule has no period axes".into()));
        }
        for axis in self.axes() {
            if !space.contains_key(axis) {
                return Err(HpError::InvalidSpace(format!(
                    "schedule axis {axis:?} missing from space"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for axis in self.axes() {
            if !seen.insert(axis) {
                return Err(HpError::InvalidSpace(format!("axis {axis:?} used twice")));
            }
        }
        if space.contains_key(&self.hp_name) {
            return Err(HpError::InvalidSpace(format!(
                "scheduled hyperparameter {:?} must not also be an axis",
                self.hp_name
            )));
        }
        Ok(())
    }

    /// Builds the segment list for one point of the space.
    pub fn build(&self, point: &BTreeMap<String, HpValue>, horizon: u32) -> Result<Vec<Segment>> {
        let get = |axis: &str| {
            point
                .get(axis)
                .ok_or_else(|| HpError::InvalidSpace(format!("axis {axis:?} missing from point")))
        };
        let factor = get(&self.factor_axis)?.to_decimal().ok_or_else(|| {
            HpError::InvalidSpace(format!("axis {:?} must be numeric", self.factor_axis))
        })?;
        let mut change_epochs = Vec::with_capacity(self.period_axes.len());
        for axis in &self.period_axes {
            let p = get(axis)?
                .to_i64()
                .and_then(|v| u32::try_from(v).ok())
                .filter(|&v| v > 0)
                .ok_or_else(|| {
                    HpError::InvalidSpace(format!("axis {axis:?} must hold positive integers"))
                })?;
            change_epochs.push(p);
        }
        let used: BTreeSet<&str> = self.axes().collect();
        let rest: BTreeMap<String, HpValue> = point
            .iter()
            .filter(|(k, _)| !used.contains(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let constants = if rest.is_empty() {
            None
        } else {
            Some(HpAssignment::new(rest)?)
        };
        expand_step_schedule(&ScheduleParams {
            hp_name: self.hp_name.clone(),
            initial: get(&self.initial_axis)?.clone(),
            factor,
            change_epochs,
            horizon,
            constants,
        })
    }
}

/// Segments for one point: a schedule if a template is given, otherwise a
/// single constant segment covering the horizon.
pub fn point_segments(
    point: &BTreeMap<String, HpValue>,
    template: Option<&ScheduleTemplate>,
    horizon: u32,
) -> Result<Vec<Segment>> {
    match template {
        Some(t) => t.build(point, horizon),
        None => Ok(vec![Segment::new(HpAssignment::new(point.clone())?, horizon)?]),
    }
}

/// Zero-padded trial ids so lexicographic and numeric order agree.
pub fn numbered_trial_id(prefix: &str, index: usize, count: usize) -> TrialId {
    let width = count.saturating_sub(1).max(1).to_string().len();
    TrialId(format!("{prefix}{index:0width$}"))
}

/// Cartesian product of the space, odometer order over sorted axis names
/// with the first axis most significant.
pub fn expand_grid(
    space: &BTreeMap<String, Vec<HpValue>>,
    template: Option<&ScheduleTemplate>,
    horizon: u32,
) -> Result<Vec<TrialSpec>> {
    if space.is_empty() {
        return Err(HpError::InvalidSpace("space has no axes".into()));
    }
    if let Some((axis, _)) = space.iter().find(|(_, v)| v.is_empty()) {
        return Err(HpError::InvalidSpace(format!("axis {axis:?} is empty")));
    }
    if let Some(t) = template {
        t.check_axes(space)?;
    }
    let axes: Vec<(&String, &Vec<HpValue>)> = space.iter().collect();
    let count = axes.iter().try_fold(1usize, |acc, (_, v)| acc.checked_mul(v.len()));
    let count = count.ok_or_else(|| HpError::InvalidSpace("grid too large".into()))?;
    let mut trials = Vec::with_capacity(count);
    let mut idx = vec![0usize; axes.len()];
    for n in 0..count {
        let point: BTreeMap<String, HpValue> = axes
            .iter()
            .zip(&idx)
            .map(|((k, v), &i)| ((*k).clone(), v[i].clone()))
            .collect();
        let segments = point_segments(&point, template, horizon)?;
        trials.push(TrialSpec::new(numbered_trial_id("t", n, count), segments, 0)?);
        for pos in (0..axes.len()).rev() {
            idx[pos] += 1;
            if idx[pos] < axes[pos].1.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
    Ok(trials)
}
