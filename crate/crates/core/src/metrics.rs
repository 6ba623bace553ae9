//! Per-group confusion counts, performance metrics and the four fairness
//! ratios (statistical parity, equal opportunity, equalised odds, equal
//! accuracy) with extended-ratio semantics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::Group;
use crate::error::{Error, Result};

pub const FAIR_BAND: (f64, f64) = (0.8, 1.2);

/// Fixed record keys, in rendering order.
pub const METRIC_KEYS: [&str; 9] = [
    "accuracy",
    "sensitivity",
    "specificity",
    "precision",
    "f1",
    "m_sp",
    "m_eopp",
    "m_eodd",
    "m_eacc",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn predicted_positive(&self) -> u64 {
        self.tp + self.fp
    }

    fn add(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    fn record(&mut self, label: u8, prediction: u8) {
        match (label, prediction) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (0, 0) => self.tn += 1,
            _ => self.fn_ += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedConfusion {
    pub per_group: [ConfusionCounts; 2],
    pub combined: ConfusionCounts,
}

impl GroupedConfusion {
    pub fn group(&self, g: Group) -> &ConfusionCounts {
        &self.per_group[g.index()]
    }

    pub fn from_groups(s0: ConfusionCounts, s1: ConfusionCounts) -> Self {
        GroupedConfusion {
            per_group: [s0, s1],
            combined: s0.add(&s1),
        }
    }
}

pub fn grouped_confusion(labels: &[u8], predictions: &[u8], groups: &[Group]) -> Result<GroupedConfusion> {
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: labels.len(),
            found: predictions.len(),
        });
    }
    if groups.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "groups",
            expected: labels.len(),
            found: groups.len(),
        });
    }
    let mut per_group = [ConfusionCounts::default(); 2];
    for ((&y, &p), &g) in labels.iter().zip(predictions).zip(groups) {
        if y > 1 || p > 1 {
            return Err(Error::invalid(format!("labels and predictions must be 0 or 1, got {y}/{p}")));
        }
        per_group[g.index()].record(y, p);
    }
    Ok(GroupedConfusion::from_groups(per_group[0], per_group[1]))
}

fn rate(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `None` marks a metric whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

pub fn performance(cc: &ConfusionCounts) -> PerformanceReport {
    let sensitivity = rate(cc.tp, cc.positives());
    let precision = rate(cc.tp, cc.predicted_positive());
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    PerformanceReport {
        accuracy: rate(cc.tp + cc.tn, cc.total()),
        sensitivity,
        specificity: rate(cc.tn, cc.negatives()),
        precision,
        f1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExtendedRatio {
    Finite(f64),
    PositiveInfinity,
    /// Zero over zero: both rates are zero and therefore equal.
    EqualByConvention,
}

impl ExtendedRatio {
    pub fn is_fair(&self) -> bool {
        band_check(self)
    }

    /// Ratio with numerator and denominator exchanged.
    pub fn reciprocal(&self) -> ExtendedRatio {
        match *self {
            ExtendedRatio::Finite(0.0) => ExtendedRatio::PositiveInfinity,
            ExtendedRatio::Finite(v) => ExtendedRatio::Finite(1.0 / v),
            ExtendedRatio::PositiveInfinity => ExtendedRatio::Finite(0.0),
            ExtendedRatio::EqualByConvention => ExtendedRatio::EqualByConvention,
        }
    }
}

impl fmt::Display for ExtendedRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedRatio::Finite(v) => write!(f, "{v:.4}"),
            ExtendedRatio::PositiveInfinity => f.write_str("inf"),
            ExtendedRatio::EqualByConvention => f.write_str("equal"),
        }
    }
}

pub fn extended_ratio(numerator: f64, denominator: f64) -> Result<ExtendedRatio> {
    if !(numerator >= 0.0 && denominator >= 0.0) {
        return Err(Error::invalid(format!(
            "ratio arguments must be non-negative, got {numerator}/{denominator}"
        )));
    }
    Ok(if denominator > 0.0 {
        ExtendedRatio::Finite(numerator / denominator)
    } else if numerator > 0.0 {
        ExtendedRatio::PositiveInfinity
    } else {
        ExtendedRatio::EqualByConvention
    })
}

/// Inclusive band [0.8, 1.2]; zero-over-zero counts as fair.
pub fn band_check(r: &ExtendedRatio) -> bool {
    match *r {
        ExtendedRatio::Finite(v) => (FAIR_BAND.0..=FAIR_BAND.1).contains(&v),
        ExtendedRatio::PositiveInfinity => false,
        ExtendedRatio::EqualByConvention => true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub m_sp: ExtendedRatio,
    pub m_eopp: ExtendedRatio,
    pub m_eodd: ExtendedRatio,
    pub m_eacc: ExtendedRatio,
    pub sp_fair: bool,
    pub eopp_fair: bool,
    pub eodd_fair: bool,
    pub eacc_fair: bool,
    /// Equalised odds holds only when both the TPR and FPR ratios are in band.
    pub eodds_fair: bool,
}

impl FairnessReport {
    fn from_ratios(m_sp: ExtendedRatio, m_eopp: ExtendedRatio, m_eodd: ExtendedRatio, m_eacc: ExtendedRatio) -> Self {
        FairnessReport {
            m_sp,
            m_eopp,
            m_eodd,
            m_eacc,
            sp_fair: band_check(&m_sp),
            eopp_fair: band_check(&m_eopp),
            eodd_fair: band_check(&m_eodd),
            eacc_fair: band_check(&m_eacc),
            eodds_fair: band_check(&m_eopp) && band_check(&m_eodd),
        }
    }
}

fn rate_or_zero(num: u64, den: u64) -> f64 {
    rate(num, den).unwrap_or(0.0)
}

/// Minority-over-majority ratios of positive-prediction rate, TPR, FPR and
/// accuracy. A rate with an empty denominator counts as zero.
pub fn fairness(gc: &GroupedConfusion) -> Result<FairnessReport> {
    for g in Group::BOTH {
        if gc.group(g).total() == 0 {
            return Err(Error::EmptyGroup(g));
        }
    }
    let [s0, s1] = gc.per_group;
    let ratio = |f: &dyn Fn(&ConfusionCounts) -> f64| extended_ratio(f(&s0), f(&s1));
    Ok(FairnessReport::from_ratios(
        ratio(&|c| rate_or_zero(c.predicted_positive(), c.total()))?,
        ratio(&|c| rate_or_zero(c.tp, c.positives()))?,
        ratio(&|c| rate_or_zero(c.fp, c.negatives()))?,
        ratio(&|c| rate_or_zero(c.tp + c.tn, c.total()))?,
    ))
}

/// A serialized metric value: number, `"inf"`, `"equal"`, or null when undefined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RecordValue {
    Number(f64),
    Infinite,
    Equal,
    Undefined,
}

impl From<ExtendedRatio> for RecordValue {
    fn from(r: ExtendedRatio) -> Self {
        match r {
            ExtendedRatio::Finite(v) => RecordValue::Number(v),
            ExtendedRatio::PositiveInfinity => RecordValue::Infinite,
            ExtendedRatio::EqualByConvention => RecordValue::Equal,
        }
    }
}

impl From<Option<f64>> for RecordValue {
    fn from(v: Option<f64>) -> Self {
        v.map_or(RecordValue::Undefined, RecordValue::Number)
    }
}

impl RecordValue {
    pub fn to_json(&self) -> serde_json::Value {
        match *self {
            RecordValue::Number(v) => serde_json::json!(v),
            RecordValue::Infinite => serde_json::json!("inf"),
            RecordValue::Equal => serde_json::json!("equal"),
            RecordValue::Undefined => serde_json::Value::Null,
        }
    }
}

/// Flat key-value record with the nine fixed keys.
pub fn to_record(perf: &PerformanceReport, fair: &FairnessReport) -> Vec<(&'static str, RecordValue)> {
    vec![
        ("accuracy", perf.accuracy.into()),
        ("sensitivity", perf.sensitivity.into()),
        ("specificity", perf.specificity.into()),
        ("precision", perf.precision.into()),
        ("f1", perf.f1.into()),
        ("m_sp", fair.m_sp.into()),
        ("m_eopp", fair.m_eopp.into()),
        ("m_eodd", fair.m_eodd.into()),
        ("m_eacc", fair.m_eacc.into()),
    ]
}

pub fn record_json(perf: &PerformanceReport, fair: &FairnessReport) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = to_record(perf, fair)
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_json()))
        .collect();
    serde_json::Value::Object(map)
}

/// Hard predictions at the 0.5 threshold (p = 0.5 maps to class 1).
pub fn threshold(probabilities: &[f64]) -> Vec<u8> {
    probabilities.iter().map(|&p| u8::from(p >= 0.5)).collect()
}
