//! In-processing mitigation: reweighing, probability-based TPR/FPR
//! estimates, the rate-gap penalties and two-stage regularised fine-tuning.
//!
//! With `gamma > 1` the rate estimates use sharpened probabilities
//! `sigmoid(gamma * logit(p))`, which pulls the soft rates towards the rates
//! of hard 0.5-threshold predictions. `gamma = 1` is the unsharpened
//! estimator.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example, Group};
use crate::error::{Error, Result};
use crate::model::{self, Architecture, LossSpec, ModelParams, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegPenaltyConfig {
    pub lambda_eopp: f64,
    pub lambda_eodd: f64,
    /// Sharpening exponent, 1 for the plain estimator.
    pub gamma: f64,
    /// Fine-tune a plainly trained model instead of training from scratch.
    pub two_stage: bool,
}

impl RegPenaltyConfig {
    pub fn original(lambda_eopp: f64, lambda_eodd: f64) -> Self {
        RegPenaltyConfig {
            lambda_eopp,
            lambda_eodd,
            gamma: 1.0,
            two_stage: true,
        }
    }

    pub fn plus(lambda_eopp: f64, lambda_eodd: f64, gamma: f64) -> Self {
        RegPenaltyConfig {
            lambda_eopp,
            lambda_eodd,
            gamma,
            two_stage: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_eopp >= 0.0 && self.lambda_eodd >= 0.0) {
            return Err(Error::invalid("regularisation strengths must be non-negative"));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        Ok(())
    }
}

impl Default for RegPenaltyConfig {
    fn default() -> Self {
        RegPenaltyConfig::original(2.0, 2.0)
    }
}

/// Per-(label, group) loss weights, indexed `weights[label][group]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweighTable {
    pub weights: [[f64; 2]; 2],
}

impl ReweighTable {
    pub fn weight(&self, label: u8, group: Group) -> f64 {
        self.weights[label as usize][group.index()]
    }

    /// Four labelled weights for audit logs.
    pub fn audit_json(&self, group_names: &[String; 2]) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for label in [1u8, 0] {
            for g in Group::BOTH {
                map.insert(
                    format!("label={label},group={}", group_names[g.index()]),
                    serde_json::json!(self.weight(label, g)),
                );
            }
        }
        serde_json::Value::Object(map)
    }
}

fn require_hard(dataset: &Dataset) -> Result<()> {
    match dataset.examples.iter().position(|e| !e.is_hard()) {
        Some(i) => Err(Error::invalid(format!("example {i} has a soft label; hard labels required"))),
        None => Ok(()),
    }
}

/// `beta(y, s) = P(Y=y) / P(Y=y | S=s)` from empirical frequencies.
pub fn reweigh_table(dataset: &Dataset) -> Result<ReweighTable> {
    require_hard(dataset)?;
    let counts = dataset.cell_counts();
    let n = dataset.len() as f64;
    let mut weights = [[0.0; 2]; 2];
    for label in 0..2u8 {
        let class_total = (counts[label as usize][0] + counts[label as usize][1]) as f64;
        for g in Group::BOTH {
            let cell = counts[label as usize][g.index()];
            if cell == 0 {
                return Err(Error::EmptyCell { label, group: g });
            }
            let group_total = (counts[0][g.index()] + counts[1][g.index()]) as f64;
            // P(Y=y) * P(S=s) / P(Y=y, S=s), written to keep integer counts together.
            weights[label as usize][g.index()] = class_total * group_total / (n * cell as f64);
        }
    }
    Ok(ReweighTable { weights })
}

pub fn apply_reweighing(dataset: &Dataset, table: &ReweighTable) -> Dataset {
    let examples = dataset
        .examples
        .iter()
        .map(|e| Example {
            weight: table.weight(e.hard_label(), e.group),
            ..e.clone()
        })
        .collect();
    dataset.with_examples(examples)
}

/// Positive-rate gap between the groups measured with example weights.
pub fn weighted_discrimination(dataset: &Dataset) -> Result<f64> {
    let mut pos = [0.0; 2];
    let mut tot = [0.0; 2];
    for e in &dataset.examples {
        tot[e.group.index()] += e.weight;
        if e.hard_label() == 1 {
            pos[e.group.index()] += e.weight;
        }
    }
    for g in Group::BOTH {
        if tot[g.index()] == 0.0 {
            return Err(Error::EmptyGroup(g));
        }
    }
    Ok(pos[0] / tot[0] - pos[1] / tot[1])
}

/// `sigmoid(gamma * logit(p))`; exact identity at `gamma = 1`.
pub fn sharpen(p: f64, gamma: f64) -> f64 {
    if gamma == 1.0 || p <= 0.0 || p >= 1.0 {
        return p;
    }
    model::sigmoid(gamma * (p / (1.0 - p)).ln())
}

/// Soft TPR and FPR for one group; `None` when the group has no positives
/// (respectively negatives) in the batch.
pub fn soft_rates(labels: &[f64], probabilities: &[f64], groups: &[Group], group: Group) -> Result<(Option<f64>, Option<f64>)> {
    check_aligned(labels, probabilities, groups)?;
    let mut tp = 0.0;
    let mut pos = 0.0;
    let mut fp = 0.0;
    let mut neg = 0.0;
    for ((&y, &p), &g) in labels.iter().zip(probabilities).zip(groups) {
        if g != group {
            continue;
        }
        tp += y * p;
        pos += y;
        fp += (1.0 - y) * p;
        neg += 1.0 - y;
    }
    Ok(((pos > 0.0).then(|| tp / pos), (neg > 0.0).then(|| fp / neg)))
}

fn check_aligned(labels: &[f64], probabilities: &[f64], groups: &[Group]) -> Result<()> {
    if probabilities.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "probabilities",
            expected: labels.len(),
            found: probabilities.len(),
        });
    }
    if groups.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "groups",
            expected: labels.len(),
            found: groups.len(),
        });
    }
    Ok(())
}

/// Absolute TPR and FPR gaps; a gap is 0 when either group lacks the class.
pub fn reg_penalty(labels: &[f64], probabilities: &[f64], groups: &[Group], cfg: &RegPenaltyConfig) -> Result<(f64, f64)> {
    let sharp: Vec<f64> = probabilities.iter().map(|&p| sharpen(p, cfg.gamma)).collect();
    let (t0, f0) = soft_rates(labels, &sharp, groups, Group::S0)?;
    let (t1, f1) = soft_rates(labels, &sharp, groups, Group::S1)?;
    let gap = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs(),
        _ => 0.0,
    };
    Ok((gap(t0, t1), gap(f0, f1)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyTerms {
    pub d_t: f64,
    pub d_f: f64,
    /// Derivatives with respect to each example's pre-sigmoid score.
    pub grad_d_t: Vec<f64>,
    pub grad_d_f: Vec<f64>,
}

/// Rate gaps evaluated from scores, with exact derivatives. Probabilities
/// are `sigmoid(gamma * score)`.
pub fn penalty_with_gradient(labels: &[f64], groups: &[Group], scores: &[f64], cfg: &RegPenaltyConfig) -> Result<PenaltyTerms> {
    check_aligned(labels, scores, groups)?;
    let n = labels.len();
    let q: Vec<f64> = scores.iter().map(|&z| model::sigmoid(cfg.gamma * z)).collect();
    let dq: Vec<f64> = q.iter().map(|&q| cfg.gamma * q * (1.0 - q)).collect();

    // One pass per term: class weights y (TPR) or 1 - y (FPR).
    let term = |class_weight: &dyn Fn(f64) -> f64| -> (f64, Vec<f64>) {
        let mut num = [0.0; 2];
        let mut den = [0.0; 2];
        for i in 0..n {
            let w = class_weight(labels[i]);
            num[groups[i].index()] += w * q[i];
            den[groups[i].index()] += w;
        }
        let mut grad = vec![0.0; n];
        if den[0] <= 0.0 || den[1] <= 0.0 {
            return (0.0, grad);
        }
        let diff = num[0] / den[0] - num[1] / den[1];
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        if sign != 0.0 {
            for i in 0..n {
                let k = groups[i].index();
                let s = if k == 0 { sign } else { -sign };
                grad[i] = s * class_weight(labels[i]) * dq[i] / den[k];
            }
        }
        (diff.abs(), grad)
    };
    let (d_t, grad_d_t) = term(&|y| y);
    let (d_f, grad_d_f) = term(&|y| 1.0 - y);
    Ok(PenaltyTerms {
        d_t,
        d_f,
        grad_d_t,
        grad_d_f,
    })
}

/// Plain cross-entropy mean plus the weighted rate-gap penalties.
pub fn regularised_loss(batch: &[Example], params: &ModelParams, cfg: &RegPenaltyConfig) -> Result<(f64, Vec<f64>)> {
    model::batch_loss(params, batch, &LossSpec::Regularised(*cfg))
}

/// Plain training, then fine-tuning with the regularised loss of `stage2`.
pub fn reg_plus_pipeline(dataset: &Dataset, arch: Architecture, stage1: &TrainConfig, stage2: &TrainConfig) -> Result<ModelParams> {
    if !matches!(stage2.loss, LossSpec::Regularised(_)) {
        return Err(Error::invalid("stage two of the pipeline needs a regularised loss"));
    }
    let first = model::train(dataset, arch, stage1)?;
    Ok(model::fine_tune(&first.params, dataset, stage2)?.params)
}
