//! Small differentiable binary classifiers with hand-written gradients and
//! mini-batch Adam training.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{seeded_rng, Dataset, Example, Group, SeedStream};
use crate::error::{Error, Result};
use crate::inprocess::{self, RegPenaltyConfig};

/// Probability clamp used by the cross-entropy and by [`forward`].
pub const PROB_EPS: f64 = 1e-7;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Logistic { dim: usize },
    /// One tanh hidden layer.
    Mlp { dim: usize, hidden: usize },
}

impl Architecture {
    pub fn dim(&self) -> usize {
        match *self {
            Architecture::Logistic { dim } | Architecture::Mlp { dim, .. } => dim,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Architecture::Logistic { dim } => dim + 1,
            Architecture::Mlp { dim, hidden } => hidden * dim + hidden + hidden + 1,
        }
    }

    /// Row-major shapes of each parameter block, in storage order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Architecture::Logistic { dim } => vec![vec![dim], vec![1]],
            Architecture::Mlp { dim, hidden } => vec![vec![hidden, dim], vec![hidden], vec![hidden], vec![1]],
        }
    }
}

/// Flat parameter vector. Logistic layout: `[w; b]`. MLP layout:
/// `[W1 (hidden x dim, row-major); b1; w2; b2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        ModelParams {
            arch,
            values: vec![0.0; arch.param_count()],
        }
    }

    /// Biases zero, weights uniform in ±1/sqrt(fan_in).
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut p = ModelParams::zeros(arch);
        match arch {
            Architecture::Logistic { dim } => {
                let r = 1.0 / (dim as f64).sqrt();
                for w in &mut p.values[..dim] {
                    *w = rng.gen_range(-r..r);
                }
            }
            Architecture::Mlp { dim, hidden } => {
                let r1 = 1.0 / (dim as f64).sqrt();
                for w in &mut p.values[..hidden * dim] {
                    *w = rng.gen_range(-r1..r1);
                }
                let r2 = 1.0 / (hidden as f64).sqrt();
                let start = hidden * dim + hidden;
                for w in &mut p.values[start..start + hidden] {
                    *w = rng.gen_range(-r2..r2);
                }
            }
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ModelRecord = serde_json::from_str(text)?;
        rec.into_params()
    }
}

const MODEL_FORMAT: &str = "depfair-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    format: String,
    version: u32,
    architecture: Architecture,
    shapes: Vec<Vec<usize>>,
    values: Vec<f64>,
}

impl From<&ModelParams> for ModelRecord {
    fn from(p: &ModelParams) -> Self {
        ModelRecord {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            architecture: p.arch,
            shapes: p.arch.shapes(),
            values: p.values.clone(),
        }
    }
}

impl ModelRecord {
    fn into_params(self) -> Result<ModelParams> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model record {} v{}",
                self.format, self.version
            )));
        }
        if self.shapes != self.architecture.shapes() || self.values.len() != self.architecture.param_count() {
            return Err(Error::invalid("model record shapes do not match its architecture"));
        }
        let p = ModelParams {
            arch: self.architecture,
            values: self.values,
        };
        if !p.is_finite() {
            return Err(Error::invalid("model record holds non-finite values"));
        }
        Ok(p)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_dim(params: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != params.arch.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.arch.dim(),
            found: x.len(),
        });
    }
    Ok(())
}

/// Pre-sigmoid score.
pub fn score(params: &ModelParams, x: &[f64]) -> Result<f64> {
    check_dim(params, x)?;
    Ok(score_unchecked(params, x, None))
}

// Fills `hidden_out` with the tanh activations when given.
fn score_unchecked(params: &ModelParams, x: &[f64], hidden_out: Option<&mut Vec<f64>>) -> f64 {
    let v = &params.values;
    match params.arch {
        Architecture::Logistic { dim } => dot(&v[..dim], x) + v[dim],
        Architecture::Mlp { dim, hidden } => {
            let b1 = hidden * dim;
            let w2 = b1 + hidden;
            let b2 = w2 + hidden;
            let mut acts = Vec::with_capacity(hidden);
            let mut z = v[b2];
            for h in 0..hidden {
                let a = (dot(&v[h * dim..(h + 1) * dim], x) + v[b1 + h]).tanh();
                z += v[w2 + h] * a;
                acts.push(a);
            }
            if let Some(out) = hidden_out {
                *out = acts;
            }
            z
        }
    }
}

/// Adds `dz * dscore/dparams` into `grad`.
fn accumulate_score_gradient(params: &ModelParams, x: &[f64], dz: f64, grad: &mut [f64]) {
    let v = &params.values;
    match params.arch {
        Architecture::Logistic { dim } => {
            for (g, xi) in grad[..dim].iter_mut().zip(x) {
                *g += dz * xi;
            }
            grad[dim] += dz;
        }
        Architecture::Mlp { dim, hidden } => {
            let mut acts = Vec::new();
            score_unchecked(params, x, Some(&mut acts));
            let b1 = hidden * dim;
            let w2 = b1 + hidden;
            let b2 = w2 + hidden;
            for h in 0..hidden {
                let a = acts[h];
                grad[w2 + h] += dz * a;
                let dpre = dz * v[w2 + h] * (1.0 - a * a);
                grad[b1 + h] += dpre;
                for (g, xi) in grad[h * dim..(h + 1) * dim].iter_mut().zip(x) {
                    *g += dpre * xi;
                }
            }
            grad[b2] += dz;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Probability of the positive class, clamped into [1e-7, 1 - 1e-7].
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<f64> {
    Ok(sigmoid(score(params, x)?).clamp(PROB_EPS, 1.0 - PROB_EPS))
}

pub fn predict_proba(params: &ModelParams, dataset: &Dataset) -> Result<Vec<f64>> {
    dataset.examples.iter().map(|e| forward(params, &e.features)).collect()
}

pub fn cross_entropy(label: f64, probability: f64) -> f64 {
    let p = probability.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -label * p.ln() - (1.0 - label) * (1.0 - p).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Plain,
    /// Each example's cross-entropy is scaled by its weight.
    Weighted,
    Regularised(RegPenaltyConfig),
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LossSpec::Regularised(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }
}

pub fn batch_loss(params: &ModelParams, batch: &[Example], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    let refs: Vec<&Example> = batch.iter().collect();
    batch_loss_refs(params, &refs, spec)
}

pub(crate) fn batch_loss_refs(params: &ModelParams, batch: &[&Example], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for e in batch {
        check_dim(params, &e.features)?;
    }
    let n = batch.len() as f64;
    let scores: Vec<f64> = batch.iter().map(|e| score_unchecked(params, &e.features, None)).collect();

    let mut loss = 0.0;
    let mut dscore = vec![0.0; batch.len()];
    for (i, (e, &z)) in batch.iter().zip(&scores).enumerate() {
        let p = sigmoid(z);
        let w = match spec {
            LossSpec::Weighted => e.weight,
            _ => 1.0,
        };
        loss += w * cross_entropy(e.label, p);
        // The clamp flattens the loss outside [eps, 1 - eps].
        if p > PROB_EPS && p < 1.0 - PROB_EPS {
            dscore[i] = w * (p - e.label) / n;
        }
    }
    loss /= n;

    if let LossSpec::Regularised(cfg) = spec {
        let labels: Vec<f64> = batch.iter().map(|e| e.label).collect();
        let groups: Vec<Group> = batch.iter().map(|e| e.group).collect();
        let pen = inprocess::penalty_with_gradient(&labels, &groups, &scores, cfg)?;
        loss += cfg.lambda_eopp * pen.d_t + cfg.lambda_eodd * pen.d_f;
        if cfg.lambda_eopp != 0.0 || cfg.lambda_eodd != 0.0 {
            for (i, d) in dscore.iter_mut().enumerate() {
                *d += cfg.lambda_eopp * pen.grad_d_t[i] + cfg.lambda_eodd * pen.grad_d_f[i];
            }
        }
    }

    let mut grad = vec![0.0; params.values.len()];
    for (e, &dz) in batch.iter().zip(&dscore) {
        if dz != 0.0 {
            accumulate_score_gradient(params, &e.features, dz, &mut grad);
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_strength: f64,
    pub seed: u64,
    pub loss: LossSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 50,
            l2_strength: 0.0,
            seed: 0,
            loss: LossSpec::Plain,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.l2_strength >= 0.0) {
            return Err(Error::invalid("l2 strength must be non-negative"));
        }
        self.loss.validate()
    }
}

/// Adam with fixed moment decays 0.9 / 0.999 and epsilon 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, n: usize) -> Self {
        Adam {
            learning_rate,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

// Indices of weights (not biases) that receive L2 decay.
fn weight_mask(arch: Architecture) -> Vec<bool> {
    let mut mask = vec![false; arch.param_count()];
    match arch {
        Architecture::Logistic { dim } => mask[..dim].iter_mut().for_each(|m| *m = true),
        Architecture::Mlp { dim, hidden } => {
            mask[..hidden * dim].iter_mut().for_each(|m| *m = true);
            let w2 = hidden * dim + hidden;
            mask[w2..w2 + hidden].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

pub fn train(dataset: &Dataset, arch: Architecture, config: &TrainConfig) -> Result<TrainOutcome> {
    let init_seed = SeedStream::new(config.seed).derive("init", 0);
    run_epochs(ModelParams::init(arch, init_seed), dataset, config)
}

/// Continues training from `params` with the same mechanics as [`train`].
pub fn fine_tune(params: &ModelParams, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    run_epochs(params.clone(), dataset, config)
}

fn run_epochs(mut params: ModelParams, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if dataset.feature_dim != params.arch.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.arch.dim(),
            found: dataset.feature_dim,
        });
    }
    let canonical = dataset.canonical_order();
    let mut order: Vec<usize> = (0..canonical.len()).collect();
    let mut rng = seeded_rng(SeedStream::new(config.seed).derive("shuffle", 0));
    let mut adam = Adam::new(config.learning_rate, params.values.len());
    let decay = weight_mask(params.arch);
    let mut history = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &dataset.examples[canonical[i]]).collect();
            let (loss, mut grad) = batch_loss_refs(&params, &batch, &config.loss)?;
            if config.l2_strength > 0.0 {
                for ((g, &w), &d) in grad.iter_mut().zip(&params.values).zip(&decay) {
                    if d {
                        *g += config.l2_strength * w;
                    }
                }
            }
            adam.step(&mut params.values, &grad);
            total += loss * batch.len() as f64;
        }
        history.push(total / dataset.len() as f64);
    }
    if !params.is_finite() {
        return Err(Error::Degenerate("training produced non-finite parameters".into()));
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}
