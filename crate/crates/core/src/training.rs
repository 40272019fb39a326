//! Optimizers, gradient clipping and the teacher-forced training loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{default_mlp_hidden, PoolingMode};
use crate::autodiff::{Graph, Tensor};
use crate::dataset::{Dataset, Example};
use crate::decoder::{encode, teacher_forced_graph, DecoderError, DecoderParams, ModelConfig, Variant};
use crate::threads;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("vocabulary mismatch: config expects {expected} tokens, dataset has {actual}")]
    VocabMismatch { expected: usize, actual: usize },
    #[error("non-finite gradient in tensor {tensor} (epoch {epoch})")]
    NonFiniteGradient { tensor: String, epoch: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Model(#[from] DecoderError),
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// Model widths that do not come from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    pub embed_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub joint_dim: usize,
    /// Defaults to `max(8, D/4)`.
    pub mlp_hidden: Option<usize>,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden1: 64,
            hidden2: 64,
            joint_dim: 64,
            mlp_hidden: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub variant: Variant,
    /// Region pooling used by the `TD` variant.
    pub lower_mode: PoolingMode,
    pub feed_h1_to_lstm2: bool,
    pub dims: Dims,
    /// Expected vocabulary size; checked against the dataset when set.
    pub vocab_size: Option<usize>,
    /// Fill the `seconds` column of the log. Off keeps logs reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 16,
            clip_norm: Some(5.0),
            optimizer: OptimizerKind::Adam,
            seed: 0,
            variant: Variant::BuResTd,
            lower_mode: PoolingMode::ResidualAttention,
            feed_h1_to_lstm2: true,
            dims: Dims::default(),
            vocab_size: None,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Decoder shape for a dataset with the given widths.
    pub fn model_config(&self, feature_dim: usize, vocab_size: usize, max_len: usize) -> ModelConfig {
        let mut m = ModelConfig::new(feature_dim, vocab_size);
        m.embed_dim = self.dims.embed_dim;
        m.hidden1 = self.dims.hidden1;
        m.hidden2 = self.dims.hidden2;
        m.joint_dim = self.dims.joint_dim;
        m.mlp_hidden = self.dims.mlp_hidden.unwrap_or_else(|| default_mlp_hidden(feature_dim));
        m.max_len = max_len;
        m.feed_h1_to_lstm2 = self.feed_h1_to_lstm2;
        m.with_flags(self.variant.flags(self.lower_mode))
    }
}

/// Per-tensor optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

pub const MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, shapes: &[usize]) -> Self {
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        Self {
            kind,
            learning_rate,
            first: zeros(),
            second: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `names` labels tensors in error messages.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Vec<f64>],
        names: &[&str],
    ) -> Result<(), TrainError> {
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params[i].numel() {
                return Err(TrainError::Config(format!(
                    "gradient for {} has {} entries, tensor has {}",
                    names.get(i).copied().unwrap_or("?"),
                    g.len(),
                    params[i].numel()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    tensor: names.get(i).copied().unwrap_or("?").to_string(),
                    epoch: 0,
                });
            }
        }
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = MOMENTUM * *vi + gi;
                        *w -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-token cross-entropy over the epoch's forward passes.
    pub loss: f64,
    /// Teacher-forced argmax accuracy over the same passes.
    pub token_acc: f64,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,loss,token_acc,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for e in &self.epochs {
            let secs = e.seconds.map(|s| format!("{s:.3}")).unwrap_or_default();
            writeln!(out, "{},{},{},{}", e.epoch, e.loss, e.token_acc, secs).expect("string write");
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Teacher-forced totals for one image over all its references.
#[derive(Debug, Clone)]
pub struct ExampleStats {
    pub nll: f64,
    pub steps: usize,
    pub correct: usize,
}

/// Forward and backward pass for one image; gradients are of the summed
/// (not averaged) negative log-likelihood.
pub fn example_gradients(
    params: &DecoderParams,
    example: &Example,
) -> Result<(Vec<Vec<f64>>, ExampleStats), DecoderError> {
    let mut g = Graph::new();
    let m = params.bind(&mut g, true)?;
    let enc = encode(&mut g, &m, &example.features)?;
    let mut total = None;
    let mut stats = ExampleStats {
        nll: 0.0,
        steps: 0,
        correct: 0,
    };
    for cap in &example.refs {
        let tf = teacher_forced_graph(&mut g, &m, &enc, cap)?;
        stats.steps += tf.steps;
        stats.correct += tf.correct;
        total = Some(match total {
            Some(acc) => g.add(acc, tf.nll_sum)?,
            None => tf.nll_sum,
        });
    }
    let total = total.ok_or(DecoderError::EmptyCaption)?;
    stats.nll = g.value(total).item();
    g.backward(total)?;
    let grads = m.params().iter().map(|&v| g.grad(v).into_data()).collect();
    Ok((grads, stats))
}

/// Teacher-forced totals without gradients.
pub fn example_stats(params: &DecoderParams, example: &Example) -> Result<ExampleStats, DecoderError> {
    let mut g = Graph::new();
    let m = params.bind(&mut g, false)?;
    let enc = encode(&mut g, &m, &example.features)?;
    let mut stats = ExampleStats {
        nll: 0.0,
        steps: 0,
        correct: 0,
    };
    for cap in &example.refs {
        let tf = teacher_forced_graph(&mut g, &m, &enc, cap)?;
        stats.nll += g.value(tf.nll_sum).item();
        stats.steps += tf.steps;
        stats.correct += tf.correct;
    }
    Ok(stats)
}

/// Mean per-token loss and token accuracy of `params` on `data`.
pub fn evaluate_teacher_forced(params: &DecoderParams, data: &Dataset) -> Result<(f64, f64), DecoderError> {
    let stats: Vec<ExampleStats> = threads::install(|| {
        data.examples
            .par_iter()
            .map(|e| example_stats(params, e))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let (nll, steps, correct) = stats
        .iter()
        .fold((0.0, 0, 0), |(n, s, c), e| (n + e.nll, s + e.steps, c + e.correct));
    Ok((nll / steps as f64, correct as f64 / steps as f64))
}

/// Trains a fresh model initialised from `config.seed`.
pub fn fit(data: &Dataset, config: &TrainConfig) -> Result<(DecoderParams, TrainLog), TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(expected) = config.vocab_size {
        if expected != data.vocab.len() {
            return Err(TrainError::VocabMismatch {
                expected,
                actual: data.vocab.len(),
            });
        }
    }
    let model = config.model_config(data.feature_dim(), data.vocab.len(), data.max_len);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    let params = DecoderParams::init(model, &mut rng)?;
    fit_from(params, data, config, &mut rng)
}

/// Continues training `params`; `rng` drives the shuffling.
pub fn fit_from(
    mut params: DecoderParams,
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut Xoshiro256PlusPlus,
) -> Result<(DecoderParams, TrainLog), TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if params.config.vocab_size != data.vocab.len() {
        return Err(TrainError::VocabMismatch {
            expected: params.config.vocab_size,
            actual: data.vocab.len(),
        });
    }
    let names: Vec<&'static str> = params.config.param_shapes().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &sizes);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(rng);
        let (mut nll, mut steps, mut correct) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let results = threads::install(|| {
                batch
                    .par_iter()
                    .map(|&i| example_gradients(&params, &data.examples[i]))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_steps = 0;
            for (g, s) in &results {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                }
                nll += s.nll;
                steps += s.steps;
                correct += s.correct;
                batch_steps += s.steps;
            }
            let scale = 1.0 / batch_steps as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::NonFiniteGradient {
                    tensor: names[i].to_string(),
                    epoch,
                });
            }
            if let Some(max) = config.clip_norm {
                clip_gradients(&mut grads, max);
            }
            opt.step(&mut params.tensors_mut(), &grads, &names)?;
        }
        let loss = nll / steps as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let record = EpochRecord {
            epoch,
            loss,
            token_acc: correct as f64 / steps as f64,
            seconds: config.log_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} token_acc {:.4}",
            record.loss,
            record.token_acc
        );
        log.epochs.push(record);
    }
    Ok((params, log))
}
