//! Two-LSTM caption decoder.
//!
//! Each step runs a context LSTM over `[h2_prev; global; pooled; embedding]`,
//! attends over the pooled regions with the context LSTM's new hidden state
//! as query, then runs a predictor LSTM over `[context; h1]` whose hidden
//! state feeds a linear output layer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    default_mlp_hidden, restd1_pool_graph, restd2_attend_graph, restd2_keys, PoolingMode,
    Restd1Params, Restd1Vars, Restd2Params, Restd2Vars,
};
use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::features::FeatureRecord;
use crate::init::glorot_matrix;
use crate::vocab::{Caption, BOS, EOS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("unknown variant {0:?} (expected BU_Only, BU+Td, BU+ResTd or TD)")]
    UnknownVariant(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenRange { token: usize, vocab: usize },
    #[error("feature width {actual} does not match model width {expected}")]
    FeatureWidth { expected: usize, actual: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("caption has no content tokens")]
    EmptyCaption,
    #[error("caption length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named ablation of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "BU_Only")]
    BuOnly,
    #[serde(rename = "BU+Td")]
    BuTd,
    #[serde(rename = "BU+ResTd")]
    BuResTd,
    #[serde(rename = "TD")]
    Td,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Td, Variant::BuOnly, Variant::BuTd, Variant::BuResTd];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::BuOnly => "BU_Only",
            Variant::BuTd => "BU+Td",
            Variant::BuResTd => "BU+ResTd",
            Variant::Td => "TD",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = DecoderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DecoderError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    pub lower_mode: PoolingMode,
    pub use_global: bool,
    pub upper_residual: bool,
}

/// Flag bundle for a named variant. `TD` keeps `configured_lower` as its
/// region pooling mode.
pub fn make_variant(name: &str, configured_lower: PoolingMode) -> Result<VariantFlags, DecoderError> {
    Ok(name.parse::<Variant>()?.flags(configured_lower))
}

impl Variant {
    pub fn flags(self, configured_lower: PoolingMode) -> VariantFlags {
        let full = |lower_mode| VariantFlags {
            lower_mode,
            use_global: true,
            upper_residual: true,
        };
        match self {
            Variant::BuOnly => full(PoolingMode::Average),
            Variant::BuTd => full(PoolingMode::Attention),
            Variant::BuResTd => full(PoolingMode::ResidualAttention),
            Variant::Td => VariantFlags {
                lower_mode: configured_lower,
                use_global: false,
                upper_residual: false,
            },
        }
    }
}

fn default_true() -> bool {
    true
}

/// Shapes and switches of a decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub joint_dim: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub lower_mode: PoolingMode,
    pub use_global: bool,
    pub upper_residual: bool,
    #[serde(default = "default_true")]
    pub feed_h1_to_lstm2: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for the given feature width and vocabulary.
    pub fn new(feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            feature_dim,
            embed_dim: 32,
            hidden1: 64,
            hidden2: 64,
            joint_dim: 64,
            mlp_hidden: default_mlp_hidden(feature_dim),
            vocab_size,
            max_len: 19,
            lower_mode: PoolingMode::ResidualAttention,
            use_global: true,
            upper_residual: true,
            feed_h1_to_lstm2: true,
        }
    }

    pub fn with_flags(mut self, flags: VariantFlags) -> Self {
        self.lower_mode = flags.lower_mode;
        self.use_global = flags.use_global;
        self.upper_residual = flags.upper_residual;
        self
    }

    pub fn flags(&self) -> VariantFlags {
        VariantFlags {
            lower_mode: self.lower_mode,
            use_global: self.use_global,
            upper_residual: self.upper_residual,
        }
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("hidden1", self.hidden1),
            ("hidden2", self.hidden2),
            ("joint_dim", self.joint_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(DecoderError::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 5 {
            return Err(DecoderError::Config(format!(
                "vocab_size {} leaves no content words (need at least 5)",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn lstm1_input(&self) -> usize {
        self.hidden2 + 2 * self.feature_dim + self.embed_dim
    }

    fn lstm2_input(&self) -> usize {
        self.feature_dim + if self.feed_h1_to_lstm2 { self.hidden1 } else { 0 }
    }

    /// Checkpoint tensor names with their shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, e, v) = (self.feature_dim, self.embed_dim, self.vocab_size);
        let (h1, h2, a, m) = (self.hidden1, self.hidden2, self.joint_dim, self.mlp_hidden);
        vec![
            ("restd1.w1", vec![m, d]),
            ("restd1.b1", vec![m]),
            ("restd1.w2", vec![m]),
            ("embed", vec![e, v]),
            ("lstm1.w", vec![4 * h1, self.lstm1_input()]),
            ("lstm1.b", vec![4 * h1]),
            ("restd2.wv", vec![a, d]),
            ("restd2.wh", vec![a, h1]),
            ("restd2.wa", vec![a]),
            ("lstm2.w", vec![4 * h2, self.lstm2_input()]),
            ("lstm2.b", vec![4 * h2]),
            ("out.w", vec![v, h2]),
            ("out.b", vec![v]),
        ]
    }
}

/// Gate weights of one LSTM, gates stacked input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4H × in`
    pub w: Tensor,
    /// `4H`
    pub b: Tensor,
}

impl LstmParams {
    pub fn init<R: Rng>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w: glorot_matrix(rng, 4 * hidden, input),
            b,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: Tensor::zeros(&[4 * hidden, input]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.shape()[0] / 4
    }

    pub fn input(&self) -> usize {
        self.w.shape()[1]
    }
}

/// One LSTM update inside a graph; returns `(h', c')`.
pub fn lstm_cell_graph(
    g: &mut Graph,
    x: Var,
    h: Var,
    c: Var,
    w: Var,
    b: Var,
) -> Result<(Var, Var), TensorError> {
    let hidden = g.shape(h)[0];
    let xh = g.matvec(w, x)?;
    let pre = g.add(xh, b)?;
    let gate = |g: &mut Graph, k: usize| g.slice(pre, 0, k * hidden, (k + 1) * hidden);
    let i = gate(g, 0)?;
    let f = gate(g, 1)?;
    let cand = gate(g, 2)?;
    let o = gate(g, 3)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// `x` is the cell input; `h` and `c` must both have the cell's hidden width.
pub fn lstm_cell_step(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    p: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    if h.len() != p.hidden() || c.len() != p.hidden() {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell_step",
            lhs: vec![p.hidden()],
            rhs: vec![h.len(), c.len()],
        });
    }
    let mut g = Graph::new();
    let w = g.constant(p.w.clone());
    let b = g.constant(p.b.clone());
    let xv = g.constant(vec_tensor(x)?);
    let hv = g.constant(vec_tensor(h)?);
    let cv = g.constant(vec_tensor(c)?);
    let (h2, c2) = lstm_cell_graph(&mut g, xv, hv, cv, w, b)?;
    Ok((g.value(h2).data().to_vec(), g.value(c2).data().to_vec()))
}

fn vec_tensor(x: &[f64]) -> Result<Tensor, TensorError> {
    Tensor::new(vec![x.len()], x.to_vec())
}

/// All trainable tensors of a decoder plus its config.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub config: ModelConfig,
    pub restd1: Restd1Params,
    /// `E × V`
    pub embed: Tensor,
    pub lstm1: LstmParams,
    pub restd2: Restd2Params,
    pub lstm2: LstmParams,
    /// `V × H2`
    pub out_w: Tensor,
    /// `V`
    pub out_b: Tensor,
}

impl DecoderParams {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, DecoderError> {
        config.validate()?;
        let c = &config;
        Ok(Self {
            restd1: Restd1Params::init(rng, c.feature_dim, c.mlp_hidden, c.lower_mode),
            embed: glorot_matrix(rng, c.embed_dim, c.vocab_size),
            lstm1: LstmParams::init(rng, c.lstm1_input(), c.hidden1),
            restd2: Restd2Params::init(rng, c.feature_dim, c.hidden1, c.joint_dim, c.upper_residual),
            lstm2: LstmParams::init(rng, c.lstm2_input(), c.hidden2),
            out_w: glorot_matrix(rng, c.vocab_size, c.hidden2),
            out_b: Tensor::zeros(&[c.vocab_size]),
            config,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, DecoderError> {
        config.validate()?;
        let c = &config;
        Ok(Self {
            restd1: Restd1Params::zeros(c.feature_dim, c.mlp_hidden, c.lower_mode),
            embed: Tensor::zeros(&[c.embed_dim, c.vocab_size]),
            lstm1: LstmParams::zeros(c.lstm1_input(), c.hidden1),
            restd2: Restd2Params::zeros(c.feature_dim, c.hidden1, c.joint_dim, c.upper_residual),
            lstm2: LstmParams::zeros(c.lstm2_input(), c.hidden2),
            out_w: Tensor::zeros(&[c.vocab_size, c.hidden2]),
            out_b: Tensor::zeros(&[c.vocab_size]),
            config,
        })
    }

    /// Builds from tensors in [`ModelConfig::param_shapes`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, DecoderError> {
        config.validate()?;
        let shapes = config.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(DecoderError::Config(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(DecoderError::Config(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            restd1: Restd1Params {
                w1: next(),
                b1: next(),
                w2: next(),
                mode: config.lower_mode,
            },
            embed: next(),
            lstm1: LstmParams { w: next(), b: next() },
            restd2: Restd2Params {
                wv: next(),
                wh: next(),
                wa: next(),
                residual: config.upper_residual,
            },
            lstm2: LstmParams { w: next(), b: next() },
            out_w: next(),
            out_b: next(),
            config,
        })
    }

    /// Tensors in [`ModelConfig::param_shapes`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.restd1.w1,
            &self.restd1.b1,
            &self.restd1.w2,
            &self.embed,
            &self.lstm1.w,
            &self.lstm1.b,
            &self.restd2.wv,
            &self.restd2.wh,
            &self.restd2.wa,
            &self.lstm2.w,
            &self.lstm2.b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.restd1.w1,
            &mut self.restd1.b1,
            &mut self.restd1.w2,
            &mut self.embed,
            &mut self.lstm1.w,
            &mut self.lstm1.b,
            &mut self.restd2.wv,
            &mut self.restd2.wh,
            &mut self.restd2.wa,
            &mut self.lstm2.w,
            &mut self.lstm2.b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        self.config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.tensors())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundDecoder, DecoderError> {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundDecoder::from_vars(g, &self.config, &vars)
    }
}

/// Decoder parameters living in a graph.
#[derive(Debug, Clone)]
pub struct BoundDecoder {
    config: ModelConfig,
    params: Vec<Var>,
    restd1: Restd1Vars,
    embed: Var,
    lstm1: (Var, Var),
    restd2: Restd2Vars,
    lstm2: (Var, Var),
    out_w: Var,
    out_b: Var,
}

impl BoundDecoder {
    /// `vars` holds one graph node per tensor, in
    /// [`ModelConfig::param_shapes`] order.
    pub fn from_vars(g: &mut Graph, config: &ModelConfig, vars: &[Var]) -> Result<Self, DecoderError> {
        let shapes = config.param_shapes();
        if vars.len() != shapes.len() {
            return Err(DecoderError::Config(format!(
                "expected {} parameter nodes, got {}",
                shapes.len(),
                vars.len()
            )));
        }
        for ((name, shape), &v) in shapes.iter().zip(vars) {
            if g.shape(v) != shape.as_slice() {
                return Err(DecoderError::Config(format!(
                    "node for {name} has shape {:?}, expected {shape:?}",
                    g.shape(v)
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            params: vars.to_vec(),
            restd1: Restd1Vars::new(g, vars[0], vars[1], vars[2], config.lower_mode)?,
            embed: vars[3],
            lstm1: (vars[4], vars[5]),
            restd2: Restd2Vars {
                wv: vars[6],
                wh: vars[7],
                wa: vars[8],
                residual: config.upper_residual,
            },
            lstm2: (vars[9], vars[10]),
            out_w: vars[11],
            out_b: vars[12],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }
}

/// Per-image quantities computed once and shared by every decoding step.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    /// `N × D` pooled region vectors.
    pub regions: Var,
    /// Mean of `regions`.
    pub pooled: Var,
    /// Global vector, or zeros when the variant drops it.
    pub global: Var,
    keys: Var,
    /// Cell weights of each region's pooler.
    pub cell_weights: Vec<Var>,
}

impl EncodedImage {
    pub fn region_count(&self, g: &Graph) -> usize {
        g.shape(self.regions)[0]
    }
}

pub fn encode(g: &mut Graph, m: &BoundDecoder, feats: &FeatureRecord) -> Result<EncodedImage, DecoderError> {
    let d = m.config.feature_dim;
    if feats.dim() != d {
        return Err(DecoderError::FeatureWidth {
            expected: d,
            actual: feats.dim(),
        });
    }
    let mut rows = Vec::with_capacity(feats.region_count());
    let mut cell_weights = Vec::with_capacity(feats.region_count());
    for grid in feats.grids() {
        let cells = g.constant(grid.cells().clone());
        let (v, w) = restd1_pool_graph(g, cells, &m.restd1)?;
        rows.push(g.reshape(v, &[1, d])?);
        cell_weights.push(w);
    }
    let regions = g.concat(&rows, 0)?;
    let pooled = g.mean_along(regions, 0)?;
    let global = if m.config.use_global {
        g.constant(Tensor::vector(feats.global().to_vec()))
    } else {
        g.constant(Tensor::zeros(&[d]))
    };
    let keys = restd2_keys(g, regions, &m.restd2)?;
    Ok(EncodedImage {
        regions,
        pooled,
        global,
        keys,
        cell_weights,
    })
}

/// Recurrent state as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub h1: Var,
    pub c1: Var,
    pub h2: Var,
    pub c2: Var,
}

impl StateVars {
    pub fn zeros(g: &mut Graph, config: &ModelConfig) -> Self {
        let h1 = g.constant(Tensor::zeros(&[config.hidden1]));
        let h2 = g.constant(Tensor::zeros(&[config.hidden2]));
        Self {
            h1,
            c1: h1,
            h2,
            c2: h2,
        }
    }

    pub fn values(&self, g: &Graph, t: usize) -> DecoderState {
        let get = |v: Var| g.value(v).data().to_vec();
        DecoderState {
            h1: get(self.h1),
            c1: get(self.c1),
            h2: get(self.h2),
            c2: get(self.c2),
            t,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub state: StateVars,
    /// `[V]`, before softmax.
    pub logits: Var,
    /// Region weights `[N]`.
    pub attention: Var,
}

/// One decoder step inside a graph.
pub fn step_graph(
    g: &mut Graph,
    m: &BoundDecoder,
    enc: &EncodedImage,
    state: StateVars,
    prev_word: usize,
) -> Result<StepVars, DecoderError> {
    let v = m.config.vocab_size;
    if prev_word >= v {
        return Err(DecoderError::TokenRange {
            token: prev_word,
            vocab: v,
        });
    }
    let column = g.slice(m.embed, 1, prev_word, prev_word + 1)?;
    let word = g.reshape(column, &[m.config.embed_dim])?;
    let x1 = g.concat(&[state.h2, enc.global, enc.pooled, word], 0)?;
    let (h1, c1) = lstm_cell_graph(g, x1, state.h1, state.c1, m.lstm1.0, m.lstm1.1)?;
    let (context, attention) = restd2_attend_graph(g, enc.regions, enc.pooled, enc.keys, h1, &m.restd2)?;
    let x2 = if m.config.feed_h1_to_lstm2 {
        g.concat(&[context, h1], 0)?
    } else {
        context
    };
    let (h2, c2) = lstm_cell_graph(g, x2, state.h2, state.c2, m.lstm2.0, m.lstm2.1)?;
    let scores = g.matvec(m.out_w, h2)?;
    let logits = g.add(scores, m.out_b)?;
    Ok(StepVars {
        state: StateVars { h1, c1, h2, c2 },
        logits,
        attention,
    })
}

/// Teacher-forced unroll of one caption.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    /// Sum over steps of the target's negative log-probability.
    pub nll_sum: Var,
    pub logits: Vec<Var>,
    pub steps: usize,
    /// Steps whose argmax logit is the target.
    pub correct: usize,
}

pub fn teacher_forced_graph(
    g: &mut Graph,
    m: &BoundDecoder,
    enc: &EncodedImage,
    target: &Caption,
) -> Result<TeacherForced, DecoderError> {
    if target.is_empty() {
        return Err(DecoderError::EmptyCaption);
    }
    if target.len() > m.config.max_len {
        return Err(DecoderError::TooLong {
            len: target.len(),
            max: m.config.max_len,
        });
    }
    let mut inputs = Vec::with_capacity(target.len() + 1);
    inputs.push(BOS);
    inputs.extend_from_slice(target.content());
    let mut targets = target.content().to_vec();
    targets.push(EOS);

    let mut state = StateVars::zeros(g, &m.config);
    let mut terms = Vec::with_capacity(targets.len());
    let mut logits = Vec::with_capacity(targets.len());
    let mut correct = 0;
    for (&input, &tgt) in inputs.iter().zip(&targets) {
        if tgt >= m.config.vocab_size {
            return Err(DecoderError::TokenRange {
                token: tgt,
                vocab: m.config.vocab_size,
            });
        }
        let step = step_graph(g, m, enc, state, input)?;
        state = step.state;
        if argmax(g.value(step.logits).data()) == tgt {
            correct += 1;
        }
        let logp = g.log_softmax(step.logits, 0)?;
        terms.push(g.pick(logp, tgt)?);
        logits.push(step.logits);
    }
    let stacked = stack_scalars(g, &terms)?;
    let sum = g.sum(stacked);
    let nll_sum = g.scale(sum, -1.0);
    Ok(TeacherForced {
        nll_sum,
        logits,
        steps: targets.len(),
        correct,
    })
}

fn stack_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var, TensorError> {
    let rows = terms
        .iter()
        .map(|&t| g.reshape(t, &[1]))
        .collect::<Result<Vec<_>, _>>()?;
    g.concat(&rows, 0)
}

/// Index of the largest value; lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Recurrent state between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h1: Vec<f64>,
    pub c1: Vec<f64>,
    pub h2: Vec<f64>,
    pub c2: Vec<f64>,
    pub t: usize,
}

impl DecoderState {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            h1: vec![0.0; config.hidden1],
            c1: vec![0.0; config.hidden1],
            h2: vec![0.0; config.hidden2],
            c2: vec![0.0; config.hidden2],
            t: 0,
        }
    }

    fn bind(&self, g: &mut Graph, config: &ModelConfig) -> Result<StateVars, DecoderError> {
        let check = |v: &[f64], n: usize| {
            if v.len() != n {
                Err(DecoderError::Config(format!("state width {} != {n}", v.len())))
            } else {
                Ok(())
            }
        };
        check(&self.h1, config.hidden1)?;
        check(&self.c1, config.hidden1)?;
        check(&self.h2, config.hidden2)?;
        check(&self.c2, config.hidden2)?;
        Ok(StateVars {
            h1: g.constant(vec_tensor(&self.h1)?),
            c1: g.constant(vec_tensor(&self.c1)?),
            h2: g.constant(vec_tensor(&self.h2)?),
            c2: g.constant(vec_tensor(&self.c2)?),
        })
    }
}

/// One decoder step outside any training graph. Returns the next state, the
/// logits and the region weights.
pub fn restd_lstm_step(
    state: &DecoderState,
    prev_word: usize,
    feats: &FeatureRecord,
    p: &DecoderParams,
) -> Result<(DecoderState, Vec<f64>, Vec<f64>), DecoderError> {
    let mut g = Graph::new();
    let m = p.bind(&mut g, false)?;
    let enc = encode(&mut g, &m, feats)?;
    let s = state.bind(&mut g, &p.config)?;
    let out = step_graph(&mut g, &m, &enc, s, prev_word)?;
    Ok((
        out.state.values(&g, state.t + 1),
        g.value(out.logits).data().to_vec(),
        g.value(out.attention).data().to_vec(),
    ))
}

/// Mean per-step cross-entropy of `target` and the logits of every step.
pub fn forward_teacher_forced(
    feats: &FeatureRecord,
    target: &Caption,
    p: &DecoderParams,
) -> Result<(f64, Vec<Vec<f64>>), DecoderError> {
    let mut g = Graph::new();
    let m = p.bind(&mut g, false)?;
    let enc = encode(&mut g, &m, feats)?;
    let tf = teacher_forced_graph(&mut g, &m, &enc, target)?;
    let loss = g.value(tf.nll_sum).item() / tf.steps as f64;
    let logits = tf.logits.iter().map(|&l| g.value(l).data().to_vec()).collect();
    Ok((loss, logits))
}
