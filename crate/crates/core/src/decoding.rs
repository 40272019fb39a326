//! Greedy and beam-search caption generation.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::decoder::{
    argmax, encode, step_graph, BoundDecoder, DecoderError, DecoderParams, DecoderState, EncodedImage,
    StateVars,
};
use crate::features::FeatureRecord;
use crate::threads;
use crate::vocab::{Caption, BOS, EOS, PAD, UNK};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam width must be at least 1")]
    Width,
    #[error("maximum caption length must be at least 1")]
    MaxLen,
    #[error("unknown length normalization {0:?}")]
    LengthNorm(String),
    #[error(transparent)]
    Model(#[from] DecoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    #[default]
    Off,
    ByLength,
}

impl fmt::Display for LengthNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LengthNorm::Off => "off",
            LengthNorm::ByLength => "by_length",
        })
    }
}

impl FromStr for LengthNorm {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(LengthNorm::Off),
            "by_length" => Ok(LengthNorm::ByLength),
            _ => Err(DecodeError::LengthNorm(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamOptions {
    pub width: usize,
    pub max_len: usize,
    pub length_norm: LengthNorm,
}

impl BeamOptions {
    pub fn new(width: usize, max_len: usize) -> Self {
        Self {
            width,
            max_len,
            length_norm: LengthNorm::Off,
        }
    }
}

pub const DEFAULT_BEAM_WIDTH: usize = 3;

/// True for tokens that may never be generated.
pub fn is_masked(token: usize) -> bool {
    token == PAD || token == BOS || token == UNK
}

/// Log-softmax over the generable tokens; masked entries are `-inf`.
pub fn masked_log_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| !is_masked(*i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .enumerate()
            .filter(|(i, _)| !is_masked(*i))
            .map(|(_, &x)| (x - max).exp())
            .sum::<f64>()
            .ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if is_masked(i) { f64::NEG_INFINITY } else { x - lse })
        .collect()
}

/// A partial or finished caption. `tokens` holds generated ids, including
/// the final `<eos>` when one was emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: DecoderState,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of scored tokens.
    pub fn steps(&self) -> usize {
        self.tokens.len()
    }

    pub fn score(&self, norm: LengthNorm) -> f64 {
        match norm {
            LengthNorm::Off => self.log_prob,
            LengthNorm::ByLength => self.log_prob / self.steps().max(1) as f64,
        }
    }

    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    pub fn caption(&self) -> Caption {
        Caption::generated(self.content().to_vec()).expect("masked decoding never emits markers")
    }
}

/// Descending score, then ascending token sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Parameters and encoded image bound into one graph; each decoding step
/// appends nodes to it.
struct Session {
    g: Graph,
    m: BoundDecoder,
    enc: EncodedImage,
}

impl Session {
    fn new(feats: &FeatureRecord, params: &DecoderParams) -> Result<Self, DecoderError> {
        let mut g = Graph::new();
        let m = params.bind(&mut g, false)?;
        let enc = encode(&mut g, &m, feats)?;
        Ok(Self { g, m, enc })
    }

    fn start(&mut self) -> StateVars {
        StateVars::zeros(&mut self.g, self.m.config())
    }

    fn step(&mut self, state: StateVars, prev: usize) -> Result<(StateVars, Vec<f64>), DecoderError> {
        let out = step_graph(&mut self.g, &self.m, &self.enc, state, prev)?;
        Ok((out.state, masked_log_probs(self.g.value(out.logits).data())))
    }
}

/// Argmax decoding; lowest index wins exact ties. Stops at `<eos>` or after
/// `max_len` words.
pub fn greedy_decode(feats: &FeatureRecord, params: &DecoderParams, max_len: usize) -> Result<Caption, DecodeError> {
    if max_len == 0 {
        return Err(DecodeError::MaxLen);
    }
    let mut s = Session::new(feats, params)?;
    let mut state = s.start();
    let mut prev = BOS;
    let mut content = Vec::new();
    while content.len() < max_len {
        let (next, lp) = s.step(state, prev)?;
        let tok = argmax(&lp);
        if tok == EOS {
            break;
        }
        content.push(tok);
        state = next;
        prev = tok;
    }
    Ok(Caption::generated(content).expect("masked decoding never emits markers"))
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
    state: StateVars,
}

/// Beam search. Every step ranks all extensions of the live beam and keeps
/// the best `width`; extensions ending in `<eos>` or reaching `max_len`
/// words retire. Returns retired hypotheses ranked by score, ties broken by
/// token sequence.
pub fn beam_decode(
    feats: &FeatureRecord,
    params: &DecoderParams,
    opts: &BeamOptions,
) -> Result<Vec<Hypothesis>, DecodeError> {
    if opts.width == 0 {
        return Err(DecodeError::Width);
    }
    if opts.max_len == 0 {
        return Err(DecodeError::MaxLen);
    }
    let mut s = Session::new(feats, params)?;
    let start = s.start();
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: start,
    }];
    let mut done: Vec<(Vec<usize>, f64, StateVars)> = Vec::new();
    while !live.is_empty() {
        let mut cands: Vec<(Vec<usize>, f64, StateVars)> = Vec::new();
        for h in &live {
            let prev = h.tokens.last().copied().unwrap_or(BOS);
            let (next, lp) = s.step(h.state, prev)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cands.push((tokens, h.log_prob + l, next));
            }
        }
        cands.sort_by(|a, b| rank((a.1, &a.0), (b.1, &b.0)));
        cands.truncate(opts.width);
        live.clear();
        for (tokens, log_prob, state) in cands {
            if tokens.last() == Some(&EOS) || tokens.len() >= opts.max_len {
                done.push((tokens, log_prob, state));
            } else {
                live.push(Live {
                    tokens,
                    log_prob,
                    state,
                });
            }
        }
    }
    let mut out: Vec<Hypothesis> = done
        .into_iter()
        .map(|(tokens, log_prob, state)| Hypothesis {
            state: state.values(&s.g, tokens.len()),
            tokens,
            log_prob,
            finished: true,
        })
        .collect();
    out.sort_by(|a, b| rank((a.score(opts.length_norm), &a.tokens), (b.score(opts.length_norm), &b.tokens)));
    Ok(out)
}

/// Top-ranked caption of [`beam_decode`].
pub fn decode_best(feats: &FeatureRecord, params: &DecoderParams, opts: &BeamOptions) -> Result<Caption, DecodeError> {
    let ranked = beam_decode(feats, params, opts)?;
    Ok(ranked.first().expect("beam search always retires a hypothesis").caption())
}

/// Best captions for many images, in input order.
pub fn decode_all(
    images: &[&FeatureRecord],
    params: &DecoderParams,
    opts: &BeamOptions,
) -> Result<Vec<Caption>, DecodeError> {
    threads::install(|| images.par_iter().map(|f| decode_best(f, params, opts)).collect())
}

/// Scores every generable sequence of at most `max_len` words and returns
/// the best under the same ranking as [`beam_decode`]. Cost grows as
/// `(V-3)^max_len`; meant for tiny vocabularies.
pub fn exhaustive_decode(
    feats: &FeatureRecord,
    params: &DecoderParams,
    max_len: usize,
    norm: LengthNorm,
) -> Result<(Vec<usize>, f64), DecodeError> {
    if max_len == 0 {
        return Err(DecodeError::MaxLen);
    }
    fn walk(
        feats: &FeatureRecord,
        params: &DecoderParams,
        state: &DecoderState,
        prefix: &mut Vec<usize>,
        log_prob: f64,
        max_len: usize,
        norm: LengthNorm,
        best: &mut Option<(Vec<usize>, f64)>,
    ) -> Result<(), DecodeError> {
        let prev = prefix.last().copied().unwrap_or(BOS);
        let (next, logits, _) = crate::decoder::restd_lstm_step(state, prev, feats, params)?;
        let lp = masked_log_probs(&logits);
        for (tok, &l) in lp.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            prefix.push(tok);
            let total = log_prob + l;
            if tok == EOS || prefix.len() >= max_len {
                let score = match norm {
                    LengthNorm::Off => total,
                    LengthNorm::ByLength => total / prefix.len() as f64,
                };
                let better = match best {
                    None => true,
                    Some((t, s)) => rank((score, prefix), (*s, t)) == Ordering::Less,
                };
                if better {
                    *best = Some((prefix.clone(), score));
                }
            } else {
                walk(feats, params, &next, prefix, total, max_len, norm, best)?;
            }
            prefix.pop();
        }
        Ok(())
    }
    let mut best = None;
    let start = DecoderState::zeros(&params.config);
    walk(feats, params, &start, &mut Vec::new(), 0.0, max_len, norm, &mut best)?;
    Ok(best.expect("at least <eos> is generable"))
}
