//! Finite-difference checks of a full decoder step, one parameter group at a
//! time.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::attention::{PoolingMode, RegionGrid};
use crate::autodiff::{GradCheck, GradCheckError, Graph, Tensor, TensorError, Var};
use crate::decoder::{encode, teacher_forced_graph, BoundDecoder, DecoderError, DecoderParams, ModelConfig};
use crate::features::FeatureRecord;
use crate::vocab::Caption;

/// A parameter group of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    RegionPooler,
    RegionAttention,
    ContextLstm,
    PredictorLstm,
    Embedding,
    Output,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::RegionPooler,
        Block::RegionAttention,
        Block::ContextLstm,
        Block::PredictorLstm,
        Block::Embedding,
        Block::Output,
    ];

    /// Positions in [`ModelConfig::param_shapes`].
    pub fn tensor_indices(self) -> &'static [usize] {
        match self {
            Block::RegionPooler => &[0, 1, 2],
            Block::Embedding => &[3],
            Block::ContextLstm => &[4, 5],
            Block::RegionAttention => &[6, 7, 8],
            Block::PredictorLstm => &[9, 10],
            Block::Output => &[11, 12],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Block::RegionPooler => "restd1",
            Block::RegionAttention => "restd2",
            Block::ContextLstm => "lstm1",
            Block::PredictorLstm => "lstm2",
            Block::Embedding => "embedding",
            Block::Output => "output",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Small model used for the checks.
pub fn check_config() -> ModelConfig {
    let mut c = ModelConfig::new(6, 9);
    c.embed_dim = 5;
    c.hidden1 = 6;
    c.hidden2 = 7;
    c.joint_dim = 5;
    c.mlp_hidden = 8;
    c.max_len = 6;
    c.lower_mode = PoolingMode::ResidualAttention;
    c
}

fn random_record<R: Rng>(rng: &mut R, dim: usize, regions: usize) -> FeatureRecord {
    let grids = (0..regions)
        .map(|_| {
            let data = (0..2 * 2 * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            RegionGrid::new(2, 2, dim, data).expect("sized")
        })
        .collect();
    let global = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureRecord::new("check", global, grids).expect("finite")
}

fn tensor_error(e: DecoderError) -> TensorError {
    match e {
        DecoderError::Tensor(t) => t,
        other => panic!("gradient check model is misconfigured: {other}"),
    }
}

pub const STEP: f64 = 1e-5;

/// Maximum relative error of `block`'s gradient at a random point drawn from
/// `seed`.
///
/// The objective unrolls a teacher-forced caption of `min(max_len, 4)`
/// tokens and sums a random projection of each step's softmax output.
/// Points whose pooler ReLUs sit on a kink are redrawn.
pub fn check_block(config: &ModelConfig, block: Block, seed: u64) -> Result<f64, GradCheckError> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..50 {
        let mut params = DecoderParams::init(config.clone(), &mut rng).map_err(|e| GradCheckError::Tensor(tensor_error(e)))?;
        for t in params.tensors_mut() {
            if t.rank() == 1 {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.5..0.5));
            }
        }
        let feats = random_record(&mut rng, config.feature_dim, 3);
        let len = config.max_len.min(4);
        let content = (0..len)
            .map(|_| rng.random_range(3..config.vocab_size))
            .collect();
        let caption = Caption::new(content, config.max_len).expect("valid caption");

        let all: Vec<_> = params.tensors().into_iter().cloned().collect();
        let group = block.tensor_indices();
        let checked: Vec<_> = group.iter().map(|&i| all[i].clone()).collect();
        let cfg = config.clone();
        let proj: Vec<Tensor> = (0..=len)
            .map(|_| Tensor::vector((0..config.vocab_size).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let f = |g: &mut Graph, vars: &[Var]| -> Result<Var, TensorError> {
            let mut full = Vec::with_capacity(all.len());
            for (i, t) in all.iter().enumerate() {
                match group.iter().position(|&k| k == i) {
                    Some(k) => full.push(vars[k]),
                    None => full.push(g.constant(t.clone())),
                }
            }
            let m = BoundDecoder::from_vars(g, &cfg, &full).map_err(tensor_error)?;
            let enc = encode(g, &m, &feats).map_err(tensor_error)?;
            let tf = teacher_forced_graph(g, &m, &enc, &caption).map_err(tensor_error)?;
            let mut total = None;
            for (&logits, r) in tf.logits.iter().zip(&proj) {
                let p = g.softmax(logits, 0)?;
                let r = g.constant(r.clone());
                let y = g.mul(p, r)?;
                let term = g.sum(y);
                total = Some(match total {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            Ok(total.expect("at least one step"))
        };
        match GradCheck::new(STEP, seed).run(f, &checked) {
            Ok(report) => return Ok(report.max_relative_error),
            Err(e @ GradCheckError::NearKink { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("loop ran"))
}
