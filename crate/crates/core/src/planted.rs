//! Planted-signal pooling benchmark: classify a 7×7 grid by the class
//! prototype hidden in one random cell, through a region pooler and a
//! linear classifier trained end to end.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{PoolingMode, Restd1Params};
use crate::autodiff::{Graph, Tensor, TensorError};
use crate::decoder::argmax;
use crate::init::glorot_matrix;
use crate::training::{Optimizer, OptimizerKind, TrainError};

pub const CLASSES: usize = 7;
pub const GRID: usize = 7;
pub const CELLS: usize = GRID * GRID;

#[derive(Debug, Error)]
pub enum PlantedError {
    #[error("need at least 100 trials, got {0}")]
    Trials(usize),
    #[error("degenerate signal-to-noise setting: amplitude {amplitude}, sigma {sigma}")]
    Snr { amplitude: f64, sigma: f64 },
    #[error("feature width {0} is below the class count")]
    Width(usize),
    #[error("cell {0} outside the grid")]
    Cell(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub dim: usize,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mlp_hidden: usize,
    pub seed: u64,
    /// Puts every signal in this cell instead of a random one.
    pub fixed_cell: Option<usize>,
    /// Trains and tests against permuted labels.
    pub shuffle_labels: bool,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            amplitude: 1.0,
            noise_sigma: 0.1,
            train_size: 700,
            epochs: 15,
            batch_size: 16,
            learning_rate: 0.01,
            mlp_hidden: 16,
            seed: 0,
            fixed_cell: None,
            shuffle_labels: false,
        }
    }
}

impl PlantedConfig {
    fn validate(&self) -> Result<(), PlantedError> {
        if self.dim < CLASSES {
            return Err(PlantedError::Width(self.dim));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite() && self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PlantedError::Snr {
                amplitude: self.amplitude,
                sigma: self.noise_sigma,
            });
        }
        match self.fixed_cell {
            Some(c) if c >= CELLS => Err(PlantedError::Cell(c)),
            _ => Ok(()),
        }
    }
}

/// `CELLS × dim` grids and their labels. Noise is drawn from its own
/// stream, so moving the signal cell leaves the noise unchanged.
pub fn planted_examples(cfg: &PlantedConfig, count: usize, stream: u64) -> Vec<(Tensor, usize)> {
    let mut noise_rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut label_rng = Xoshiro256PlusPlus::seed_from_u64(!cfg.seed ^ stream);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    (0..count)
        .map(|_| {
            let mut data: Vec<f64> = (0..CELLS * cfg.dim).map(|_| noise.sample(&mut noise_rng)).collect();
            let label = label_rng.random_range(0..CLASSES);
            let cell = label_rng.random_range(0..CELLS);
            let cell = cfg.fixed_cell.unwrap_or(cell);
            data[cell * cfg.dim + label] += cfg.amplitude;
            (Tensor::new(vec![CELLS, cfg.dim], data).expect("sized"), label)
        })
        .collect()
}

struct Model {
    pooler: Restd1Params,
    /// `CLASSES × dim`, no bias: classes are balanced.
    w: Tensor,
}

impl Model {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.pooler.w1, &mut self.pooler.b1, &mut self.pooler.w2, &mut self.w]
    }

    /// Loss value, gradients and predicted class for one grid.
    fn run(&self, grid: &Tensor, label: usize, grads: bool) -> Result<(f64, Vec<Vec<f64>>, usize), TensorError> {
        let mut g = Graph::new();
        let pool = self.pooler.bind(&mut g, true)?;
        let w = g.param(self.w.clone());
        let cells = g.constant(grid.clone());
        let (pooled, _) = crate::attention::restd1_pool_graph(&mut g, cells, &pool)?;
        let logits = g.matvec(w, pooled)?;
        let logp = g.log_softmax(logits, 0)?;
        let picked = g.pick(logp, label)?;
        let loss = g.scale(picked, -1.0);
        let pred = argmax(g.value(logits).data());
        let value = g.value(loss).item();
        if !grads {
            return Ok((value, Vec::new(), pred));
        }
        g.backward(loss)?;
        let out = [pool.w1, pool.b1, pool.w2, w].iter().map(|&v| g.grad(v).data().to_vec()).collect();
        Ok((value, out, pred))
    }
}

/// Trains the pooler and classifier, then returns accuracy on `trials`
/// fresh grids.
pub fn planted_signal_benchmark(mode: PoolingMode, trials: usize, cfg: &PlantedConfig) -> Result<f64, PlantedError> {
    if trials < 100 {
        return Err(PlantedError::Trials(trials));
    }
    cfg.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut train = planted_examples(cfg, cfg.train_size, 1);
    let mut test = planted_examples(cfg, trials, 2);
    if cfg.shuffle_labels {
        let mut labels: Vec<usize> = train.iter().map(|e| e.1).collect();
        labels.shuffle(&mut rng);
        train.iter_mut().zip(labels).for_each(|(e, l)| e.1 = l);
        let mut labels: Vec<usize> = test.iter().map(|e| e.1).collect();
        labels.shuffle(&mut rng);
        test.iter_mut().zip(labels).for_each(|(e, l)| e.1 = l);
    }
    let mut model = Model {
        pooler: Restd1Params::init(&mut rng, cfg.dim, cfg.mlp_hidden, mode),
        w: glorot_matrix(&mut rng, CLASSES, cfg.dim),
    };
    let sizes: Vec<usize> = model.tensors_mut().iter().map(|t| t.numel()).collect();
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, &sizes);
    let names = ["pooler.w1", "pooler.b1", "pooler.w2", "classifier.w"];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut sum: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &i in batch {
                let (_, grads, _) = model.run(&train[i].0, train[i].1, true)?;
                for (s, g) in sum.iter_mut().zip(grads) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            let n = batch.len() as f64;
            sum.iter_mut().flatten().for_each(|v| *v /= n);
            opt.step(&mut model.tensors_mut(), &sum, &names)?;
        }
    }
    let mut correct = 0;
    for (grid, label) in &test {
        let (_, _, pred) = model.run(grid, *label, false)?;
        correct += usize::from(pred == *label);
    }
    Ok(correct as f64 / trials as f64)
}

/// Binary search over the noise level, on a log scale, for the sigma at
/// which average pooling scores `target`. Returns the sigma and the
/// accuracy measured there.
pub fn calibrate_sigma(cfg: &PlantedConfig, trials: usize, target: f64, iterations: usize) -> Result<(f64, f64), PlantedError> {
    let (mut lo, mut hi) = (1e-3f64.ln(), 10f64.ln());
    let mut best = (f64::NAN, f64::NAN);
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        let sigma = mid.exp();
        let acc = planted_signal_benchmark(
            PoolingMode::Average,
            trials,
            &PlantedConfig {
                noise_sigma: sigma,
                ..cfg.clone()
            },
        )?;
        if best.0.is_nan() || (acc - target).abs() < (best.1 - target).abs() {
            best = (sigma, acc);
        }
        if acc > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}
