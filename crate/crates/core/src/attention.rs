//! Residual top-down attention blocks.
//!
//! * The lower-level pooler fuses one RoI grid (`M = n1·n2` cells of width
//!   `D`) into a single region vector. Each cell is scored by a two-layer
//!   MLP, the scores are softmax-normalised, and the attended vector is the
//!   weighted sum of cells. In residual mode the plain cell average is added
//!   on top so a poorly learned distribution cannot discard the region.
//! * The upper-level block attends over the `N` pooled regions with an
//!   additive (tanh) score conditioned on the decoder's first LSTM, again
//!   optionally adding the region average.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::init::{glorot_matrix, glorot_vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("unknown pooling mode {0:?} (expected average, attention or residual_attention)")]
    UnknownMode(String),
    #[error("region grid {n1}x{n2} needs {expected} cells, got {actual}")]
    GridSize {
        n1: usize,
        n2: usize,
        expected: usize,
        actual: usize,
    },
    #[error("width mismatch: expected {expected}, got {actual}")]
    Width { expected: usize, actual: usize },
    #[error("a region set needs at least one region")]
    NoRegions,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the lower-level block turns a cell grid into a region vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Average,
    Attention,
    ResidualAttention,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 3] = [
        PoolingMode::Average,
        PoolingMode::Attention,
        PoolingMode::ResidualAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingMode::Average => "average",
            PoolingMode::Attention => "attention",
            PoolingMode::ResidualAttention => "residual_attention",
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingMode {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PoolingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| AttentionError::UnknownMode(s.to_string()))
    }
}

/// One RoI feature map reshaped to `(n1·n2) × D`, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    n1: usize,
    n2: usize,
    cells: Tensor,
}

impl RegionGrid {
    /// `data` is laid out row, column, channel.
    pub fn new(n1: usize, n2: usize, dim: usize, data: Vec<f64>) -> Result<Self, AttentionError> {
        let expected = n1 * n2 * dim;
        if data.len() != expected || expected == 0 {
            return Err(AttentionError::GridSize {
                n1,
                n2,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            n1,
            n2,
            cells: Tensor::matrix(n1 * n2, dim, data)?,
        })
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn cell_count(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn dim(&self) -> usize {
        self.cells.shape()[1]
    }

    /// The `M × D` cell matrix.
    pub fn cells(&self) -> &Tensor {
        &self.cells
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        self.cells.row(index)
    }

    pub fn data(&self) -> &[f64] {
        self.cells.data()
    }
}

/// Pooled region vectors `X_rb` with their running average.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    regions: Tensor,
    pooled: Vec<f64>,
}

impl RegionSet {
    pub fn new(regions: Vec<Vec<f64>>) -> Result<Self, AttentionError> {
        let dim = regions.first().ok_or(AttentionError::NoRegions)?.len();
        if let Some(bad) = regions.iter().find(|r| r.len() != dim) {
            return Err(AttentionError::Width {
                expected: dim,
                actual: bad.len(),
            });
        }
        let n = regions.len();
        let flat = regions.into_iter().flatten().collect();
        let regions = Tensor::matrix(n, dim, flat)?;
        let pooled = column_mean(&regions);
        Ok(Self { regions, pooled })
    }

    pub fn len(&self) -> usize {
        self.regions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.regions.shape()[1]
    }

    pub fn region(&self, i: usize) -> &[f64] {
        self.regions.row(i)
    }

    pub fn regions(&self) -> &Tensor {
        &self.regions
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    pub fn set_region(&mut self, i: usize, value: Vec<f64>) -> Result<(), AttentionError> {
        if value.len() != self.dim() {
            return Err(AttentionError::Width {
                expected: self.dim(),
                actual: value.len(),
            });
        }
        let d = self.dim();
        self.regions.data_mut()[i * d..(i + 1) * d].copy_from_slice(&value);
        self.pooled = column_mean(&self.regions);
        Ok(())
    }
}

fn column_mean(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= rows as f64);
    out
}

/// Default hidden width of the lower-level scoring MLP.
pub fn default_mlp_hidden(dim: usize) -> usize {
    (dim / 4).max(8)
}

/// Lower-level pooler parameters.
///
/// The scoring MLP is `w2ᵀ · relu(W1 · cell + b1)`. A second-layer bias
/// would shift every cell's logit equally, and softmax is invariant to that
/// shift, so the block carries none.
#[derive(Debug, Clone, PartialEq)]
pub struct Restd1Params {
    /// `H × D`
    pub w1: Tensor,
    /// `H`
    pub b1: Tensor,
    /// `H`
    pub w2: Tensor,
    pub mode: PoolingMode,
}

impl Restd1Params {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, hidden: usize, mode: PoolingMode) -> Self {
        Self {
            w1: glorot_matrix(rng, hidden, dim),
            b1: Tensor::zeros(&[hidden]),
            w2: glorot_vector(rng, hidden),
            mode,
        }
    }

    pub fn zeros(dim: usize, hidden: usize, mode: PoolingMode) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, dim]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden]),
            mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Restd1Vars, TensorError> {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let w1 = leaf(g, &self.w1);
        let b1 = leaf(g, &self.b1);
        let w2 = leaf(g, &self.w2);
        Restd1Vars::new(g, w1, b1, w2, self.mode)
    }
}

/// Lower-level pooler parameters living in a graph.
#[derive(Debug, Clone, Copy)]
pub struct Restd1Vars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    w1t: Var,
    pub mode: PoolingMode,
}

impl Restd1Vars {
    pub fn new(
        g: &mut Graph,
        w1: Var,
        b1: Var,
        w2: Var,
        mode: PoolingMode,
    ) -> Result<Self, TensorError> {
        let w1t = g.transpose(w1)?;
        Ok(Self {
            w1,
            b1,
            w2,
            w1t,
            mode,
        })
    }
}

/// Pools a `M × D` cell matrix; returns the region vector `[D]` and the cell
/// weights `[M]`.
pub fn restd1_pool_graph(
    g: &mut Graph,
    cells: Var,
    p: &Restd1Vars,
) -> Result<(Var, Var), TensorError> {
    let m = g.shape(cells)[0];
    let average = g.mean_along(cells, 0)?;
    if p.mode == PoolingMode::Average {
        let uniform = g.constant(Tensor::full(&[m], 1.0 / m as f64));
        return Ok((average, uniform));
    }
    let hidden = g.matmul(cells, p.w1t)?;
    let hidden = g.add_bias(hidden, p.b1)?;
    let hidden = g.relu(hidden);
    let logits = g.matvec(hidden, p.w2)?;
    let alpha = g.softmax(logits, 0)?;
    let attended = g.vecmat(alpha, cells)?;
    let out = match p.mode {
        PoolingMode::ResidualAttention => g.add(attended, average)?,
        _ => attended,
    };
    Ok((out, alpha))
}

/// Pools one grid outside of any training graph.
pub fn restd1_pool(
    grid: &RegionGrid,
    p: &Restd1Params,
) -> Result<(Vec<f64>, Vec<f64>), AttentionError> {
    if grid.dim() != p.dim() {
        return Err(AttentionError::Width {
            expected: p.dim(),
            actual: grid.dim(),
        });
    }
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false)?;
    let cells = g.constant(grid.cells().clone());
    let (out, w) = restd1_pool_graph(&mut g, cells, &vars)?;
    Ok((g.value(out).data().to_vec(), g.value(w).data().to_vec()))
}

/// Plain cell average of a grid.
pub fn average_pool(grid: &RegionGrid) -> Vec<f64> {
    column_mean(grid.cells())
}

/// Upper-level attention parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Restd2Params {
    /// `A × D`
    pub wv: Tensor,
    /// `A × H1`
    pub wh: Tensor,
    /// `A`
    pub wa: Tensor,
    pub residual: bool,
}

impl Restd2Params {
    pub fn init<R: Rng>(
        rng: &mut R,
        dim: usize,
        query: usize,
        joint: usize,
        residual: bool,
    ) -> Self {
        Self {
            wv: glorot_matrix(rng, joint, dim),
            wh: glorot_matrix(rng, joint, query),
            wa: glorot_vector(rng, joint),
            residual,
        }
    }

    pub fn zeros(dim: usize, query: usize, joint: usize, residual: bool) -> Self {
        Self {
            wv: Tensor::zeros(&[joint, dim]),
            wh: Tensor::zeros(&[joint, query]),
            wa: Tensor::zeros(&[joint]),
            residual,
        }
    }

    pub fn dim(&self) -> usize {
        self.wv.shape()[1]
    }

    pub fn query_dim(&self) -> usize {
        self.wh.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Restd2Vars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Restd2Vars {
            wv: leaf(&self.wv),
            wh: leaf(&self.wh),
            wa: leaf(&self.wa),
            residual: self.residual,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Restd2Vars {
    pub wv: Var,
    pub wh: Var,
    pub wa: Var,
    pub residual: bool,
}

/// Query-independent half of the upper-level score, `regions · Wvᵀ`
/// (`N × A`). Computed once per image and reused at every decoding step.
pub fn restd2_keys(g: &mut Graph, regions: Var, p: &Restd2Vars) -> Result<Var, TensorError> {
    let wvt = g.transpose(p.wv)?;
    g.matmul(regions, wvt)
}

/// Attends over `regions` (`N × D`) given the decoder query `[H1]`.
/// Returns the context vector `[D]` and the region weights `[N]`.
pub fn restd2_attend_graph(
    g: &mut Graph,
    regions: Var,
    pooled: Var,
    keys: Var,
    query: Var,
    p: &Restd2Vars,
) -> Result<(Var, Var), TensorError> {
    let q = g.matvec(p.wh, query)?;
    let joint = g.add_bias(keys, q)?;
    let joint = g.tanh(joint);
    let scores = g.matvec(joint, p.wa)?;
    let alpha = g.softmax(scores, 0)?;
    let attended = g.vecmat(alpha, regions)?;
    let out = if p.residual {
        g.add(attended, pooled)?
    } else {
        attended
    };
    Ok((out, alpha))
}

/// Upper-level attention outside of any training graph.
pub fn restd2_attend(
    regions: &RegionSet,
    query: &[f64],
    p: &Restd2Params,
) -> Result<(Vec<f64>, Vec<f64>), AttentionError> {
    if regions.dim() != p.dim() {
        return Err(AttentionError::Width {
            expected: p.dim(),
            actual: regions.dim(),
        });
    }
    if query.len() != p.query_dim() {
        return Err(AttentionError::Width {
            expected: p.query_dim(),
            actual: query.len(),
        });
    }
    let mut g = Graph::new();
    let vars = p.bind(&mut g, false);
    let r = g.constant(regions.regions().clone());
    let pooled = g.constant(Tensor::vector(regions.pooled().to_vec()));
    let q = g.constant(Tensor::vector(query.to_vec()));
    let keys = restd2_keys(&mut g, r, &vars)?;
    let (out, w) = restd2_attend_graph(&mut g, r, pooled, keys, q, &vars)?;
    Ok((g.value(out).data().to_vec(), g.value(w).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    use super::*;
    use crate::autodiff::{GradCheck, GradCheckError};

    fn rng(seed: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(seed)
    }

    fn random_grid(rng: &mut Xoshiro256PlusPlus, n1: usize, n2: usize, d: usize) -> RegionGrid {
        let data = (0..n1 * n2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        RegionGrid::new(n1, n2, d, data).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PoolingMode::ALL {
            assert_eq!(m.as_str().parse::<PoolingMode>().unwrap(), m);
        }
        assert!(matches!(
            "max".parse::<PoolingMode>(),
            Err(AttentionError::UnknownMode(_))
        ));
    }

    #[test]
    fn grid_rejects_wrong_size() {
        assert!(matches!(
            RegionGrid::new(2, 2, 3, vec![0.0; 11]),
            Err(AttentionError::GridSize { expected: 12, .. })
        ));
    }

    #[test]
    fn identical_cells_pool_to_the_cell() {
        let v = [0.5, -1.0, 2.0];
        let grid = RegionGrid::new(2, 2, 3, v.repeat(4)).unwrap();
        let mut p = Restd1Params::init(&mut rng(1), 3, 8, PoolingMode::ResidualAttention);
        let (out, _) = restd1_pool(&grid, &p).unwrap();
        assert_close(&out, &[1.0, -2.0, 4.0], 1e-12);
        p.mode = PoolingMode::Attention;
        let (out, _) = restd1_pool(&grid, &p).unwrap();
        assert_close(&out, &v, 1e-12);
    }

    #[test]
    fn zero_mlp_gives_uniform_weights() {
        let grid = RegionGrid::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = Restd1Params::zeros(2, 8, PoolingMode::ResidualAttention);
        let (out, w) = restd1_pool(&grid, &p).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        assert_eq!(out, vec![1.0, 1.0]);
    }

    #[test]
    fn average_mode_reports_uniform_weights() {
        let grid = random_grid(&mut rng(2), 2, 3, 4);
        let p = Restd1Params::init(&mut rng(3), 4, 8, PoolingMode::Average);
        let (out, w) = restd1_pool(&grid, &p).unwrap();
        assert_close(&out, &average_pool(&grid), 1e-15);
        assert_close(&w, &[1.0 / 6.0; 6], 1e-15);
    }

    #[test]
    fn average_pool_examples() {
        let grid = RegionGrid::new(1, 2, 1, vec![2.0, 4.0]).unwrap();
        assert_eq!(average_pool(&grid), vec![3.0]);
        let single = RegionGrid::new(1, 1, 2, vec![7.0, -1.0]).unwrap();
        assert_eq!(average_pool(&single), vec![7.0, -1.0]);
        let swapped = RegionGrid::new(1, 2, 1, vec![4.0, 2.0]).unwrap();
        assert_eq!(average_pool(&swapped), vec![3.0]);
    }

    #[test]
    fn restd1_width_mismatch() {
        let grid = random_grid(&mut rng(4), 2, 2, 5);
        let p = Restd1Params::init(&mut rng(5), 4, 8, PoolingMode::Attention);
        assert!(matches!(
            restd1_pool(&grid, &p),
            Err(AttentionError::Width { expected: 4, actual: 5 })
        ));
    }

    #[test]
    fn residual_minus_attention_is_the_average() {
        let grid = random_grid(&mut rng(6), 7, 7, 16);
        let mut p = Restd1Params::init(&mut rng(7), 16, 8, PoolingMode::Attention);
        let (att, w_att) = restd1_pool(&grid, &p).unwrap();
        p.mode = PoolingMode::ResidualAttention;
        let (res, w_res) = restd1_pool(&grid, &p).unwrap();
        assert_eq!(w_att, w_res);
        let diff: Vec<f64> = res.iter().zip(&att).map(|(r, a)| r - a).collect();
        assert_close(&diff, &average_pool(&grid), 1e-14);
    }

    #[test]
    fn restd2_single_region() {
        let set = RegionSet::new(vec![vec![1.0, -2.0, 3.0]]).unwrap();
        let mut p = Restd2Params::init(&mut rng(8), 3, 4, 5, true);
        let (out, w) = restd2_attend(&set, &[0.1, 0.2, 0.3, 0.4], &p).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_close(&out, &[2.0, -4.0, 6.0], 1e-15);
        p.residual = false;
        let (out, _) = restd2_attend(&set, &[0.1, 0.2, 0.3, 0.4], &p).unwrap();
        assert_close(&out, &[1.0, -2.0, 3.0], 1e-15);
    }

    #[test]
    fn restd2_zero_params_average_regions() {
        let set = RegionSet::new(vec![vec![3.0, 0.0], vec![0.0, 3.0], vec![3.0, 3.0]]).unwrap();
        let p = Restd2Params::zeros(2, 2, 4, false);
        let (out, w) = restd2_attend(&set, &[1.0, -1.0], &p).unwrap();
        assert_close(&w, &[1.0 / 3.0; 3], 1e-15);
        assert_close(&out, &[2.0, 2.0], 1e-14);
        let p = Restd2Params::zeros(2, 2, 4, true);
        let (out, _) = restd2_attend(&set, &[1.0, -1.0], &p).unwrap();
        assert_close(&out, &[4.0, 4.0], 1e-14);
    }

    #[test]
    fn restd2_identical_regions_ignore_query() {
        let r = vec![0.3, -0.6, 0.9, 1.2];
        let set = RegionSet::new(vec![r.clone(); 4]).unwrap();
        let p = Restd2Params::init(&mut rng(9), 4, 3, 6, true);
        for q in [[1.0, 2.0, 3.0], [-5.0, 0.0, 0.5]] {
            let (out, _) = restd2_attend(&set, &q, &p).unwrap();
            let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
            assert_close(&out, &twice, 1e-12);
        }
    }

    #[test]
    fn region_set_keeps_pooled_current() {
        let mut set = RegionSet::new(vec![vec![1.0, 1.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(set.pooled(), &[2.0, 3.0]);
        set.set_region(0, vec![5.0, 1.0]).unwrap();
        assert_eq!(set.pooled(), &[4.0, 3.0]);
        assert!(RegionSet::new(vec![]).is_err());
        assert!(RegionSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    fn run_check<F>(seed: u64, make: F) -> f64
    where
        F: Fn(&mut Xoshiro256PlusPlus) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>),
    {
        let mut r = rng(seed);
        for _ in 0..20 {
            let (params, f) = make(&mut r);
            match GradCheck::new(1e-5, seed).run(f, &params) {
                Ok(rep) => return rep.max_relative_error,
                Err(GradCheckError::NearKink { .. }) => continue,
                Err(e) => panic!("{e}"),
            }
        }
        panic!("no kink-free sample found");
    }

    #[test]
    fn restd1_gradients_pass_check() {
        for mode in [PoolingMode::Attention, PoolingMode::ResidualAttention] {
            for seed in 0..5 {
                let err = run_check(seed, |r| {
                    let p = Restd1Params::init(r, 6, 8, mode);
                    let grid = random_grid(r, 3, 3, 6);
                    let proj = Tensor::vector((0..6).map(|_| r.random_range(-1.0..1.0)).collect());
                    let params = vec![p.w1.clone(), p.b1.clone(), p.w2.clone(), grid.cells().clone()];
                    let f = move |g: &mut Graph, v: &[Var]| {
                        let vars = Restd1Vars::new(g, v[0], v[1], v[2], mode)?;
                        let (out, _) = restd1_pool_graph(g, v[3], &vars)?;
                        let pr = g.constant(proj.clone());
                        let y = g.mul(out, pr)?;
                        Ok(g.sum(y))
                    };
                    (params, Box::new(f))
                });
                assert!(err < 1e-4, "{mode} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn restd2_gradients_pass_check() {
        for residual in [false, true] {
            for seed in 0..5 {
                let err = run_check(seed, |r| {
                    let p = Restd2Params::init(r, 5, 4, 6, residual);
                    let regions = Tensor::matrix(3, 5, (0..15).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
                    let query = Tensor::vector((0..4).map(|_| r.random_range(-1.0..1.0)).collect());
                    let proj = Tensor::vector((0..5).map(|_| r.random_range(-1.0..1.0)).collect());
                    let params = vec![p.wv.clone(), p.wh.clone(), p.wa.clone(), regions, query];
                    let f = move |g: &mut Graph, v: &[Var]| {
                        let vars = Restd2Vars { wv: v[0], wh: v[1], wa: v[2], residual };
                        let pooled = g.mean_along(v[3], 0)?;
                        let keys = restd2_keys(g, v[3], &vars)?;
                        let (out, _) = restd2_attend_graph(g, v[3], pooled, keys, v[4], &vars)?;
                        let pr = g.constant(proj.clone());
                        let y = g.mul(out, pr)?;
                        Ok(g.sum(y))
                    };
                    (params, Box::new(f))
                });
                assert!(err < 1e-4, "residual={residual} seed {seed}: {err}");
            }
        }
    }

    fn permuted_grid(grid: &RegionGrid, perm: &[usize]) -> RegionGrid {
        let data = perm.iter().flat_map(|&i| grid.cell(i).to_vec()).collect();
        RegionGrid::new(grid.n1(), grid.n2(), grid.dim(), data).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn restd1_weights_form_a_distribution_and_are_equivariant(
            seed in 0u64..1000,
            perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let mut r = rng(seed);
            let grid = random_grid(&mut r, 3, 3, 6);
            for mode in PoolingMode::ALL {
                let p = Restd1Params::init(&mut r, 6, 8, mode);
                let (out, w) = restd1_pool(&grid, &p).unwrap();
                prop_assert!(w.iter().all(|x| *x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let (out_p, w_p) = restd1_pool(&permuted_grid(&grid, &perm), &p).unwrap();
                for (a, b) in out.iter().zip(&out_p) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                for (k, &i) in perm.iter().enumerate() {
                    prop_assert!((w_p[k] - w[i]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn restd2_weights_form_a_distribution_and_are_equivariant(
            seed in 0u64..1000,
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
            residual in any::<bool>(),
        ) {
            let mut r = rng(seed);
            let regions: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect();
            let query: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let p = Restd2Params::init(&mut r, 4, 3, 6, residual);
            let set = RegionSet::new(regions.clone()).unwrap();
            let (out, w) = restd2_attend(&set, &query, &p).unwrap();
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shuffled = RegionSet::new(perm.iter().map(|&i| regions[i].clone()).collect()).unwrap();
            let (out_p, w_p) = restd2_attend(&shuffled, &query, &p).unwrap();
            for (a, b) in out.iter().zip(&out_p) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((w_p[k] - w[i]).abs() < 1e-12);
            }
        }
    }
}
