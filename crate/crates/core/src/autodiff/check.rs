//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("objective returned a non-finite value {0}")]
    NonFinite(f64),
    #[error(
        "a ReLU pre-activation lies {margin:e} from its kink; resample the inputs \
         (perturbations of {step:e} are not differentiable there)"
    )]
    NearKink { margin: f64, step: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Maximum over checked coordinates of |a - n| / max(1e-8, |a| + |n|).
    pub max_relative_error: f64,
    /// (parameter index, flat coordinate) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    /// Per-parameter maximum relative error, in the order given.
    pub per_param: Vec<f64>,
}

/// Settings for [`GradCheck::run`].
///
/// Parameters with more than `max_coords` entries are checked on a random
/// subset of coordinates drawn from `seed`; smaller ones are checked
/// exhaustively. A ReLU pre-activation within `kink_margin` of zero makes
/// the check fail with [`GradCheckError::NearKink`] so the caller can draw a
/// fresh evaluation point.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub seed: u64,
    pub max_coords: usize,
    pub kink_margin: f64,
}

impl GradCheck {
    pub fn new(step: f64, seed: u64) -> Self {
        Self {
            step,
            seed,
            max_coords: 256,
            kink_margin: 10.0 * step,
        }
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = n;
        self
    }

    pub fn run<F>(&self, f: F, params: &[Tensor]) -> Result<GradReport, GradCheckError>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
    {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(GradCheckError::BadStep(self.step));
        }

        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(GradCheckError::NonFinite(value));
        }
        if g.min_relu_margin() < self.kink_margin {
            return Err(GradCheckError::NearKink {
                margin: g.min_relu_margin(),
                step: self.step,
            });
        }
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).into_data()).collect();

        let eval = |which: usize, coord: usize, delta: f64| -> Result<f64, GradCheckError> {
            let mut shifted = params[which].clone();
            shifted.data_mut()[coord] += delta;
            let mut g = Graph::new();
            let vars: Vec<Var> = params
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if i == which {
                        g.param(shifted.clone())
                    } else {
                        g.param(p.clone())
                    }
                })
                .collect();
            let loss = f(&mut g, &vars)?;
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(GradCheckError::NonFinite(v));
            }
            Ok(v)
        };

        let mut rng = Xoshiro256PlusPlus::seed_from_u64(self.seed);
        let mut report = GradReport {
            max_relative_error: 0.0,
            worst: None,
            coords_checked: 0,
            per_param: vec![0.0; params.len()],
        };
        for (pi, p) in params.iter().enumerate() {
            let coords: Vec<usize> = if p.numel() <= self.max_coords {
                (0..p.numel()).collect()
            } else {
                let mut c = sample(&mut rng, p.numel(), self.max_coords).into_vec();
                c.sort_unstable();
                c
            };
            for c in coords {
                let plus = eval(pi, c, self.step)?;
                let minus = eval(pi, c, -self.step)?;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[pi][c];
                let err = relative_error(a, numeric);
                report.coords_checked += 1;
                if err > report.per_param[pi] {
                    report.per_param[pi] = err;
                }
                if report.worst.is_none() || err > report.max_relative_error {
                    report.max_relative_error = err;
                    report.worst = Some((pi, c));
                }
            }
        }
        Ok(report)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Maximum relative error between analytic and central-difference gradients
/// of `f` at `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, seed: u64) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    GradCheck::new(step, seed)
        .run(f, params)
        .map(|r| r.max_relative_error)
}
