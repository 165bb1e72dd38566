use super::{LayerContext, LayerForward, Mode};
use crate::error::{Error, Result};
use crate::numerics::{GridTensor, Tape, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Running estimates used by a batch-norm layer in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight kept on the old running value at each update.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    /// Running statistics that make the eval-mode transform exactly the
    /// identity (`μ = 0`, `σ² = 1 − ε`).
    pub fn identity(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0 - DEFAULT_EPS; dim],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    pub fn update(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&batch.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Mean and (biased) variance of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// `x ↦ (x − μ)/√(σ² + ε)` with log-determinant `−½ Σᵢ log(σᵢ² + ε)`.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub stats: BatchNormStats,
}

impl BatchNormLayer {
    pub fn new(dim: usize) -> Self {
        Self {
            stats: BatchNormStats::identity(dim),
        }
    }

    fn check(&self, tape: &Tape, x: Var) -> Result<usize> {
        let (rows, d) = tape.value(x).dims2()?;
        if d != self.stats.dim() {
            return Err(Error::Config(format!(
                "batch norm built for {}, got {d}",
                self.stats.dim()
            )));
        }
        Ok(rows)
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &LayerContext, x: Var) -> Result<LayerForward> {
        let rows = self.check(tape, x)?;
        let eps = self.stats.eps;
        match ctx.mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::Mode("train-mode batch norm needs at least 2 samples".into()));
                }
                let mean = tape.mean_rows(x)?;
                let neg_mean = tape.scale(mean, -1.0);
                let centered = tape.add_row(x, neg_mean)?;
                let sq = tape.square(centered);
                let var = tape.mean_rows(sq)?;
                let shifted = tape.add_scalar(var, eps);
                let inv_std = tape.powf(shifted, -0.5);
                let output = tape.mul_row(centered, inv_std)?;
                let logs = tape.log(shifted);
                let total = tape.sum(logs);
                let total = tape.scale(total, -0.5);
                let zeros = tape.constant(GridTensor::zeros(&[rows, 1]));
                let logdet = tape.add_row(zeros, total)?;
                let stats = BatchStats {
                    mean: tape.value(mean).data().to_vec(),
                    var: tape.value(var).data().to_vec(),
                };
                Ok(LayerForward {
                    output,
                    logdet: Some(logdet),
                    stats: Some(stats),
                })
            }
            Mode::Eval => {
                let neg_mean = tape.constant(GridTensor::vector(self.stats.running_mean.iter().map(|m| -m).collect()));
                let inv_std = tape.constant(GridTensor::vector(
                    self.stats.running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
                ));
                let centered = tape.add_row(x, neg_mean)?;
                let output = tape.mul_row(centered, inv_std)?;
                let ld = -0.5 * self.stats.running_var.iter().map(|v| (v + eps).ln()).sum::<f64>();
                let logdet = tape.constant(GridTensor::full(&[rows, 1], ld));
                Ok(LayerForward {
                    output,
                    logdet: Some(logdet),
                    stats: None,
                })
            }
        }
    }

    pub fn inverse(&self, tape: &mut Tape, ctx: &LayerContext, y: Var) -> Result<Var> {
        self.check(tape, y)?;
        if ctx.mode == Mode::Train {
            return Err(Error::Mode("batch norm inverse is undefined in train mode".into()));
        }
        let eps = self.stats.eps;
        let std = tape.constant(GridTensor::vector(
            self.stats.running_var.iter().map(|v| (v + eps).sqrt()).collect(),
        ));
        let mean = tape.constant(GridTensor::vector(self.stats.running_mean.clone()));
        let scaled = tape.mul_row(y, std)?;
        tape.add_row(scaled, mean)
    }
}
