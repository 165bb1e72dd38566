use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{GridTensor, ParameterStore, Tape, Var};

/// Default bound applied to scale outputs via `c·tanh(s/c)`.
pub const DEFAULT_CLAMP: f64 = 5.0;

/// Fully connected network producing a (scale, shift) pair.
///
/// Hidden layers use GELU. The last layer emits `2·half` columns: the first
/// `half` are the soft-clamped log-scales, the rest the shifts.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionerNet {
    prefix: String,
    widths: Vec<usize>,
    clamp: f64,
}

impl ConditionerNet {
    /// Registers parameters under `prefix`. The output layer starts at zero so
    /// the owning flow layer is the identity at initialization.
    pub fn init(
        prefix: &str,
        input_dim: usize,
        hidden: &[usize],
        half: usize,
        clamp: f64,
        store: &mut ParameterStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || half == 0 || hidden.contains(&0) {
            return Err(Error::Config(format!("{prefix}: zero-width conditioner layer")));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * half);
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let last = l + 2 == widths.len();
            let w = format!("{prefix}.l{l}.weight");
            if last {
                store.insert(w, GridTensor::zeros(&[fan_in, fan_out]))?;
            } else {
                store.insert_normal(w, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)?;
            }
            store.insert(format!("{prefix}.l{l}.bias"), GridTensor::zeros(&[1, fan_out]))?;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            widths,
            clamp,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn half(&self) -> usize {
        self.widths[self.widths.len() - 1] / 2
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    /// `(s, b)` for a `B×input_dim` input, each `B×half`.
    pub fn scale_shift(&self, tape: &mut Tape, store: &ParameterStore, input: Var) -> Result<(Var, Var)> {
        let mut h = input;
        let layers = self.widths.len() - 1;
        for l in 0..layers {
            let w = tape.param(
                &format!("{}.l{l}.weight", self.prefix),
                store.get(&format!("{}.l{l}.weight", self.prefix))?,
            );
            let b = tape.param(
                &format!("{}.l{l}.bias", self.prefix),
                store.get(&format!("{}.l{l}.bias", self.prefix))?,
            );
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if l + 1 < layers {
                h = tape.gelu(h);
            }
        }
        let half = self.half();
        let s = tape.slice_cols(h, 0, half)?;
        let s = tape.soft_clamp(s, self.clamp);
        let b = tape.slice_cols(h, half, 2 * half)?;
        Ok((s, b))
    }
}
