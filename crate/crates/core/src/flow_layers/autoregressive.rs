use super::{LayerContext, LayerForward, MadeNet};
use crate::error::{Error, Result};
use crate::numerics::{GridTensor, ParameterStore, Tape, Var};

/// `y_i = x_i·exp(s_i(x_<i; c)) + b_i(x_<i; c)` with `(s, b)` from a masked
/// network. With a conditioning width of zero this is the unconditional
/// autoregressive projection.
#[derive(Clone, Debug)]
pub struct MaskedAutoregressive {
    net: MadeNet,
}

impl MaskedAutoregressive {
    pub fn new(net: MadeNet) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &MadeNet {
        &self.net
    }

    pub fn is_conditional(&self) -> bool {
        self.net.cond_dim() > 0
    }

    fn cond(&self, ctx: &LayerContext) -> Result<Option<Var>> {
        match (self.is_conditional(), ctx.cond) {
            (true, None) => Err(Error::Config(
                "conditional autoregressive layer needs a conditioning input".into(),
            )),
            (true, c) => Ok(c),
            (false, _) => Ok(None),
        }
    }

    /// One vectorized masked pass.
    pub fn forward(&self, tape: &mut Tape, ctx: &LayerContext, x: Var) -> Result<LayerForward> {
        let cond = self.cond(ctx)?;
        let (s, b) = self.net.scale_shift(tape, ctx.store, x, cond)?;
        let scale = tape.exp(s);
        let y = tape.mul(x, scale)?;
        let y = tape.add(y, b)?;
        Ok(LayerForward {
            output: y,
            logdet: Some(tape.sum_cols(s)?),
            stats: None,
        })
    }

    /// Sequential inverse, one conditioner evaluation per coordinate.
    pub fn inverse_values(
        &self,
        store: &ParameterStore,
        y: &GridTensor,
        cond: Option<&GridTensor>,
    ) -> Result<GridTensor> {
        let (rows, d) = y.dims2()?;
        if self.is_conditional() && cond.is_none() {
            return Err(Error::Config(
                "conditional autoregressive layer needs a conditioning input".into(),
            ));
        }
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let c = if self.is_conditional() {
                cond.map(|c| c.row(r))
            } else {
                None
            };
            out.extend(self.net.invert_sequential(store, y.row(r), c)?);
        }
        GridTensor::matrix(rows, d, out)
    }
}
