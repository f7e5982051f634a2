//! Two-layer MLP used by the token projectors, the class-token fusion and the
//! local-condition fusion.

use candle_core::{Tensor, D};
use candle_nn::VarBuilder;

use crate::error::{Error, Result};

/// Nonlinearity between the two layers. `Identity` exists so tests can check
/// the linear regime against plain matrix products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Gelu,
    Identity,
}

/// `y = act(x W1 + b1) W2 + b2`, applied row-wise.
#[derive(Debug, Clone)]
pub struct TwoLayerMlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    activation: Activation,
}

impl TwoLayerMlp {
    pub fn new(
        vb: VarBuilder,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        activation: Activation,
    ) -> Result<Self> {
        let init = candle_nn::init::DEFAULT_KAIMING_NORMAL;
        let w1 = vb.get_with_hints((d_in, d_hidden), "w1", init)?;
        let b1 = vb.get_with_hints(d_hidden, "b1", candle_nn::Init::Const(0.0))?;
        let w2 = vb.get_with_hints((d_hidden, d_out), "w2", init)?;
        let b2 = vb.get_with_hints(d_out, "b2", candle_nn::Init::Const(0.0))?;
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        })
    }

    /// Build from explicit weights; used by tests and toy fixtures.
    pub fn from_tensors(
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
        activation: Activation,
    ) -> Result<Self> {
        let (_, h1) = w1.dims2().map_err(|_| Error::shape("w1 must be rank 2"))?;
        let (h2, _) = w2.dims2().map_err(|_| Error::shape("w2 must be rank 2"))?;
        if h1 != h2 {
            return Err(Error::shape(format!("hidden dims disagree: {h1} vs {h2}")));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w2.dims()[1]
    }

    /// Forward over a `[d_in]` vector, `[n, d_in]` matrix or `[b, n, d_in]` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d_last = x.dims()[x.rank() - 1];
        if d_last != self.d_in() {
            return Err(Error::shape(format!(
                "mlp expects last dim {}, got {d_last}",
                self.d_in()
            )));
        }
        let squeeze = x.rank() == 1;
        let x = if squeeze { x.unsqueeze(0)? } else { x.clone() };
        let h = x.broadcast_matmul(&self.w1)?.broadcast_add(&self.b1)?;
        let h = match self.activation {
            Activation::Gelu => h.gelu_erf()?,
            Activation::Identity => h,
        };
        let y = h.broadcast_matmul(&self.w2)?.broadcast_add(&self.b2)?;
        Ok(if squeeze { y.squeeze(0)? } else { y })
    }
}

/// Row-wise softmax over the last dimension.
pub fn softmax_last_dim(t: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(t, D::Minus1)?)
}
