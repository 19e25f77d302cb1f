use crate::error::{Error, Result};
use crate::graph::{uniform_init, BatchNorm};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// Dense layer on `[B, in]` with weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), uniform_init(vec![fan_in, fan_out], fan_in, rng))?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), uniform_init(vec![fan_out], fan_in, rng))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, params: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, params[self.weight.index()])?;
        match self.bias {
            Some(b) => tape.add_bias(y, params[b.index()]),
            None => Ok(y),
        }
    }
}

/// Pointwise convolution without bias, followed by batch norm and an optional leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn<S = f32> {
    pub weight: ParamId,
    pub bn: BatchNorm<S>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<S: Real> ConvBn<S> {
    pub fn new(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{name}.weight"),
            uniform_init(vec![out_channels, in_channels], in_channels, rng),
        )?;
        Ok(ConvBn { weight, bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels)?, in_channels, out_channels })
    }

    pub fn forward(&mut self, tape: &mut Tape<S>, params: &[Var], x: Var, training: bool, slope: Option<S>) -> Result<Var> {
        if tape.shape(x).get(1) != Some(&self.in_channels) {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {:?}",
                self.in_channels,
                tape.shape(x)
            )));
        }
        let h = tape.pointwise_conv(x, params[self.weight.index()])?;
        let h = self.bn.forward(tape, params, h, training)?;
        match slope {
            Some(s) => tape.leaky_relu(h, s),
            None => Ok(h),
        }
    }

    /// `max_j lrelu(bn(W · feats[.., j]))` over the last axis of `feats [B, D, N, k]`.
    pub fn forward_max(
        &mut self,
        tape: &mut Tape<S>,
        params: &[Var],
        feats: Var,
        training: bool,
        slope: S,
        fused: bool,
    ) -> Result<Var> {
        if fused {
            let (w, g, b) = (params[self.weight.index()], params[self.bn.gamma.index()], params[self.bn.beta.index()]);
            tape.edge_conv_bn_lrelu_max(feats, w, g, b, &mut self.bn.state, training, slope)
        } else {
            let h = self.forward(tape, params, feats, training, Some(slope))?;
            tape.max_over_axis(h, 3)
        }
    }
}
