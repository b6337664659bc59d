//! Parameterized layers over a [`ParamStore`](crate::params::ParamStore).

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Graph, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Conv2dSpec;

/// Std of He-normal init for a leaky-ReLU slope of 0.01.
fn he_std(fan_in: usize) -> f64 {
    (2.0 / (1.0 + 1e-4) / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// He-normal weight (leaky slope 0.01), zero bias.
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        ic: usize,
        oc: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            let fan_in = ic / spec.groups * k * k;
            let weight = pb.normal("weight", &[oc, ic / spec.groups, k, k], he_std(fan_in))?;
            let bias = if bias { Some(pb.zeros("bias", &[oc])?) } else { None };
            Ok(Conv2d { weight, bias, spec })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, ic: usize, oc: usize, k: usize, stride: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(ConvTranspose2d {
                weight: pb.normal("weight", &[ic, oc, k, k], he_std(oc * k * k))?,
                bias: pb.zeros("bias", &[oc])?,
                stride,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.transposed_conv2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weight uniform in `±1/√in`, zero bias.
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        pb.scope(name, |pb| {
            let weight = pb.uniform("weight", &[out, inp], 1.0 / (inp as f64).sqrt())?;
            let bias = if bias { Some(pb.zeros("bias", &[out])?) } else { None };
            Ok(Linear { weight, bias })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(LayerNorm {
                gamma: pb.ones("weight", &[c])?,
                beta: pb.zeros("bias", &[c])?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(BatchNorm2d {
                gamma: pb.ones("weight", &[c])?,
                beta: pb.zeros("bias", &[c])?,
                running_mean: pb.buffer("running_mean", Tensor::zeros(vec![c]))?,
                running_var: pb.buffer("running_var", Tensor::ones(vec![c]))?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// `Conv3×3 → BN → ReLU`, applied twice.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub convs: [Conv2d; 2],
    pub norms: [BatchNorm2d; 2],
}

impl DoubleConv {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, ic: usize, oc: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            let c0 = Conv2d::new(pb, "conv0", ic, oc, 3, Conv2dSpec::same(3), true)?;
            let n0 = BatchNorm2d::new(pb, "bn0", oc)?;
            let c1 = Conv2d::new(pb, "conv1", oc, oc, 3, Conv2dSpec::same(3), true)?;
            let n1 = BatchNorm2d::new(pb, "bn1", oc)?;
            Ok(DoubleConv {
                convs: [c0, c1],
                norms: [n0, n1],
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var) -> Result<Var> {
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(g, x)?;
            x = bn.forward(g, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}
