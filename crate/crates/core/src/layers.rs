//! Parameterized building blocks shared by the encoder, backbone, fusion
//! module and head. Each block owns its tensors, runs forward in any
//! [`Real`] type and has a matching backward that returns a gradient block of
//! the same type.

use crate::error::Result;
use crate::params::{join, ParamKind, ParamSet};
use crate::tensor::backward::{conv2d_backward, linear_backward, norm_act_backward};
use crate::tensor::ops::{conv2d, linear, norm_act, Activation, ConvSpec, NormStats};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(cin: usize, cout: usize) -> Self {
        Self {
            weight: Tensor::zeros([cin, cout]),
            bias: Tensor::zeros([cout]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight, &self.bias)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let (dx, weight, bias) = linear_backward(x, &self.weight, dy)?;
        Ok((dx, Self { weight, bias }))
    }
}

impl<T: Real> ParamSet<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        let (fan_in, fan_out) = (self.in_features(), self.out_features());
        f(&join(prefix, "weight"), ParamKind::Weight { fan_in, fan_out }, &self.weight);
        f(&join(prefix, "bias"), ParamKind::Bias, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        let (fan_in, fan_out) = (self.in_features(), self.out_features());
        f(&join(prefix, "weight"), ParamKind::Weight { fan_in, fan_out }, &mut self.weight);
        f(&join(prefix, "bias"), ParamKind::Bias, &mut self.bias);
    }
}

/// Inference-mode normalization followed by an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T: Real> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub act: Activation,
}

impl<T: Real> Norm<T> {
    /// Unit scale, zero shift, zero mean, unit variance.
    pub fn identity(channels: usize, act: Activation) -> Self {
        Self {
            scale: Tensor::full([channels], T::one()),
            shift: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::one()),
            act,
        }
    }

    pub fn stats(&self) -> NormStats<'_, T> {
        NormStats {
            scale: &self.scale,
            shift: &self.shift,
            running_mean: &self.running_mean,
            running_var: &self.running_var,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        norm_act(x, &self.stats(), self.act)
    }

    pub fn backward(&self, x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let (dx, scale, shift) = norm_act_backward(x, &self.stats(), self.act, y, dy)?;
        let c = scale.len();
        Ok((
            dx,
            Self {
                scale,
                shift,
                running_mean: Tensor::zeros([c]),
                running_var: Tensor::zeros([c]),
                act: self.act,
            },
        ))
    }
}

impl<T: Real> ParamSet<T> for Norm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "scale"), ParamKind::NormScale, &self.scale);
        f(&join(prefix, "shift"), ParamKind::NormShift, &self.shift);
        f(&join(prefix, "running_mean"), ParamKind::RunningMean, &self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::RunningVar, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "scale"), ParamKind::NormScale, &mut self.scale);
        f(&join(prefix, "shift"), ParamKind::NormShift, &mut self.shift);
        f(&join(prefix, "running_mean"), ParamKind::RunningMean, &mut self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::RunningVar, &mut self.running_var);
    }
}

/// Bias-free convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T: Real> {
    pub kernel: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Real> Conv<T> {
    pub fn new(k: usize, cin: usize, cout: usize, spec: ConvSpec) -> Self {
        Self {
            kernel: Tensor::zeros([k, k, cin, cout]),
            spec,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.kernel, self.spec)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let (dx, kernel) = conv2d_backward(x, &self.kernel, self.spec, dy)?;
        Ok((dx, Self { kernel, spec: self.spec }))
    }

    fn kind(&self) -> ParamKind {
        let s = self.kernel.shape();
        let taps = s[0] * s[1];
        ParamKind::Weight {
            fan_in: taps * s[2],
            fan_out: taps * s[3],
        }
    }
}

impl<T: Real> ParamSet<T> for Conv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "kernel"), self.kind(), &self.kernel);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        let kind = self.kind();
        f(&join(prefix, "kernel"), kind, &mut self.kernel);
    }
}

/// Convolution followed by normalization and activation (the σ(Conv(·))
/// pattern used throughout the network).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNorm<T: Real> {
    pub conv: Conv<T>,
    pub norm: Norm<T>,
}

/// Intermediates kept by [`ConvNorm::forward_cached`].
#[derive(Clone, Debug)]
pub struct ConvNormCache<T: Real> {
    pub pre: Tensor<T>,
    pub out: Tensor<T>,
}

impl<T: Real> ConvNorm<T> {
    pub fn new(k: usize, cin: usize, cout: usize, spec: ConvSpec, act: Activation) -> Self {
        Self {
            conv: Conv::new(k, cin, cout, spec),
            norm: Norm::identity(cout, act),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.norm.forward(&self.conv.forward(x)?)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<ConvNormCache<T>> {
        let pre = self.conv.forward(x)?;
        let out = self.norm.forward(&pre)?;
        Ok(ConvNormCache { pre, out })
    }

    pub fn backward(&self, x: &Tensor<T>, cache: &ConvNormCache<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let (dpre, norm) = self.norm.backward(&cache.pre, &cache.out, dy)?;
        let (dx, conv) = self.conv.backward(x, &dpre)?;
        Ok((dx, Self { conv, norm }))
    }
}

impl<T: Real> ParamSet<T> for ConvNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Two-layer perceptron `Linear → norm+ReLU → Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real> {
    pub fc1: Linear<T>,
    pub norm: Norm<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T: Real> {
    pub pre: Tensor<T>,
    pub hidden: Tensor<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new(cin: usize, hidden: usize, cout: usize) -> Self {
        Self {
            fc1: Linear::new(cin, hidden),
            norm: Norm::identity(hidden, Activation::Relu),
            fc2: Linear::new(hidden, cout),
        }
    }

    pub fn in_features(&self) -> usize {
        self.fc1.in_features()
    }

    pub fn out_features(&self) -> usize {
        self.fc2.out_features()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let pre = self.fc1.forward(x)?;
        let hidden = self.norm.forward(&pre)?;
        let out = self.fc2.forward(&hidden)?;
        Ok((out, MlpCache { pre, hidden }))
    }

    pub fn backward(&self, x: &Tensor<T>, cache: &MlpCache<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let (dhidden, fc2) = self.fc2.backward(&cache.hidden, dy)?;
        let (dpre, norm) = self.norm.backward(&cache.pre, &cache.hidden, &dhidden)?;
        let (dx, fc1) = self.fc1.backward(x, &dpre)?;
        Ok((dx, Self { fc1, norm, fc2 }))
    }
}

impl<T: Real> ParamSet<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
