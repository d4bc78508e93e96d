use rand::Rng;

use crate::graph::Var;
use crate::ops::ConvGeometry;
use crate::params::{Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Gain for He initialization in front of a leaky ReLU with `slope`.
pub fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geo: ConvGeometry,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let [kd, kh, kw] = geo.kernel;
        let fan_in = in_channels * kd * kh * kw;
        let weight = store.add_he_normal(
            format!("{name}.weight"),
            &[out_channels, in_channels, kd, kh, kw],
            fan_in,
            gain,
            rng,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            weight,
            bias,
            geo,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv3d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.geo)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct InstanceNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl InstanceNorm3d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            eps: 1e-5,
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.instance_norm(p.get(self.gamma), p.get(self.beta), self.eps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}
