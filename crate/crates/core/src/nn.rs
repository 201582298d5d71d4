//! Small layer library on top of [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `kernel x kernel` convolution with "same" padding, He-style init,
    /// zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (kernel * kernel * in_channels) as f64;
        let weight = store.add_normal(
            format!("{name}.weight"),
            &[kernel, kernel, in_channels, out_channels],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), &[out_channels], 0.0));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    /// Identity kernel (centre tap) plus small noise.
    pub fn new_near_identity<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        noise: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = Self::new(store, name, channels, channels, kernel, 1, false, rng);
        let w = store.get_mut(conv.weight);
        for v in w.data_mut() {
            *v *= T::c(noise);
        }
        let centre = (kernel / 2) * kernel + kernel / 2;
        for c in 0..channels {
            w.data_mut()[(centre * channels + c) * channels + c] += T::one();
        }
        conv
    }

    /// Overwrites the kernel with an exact identity (tests, ablations).
    pub fn set_identity<T: Real>(&self, store: &mut ParamStore<T>) {
        assert_eq!(self.in_channels, self.out_channels);
        let c = self.in_channels;
        let k = self.kernel;
        let mut w = Tensor::zeros(&[k, k, c, c]);
        let centre = (k / 2) * k + k / 2;
        for i in 0..c {
            w.data_mut()[(centre * c + i) * c + i] = T::one();
        }
        store.set(self.weight, w).expect("identity kernel shape");
        if let Some(b) = self.bias {
            store.fill(b, 0.0);
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            g.param(self.weight),
            self.bias.map(|b| g.param(b)),
            self.stride,
            self.pad,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_normal(
            format!("{name}.weight"),
            &[in_features, out_features],
            (1.0 / in_features as f64).sqrt(),
            rng,
        );
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), &[out_features], 0.0));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.fill(self.weight, 0.0);
        if let Some(b) = self.bias {
            store.fill(b, 0.0);
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, g.param(self.weight), self.bias.map(|b| g.param(b)))
    }
}

/// Layer normalisation over the last axis with a learnable gain and,
/// optionally, a learnable shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: Option<ParamId>,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, shift: bool) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0),
            beta: shift.then(|| store.add_const(format!("{name}.beta"), &[dim], 0.0)),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS);
        let y = g.mul_lastdim(y, g.param(self.gamma))?;
        match self.beta {
            Some(b) => g.add_lastdim(y, g.param(b)),
            None => Ok(y),
        }
    }
}

/// Learnable per-channel multiplier.
#[derive(Clone, Debug)]
pub struct ChannelScale {
    pub weight: ParamId,
}

impl ChannelScale {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, init: f64) -> Self {
        Self {
            weight: store.add_const(name.to_string(), &[channels], init),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        g.mul_lastdim(x, g.param(self.weight))
    }
}
