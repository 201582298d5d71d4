//! Self-Adaptive Wavelet Fusion and the correlated feature enhancer.
//!
//! The RGB map is decomposed, mixed across all four subbands and gated by a
//! small per-channel weight `W1`; only its low band meets the infrared map in
//! the interaction core. The core's RGB output is then injected into every
//! subband and reconstructed, and a `W2`-weighted skip of the raw RGB map is
//! added. The infrared map never receives RGB content except through the core.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::cfm::Cfm;
use crate::error::{Error, Result};
use crate::nn::{ChannelScale, Conv2d};
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::xattn::CrossAttention;

pub const W1_INIT: f64 = 0.1;
pub const W2_INIT: f64 = 1.0;

/// The token-level interaction between the two modalities.
pub enum InteractionCore {
    Cfm(Cfm),
    Attention(CrossAttention),
}

impl InteractionCore {
    pub fn forward<T: Real>(&self, g: &Graph<T>, x_ir: Var, x_rgb: Var) -> Result<(Var, Var)> {
        match self {
            Self::Cfm(m) => m.forward(g, x_ir, x_rgb),
            Self::Attention(m) => m.forward(g, x_ir, x_rgb),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Cfm(_) => "cfm",
            Self::Attention(_) => "attention",
        }
    }
}

pub struct Sawf {
    pub channels: usize,
    /// 3x3 mixing over the stacked `4C` subbands.
    pub mix: Conv2d,
    pub w1: ChannelScale,
    pub core: InteractionCore,
    pub skip: Conv2d,
    pub w2: ChannelScale,
}

impl Sawf {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        core: InteractionCore,
        w1: f64,
        w2: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        let mut mix = Conv2d::new_near_identity(store, &p("mix"), 4 * channels, 3, 0.1, rng);
        mix.bias = Some(store.add_const(p("mix.bias"), &[4 * channels], 0.0));
        let mut skip = Conv2d::new_near_identity(store, &p("skip"), channels, 3, 0.1, rng);
        skip.bias = Some(store.add_const(p("skip.bias"), &[channels], 0.0));
        Self {
            channels,
            mix,
            w1: ChannelScale::new(store, &p("w1"), 4 * channels, w1),
            core,
            skip,
            w2: ChannelScale::new(store, &p("w2"), channels, w2),
        }
    }

    /// `W1 * Conv(stack(dwt2(X_rgb)))`, split into `(LL: C, H: 3C)` at half
    /// resolution.
    pub fn modulate_decompose<T: Real>(&self, g: &Graph<T>, x_rgb: Var) -> Result<(Var, Var)> {
        let c = self.channels;
        let s = g.dwt2(x_rgb)?;
        let s = self.mix.forward(g, s)?;
        let s = self.w1.forward(g, s)?;
        Ok((g.slice(s, 2, 0, c)?, g.slice(s, 2, c, 3 * c)?))
    }

    /// `(X_ir', X~_rgb')`, both at the infrared map's size.
    pub fn forward<T: Real>(&self, g: &Graph<T>, x_ir: Var, x_rgb: Var) -> Result<(Var, Var)> {
        let (h, w, c) = g.value(x_ir).hwc()?;
        let x_rgb = match_reference(g, x_ir, x_rgb)?;
        if c != self.channels {
            return Err(Error::Validation(format!(
                "SAWF built for {} channels, got {c}",
                self.channels
            )));
        }
        let (ll, high) = self.modulate_decompose(g, x_rgb)?;
        let (ir_out, rgb_ll_out) = self.core.forward(g, x_ir, ll)?;
        let xm = enhance_correlated(g, ll, high, rgb_ll_out)?;
        let xm = g.crop(xm, h, w)?;
        let skip = self.w2.forward(g, self.skip.forward(g, x_rgb)?)?;
        Ok((ir_out, g.add(xm, skip)?))
    }
}

/// Checks channel agreement and bilinearly resizes `x_rgb` to the infrared
/// map's size when they differ.
pub fn match_reference<T: Real>(g: &Graph<T>, x_ir: Var, x_rgb: Var) -> Result<Var> {
    let (h, w, c) = g.value(x_ir).hwc()?;
    let (hr, wr, cr) = g.value(x_rgb).hwc()?;
    if c != cr {
        return Err(Error::Validation(format!(
            "modalities differ in channels: infrared {c}, rgb {cr}"
        )));
    }
    if (hr, wr) != (h, w) {
        g.resize_bilinear(x_rgb, h, w)
    } else {
        Ok(x_rgb)
    }
}

/// `idwt2(LL + X', H + [X' | X' | X'])`.
pub fn enhance_correlated<T: Real>(g: &Graph<T>, ll: Var, high: Var, x_rgb: Var) -> Result<Var> {
    let (h, w, c) = g.value(ll).hwc()?;
    let sh = g.value(high).hwc()?;
    let sx = g.value(x_rgb).hwc()?;
    if sh != (h, w, 3 * c) || sx != (h, w, c) {
        return Err(Error::Validation(format!(
            "enhancer shapes disagree: LL {:?}, H {:?}, X' {:?}",
            (h, w, c),
            sh,
            sx
        )));
    }
    let low = g.add(ll, x_rgb)?;
    let high = g.add(high, g.concat(&[x_rgb, x_rgb, x_rgb], 2)?)?;
    g.idwt2(g.concat(&[low, high], 2)?)
}
