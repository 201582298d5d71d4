//! Misalignment-aware fusion stage: interaction (SAWF, a bare core, or plain
//! addition), a refinement shared by both modalities, scaled-add blending
//! with each modality's stage input, and the merged map for the head.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm};
use crate::params::{ParamId, ParamStore};
use crate::sawf::{match_reference, InteractionCore, Sawf};
use crate::tensor::{FeatureMap, Real, Tensor};

pub const NUM_STAGES: usize = 4;
pub const SCALE_INIT: f64 = 1.0;
/// Non-positive blend scales are clamped up to this value.
pub const SCALE_EPS: f64 = 1e-3;

/// Coefficients `(a, b)` of `a X'' + b X` for a blend scale `s`:
/// `((1+s), (2-s)) / 4` below one, `/ (1+s)^2` from one upwards.
pub fn scaled_add_coeffs(scale: f64) -> (f64, f64) {
    let s = clamp_scale(scale);
    if s < 1.0 {
        ((1.0 + s) / 4.0, (2.0 - s) / 4.0)
    } else {
        let d = (1.0 + s) * (1.0 + s);
        ((1.0 + s) / d, (2.0 - s) / d)
    }
}

fn clamp_scale(scale: f64) -> f64 {
    if scale <= 0.0 {
        log::warn!("blend scale {scale} is not positive; clamped to {SCALE_EPS}");
        SCALE_EPS
    } else {
        scale
    }
}

/// `d(a, b)/ds`; zero where the scale is clamped.
fn scaled_add_dcoeffs(scale: f64) -> (f64, f64) {
    if scale <= 0.0 {
        (0.0, 0.0)
    } else if scale < 1.0 {
        (0.25, -0.25)
    } else {
        let p = 1.0 + scale;
        (-1.0 / (p * p), (scale - 5.0) / (p * p * p))
    }
}

/// Blends a processed map with its skip.
pub fn scaled_add<T: Real>(refined: &FeatureMap<T>, skip: &FeatureMap<T>, scale: f64) -> Result<FeatureMap<T>> {
    if refined.shape() != skip.shape() {
        return Err(Error::Validation(format!(
            "scaled_add shapes differ: {:?} vs {:?}",
            refined.shape(),
            skip.shape()
        )));
    }
    if !scale.is_finite() {
        return Err(Error::Validation("blend scale is not finite".into()));
    }
    let (a, b) = scaled_add_coeffs(scale);
    let (a, b) = (T::c(a), T::c(b));
    refined.zip_map(skip, |r, x| a * r + b * x)
}

/// Differentiable form; `scale` is a one-element variable.
pub fn scaled_add_op<T: Real>(g: &Graph<T>, refined: Var, skip: Var, scale: Var) -> Result<Var> {
    let (vr, vx, vs) = (g.value(refined), g.value(skip), g.value(scale));
    if vr.shape() != vx.shape() || vs.len() != 1 {
        return Err(Error::Validation(format!(
            "scaled_add shapes: {:?}, {:?}, scale {:?}",
            vr.shape(),
            vx.shape(),
            vs.shape()
        )));
    }
    let s = vs.data()[0].f64();
    if !s.is_finite() {
        return Err(Error::Validation("blend scale is not finite".into()));
    }
    let (a, b) = scaled_add_coeffs(s);
    let (da, db) = scaled_add_dcoeffs(s);
    let (ta, tb) = (T::c(a), T::c(b));
    let out = vr.zip_map(&vx, |r, x| ta * r + tb * x)?;
    let s_shape = vs.shape().to_vec();
    Ok(g.push(
        out,
        &[refined, skip, scale],
        Box::new(move |gy| {
            let mut gs = T::zero();
            for ((&gv, &r), &x) in gy.data().iter().zip(vr.data()).zip(vx.data()) {
                gs += gv * (T::c(da) * r + T::c(db) * x);
            }
            vec![
                Some(gy.map(|v| v * ta)),
                Some(gy.map(|v| v * tb)),
                Some(Tensor::new(&s_shape, vec![gs]).unwrap()),
            ]
        }),
    ))
}

/// `Conv1x1(LN(X'))`, one parameter set for both modalities.
pub struct Refine {
    pub norm: LayerNorm,
    pub conv: Conv2d,
}

impl Refine {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let mut conv = Conv2d::new_near_identity(store, &format!("{prefix}.conv"), channels, 1, 0.1, rng);
        conv.bias = Some(store.add_const(format!("{prefix}.conv.bias"), &[channels], 0.0));
        Self {
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), channels, true),
            conv,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let y = self.norm.forward(g, x)?;
        self.conv.forward(g, y)
    }
}

/// How the two streams interact inside a stage.
pub enum Interaction {
    Sawf(Sawf),
    /// The core applied directly to the two stage inputs.
    Core(InteractionCore),
    /// Element-wise addition only; streams pass through untouched.
    Add,
}

pub struct MafOutput {
    pub ir: Var,
    pub rgb: Var,
    pub fused: Var,
}

pub struct MafStage {
    /// 1-based stage index.
    pub stage: usize,
    pub channels: usize,
    pub interaction: Interaction,
    pub refine: Option<Refine>,
    pub scale: Option<ParamId>,
}

impl MafStage {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        stage: usize,
        channels: usize,
        interaction: Interaction,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(1..=NUM_STAGES).contains(&stage) {
            return Err(Error::Config(format!("stage index {stage} outside 1..={NUM_STAGES}")));
        }
        let learnable = !matches!(interaction, Interaction::Add);
        let refine = learnable.then(|| Refine::new(store, &format!("{prefix}.refine"), channels, rng));
        let scale = learnable.then(|| store.add_const(format!("{prefix}.scale"), &[1], SCALE_INIT));
        Ok(Self {
            stage,
            channels,
            interaction,
            refine,
            scale,
        })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, x_ir: Var, x_rgb: Var) -> Result<MafOutput> {
        let x_rgb = match_reference(g, x_ir, x_rgb)?;
        let (ir1, rgb1) = match &self.interaction {
            Interaction::Add => {
                let fused = g.add(x_ir, x_rgb)?;
                return Ok(MafOutput {
                    ir: x_ir,
                    rgb: x_rgb,
                    fused,
                });
            }
            Interaction::Sawf(s) => s.forward(g, x_ir, x_rgb)?,
            Interaction::Core(c) => c.forward(g, x_ir, x_rgb)?,
        };
        let refine = self.refine.as_ref().expect("learnable stage has a refinement");
        let scale = g.param(self.scale.expect("learnable stage has a scale"));
        let ir2 = refine.forward(g, ir1)?;
        let rgb2 = refine.forward(g, rgb1)?;
        let ir = scaled_add_op(g, ir2, x_ir, scale)?;
        let rgb = scaled_add_op(g, rgb2, x_rgb, scale)?;
        let fused = g.add(rgb, ir)?;
        Ok(MafOutput { ir, rgb, fused })
    }
}
