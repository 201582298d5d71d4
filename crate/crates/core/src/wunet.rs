//! Wavelet U-Net: infrared-guided enhancement of the RGB image.
//!
//! Both images are decomposed `levels` times with the Haar transform. At the
//! bottleneck a frequency-aware attention mixes the two modalities; the
//! decoder then climbs back up, adding the RGB low band of each level and
//! reconstructing with the *infrared* high bands. A scaled 3x3 residual of
//! the RGB input is added at the end.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ChannelScale, Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::{FeatureMap, Real};
use crate::wavelet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WuNetConfig {
    /// Decomposition depth.
    pub levels: usize,
    /// Working channel count (the RGB image's).
    pub channels: usize,
    /// Projection width of the bottleneck attention.
    pub attention_dim: usize,
}

impl Default for WuNetConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            channels: 3,
            attention_dim: 32,
        }
    }
}

impl WuNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Validation("WU-Net needs at least one level".into()));
        }
        if self.channels == 0 || self.attention_dim == 0 {
            return Err(Error::Validation(
                "WU-Net channels and attention width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Side lengths must be multiples of this.
    pub fn granularity(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Debug)]
pub struct PyramidLevel<S> {
    /// Low band, `C` channels.
    pub ll: S,
    /// `[LH | HL | HH]`, `3C` channels.
    pub high: S,
}

/// Level `k` (1-based) is `levels[k - 1]`, at `H/2^k x W/2^k`.
#[derive(Clone, Debug)]
pub struct EncoderPyramid<S> {
    pub levels: Vec<PyramidLevel<S>>,
}

impl<S> EncoderPyramid<S> {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// Repeated analysis of an image; each level's low band feeds the next.
pub fn encode<T: Real>(image: &FeatureMap<T>, cfg: &WuNetConfig) -> Result<EncoderPyramid<FeatureMap<T>>> {
    cfg.validate()?;
    let (h, w, _) = image.hwc()?;
    let m = cfg.granularity();
    if h % m != 0 || w % m != 0 {
        return Err(Error::Validation(format!(
            "{h}x{w} image is not divisible by 2^{}",
            cfg.levels
        )));
    }
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut cur = image.clone();
    for _ in 0..cfg.levels {
        let s = wavelet::dwt2(&cur)?;
        let (ll, high) = wavelet::split_stacked(&wavelet::stack_subbands(&s))?;
        cur = ll.clone();
        levels.push(PyramidLevel { ll, high });
    }
    Ok(EncoderPyramid { levels })
}

/// [`encode`] inside a graph.
pub fn encode_graph<T: Real>(g: &Graph<T>, image: Var, levels: usize) -> Result<EncoderPyramid<Var>> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = image;
    for _ in 0..levels {
        let s = g.dwt2(cur)?;
        let c4 = *g.shape(s).last().unwrap();
        let c = c4 / 4;
        let ll = g.slice(s, 2, 0, c)?;
        let high = g.slice(s, 2, c, 3 * c)?;
        cur = ll;
        out.push(PyramidLevel { ll, high });
    }
    Ok(EncoderPyramid { levels: out })
}

/// Climbs from the bottleneck to full resolution. Step `j` adds the RGB low
/// band of encoder level `n - j + 1` and reconstructs with that level's
/// infrared high bands.
pub fn decode<T: Real>(
    g: &Graph<T>,
    rgb: &EncoderPyramid<Var>,
    ir: &EncoderPyramid<Var>,
    bottleneck: Var,
    levels: usize,
) -> Result<Var> {
    if rgb.depth() != levels || ir.depth() != levels {
        return Err(Error::Validation(format!(
            "pyramid depths rgb={} ir={} do not match {levels} levels",
            rgb.depth(),
            ir.depth()
        )));
    }
    let mut cur = bottleneck;
    for k in (0..levels).rev() {
        let low = g.add(cur, rgb.levels[k].ll)?;
        let stacked = g.concat(&[low, ir.levels[k].high], 2)?;
        cur = g.idwt2(stacked)?;
    }
    Ok(cur)
}

pub struct FaAttentionOutput {
    /// `h x w x C` bottleneck feature.
    pub out: Var,
    /// Fused weights `W_A`, `L x L`.
    pub weights: Var,
    /// Low-frequency softmax, `L x L`.
    pub low_softmax: Var,
    /// High-frequency softmax, `L x L`.
    pub high_softmax: Var,
}

pub struct WuNet {
    pub cfg: WuNetConfig,
    pub q_ll: Linear,
    pub k_ll: Linear,
    pub v_ll: Linear,
    pub q_h: Linear,
    pub k_h: Linear,
    pub norm: LayerNorm,
    pub out: Linear,
    pub conv: Conv2d,
    pub scale: ChannelScale,
}

impl WuNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: WuNetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let d = cfg.attention_dim;
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            cfg,
            q_ll: Linear::new(store, &p("q_ll"), 2 * c, d, false, rng),
            k_ll: Linear::new(store, &p("k_ll"), 2 * c, d, false, rng),
            v_ll: Linear::new(store, &p("v_ll"), 2 * c, d, false, rng),
            q_h: Linear::new(store, &p("q_h"), 6 * c, d, false, rng),
            k_h: Linear::new(store, &p("k_h"), 6 * c, d, false, rng),
            norm: LayerNorm::new(store, &p("norm"), d, true),
            out: Linear::new(store, &p("out"), d, c, true, rng),
            conv: Conv2d::new_near_identity(store, &p("conv"), c, 3, 0.1, rng),
            scale: ChannelScale::new(store, &p("scale"), c, 1.0),
        })
    }

    /// Frequency-aware cross-modal attention at the bottleneck.
    ///
    /// `W_A = softmax(q_LL k_LL^T / sqrt(d)) * (1 + softmax(q_H k_H^T / sqrt(d)))`,
    /// output `Linear(LN(W_A v_LL))`. Tokens are the flattened spatial grid.
    pub fn fa_attention<T: Real>(
        &self,
        g: &Graph<T>,
        ir_ll: Var,
        rgb_ll: Var,
        ir_h: Var,
        rgb_h: Var,
    ) -> Result<FaAttentionOutput> {
        let (h, w, _) = g.value(ir_ll).hwc()?;
        for v in [rgb_ll, ir_h, rgb_h] {
            let (vh, vw, _) = g.value(v).hwc()?;
            if (vh, vw) != (h, w) {
                return Err(Error::Validation(format!(
                    "fa_attention inputs differ spatially: {h}x{w} vs {vh}x{vw}"
                )));
            }
        }
        let l = h * w;
        let f_ll = g.concat(&[ir_ll, rgb_ll], 2)?;
        let f_ll = g.reshape(f_ll, &[l, 2 * self.cfg.channels])?;
        let f_h = g.concat(&[ir_h, rgb_h], 2)?;
        let f_h = g.reshape(f_h, &[l, 6 * self.cfg.channels])?;

        let inv_sqrt_d = T::c(1.0 / (self.cfg.attention_dim as f64).sqrt());
        let q_ll = self.q_ll.forward(g, f_ll)?;
        let k_ll = self.k_ll.forward(g, f_ll)?;
        let v_ll = self.v_ll.forward(g, f_ll)?;
        let q_h = self.q_h.forward(g, f_h)?;
        let k_h = self.k_h.forward(g, f_h)?;

        let s_low = g.matmul_nt(q_ll, k_ll)?;
        let s_low = g.softmax_rows(g.scale(s_low, inv_sqrt_d));
        let s_high = g.matmul_nt(q_h, k_h)?;
        let s_high = g.softmax_rows(g.scale(s_high, inv_sqrt_d));
        let weights = g.mul(s_low, g.add_scalar(s_high, T::one()))?;

        let att = g.matmul(weights, v_ll)?;
        let att = self.norm.forward(g, att)?;
        let out = self.out.forward(g, att)?;
        let out = g.reshape(out, &[h, w, self.cfg.channels])?;
        Ok(FaAttentionOutput {
            out,
            weights,
            low_softmax: s_low,
            high_softmax: s_high,
        })
    }

    /// `Scale(Conv(I_rgb))`.
    pub fn residual<T: Real>(&self, g: &Graph<T>, rgb: Var) -> Result<Var> {
        let c = self.conv.forward(g, rgb)?;
        self.scale.forward(g, c)
    }

    /// Enhanced RGB image, same shape as `rgb`. A one-channel `ir` is
    /// replicated to the working channel count; sizes that are not multiples
    /// of `2^levels` are edge-padded and cropped back.
    pub fn forward<T: Real>(&self, g: &Graph<T>, rgb: Var, ir: Var) -> Result<Var> {
        let (h, w, c) = g.value(rgb).hwc()?;
        let (ih, iw, ic) = g.value(ir).hwc()?;
        if (ih, iw) != (h, w) {
            return Err(Error::Validation(format!(
                "WU-Net inputs must share a working size: rgb {h}x{w}, ir {ih}x{iw}"
            )));
        }
        let ir = if ic == 1 && c > 1 {
            g.concat(&vec![ir; c], 2)?
        } else {
            ir
        };
        let ic = *g.shape(ir).last().unwrap();
        if c != self.cfg.channels || ic != c {
            return Err(Error::Validation(format!(
                "WU-Net expects {} channels, got rgb {c}, ir {ic}",
                self.cfg.channels
            )));
        }

        let m = self.cfg.granularity();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let (rgb_p, ir_p) = if (ph, pw) != (h, w) {
            (pad_edge(g, rgb, ph, pw)?, pad_edge(g, ir, ph, pw)?)
        } else {
            (rgb, ir)
        };

        let n = self.cfg.levels;
        let rgb_pyr = encode_graph(g, rgb_p, n)?;
        let ir_pyr = encode_graph(g, ir_p, n)?;
        let top_rgb = &rgb_pyr.levels[n - 1];
        let top_ir = &ir_pyr.levels[n - 1];
        let att = self.fa_attention(g, top_ir.ll, top_rgb.ll, top_ir.high, top_rgb.high)?;
        let decoded = decode(g, &rgb_pyr, &ir_pyr, att.out, n)?;
        let res = self.residual(g, rgb_p)?;
        let y = g.add(decoded, res)?;
        g.crop(y, h, w)
    }
}

/// Edge-replicating pad to `ph x pw`.
fn pad_edge<T: Real>(g: &Graph<T>, x: Var, ph: usize, pw: usize) -> Result<Var> {
    let (h, w, _) = g.value(x).hwc()?;
    let mut cur = x;
    if ph > h {
        let last = g.slice(cur, 0, h - 1, 1)?;
        let mut parts = vec![cur];
        parts.extend(std::iter::repeat_n(last, ph - h));
        cur = g.concat(&parts, 0)?;
    }
    if pw > w {
        let last = g.slice(cur, 1, w - 1, 1)?;
        let mut parts = vec![cur];
        parts.extend(std::iter::repeat_n(last, pw - w));
        cur = g.concat(&parts, 1)?;
    }
    Ok(cur)
}
