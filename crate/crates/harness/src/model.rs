//! Dual-stream detector: optional WU-Net enhancement of the RGB image, two
//! four-stage conv backbones (shared architecture, separate weights), one
//! fusion stage per backbone stage, and a centre-heatmap head on the fused
//! maps of stages 2-4.

use rand::Rng;
use wmnet_core::autograd::{Graph, Var};
use wmnet_core::cfm::{Cfm, TOKEN_GRID};
use wmnet_core::maf::{Interaction, MafStage, NUM_STAGES};
use wmnet_core::nn::Conv2d;
use wmnet_core::params::ParamStore;
use wmnet_core::sawf::{InteractionCore, Sawf};
use wmnet_core::tensor::Real;
use wmnet_core::wunet::{WuNet, WuNetConfig};
use wmnet_core::xattn::CrossAttention;

use crate::config::{ExperimentConfig, ModelFlags};
use crate::error::{Error, Result};

/// Heatmap classes, then `(log w, log h)`, then the sub-cell offset.
pub const HEAD_CHANNELS: usize = 3 + 2 + 2;
/// Output stride of the head (the stage-2 map).
pub const HEAD_STRIDE: usize = 4;
pub const HEAD_WIDTH: usize = 32;
/// Initial heatmap bias: sigmoid(-2.19) ~ 0.1.
pub const HEAT_PRIOR_BIAS: f64 = -2.19;
pub const WUNET_ATTENTION_DIM: usize = 16;

/// `stride-2 conv3x3 + SiLU, conv3x3 + SiLU`.
pub struct BackboneStage {
    pub down: Conv2d,
    pub conv: Conv2d,
}

impl BackboneStage {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            down: Conv2d::new(store, &format!("{prefix}.down"), cin, cout, 3, 2, true, rng),
            conv: Conv2d::new(store, &format!("{prefix}.conv"), cout, cout, 3, 1, true, rng),
        }
    }

    fn forward<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let y = g.silu(self.down.forward(g, x)?);
        Ok(g.silu(self.conv.forward(g, y)?))
    }
}

pub struct Detector {
    pub flags: ModelFlags,
    pub widths: [usize; 4],
    pub canvas: usize,
    pub wunet: Option<WuNet>,
    pub ir_stages: Vec<BackboneStage>,
    pub rgb_stages: Vec<BackboneStage>,
    pub fusion: Vec<MafStage>,
    pub head_conv: Conv2d,
    pub head_out: Conv2d,
}

/// Interaction of one fusion stage for the given flags.
pub fn build_interaction<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    flags: ModelFlags,
    channels: usize,
    grid: usize,
    w1: f64,
    w2: f64,
    rng: &mut impl Rng,
) -> Result<Interaction> {
    flags.validate()?;
    let cfm = |store: &mut ParamStore<T>, rng: &mut _| {
        InteractionCore::Cfm(Cfm::with_grid(store, &format!("{prefix}.cfm"), channels, grid, rng))
    };
    let attn = |store: &mut ParamStore<T>, rng: &mut _| {
        InteractionCore::Attention(CrossAttention::with_grid(store, &format!("{prefix}.attn"), channels, grid, rng))
    };
    Ok(match (flags.sawf, flags.cfm) {
        (true, with_cfm) => {
            let core = if with_cfm { cfm(store, rng) } else { attn(store, rng) };
            Interaction::Sawf(Sawf::new(store, &format!("{prefix}.sawf"), channels, core, w1, w2, rng))
        }
        (false, true) => Interaction::Core(cfm(store, rng)),
        (false, false) if flags.attention_core => Interaction::Core(attn(store, rng)),
        (false, false) => Interaction::Add,
    })
}

impl Detector {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ExperimentConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let canvas = cfg.data.canvas;
        let wunet = if cfg.flags.wunet {
            let wc = WuNetConfig {
                levels: 2,
                channels: 3,
                attention_dim: WUNET_ATTENTION_DIM,
            };
            Some(WuNet::new(store, "wunet", wc, rng)?)
        } else {
            None
        };
        let mut ir_stages = Vec::new();
        let mut rgb_stages = Vec::new();
        let mut fusion = Vec::new();
        let (mut cin_ir, mut cin_rgb) = (1, 3);
        for (i, &w) in cfg.widths.iter().enumerate() {
            ir_stages.push(BackboneStage::new(store, &format!("ir.stage{}", i + 1), cin_ir, w, rng));
            rgb_stages.push(BackboneStage::new(store, &format!("rgb.stage{}", i + 1), cin_rgb, w, rng));
            let size = canvas >> (i + 1);
            let grid = TOKEN_GRID.min(size);
            let prefix = format!("maf{}", i + 1);
            let inter = build_interaction(store, &prefix, cfg.flags, w, grid, cfg.w1, cfg.w2, rng)?;
            fusion.push(MafStage::new(store, &prefix, i + 1, w, inter, rng)?);
            (cin_ir, cin_rgb) = (w, w);
        }
        let head_in = cfg.widths[1..].iter().sum();
        let head_conv = Conv2d::new(store, "head.conv", head_in, HEAD_WIDTH, 3, 1, true, rng);
        let head_out = Conv2d::new(store, "head.out", HEAD_WIDTH, HEAD_CHANNELS, 1, 1, true, rng);
        let bias = head_out.bias.expect("head has a bias");
        let b = store.get_mut(bias);
        for v in &mut b.data_mut()[..3] {
            *v = T::c(HEAT_PRIOR_BIAS);
        }
        Ok(Self {
            flags: cfg.flags,
            widths: cfg.widths,
            canvas,
            wunet,
            ir_stages,
            rgb_stages,
            fusion,
            head_conv,
            head_out,
        })
    }

    /// Fused maps of all four stages.
    pub fn fused_features<T: Real>(&self, g: &Graph<T>, rgb: Var, ir: Var) -> Result<Vec<Var>> {
        let (h, w, c) = g.value(rgb).hwc()?;
        let (ih, iw, ic) = g.value(ir).hwc()?;
        if c != 3 || ic != 1 || (h, w) != (ih, iw) || h != self.canvas || w != self.canvas {
            return Err(Error::Config(format!(
                "detector built for {0}x{0} rgb/ir pairs, got {h}x{w}x{c} and {ih}x{iw}x{ic}",
                self.canvas
            )));
        }
        let mut x_rgb = match &self.wunet {
            Some(wu) => wu.forward(g, rgb, ir)?,
            None => rgb,
        };
        let mut x_ir = ir;
        let mut fused = Vec::with_capacity(NUM_STAGES);
        for ((si, sr), maf) in self.ir_stages.iter().zip(&self.rgb_stages).zip(&self.fusion) {
            let a = si.forward(g, x_ir)?;
            let b = sr.forward(g, x_rgb)?;
            let out = maf.forward(g, a, b)?;
            x_ir = out.ir;
            x_rgb = out.rgb;
            fused.push(out.fused);
        }
        Ok(fused)
    }

    /// Raw head map, `canvas/4 x canvas/4 x HEAD_CHANNELS`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, rgb: Var, ir: Var) -> Result<Var> {
        let f = self.fused_features(g, rgb, ir)?;
        let (h, w, _) = g.value(f[1]).hwc()?;
        let up3 = g.resize_bilinear(f[2], h, w)?;
        let up4 = g.resize_bilinear(f[3], h, w)?;
        let x = g.concat(&[f[1], up3, up4], 2)?;
        let x = g.silu(self.head_conv.forward(g, x)?);
        Ok(self.head_out.forward(g, x)?)
    }
}

/// Parameters of one interaction core at `channels`, on its own.
pub fn core_param_count(channels: usize, cfm: bool) -> usize {
    let mut store = ParamStore::<f32>::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    if cfm {
        Cfm::new(&mut store, "core", channels, &mut rng);
    } else {
        CrossAttention::new(&mut store, "core", channels, &mut rng);
    }
    store.num_scalars()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use wmnet_core::tensor::Tensor;

    fn cfg(flags: ModelFlags) -> ExperimentConfig {
        ExperimentConfig {
            flags,
            ..Default::default()
        }
    }

    #[test]
    fn head_receives_three_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let d = Detector::new(&mut store, &cfg(ModelFlags::ALL_ON), &mut rng).unwrap();
        let g = Graph::with_params(&store);
        let rgb = g.constant(Tensor::full(&[64, 64, 3], 0.5));
        let ir = g.constant(Tensor::full(&[64, 64, 1], 0.2));
        let f = d.fused_features(&g, rgb, ir).unwrap();
        let sizes: Vec<Vec<usize>> = f[1..].iter().map(|&v| g.shape(v)).collect();
        assert_eq!(sizes, vec![vec![16, 16, 16], vec![8, 8, 24], vec![4, 4, 32]]);
        let out = d.forward(&g, rgb, ir).unwrap();
        assert_eq!(g.shape(out), vec![16, 16, HEAD_CHANNELS]);
    }

    #[test]
    fn all_off_is_plain_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let d = Detector::new(&mut store, &cfg(ModelFlags::ALL_OFF), &mut rng).unwrap();
        assert!(d.wunet.is_none());
        assert!(d.fusion.iter().all(|m| matches!(m.interaction, Interaction::Add)));
        assert_eq!(store.num_scalars_with_prefix("maf"), 0);
    }

    #[test]
    fn contradictory_flags_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let mut c = cfg(ModelFlags::new(false, true, false));
        c.flags.attention_core = false;
        assert!(Detector::new(&mut store, &c, &mut rng).is_err());
    }

    #[test]
    fn wrong_input_size_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let d = Detector::new(&mut store, &cfg(ModelFlags::ALL_OFF), &mut rng).unwrap();
        let g = Graph::with_params(&store);
        let rgb = g.constant(Tensor::zeros(&[32, 32, 3]));
        let ir = g.constant(Tensor::zeros(&[32, 32, 1]));
        assert!(d.forward(&g, rgb, ir).is_err());
    }
}
