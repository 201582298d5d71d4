//! Cross-attention baseline interaction core: the joint token sequence of
//! both modalities goes through one pre-norm transformer block (single-head
//! self-attention plus MLP). Token plumbing is identical to the CFM core so
//! that the two are interchangeable.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::cfm::{tokens_roundtrip, TOKEN_GRID};
use crate::error::{shape_err, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Real;

pub const MLP_RATIO: usize = 4;

pub struct CrossAttention {
    pub grid: usize,
    pub dim: usize,
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl CrossAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self::with_grid(store, prefix, channels, TOKEN_GRID, rng)
    }

    pub fn with_grid<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        grid: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        let c = channels;
        Self {
            grid,
            dim: c,
            norm1: LayerNorm::new(store, &p("norm1"), c, true),
            q: Linear::new(store, &p("q"), c, c, true, rng),
            k: Linear::new(store, &p("k"), c, c, true, rng),
            v: Linear::new(store, &p("v"), c, c, true, rng),
            proj: Linear::new(store, &p("proj"), c, c, true, rng),
            norm2: LayerNorm::new(store, &p("norm2"), c, true),
            fc1: Linear::new(store, &p("fc1"), c, MLP_RATIO * c, true, rng),
            fc2: Linear::new(store, &p("fc2"), MLP_RATIO * c, c, true, rng),
        }
    }

    /// `tokens: [L, C] -> [L, C]`.
    pub fn block<T: Real>(&self, g: &Graph<T>, tokens: Var) -> Result<Var> {
        let (_, c) = g.value(tokens).rc()?;
        if c != self.dim {
            return shape_err("cross_attention", format!("tokens have {c} channels, block {}", self.dim));
        }
        let u = self.norm1.forward(g, tokens)?;
        let q = self.q.forward(g, u)?;
        let k = self.k.forward(g, u)?;
        let v = self.v.forward(g, u)?;
        let s = g.matmul_nt(q, k)?;
        let s = g.softmax_rows(g.scale(s, T::c(1.0 / (c as f64).sqrt())));
        let a = self.proj.forward(g, g.matmul(s, v)?)?;
        let x = g.add(tokens, a)?;
        let m = self.fc1.forward(g, self.norm2.forward(g, x)?)?;
        let m = self.fc2.forward(g, g.silu(m))?;
        g.add(x, m)
    }

    /// Same contract as [`crate::cfm::Cfm::forward`].
    pub fn forward<T: Real>(&self, g: &Graph<T>, x_ir: Var, x_rgb: Var) -> Result<(Var, Var)> {
        tokens_roundtrip(g, x_ir, x_rgb, self.grid, |t| self.block(g, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let m = CrossAttention::with_grid(&mut store, "xa", 4, 4, &mut rng);
        let g = Graph::with_params(&store);
        let (a, b) = m
            .forward(
                &g,
                g.constant(Tensor::zeros(&[8, 6, 4])),
                g.constant(Tensor::zeros(&[4, 3, 4])),
            )
            .unwrap();
        assert_eq!(g.shape(a), vec![8, 6, 4]);
        assert_eq!(g.shape(b), vec![4, 3, 4]);
        assert!(g.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn both_directions_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let m = CrossAttention::with_grid(&mut store, "xa", 4, 2, &mut rng);
        let ir = Tensor::from_fn(&[2, 2, 4], |_| rng.gen_range(-1.0..1.0));
        let run = |rgb: Tensor<f64>| {
            let g = Graph::with_params(&store);
            let (a, _) = m.forward(&g, g.constant(ir.clone()), g.constant(rgb)).unwrap();
            (*g.value(a)).clone()
        };
        let a1 = run(Tensor::from_fn(&[2, 2, 4], |_| rng.gen_range(-1.0..1.0)));
        let a2 = run(Tensor::from_fn(&[2, 2, 4], |_| rng.gen_range(-1.0..1.0)));
        assert!(a1.max_abs_diff(&a2) > 1e-6);
    }
}
