//! Cross-Modality Fusion Mamba: both modalities are pooled to a fixed token
//! grid, concatenated along the sequence axis (infrared first), passed
//! through one selective state-space block and split back.
//!
//! The state-space recurrence is
//!
//! ```text
//! h(t) = A_t h(t-1) + B_t x_t
//! y(t) = C_t . h(t) + D x_t
//! ```
//!
//! with a scalar decay `A_t` per step (single head), `B_t, C_t` in `R^N`
//! shared by every channel, and a per-channel skip `D`. The forward pass
//! uses the chunked (block-decomposed) form; the backward pass runs the
//! adjoint recurrence.

use rand::Rng;

use crate::autograd::{dot, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{FeatureMap, Real, Tensor, TokenSequence};

/// Token grid side length; each modality contributes `GRID * GRID` tokens.
pub const TOKEN_GRID: usize = 16;
/// Block length of the chunked scan. Fixed so results are reproducible.
pub const SCAN_CHUNK: usize = 32;
pub const STATE_DIM: usize = 16;
pub const EXPAND: usize = 2;

/// Per-step parameters of one scan.
#[derive(Clone, Debug)]
pub struct SsdParams<T = f32> {
    /// Decay `A_t`, length `L`.
    pub a: Vec<T>,
    /// Input map `B_t`, `L x N`.
    pub b: Tensor<T>,
    /// Readout `C_t`, `L x N`.
    pub c: Tensor<T>,
    /// Skip `D`, one per channel.
    pub d: Vec<T>,
}

impl<T: Real> SsdParams<T> {
    fn validate(&self, len: usize, dim: usize) -> Result<usize> {
        let (lb, n) = self.b.rc()?;
        let (lc, nc) = self.c.rc()?;
        if self.a.len() != len || lb != len || lc != len || nc != n || self.d.len() != dim {
            return shape_err(
                "ssd_scan",
                format!(
                    "L={len}, dim={dim}: a {}, b {:?}, c {:?}, d {}",
                    self.a.len(),
                    self.b.shape(),
                    self.c.shape(),
                    self.d.len()
                ),
            );
        }
        let finite = self
            .a
            .iter()
            .chain(self.b.data())
            .chain(self.c.data())
            .chain(&self.d)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite scan parameters".into()));
        }
        Ok(n)
    }
}

/// Runs the recurrence over `seq` (`L x E`) from a zero state.
pub fn ssd_scan<T: Real>(seq: &TokenSequence<T>, params: &SsdParams<T>) -> Result<TokenSequence<T>> {
    ssd_scan_chunked(seq, params, SCAN_CHUNK)
}

/// Chunked evaluation with an explicit block length.
pub fn ssd_scan_chunked<T: Real>(
    seq: &TokenSequence<T>,
    params: &SsdParams<T>,
    chunk: usize,
) -> Result<TokenSequence<T>> {
    let (l, e) = seq.rc()?;
    seq.check_finite()?;
    let n = params.validate(l, e)?;
    if chunk == 0 {
        return Err(Error::Validation("scan chunk must be positive".into()));
    }
    let y = scan_chunked(
        seq.data(),
        &params.a,
        params.b.data(),
        params.c.data(),
        &params.d,
        l,
        e,
        n,
        chunk,
    );
    Tensor::new(&[l, e], y)
}

/// Block decomposition: inside a chunk the output is a masked quadratic form
/// `y_t = sum_{s<=t} (C_t . B_s) prod_{r=s+1..t} A_r x_s`; chunks are linked
/// through the carried state.
#[allow(clippy::too_many_arguments)]
fn scan_chunked<T: Real>(
    x: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    l: usize,
    e: usize,
    n: usize,
    chunk: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); l * e];
    // carried state, [E][N]
    let mut h = vec![T::zero(); e * n];
    let mut start = 0;
    while start < l {
        let end = (start + chunk).min(l);
        let mut prefix = T::one();
        for t in start..end {
            prefix *= a[t];
            let ct = &c[t * n..(t + 1) * n];
            let yt = &mut y[t * e..(t + 1) * e];
            if start > 0 {
                for (ei, yv) in yt.iter_mut().enumerate() {
                    *yv += prefix * dot(ct, &h[ei * n..(ei + 1) * n]);
                }
            }
            let mut decay = T::one();
            for s in (start..=t).rev() {
                let gts = dot(ct, &b[s * n..(s + 1) * n]) * decay;
                if gts != T::zero() {
                    for (yv, &xv) in yt.iter_mut().zip(&x[s * e..(s + 1) * e]) {
                        *yv += gts * xv;
                    }
                }
                decay *= a[s];
            }
            for ((yv, &xv), &dv) in yt.iter_mut().zip(&x[t * e..(t + 1) * e]).zip(d) {
                *yv += dv * xv;
            }
        }
        for v in h.iter_mut() {
            *v *= prefix;
        }
        let mut decay = T::one();
        for s in (start..end).rev() {
            let bs = &b[s * n..(s + 1) * n];
            for (ei, &xv) in x[s * e..(s + 1) * e].iter().enumerate() {
                let w = decay * xv;
                for (hv, &bv) in h[ei * n..(ei + 1) * n].iter_mut().zip(bs) {
                    *hv += w * bv;
                }
            }
            decay *= a[s];
        }
        start = end;
    }
    y
}

/// Sequential pass that keeps every state `h_t` (`L x E x N`).
fn scan_states<T: Real>(x: &[T], a: &[T], b: &[T], l: usize, e: usize, n: usize) -> Vec<T> {
    let mut hs = vec![T::zero(); l * e * n];
    for t in 0..l {
        let bt = &b[t * n..(t + 1) * n];
        let (prev, cur) = hs.split_at_mut(t * e * n);
        let cur = &mut cur[..e * n];
        for ei in 0..e {
            let xv = x[t * e + ei];
            for ni in 0..n {
                let p = if t > 0 {
                    prev[(t - 1) * e * n + ei * n + ni]
                } else {
                    T::zero()
                };
                cur[ei * n + ni] = a[t] * p + bt[ni] * xv;
            }
        }
    }
    hs
}

/// Differentiable scan. `x: [L, E]`, `a: [L]`, `b, c: [L, N]`, `d: [E]`.
pub fn ssd_scan_op<T: Real>(g: &Graph<T>, x: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
    let (vx, va, vb, vc, vd) = (g.value(x), g.value(a), g.value(b), g.value(c), g.value(d));
    let (l, e) = vx.rc()?;
    let params = SsdParams {
        a: va.data().to_vec(),
        b: (*vb).clone(),
        c: (*vc).clone(),
        d: vd.data().to_vec(),
    };
    let n = params.validate(l, e)?;
    let y = scan_chunked(vx.data(), va.data(), vb.data(), vc.data(), vd.data(), l, e, n, SCAN_CHUNK);
    let a_shape = va.shape().to_vec();
    let d_shape = vd.shape().to_vec();
    Ok(g.push(
        Tensor::new(&[l, e], y)?,
        &[x, a, b, c, d],
        Box::new(move |gy| {
            let (x, a, b, c, d) = (vx.data(), va.data(), vb.data(), vc.data(), vd.data());
            let gy = gy.data();
            let hs = scan_states(x, a, b, l, e, n);
            let mut gx = vec![T::zero(); l * e];
            let mut ga = vec![T::zero(); l];
            let mut gb = vec![T::zero(); l * n];
            let mut gc = vec![T::zero(); l * n];
            let mut gd = vec![T::zero(); e];
            let mut dh = vec![T::zero(); e * n];
            for t in (0..l).rev() {
                let ht = &hs[t * e * n..(t + 1) * e * n];
                let ct = &c[t * n..(t + 1) * n];
                let bt = &b[t * n..(t + 1) * n];
                for ei in 0..e {
                    let gv = gy[t * e + ei];
                    let xv = x[t * e + ei];
                    gd[ei] += gv * xv;
                    gx[t * e + ei] += gv * d[ei];
                    for ni in 0..n {
                        dh[ei * n + ni] += gv * ct[ni];
                        gc[t * n + ni] += gv * ht[ei * n + ni];
                    }
                }
                let mut acc_a = T::zero();
                for ei in 0..e {
                    let xv = x[t * e + ei];
                    let dhr = &dh[ei * n..(ei + 1) * n];
                    if t > 0 {
                        let hp = &hs[(t - 1) * e * n + ei * n..(t - 1) * e * n + (ei + 1) * n];
                        acc_a += dot(dhr, hp);
                    }
                    gx[t * e + ei] += dot(dhr, bt);
                    for (gbv, &dv) in gb[t * n..(t + 1) * n].iter_mut().zip(dhr) {
                        *gbv += dv * xv;
                    }
                }
                ga[t] = acc_a;
                for v in dh.iter_mut() {
                    *v *= a[t];
                }
            }
            vec![
                Some(Tensor::new(&[l, e], gx).unwrap()),
                Some(Tensor::new(&a_shape, ga).unwrap()),
                Some(Tensor::new(&[l, n], gb).unwrap()),
                Some(Tensor::new(&[l, n], gc).unwrap()),
                Some(Tensor::new(&d_shape, gd).unwrap()),
            ]
        }),
    ))
}

/// Adaptive average pool to `grid x grid`, flattened row-major to tokens.
pub fn pool_to_tokens<T: Real>(x: &FeatureMap<T>, grid: usize) -> Result<TokenSequence<T>> {
    let (_, _, c) = x.hwc()?;
    x.check_finite()?;
    let g = Graph::<T>::new();
    let v = pool_tokens_graph(&g, g.constant(x.clone()), grid)?;
    let t = (*g.value(v)).clone();
    t.reshape(&[grid * grid, c])
}

fn pool_tokens_graph<T: Real>(g: &Graph<T>, x: Var, grid: usize) -> Result<Var> {
    let (_, _, c) = g.value(x).hwc()?;
    let p = g.adaptive_avg_pool(x, grid, grid)?;
    g.reshape(p, &[grid * grid, c])
}

/// One selective state-space block: pre-norm, input projections, scan,
/// SiLU gate, output norm and projection.
pub struct MambaBlock {
    pub dim: usize,
    pub inner: usize,
    pub state: usize,
    pub norm: LayerNorm,
    pub in_x: Linear,
    pub in_z: Linear,
    pub in_b: Linear,
    pub in_c: Linear,
    pub in_dt: Linear,
    /// `A_t = exp(-softplus(a_param) * dt_t)`.
    pub a_param: ParamId,
    pub skip: ParamId,
    pub out_norm: LayerNorm,
    pub out: Linear,
}

impl MambaBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        inner: usize,
        state: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        let in_dt = Linear::new(store, &p("in_dt"), dim, 1, true, rng);
        // softplus(bias) = 0.05
        store.fill(in_dt.bias.unwrap(), (0.05f64.exp() - 1.0).ln());
        Self {
            dim,
            inner,
            state,
            norm: LayerNorm::new(store, &p("norm"), dim, true),
            in_x: Linear::new(store, &p("in_x"), dim, inner, true, rng),
            in_z: Linear::new(store, &p("in_z"), dim, inner, true, rng),
            in_b: Linear::new(store, &p("in_b"), dim, state, true, rng),
            in_c: Linear::new(store, &p("in_c"), dim, state, true, rng),
            in_dt,
            // softplus(a) = 1
            a_param: store.add_const(p("a"), &[1], (1f64.exp() - 1.0).ln()),
            skip: store.add_const(p("d"), &[inner], 1.0),
            out_norm: LayerNorm::new(store, &p("out_norm"), inner, false),
            out: Linear::new(store, &p("out"), inner, dim, true, rng),
        }
    }

    /// `tokens: [L, dim] -> [L, dim]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, tokens: Var) -> Result<Var> {
        let (l, c) = g.value(tokens).rc()?;
        if c != self.dim {
            return shape_err("mamba", format!("tokens have {c} channels, block {}", self.dim));
        }
        let u = self.norm.forward(g, tokens)?;
        let xs = g.silu(self.in_x.forward(g, u)?);
        let z = self.in_z.forward(g, u)?;
        let bm = self.in_b.forward(g, u)?;
        let cm = self.in_c.forward(g, u)?;
        let dt = g.softplus(self.in_dt.forward(g, u)?);
        let dt = g.reshape(dt, &[l])?;
        let rate = g.scale(g.softplus(g.param(self.a_param)), -T::one());
        let a = g.exp(g.mul_scalar_var(dt, rate)?);
        let bbar = g.mul_rows(bm, dt)?;
        let y = ssd_scan_op(g, xs, a, bbar, cm, g.param(self.skip))?;
        let y = g.mul(y, g.silu(z))?;
        let y = self.out_norm.forward(g, y)?;
        self.out.forward(g, y)
    }

    /// The per-step parameters this block would feed to the scan.
    pub fn scan_params<T: Real>(&self, g: &Graph<T>, tokens: Var) -> Result<SsdParams<T>> {
        let (l, _) = g.value(tokens).rc()?;
        let u = self.norm.forward(g, tokens)?;
        let bm = self.in_b.forward(g, u)?;
        let cm = self.in_c.forward(g, u)?;
        let dt = g.softplus(self.in_dt.forward(g, u)?);
        let dt = g.reshape(dt, &[l])?;
        let rate = g.scale(g.softplus(g.param(self.a_param)), -T::one());
        let a = g.exp(g.mul_scalar_var(dt, rate)?);
        let bbar = g.mul_rows(bm, dt)?;
        Ok(SsdParams {
            a: g.value(a).data().to_vec(),
            b: (*g.value(bbar)).clone(),
            c: (*g.value(cm)).clone(),
            d: g.value(g.param(self.skip)).data().to_vec(),
        })
    }

    pub fn num_params<T: Real>(&self, store: &ParamStore<T>, prefix: &str) -> usize {
        store.num_scalars_with_prefix(prefix)
    }
}

/// The fusion core: infrared tokens first, RGB tokens second.
pub struct Cfm {
    pub grid: usize,
    pub block: MambaBlock,
}

impl Cfm {
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
        Self {
            grid,
            block: MambaBlock::new(store, prefix, channels, EXPAND * channels, STATE_DIM, rng),
        }
    }

    /// Zeroes the output projection so that both outputs vanish identically.
    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        self.block.out.zero(store);
    }

    /// Returns `(X_ir', X_rgb')`, each resized back to its input's size.
    pub fn forward<T: Real>(&self, g: &Graph<T>, x_ir: Var, x_rgb: Var) -> Result<(Var, Var)> {
        tokens_roundtrip(g, x_ir, x_rgb, self.grid, |t| self.block.forward(g, t))
    }
}

/// Pools both maps to `grid x grid` tokens, concatenates them (first map
/// first), runs `core` over the joint sequence, splits and bilinearly
/// resizes each half back to its source size.
pub(crate) fn tokens_roundtrip<T: Real>(
    g: &Graph<T>,
    first: Var,
    second: Var,
    grid: usize,
    core: impl FnOnce(Var) -> Result<Var>,
) -> Result<(Var, Var)> {
    let (h1, w1, c1) = g.value(first).hwc()?;
    let (h2, w2, c2) = g.value(second).hwc()?;
    if c1 != c2 {
        return Err(Error::Validation(format!(
            "fusion core inputs differ in channels: {c1} vs {c2}"
        )));
    }
    let t1 = pool_tokens_graph(g, first, grid)?;
    let t2 = pool_tokens_graph(g, second, grid)?;
    let joint = g.concat(&[t1, t2], 0)?;
    let fused = core(joint)?;
    let l = grid * grid;
    let o1 = g.reshape(g.slice(fused, 0, 0, l)?, &[grid, grid, c1])?;
    let o2 = g.reshape(g.slice(fused, 0, l, l)?, &[grid, grid, c1])?;
    Ok((g.resize_bilinear(o1, h1, w1)?, g.resize_bilinear(o2, h2, w2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(v: &[f64]) -> TokenSequence<f64> {
        Tensor::new(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn cumulative_sum_case() {
        let p = SsdParams {
            a: vec![1.0; 3],
            b: Tensor::full(&[3, 1], 1.0),
            c: Tensor::full(&[3, 1], 1.0),
            d: vec![0.0],
        };
        let y = ssd_scan(&seq(&[1.0, 2.0, 3.0]), &p).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 6.0]);
        let y2 = ssd_scan_chunked(&seq(&[1.0, 2.0, 3.0]), &p, 2).unwrap();
        assert_eq!(y2.data(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn zero_decay_is_memoryless() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (l, e, n) = (7, 3, 4);
        let x = Tensor::from_fn(&[l, e], |_| rng.gen_range(-1.0..1.0));
        let p = SsdParams {
            a: vec![0.0; l],
            b: Tensor::from_fn(&[l, n], |_| rng.gen_range(-1.0..1.0)),
            c: Tensor::from_fn(&[l, n], |_| rng.gen_range(-1.0..1.0)),
            d: (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let y = ssd_scan_chunked(&x, &p, 3).unwrap();
        for t in 0..l {
            let cb: f64 = (0..n).map(|i| p.c.data()[t * n + i] * p.b.data()[t * n + i]).sum();
            for ch in 0..e {
                let want = cb * x.data()[t * e + ch] + p.d[ch] * x.data()[t * e + ch];
                assert!((y.data()[t * e + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        let mut p = SsdParams {
            a: vec![f64::NAN; 2],
            b: Tensor::full(&[2, 1], 1.0),
            c: Tensor::full(&[2, 1], 1.0),
            d: vec![0.0],
        };
        assert!(matches!(
            ssd_scan(&seq(&[1.0, 2.0]), &p),
            Err(Error::Validation(_))
        ));
        p.a = vec![0.5; 3];
        assert!(ssd_scan(&seq(&[1.0, 2.0]), &p).is_err());
    }

    #[test]
    fn pooling_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: FeatureMap<f32> = Tensor::from_fn(&[16, 16, 3], |_| rng.gen_range(-1.0..1.0));
        let t = pool_to_tokens(&x, 16).unwrap();
        assert_eq!(t.shape(), &[256, 3]);
        assert_eq!(t.data(), x.data());

        let c = Tensor::full(&[32, 32, 2], 0.25f32);
        let t = pool_to_tokens(&c, 16).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.25));
    }

    fn cfm(seed: u64, c: usize, grid: usize) -> (ParamStore<f64>, Cfm) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = Cfm::with_grid(&mut store, "cfm", c, grid, &mut rng);
        (store, m)
    }

    #[test]
    fn zero_inputs_zero_outputs() {
        let (mut store, m) = cfm(2, 4, 4);
        m.block.out.zero(&mut store);
        let g = Graph::with_params(&store);
        let a = g.constant(Tensor::zeros(&[8, 8, 4]));
        let b = g.constant(Tensor::zeros(&[4, 4, 4]));
        let (oa, ob) = m.forward(&g, a, b).unwrap();
        assert!(g.value(oa).data().iter().all(|&v| v == 0.0));
        assert!(g.value(ob).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shapes_follow_inputs() {
        let (store, m) = cfm(3, 4, TOKEN_GRID);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (h, w) in [(16, 16), (32, 32), (64, 48)] {
            let g = Graph::with_params(&store);
            let a = g.constant(Tensor::from_fn(&[h, w, 4], |_| rng.gen_range(-1.0..1.0)));
            let b = g.constant(Tensor::from_fn(&[h / 2, w / 2, 4], |_| rng.gen_range(-1.0..1.0)));
            let (oa, ob) = m.forward(&g, a, b).unwrap();
            assert_eq!(g.shape(oa), vec![h, w, 4]);
            assert_eq!(g.shape(ob), vec![h / 2, w / 2, 4]);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (store, m) = cfm(5, 4, 4);
        let g = Graph::with_params(&store);
        let a = g.constant(Tensor::zeros(&[4, 4, 4]));
        let b = g.constant(Tensor::zeros(&[4, 4, 3]));
        assert!(m.forward(&g, a, b).is_err());
    }

    #[test]
    fn order_of_modalities_matters() {
        let (store, m) = cfm(6, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xa = Tensor::from_fn(&[4, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let xb = Tensor::from_fn(&[4, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let g = Graph::with_params(&store);
        let (a1, _) = m.forward(&g, g.constant(xa.clone()), g.constant(xb.clone())).unwrap();
        let (_, a2) = m.forward(&g, g.constant(xb), g.constant(xa)).unwrap();
        assert!(g.value(a1).max_abs_diff(&g.value(a2)) > 1e-6);
    }
}
