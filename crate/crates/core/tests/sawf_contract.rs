//! Contract tests for the wavelet fusion stage: gate semantics, asymmetry,
//! the enhancer oracle and gradient agreement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmnet_core::cfm::Cfm;
use wmnet_core::gradcheck::{all_ids, check_params, GradCheckOptions};
use wmnet_core::sawf::{enhance_correlated, InteractionCore, Sawf, W1_INIT, W2_INIT};
use wmnet_core::xattn::CrossAttention;
use wmnet_core::{Graph, ParamStore, Tensor};

fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, amp: f64) -> Tensor<f64> {
    Tensor::from_fn(&[h, w, c], |_| rng.gen_range(-amp..amp))
}

fn with_cfm(seed: u64, c: usize, w1: f64, w2: f64) -> (ParamStore<f64>, Sawf, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let core = InteractionCore::Cfm(Cfm::with_grid(&mut store, "s.cfm", c, 4, &mut rng));
    let s = Sawf::new(&mut store, "s", c, core, w1, w2, &mut rng);
    (store, s, rng)
}

fn with_attention(seed: u64, c: usize, w1: f64) -> (ParamStore<f64>, Sawf, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let core = InteractionCore::Attention(CrossAttention::with_grid(&mut store, "s.xa", c, 4, &mut rng));
    let s = Sawf::new(&mut store, "s", c, core, w1, W2_INIT, &mut rng);
    (store, s, rng)
}

fn run(store: &ParamStore<f64>, s: &Sawf, ir: &Tensor<f64>, rgb: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let g = Graph::with_params(store);
    let (a, b) = s.forward(&g, g.constant(ir.clone()), g.constant(rgb.clone())).unwrap();
    
    ((*g.value(a)).clone(), (*g.value(b)).clone())
}

#[test]
fn closed_gate_isolates_infrared_from_rgb() {
    for build in [with_cfm(1, 4, 0.0, W2_INIT), with_attention(2, 4, 0.0)] {
        let (store, s, mut rng) = build;
        let ir = rand_map(&mut rng, 16, 16, 4, 1.0);
        let (a, _) = run(&store, &s, &ir, &rand_map(&mut rng, 16, 16, 4, 1.0));
        for amp in [1e-3, 1.0, 100.0] {
            let (b, _) = run(&store, &s, &ir, &rand_map(&mut rng, 16, 16, 4, amp));
            assert_eq!(a.data(), b.data(), "core {}", s.core.name());
        }
    }
}

#[test]
fn closed_gate_and_silent_core_pass_rgb_through() {
    let (mut store, s, mut rng) = with_cfm(3, 3, 0.0, 1.0);
    s.skip.set_identity(&mut store);
    s.mix.set_identity(&mut store);
    if let InteractionCore::Cfm(c) = &s.core {
        c.zero_output(&mut store);
    }
    let ir = rand_map(&mut rng, 12, 12, 3, 1.0);
    let rgb = rand_map(&mut rng, 12, 12, 3, 1.0);
    let (_, out) = run(&store, &s, &ir, &rgb);
    assert!(out.max_abs_diff(&rgb) <= 1e-6);
}

#[test]
fn enhancer_matches_loop_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w, c) = (3, 4, 2);
    let ll = rand_map(&mut rng, h, w, c, 1.0);
    let hi = rand_map(&mut rng, h, w, 3 * c, 1.0);
    let xr = rand_map(&mut rng, h, w, c, 1.0);
    let g = Graph::<f64>::new();
    let y = enhance_correlated(&g, g.constant(ll.clone()), g.constant(hi.clone()), g.constant(xr.clone()))
        .unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[2 * h, 2 * w, c]);
    let mut worst = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let p = i * w + j;
                let x = xr.data()[p * c + ch];
                let s = ll.data()[p * c + ch] + x;
                let lh = hi.data()[p * 3 * c + ch] + x;
                let hl = hi.data()[p * 3 * c + c + ch] + x;
                let hh = hi.data()[p * 3 * c + 2 * c + ch] + x;
                // inverse orthonormal Haar on one block
                let block = [
                    (s + lh + hl + hh) / 2.0,
                    (s + lh - hl - hh) / 2.0,
                    (s - lh + hl - hh) / 2.0,
                    (s - lh - hl + hh) / 2.0,
                ];
                for (k, want) in block.iter().enumerate() {
                    let (r, q) = (2 * i + k / 2, 2 * j + k % 2);
                    let got = y.data()[(r * 2 * w + q) * c + ch];
                    worst = worst.max((got - want).abs());
                }
            }
        }
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn gradients_agree_for_every_parameter() {
    let (store, s, mut rng) = with_cfm(5, 2, W1_INIT, W2_INIT);
    let ir = rand_map(&mut rng, 8, 8, 2, 1.0);
    let rgb = rand_map(&mut rng, 8, 8, 2, 1.0);
    let probe_a = rand_map(&mut rng, 8, 8, 2, 1.0);
    let probe_b = rand_map(&mut rng, 8, 8, 2, 1.0);
    let report = check_params(
        &store,
        &all_ids(&store),
        |g| {
            let (a, b) = s.forward(g, g.constant(ir.clone()), g.constant(rgb.clone()))?;
            let la = g.sum(g.mul(a, g.constant(probe_a.clone()))?);
            let lb = g.sum(g.mul(b, g.constant(probe_b.clone()))?);
            g.add(la, lb)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-3), "{:?}", report.worst);
}

#[test]
fn both_gates_receive_gradient() {
    let (store, s, mut rng) = with_cfm(6, 2, W1_INIT, W2_INIT);
    let ir = rand_map(&mut rng, 8, 8, 2, 1.0);
    let rgb = rand_map(&mut rng, 8, 8, 2, 1.0);
    let g = Graph::with_params(&store);
    let (a, b) = s.forward(&g, g.constant(ir), g.constant(rgb)).unwrap();
    let loss = g.add(g.sum_squares(a), g.sum_squares(b)).unwrap();
    let grads = g.backward(loss).unwrap();
    for gate in [s.w1.weight, s.w2.weight] {
        let gr = grads.param(gate).expect("gate gradient");
        assert!(gr.data().iter().all(|v| v.abs() > 0.0), "{}", store.name(gate));
    }
}
