//! Finite-difference checks of every differentiable graph op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmnet_core::gradcheck::{check_params, GradCheckOptions};
use wmnet_core::{Graph, ParamId, ParamStore, Result, Tensor, Var};

const TOL: f64 = 1e-6;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Builds a store holding `shapes`, then checks `f` reduced through a random
/// projection (so every output element matters).
fn check<F>(shapes: &[&[usize]], f: F)
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), rand_t(&mut rng, s)))
        .collect();
    // probe weights are fixed by a dry run to learn the output shape
    let g0 = Graph::with_params(&store);
    let vars: Vec<Var> = ids.iter().map(|&i| g0.param(i)).collect();
    let out_shape = g0.shape(f(&g0, &vars).unwrap());
    let probe = rand_t(&mut rng, &out_shape);

    let report = check_params(
        &store,
        &ids,
        |g| {
            let vars: Vec<Var> = ids.iter().map(|&i| g.param(i)).collect();
            let y = f(g, &vars)?;
            let p = g.constant(probe.clone());
            let m = g.mul(y, p)?;
            Ok(g.sum(m))
        },
        GradCheckOptions {
            max_entries: 64,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(
        report.passes(TOL),
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn elementwise_ops() {
    check(&[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check(&[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]));
    check(&[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check(&[&[2, 5], &[2, 5], &[2, 5]], |g, v| g.add_n(v));
    check(&[&[6]], |g, v| Ok(g.scale(v[0], 1.7)));
    check(&[&[6]], |g, v| Ok(g.add_scalar(v[0], -0.3)));
    check(&[&[2, 3], &[1]], |g, v| g.mul_scalar_var(v[0], v[1]));
    check(&[&[2, 2, 3], &[3]], |g, v| g.mul_lastdim(v[0], v[1]));
    check(&[&[2, 2, 3], &[3]], |g, v| g.add_lastdim(v[0], v[1]));
    check(&[&[4, 3], &[4]], |g, v| g.mul_rows(v[0], v[1]));
}

#[test]
fn activations() {
    check(&[&[10]], |g, v| Ok(g.sigmoid(v[0])));
    check(&[&[10]], |g, v| Ok(g.silu(v[0])));
    check(&[&[10]], |g, v| Ok(g.softplus(v[0])));
    check(&[&[10]], |g, v| Ok(g.exp(v[0])));
}

#[test]
fn reductions_and_shape_ops() {
    check(&[&[3, 4]], |g, v| Ok(g.mean(v[0])));
    check(&[&[3, 4]], |g, v| Ok(g.sum_squares(v[0])));
    check(&[&[3, 4]], |g, v| g.reshape(v[0], &[4, 3]));
    check(&[&[3, 4, 5]], |g, v| g.slice(v[0], 2, 1, 3));
    check(&[&[3, 4, 5]], |g, v| g.slice(v[0], 0, 1, 2));
    check(&[&[2, 3, 2], &[2, 3, 4]], |g, v| g.concat(v, 2));
    check(&[&[2, 3], &[5, 3]], |g, v| g.concat(v, 0));
    check(&[&[3, 5, 2]], |g, v| g.pad_to_even(v[0]));
    check(&[&[4, 4, 2]], |g, v| g.crop(v[0], 3, 2));
}

#[test]
fn linear_algebra() {
    check(&[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
    check(&[&[3, 4], &[5, 4]], |g, v| g.matmul_nt(v[0], v[1]));
    check(&[&[2, 3, 4], &[4, 5], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check(&[&[6, 4], &[4, 2]], |g, v| g.linear(v[0], v[1], None));
}

#[test]
fn convolution() {
    check(&[&[5, 6, 3], &[3, 3, 3, 4], &[4]], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    });
    check(&[&[6, 6, 2], &[3, 3, 2, 3]], |g, v| g.conv2d(v[0], v[1], None, 2, 1));
    check(&[&[4, 4, 3], &[1, 1, 3, 2]], |g, v| g.conv2d(v[0], v[1], None, 1, 0));
}

#[test]
fn normalisation_and_softmax() {
    check(&[&[3, 5]], |g, v| Ok(g.layer_norm(v[0], 1e-5)));
    check(&[&[3, 5]], |g, v| Ok(g.softmax_rows(v[0])));
}

#[test]
fn resampling() {
    check(&[&[5, 7, 2]], |g, v| g.adaptive_avg_pool(v[0], 3, 4));
    check(&[&[2, 3, 2]], |g, v| g.adaptive_avg_pool(v[0], 4, 5));
    check(&[&[4, 4, 2]], |g, v| g.resize_bilinear(v[0], 7, 3));
    check(&[&[6, 5, 1]], |g, v| g.resize_bilinear(v[0], 2, 3));
}

#[test]
fn wavelet_ops() {
    check(&[&[4, 6, 2]], |g, v| g.dwt2(v[0]));
    check(&[&[3, 5, 2]], |g, v| g.dwt2(v[0]));
    check(&[&[2, 3, 8]], |g, v| g.idwt2(v[0]));
}

#[test]
fn constants_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::full(&[3], 2.0));
    let g = Graph::with_params(&store);
    let x = g.constant(Tensor::full(&[3], 1.5));
    let y = g.mul(x, g.param(w)).unwrap();
    assert!(!g.requires_grad(x));
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), &[1.5, 1.5, 1.5]);
    assert!(grads.get(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(g.backward(x).is_err());
}
