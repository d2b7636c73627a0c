//! Analytic backward passes of the primitives and the attention layers
//! against central finite differences.

use emim::attention::{
    emim_backward, emim_forward, emim_forward_saved, Boundary, EmimConfig, EmimParams, Sampling, TokenVolume, VolumeDims,
};
use emim::tensor::{
    gelu_backward, gelu_tensor, layernorm_rows, layernorm_rows_backward, linear_backward, linear_forward, matmul,
    matmul_backward, softmax_backward, softmax_row, LinearParams, Tensor,
};
use emim::verify::{finite_diff_grad, ParamCheck, DEFAULT_STEP};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-6;
const LAYER_TOL: f64 = 1e-5;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn assert_close(name: &str, analytic: &Tensor, numeric: &Tensor, tol: f64) {
    let c = ParamCheck::compare(name, analytic, numeric, tol);
    assert!(c.passed, "{c:?}");
}

#[test]
fn matmul_both_operands() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let r = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let (da, db) = matmul_backward(&a, &b, &r).unwrap();
        let na = finite_diff_grad(|x| dot(&matmul(x, &b).unwrap(), &r), &a, DEFAULT_STEP).unwrap();
        let nb = finite_diff_grad(|x| dot(&matmul(&a, x).unwrap(), &r), &b, DEFAULT_STEP).unwrap();
        assert_close("matmul.a", &da, &na, PRIMITIVE_TOL);
        assert_close("matmul.b", &db, &nb, PRIMITIVE_TOL);
    }
}

#[test]
fn softmax_row_vjp() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[9], 2.0, &mut rng);
        let r = Tensor::randn(&[9], 1.0, &mut rng);
        let y = softmax_row(x.data()).unwrap();
        let dx = Tensor::new(vec![9], softmax_backward(&y, r.data()).unwrap()).unwrap();
        let loss = |t: &Tensor| softmax_row(t.data()).unwrap().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        assert_close("softmax", &dx, &finite_diff_grad(loss, &x, DEFAULT_STEP).unwrap(), PRIMITIVE_TOL);
    }
}

#[test]
fn gelu_vjp() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[4, 8], 1.5, &mut rng);
    let r = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let dx = gelu_backward(&x, &r).unwrap();
    let nx = finite_diff_grad(|t| dot(&gelu_tensor(t), &r), &x, DEFAULT_STEP).unwrap();
    assert_close("gelu", &dx, &nx, PRIMITIVE_TOL);
}

#[test]
fn layernorm_input_and_affine() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let g = Tensor::randn(&[6], 1.0, &mut rng);
        let b = Tensor::randn(&[6], 1.0, &mut rng);
        let r = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let (dx, dg, db) = layernorm_rows_backward(&x, &g, &r).unwrap();
        let f = |x: &Tensor, g: &Tensor, b: &Tensor| dot(&layernorm_rows(x, g, b).unwrap(), &r);
        assert_close("ln.x", &dx, &finite_diff_grad(|t| f(t, &g, &b), &x, DEFAULT_STEP).unwrap(), PRIMITIVE_TOL);
        assert_close("ln.gamma", &dg, &finite_diff_grad(|t| f(&x, t, &b), &g, DEFAULT_STEP).unwrap(), PRIMITIVE_TOL);
        assert_close("ln.beta", &db, &finite_diff_grad(|t| f(&x, &g, t), &b, DEFAULT_STEP).unwrap(), PRIMITIVE_TOL);
    }
}

#[test]
fn linear_input_weight_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(&[5, 7], 1.0, &mut rng);
    let p = LinearParams::init(7, 3, &mut rng);
    let r = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let (dx, g) = linear_backward(&x, &p, &r).unwrap();
    let nx = finite_diff_grad(|t| dot(&linear_forward(t, &p).unwrap(), &r), &x, DEFAULT_STEP).unwrap();
    let nw = finite_diff_grad(
        |w| dot(&linear_forward(&x, &LinearParams::new(w.clone(), p.bias.clone()).unwrap()).unwrap(), &r),
        &p.weight,
        DEFAULT_STEP,
    )
    .unwrap();
    let nb = finite_diff_grad(
        |b| dot(&linear_forward(&x, &LinearParams::new(p.weight.clone(), b.clone()).unwrap()).unwrap(), &r),
        &p.bias,
        DEFAULT_STEP,
    )
    .unwrap();
    assert_close("linear.x", &dx, &nx, PRIMITIVE_TOL);
    assert_close("linear.weight", &g.weight, &nw, PRIMITIVE_TOL);
    assert_close("linear.bias", &g.bias, &nb, PRIMITIVE_TOL);
}

#[test]
fn windowed_layer_input_gradient_under_sum_loss() {
    let dims = VolumeDims { frames: 3, height: 4, width: 4, channels: 4 };
    for (seed, sampling, boundary) in [
        (0, Sampling::Sliding, Boundary::PadConstant),
        (1, Sampling::NonSliding, Boundary::PadConstant),
        (2, Sampling::Sliding, Boundary::ClampEdge),
    ] {
        let cfg = EmimConfig { radius: 1, heads: 2, sampling, boundary, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&dims.shape(), 1.0, &mut rng);
        let p = EmimParams::init(dims.channels, &cfg, &mut rng);
        let vol = TokenVolume::from_tensor(x.clone()).unwrap();
        let (out, tape) = emim_forward_saved(&vol, &p, &cfg).unwrap();
        let ones = TokenVolume::from_tensor(Tensor::filled(out.tensor().shape(), 1.0)).unwrap();
        let (dx, _) = emim_backward(&ones, &tape, &p, &cfg).unwrap();
        let loss = |t: &Tensor| emim_forward(&TokenVolume::from_tensor(t.clone()).unwrap(), &p, &cfg).unwrap().tensor().sum();
        let nx = finite_diff_grad(loss, &x, DEFAULT_STEP).unwrap();
        assert_close("emim.x", dx.tensor(), &nx, LAYER_TOL);
    }
}
