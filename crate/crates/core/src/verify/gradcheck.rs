//! Central finite differences against analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    emim_backward, emim_forward_saved, global_attention_backward, global_attention_forward_saved, Boundary, EmimConfig,
    EmimParams, GlobalParams, RelPosBias, Sampling, TokenVolume, VolumeDims,
};
use crate::block::{build_stack, AttentionParams, BlockPattern, Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-5;
/// Coordinates whose `|analytic| + |numeric|` is at or below this are not checked.
pub const NEGLIGIBLE: f64 = 1e-12;

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::State(format!("non-finite evaluation at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + NEGLIGIBLE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

impl ParamCheck {
    pub fn compare(name: &str, analytic: &Tensor, numeric: &Tensor, tolerance: f64) -> Self {
        let mut out = Self {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            passed: true,
        };
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            out.max_abs_err = out.max_abs_err.max((a - n).abs());
            if a.abs() + n.abs() > NEGLIGIBLE {
                out.checked += 1;
                out.max_rel_err = out.max_rel_err.max(relative_error(a, n));
            }
        }
        out.passed = out.max_rel_err < tolerance;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub target: String,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_err).fold(0.0, f64::max)
    }
}

/// Checks every tensor of `params` against `analytic`, perturbing one
/// coordinate at a time.
pub fn check_parameters<P: Parameters + Clone>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
    step: f64,
    tolerance: f64,
) -> Result<Vec<ParamCheck>> {
    let shapes = params.named_shapes();
    let grads = analytic.flat_tensors();
    if grads.len() != shapes.len() {
        return Err(Error::State("gradient structure differs from parameters".into()));
    }
    let mut out = Vec::with_capacity(shapes.len());
    for (idx, ((name, _), analytic)) in shapes.iter().zip(&grads).enumerate() {
        let current = params.flat_tensors().swap_remove(idx);
        let numeric = finite_diff_grad(
            |t| {
                let mut p = params.clone();
                let mut i = 0;
                p.visit_mut("", &mut |_, dst| {
                    if i == idx {
                        dst.data_mut().copy_from_slice(t.data());
                    }
                    i += 1;
                });
                loss(&p)
            },
            &current,
            step,
        )?;
        out.push(ParamCheck::compare(name, analytic, &numeric, tolerance));
    }
    Ok(out)
}

fn weighted_sum(out: &[f64], weights: &Tensor) -> f64 {
    out.iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

fn random_volume(dims: VolumeDims, rng: &mut ChaCha8Rng) -> TokenVolume {
    TokenVolume::from_tensor(Tensor::randn(&dims.shape(), 1.0, rng)).expect("dims are positive")
}

/// Small setting shared by the attention checks: `T=2`, `4×4`, `d=8`.
pub fn grad_dims() -> VolumeDims {
    VolumeDims { frames: 2, height: 4, width: 4, channels: 8 }
}

/// Windowed layer alone under `Σ out·R`, for the given sampling and boundary.
pub fn check_emim(seed: u64, cfg: &EmimConfig, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = grad_dims();
    let x = random_volume(dims, &mut rng);
    let mut params = EmimParams::init(dims.channels, cfg, &mut rng);
    let side = cfg.window_side();
    params.rel_bias = RelPosBias::from_table(Tensor::randn(&[cfg.heads, side, side], 0.5, &mut rng))?;
    params.motion.iter_mut().for_each(|m| {
        m.fc1.bias = Tensor::randn(m.fc1.bias.shape(), 0.1, &mut rng);
        m.fc2.bias = Tensor::randn(m.fc2.bias.shape(), 0.1, &mut rng);
    });
    let r = Tensor::randn(&dims.shape(), 1.0, &mut rng);
    let upstream = TokenVolume::from_tensor(r.clone())?;

    let (_, tape) = emim_forward_saved(&x, &params, cfg)?;
    let (dx, grads) = emim_backward(&upstream, &tape, &params, cfg)?;
    let loss = |x: &TokenVolume, p: &EmimParams| -> f64 {
        emim_forward_saved(x, p, cfg).map_or(f64::NAN, |(o, _)| weighted_sum(o.data(), &r))
    };
    let mut checks = check_parameters(&params, &grads, |p| loss(&x, p), DEFAULT_STEP, tolerance)?;
    let numeric_dx = finite_diff_grad(|t| loss(&TokenVolume::from_tensor(t.clone()).unwrap(), &params), x.tensor(), DEFAULT_STEP)?;
    checks.push(ParamCheck::compare("input", dx.tensor(), &numeric_dx, tolerance));
    Ok(GradCheckReport {
        target: format!("emim sampling={} boundary={}", cfg.sampling, cfg.boundary),
        tolerance,
        params: checks,
    })
}

pub fn check_global(seed: u64, heads: usize, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = grad_dims();
    let x = random_volume(dims, &mut rng);
    let params = GlobalParams::init(dims.channels, &mut rng);
    let r = Tensor::randn(&dims.shape(), 1.0, &mut rng);
    let upstream = TokenVolume::from_tensor(r.clone())?;
    let (_, tape) = global_attention_forward_saved(&x, &params, heads)?;
    let (dx, grads) = global_attention_backward(&upstream, &tape, &params)?;
    let loss = |x: &TokenVolume, p: &GlobalParams| -> f64 {
        global_attention_forward_saved(x, p, heads).map_or(f64::NAN, |(o, _)| weighted_sum(o.data(), &r))
    };
    let mut checks = check_parameters(&params, &grads, |p| loss(&x, p), DEFAULT_STEP, tolerance)?;
    let numeric_dx = finite_diff_grad(|t| loss(&TokenVolume::from_tensor(t.clone()).unwrap(), &params), x.tensor(), DEFAULT_STEP)?;
    checks.push(ParamCheck::compare("input", dx.tensor(), &numeric_dx, tolerance));
    Ok(GradCheckReport {
        target: format!("global heads={heads}"),
        tolerance,
        params: checks,
    })
}

/// Depth-2 E-O classifier over a `T=2`, `4×4` single-channel clip with `d=8`.
pub fn grad_model(seed: u64) -> Result<(Model, Tensor)> {
    let cfg = ModelConfig {
        depth: 2,
        channels: 8,
        emim: EmimConfig { radius: 1, heads: 2, ..Default::default() },
        pattern: BlockPattern::default(),
        num_classes: 3,
        ..Default::default()
    };
    let mut model = build_stack(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // unit-scale attention weights; the training gains shrink some
    // gradients toward the finite-difference noise floor
    for b in model.params.blocks.iter_mut() {
        if let AttentionParams::Emim(p) = &mut b.attn {
            *p = EmimParams::init(cfg.channels, &cfg.emim, &mut rng);
        }
    }
    model.params.head = crate::tensor::LinearParams::init(cfg.channels, cfg.num_classes, &mut rng);
    model.params.visit_mut("", &mut |name, t| {
        if name.ends_with("bias") || name.ends_with("beta") {
            *t = Tensor::randn(t.shape(), 0.1, &mut rng);
        } else if name.ends_with("gamma") {
            *t = t.map(|g| g + 0.1);
        }
    });
    let clip = Tensor::randn(&[2, 4, 4, 1], 1.0, &mut rng);
    Ok((model, clip))
}

pub fn check_model(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let (model, clip) = grad_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ce);
    let r = Tensor::randn(&[model.config.num_classes], 1.0, &mut rng);
    let (_, tape) = model.forward_saved(&clip)?;
    let grads = model.backward(&r, &tape)?;
    let config = model.config.clone();
    let loss = |p: &ModelParams| -> f64 {
        let m = Model { config: config.clone(), params: p.clone() };
        m.forward(&clip).map_or(f64::NAN, |l| weighted_sum(l.data(), &r))
    };
    let checks = check_parameters(&model.params, &grads, loss, DEFAULT_STEP, tolerance)?;
    Ok(GradCheckReport {
        target: "model E-O depth=2".into(),
        tolerance,
        params: checks,
    })
}

/// Every gradient target of the `grad` suite.
pub fn grad_suite(seed: u64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (sampling, boundary) in [
        (Sampling::Sliding, Boundary::PadConstant),
        (Sampling::Sliding, Boundary::ClampEdge),
        (Sampling::NonSliding, Boundary::PadConstant),
    ] {
        let cfg = EmimConfig { radius: 1, heads: 2, sampling, boundary, ..Default::default() };
        reports.push(check_emim(seed, &cfg, tolerance)?);
    }
    reports.push(check_global(seed, 2, tolerance)?);
    reports.push(check_model(seed, tolerance)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let g = finite_diff_grad(|t| t.sum(), &x, DEFAULT_STEP).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn half_square_norm_has_gradient_x() {
        let x = Tensor::from_fn(&[4], |i| 0.3 * i as f64 - 0.5);
        let g = finite_diff_grad(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &x, DEFAULT_STEP).unwrap();
        assert!(g.max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn non_finite_evaluation_names_the_coordinate() {
        let x = Tensor::zeros(&[3]);
        let err = finite_diff_grad(|t| if t.data()[2] != 0.0 { f64::NAN } else { 0.0 }, &x, DEFAULT_STEP).unwrap_err();
        assert!(err.to_string().contains("coordinate 2"));
    }

    #[test]
    fn negligible_coordinates_are_skipped() {
        let a = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let n = Tensor::new(vec![2], vec![1e-13, 1.0 + 1e-9]).unwrap();
        let c = ParamCheck::compare("t", &a, &n, 1e-5);
        assert_eq!(c.checked, 1);
        assert!(c.passed);
    }

    #[test]
    fn emim_layer_gradients() {
        let cfg = EmimConfig { radius: 1, heads: 2, ..Default::default() };
        let r = check_emim(3, &cfg, DEFAULT_GRAD_TOLERANCE).unwrap();
        assert!(r.passed(), "{r:#?}");
    }
}
