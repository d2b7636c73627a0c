//! Pre-norm transformer block: `y = z + SA(LN(z))`, `out = y + FFN(LN(y))`.

use rand::Rng;

use super::BlockKind;
use crate::attention::{
    emim_backward, emim_forward_saved, global_attention_backward, global_attention_forward_saved, EmimConfig,
    EmimParams, EmimTape, GlobalParams, GlobalTape, TokenVolume,
};
use crate::error::{Error, Result, ResultExt};
use crate::params::{join, Parameters};
use crate::tensor::{
    gelu_backward, gelu_tensor, layernorm_rows, layernorm_rows_backward, linear_backward, linear_forward, LinearParams,
    Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl NormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }
}

impl Parameters for NormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl FfnParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, expansion: usize, rng: &mut R) -> Self {
        Self {
            fc1: LinearParams::init(channels, channels * expansion, rng),
            fc2: LinearParams::init(channels * expansion, channels, rng),
        }
    }
}

impl Parameters for FfnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionParams {
    Original(GlobalParams),
    Emim(EmimParams),
}

impl AttentionParams {
    pub fn kind(&self) -> BlockKind {
        match self {
            AttentionParams::Original(_) => BlockKind::Original,
            AttentionParams::Emim(_) => BlockKind::Emim,
        }
    }

    /// The output projection, the last linear map of either attention kind.
    pub fn output_projection_mut(&mut self) -> &mut LinearParams {
        match self {
            AttentionParams::Original(p) => &mut p.o,
            AttentionParams::Emim(p) => &mut p.o,
        }
    }
}

impl Parameters for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            AttentionParams::Original(p) => p.visit(prefix, f),
            AttentionParams::Emim(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            AttentionParams::Original(p) => p.visit_mut(prefix, f),
            AttentionParams::Emim(p) => p.visit_mut(prefix, f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(kind: BlockKind, channels: usize, expansion: usize, cfg: &EmimConfig, rng: &mut R) -> Self {
        let attn = match kind {
            BlockKind::Original => AttentionParams::Original(GlobalParams::init(channels, rng)),
            BlockKind::Emim => AttentionParams::Emim(EmimParams::init(channels, cfg, rng)),
        };
        Self {
            norm1: NormParams::new(channels),
            attn,
            norm2: NormParams::new(channels),
            ffn: FfnParams::init(channels, expansion, rng),
        }
    }

    pub fn kind(&self) -> BlockKind {
        self.attn.kind()
    }
}

impl Parameters for BlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

enum AttnTape {
    Original(GlobalTape),
    Emim(EmimTape),
}

struct Saved {
    z: TokenVolume,
    normed1: TokenVolume,
    attn: AttnTape,
    y: TokenVolume,
    normed2: Tensor,
    hidden: Tensor,
    activated: Tensor,
}

#[derive(Default)]
pub struct BlockTape(Option<Box<Saved>>);

fn norm(x: &TokenVolume, p: &NormParams) -> Result<TokenVolume> {
    TokenVolume::from_tensor(layernorm_rows(x.tensor(), &p.gamma, &p.beta)?)
}

fn forward_impl(z: &TokenVolume, kind: BlockKind, params: &BlockParams, cfg: &EmimConfig) -> Result<(TokenVolume, Saved)> {
    if params.kind() != kind {
        return Err(Error::config(format!(
            "block kind {} does not match {} parameters",
            kind.letter(),
            params.kind().letter()
        )));
    }
    let normed1 = norm(z, &params.norm1)?;
    let (attn_out, attn) = match &params.attn {
        AttentionParams::Original(p) => {
            let (o, t) = global_attention_forward_saved(&normed1, p, cfg.heads)?;
            (o, AttnTape::Original(t))
        }
        AttentionParams::Emim(p) => {
            let (o, t) = emim_forward_saved(&normed1, p, cfg)?;
            (o, AttnTape::Emim(t))
        }
    };
    let y = TokenVolume::from_tensor(z.tensor().add(attn_out.tensor())?)?;
    let normed2 = layernorm_rows(y.tensor(), &params.norm2.gamma, &params.norm2.beta)?;
    let hidden = linear_forward(&normed2, &params.ffn.fc1)?;
    let activated = gelu_tensor(&hidden);
    let ffn_out = linear_forward(&activated, &params.ffn.fc2)?;
    let out = TokenVolume::from_tensor(y.tensor().add(&ffn_out)?)?;
    Ok((
        out,
        Saved {
            z: z.clone(),
            normed1,
            attn,
            y,
            normed2,
            hidden,
            activated,
        },
    ))
}

pub fn block_forward(z: &TokenVolume, kind: BlockKind, params: &BlockParams, cfg: &EmimConfig) -> Result<TokenVolume> {
    Ok(forward_impl(z, kind, params, cfg)?.0)
}

pub fn block_forward_saved(z: &TokenVolume, kind: BlockKind, params: &BlockParams, cfg: &EmimConfig) -> Result<(TokenVolume, BlockTape)> {
    let (out, saved) = forward_impl(z, kind, params, cfg)?;
    Ok((out, BlockTape(Some(Box::new(saved)))))
}

/// Returns `(dz, parameter gradients)`.
pub fn block_backward(d_out: &TokenVolume, tape: &BlockTape, params: &BlockParams, cfg: &EmimConfig) -> Result<(TokenVolume, BlockParams)> {
    let s = tape
        .0
        .as_deref()
        .ok_or_else(|| Error::State("block_backward called without saved activations".into()))?;
    let (d_act, g_fc2) = linear_backward(&s.activated, &params.ffn.fc2, d_out.tensor())?;
    let d_hidden = gelu_backward(&s.hidden, &d_act)?;
    let (d_normed2, g_fc1) = linear_backward(&s.normed2, &params.ffn.fc1, &d_hidden)?;
    let (d_y_ffn, g_gamma2, g_beta2) = layernorm_rows_backward(s.y.tensor(), &params.norm2.gamma, &d_normed2)?;
    let mut d_y = d_out.tensor().clone();
    d_y.add_assign(&d_y_ffn)?;
    let d_y = TokenVolume::from_tensor(d_y)?;

    let (d_normed1, g_attn) = match (&s.attn, &params.attn) {
        (AttnTape::Original(t), AttentionParams::Original(p)) => {
            let (d, g) = global_attention_backward(&d_y, t, p).context(|| "global attention backward".into())?;
            (d, AttentionParams::Original(g))
        }
        (AttnTape::Emim(t), AttentionParams::Emim(p)) => {
            let (d, g) = emim_backward(&d_y, t, p, cfg).context(|| "windowed attention backward".into())?;
            (d, AttentionParams::Emim(g))
        }
        _ => return Err(Error::State("saved activations belong to a different block kind".into())),
    };
    debug_assert_eq!(d_normed1.dims(), s.normed1.dims());
    let (d_z_attn, g_gamma1, g_beta1) = layernorm_rows_backward(s.z.tensor(), &params.norm1.gamma, d_normed1.tensor())?;
    let mut d_z = d_y.into_tensor();
    d_z.add_assign(&d_z_attn)?;
    Ok((
        TokenVolume::from_tensor(d_z)?,
        BlockParams {
            norm1: NormParams { gamma: g_gamma1, beta: g_beta1 },
            attn: g_attn,
            norm2: NormParams { gamma: g_gamma2, beta: g_beta2 },
            ffn: FfnParams { fc1: g_fc1, fc2: g_fc2 },
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{appearance_forward, MotionMlpParams, VolumeDims};
    use crate::tensor::gelu;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(d: VolumeDims, rng: &mut ChaCha8Rng) -> TokenVolume {
        TokenVolume::from_tensor(Tensor::randn(&d.shape(), 1.0, rng)).unwrap()
    }

    #[test]
    fn zeroed_output_maps_make_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = VolumeDims { frames: 2, height: 4, width: 4, channels: 4 };
        let cfg = EmimConfig { radius: 1, heads: 2, ..Default::default() };
        let z = random_volume(d, &mut rng);
        for kind in [BlockKind::Original, BlockKind::Emim] {
            let mut p = BlockParams::init(kind, 4, 4, &cfg, &mut rng);
            *p.attn.output_projection_mut() = LinearParams::zeros(4, 4);
            p.ffn.fc2 = LinearParams::zeros(16, 4);
            assert_eq!(block_forward(&z, kind, &p, &cfg).unwrap(), z);
        }
    }

    #[test]
    fn single_token_original_block_matches_composed_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = VolumeDims { frames: 1, height: 1, width: 1, channels: 3 };
        let cfg = EmimConfig { radius: 0, heads: 1, ..Default::default() };
        let z = random_volume(d, &mut rng);
        let mut p = BlockParams::init(BlockKind::Original, 3, 4, &cfg, &mut rng);
        p.norm1.gamma = Tensor::randn(&[3], 1.0, &mut rng);
        p.norm2.beta = Tensor::randn(&[3], 1.0, &mut rng);
        let out = block_forward(&z, BlockKind::Original, &p, &cfg).unwrap();

        // with one token, softmax weight is 1 and attention is o(v(LN(z)))
        let AttentionParams::Original(g) = &p.attn else { unreachable!() };
        let ln = |x: &[f64], n: &NormParams| crate::tensor::layernorm(x, n.gamma.data(), n.beta.data(), 1e-6).unwrap();
        let lin = |x: &[f64], l: &LinearParams| -> Vec<f64> {
            (0..l.out_dim())
                .map(|o| l.bias.data()[o] + (0..l.in_dim()).map(|i| l.weight.at(&[o, i]) * x[i]).sum::<f64>())
                .collect()
        };
        let zt = z.data();
        let v_path = lin(&lin(&ln(zt, &p.norm1), &g.v), &g.o);
        let y: Vec<f64> = zt.iter().zip(&v_path).map(|(a, b)| a + b).collect();
        let h: Vec<f64> = lin(&ln(&y, &p.norm2), &p.ffn.fc1).into_iter().map(gelu).collect();
        let f = lin(&h, &p.ffn.fc2);
        for ((o, a), b) in out.data().iter().zip(&y).zip(&f) {
            assert!((o - (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn emim_block_without_motion_matches_appearance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = VolumeDims { frames: 2, height: 4, width: 4, channels: 4 };
        let cfg = EmimConfig { radius: 1, heads: 2, ..Default::default() };
        let z = random_volume(d, &mut rng);
        let mut p = BlockParams::init(BlockKind::Emim, 4, 4, &cfg, &mut rng);
        if let AttentionParams::Emim(e) = &mut p.attn {
            e.motion = Some(MotionMlpParams::zeros(9, 2));
        }
        let out = block_forward(&z, BlockKind::Emim, &p, &cfg).unwrap();
        let AttentionParams::Emim(e) = &p.attn else { unreachable!() };
        let normed = norm(&z, &p.norm1).unwrap();
        let a = appearance_forward(&normed, e, &cfg).unwrap();
        let y = z.tensor().add(a.tensor()).unwrap();
        let n2 = layernorm_rows(&y, &p.norm2.gamma, &p.norm2.beta).unwrap();
        let f = linear_forward(&gelu_tensor(&linear_forward(&n2, &p.ffn.fc1).unwrap()), &p.ffn.fc2).unwrap();
        let expected = y.add(&f).unwrap();
        assert!(out.tensor().max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn kind_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EmimConfig { radius: 0, ..Default::default() };
        let p = BlockParams::init(BlockKind::Original, 2, 4, &cfg, &mut rng);
        let z = TokenVolume::zeros(VolumeDims { frames: 1, height: 1, width: 1, channels: 2 });
        assert!(block_forward(&z, BlockKind::Emim, &p, &cfg).unwrap_err().is_config());
        assert!(block_backward(&z, &BlockTape::default(), &p, &cfg).is_err());
    }
}
