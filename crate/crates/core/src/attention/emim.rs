//! The full windowed cross-frame attention layer: projections, affinity,
//! contextual aggregation, motion features and the output projection, with
//! an analytic backward pass.

use rand::Rng;

use super::kernels::{
    affinity_with_table, aggregate_with_table, motion_forward_parts, AffinityField, MotionMlpParams, MotionParts,
    RelPosBias,
};
use super::window::{WindowTable, PAD};
use super::{EmimConfig, Sampling, TokenVolume};
use crate::error::{Error, Result, ResultExt};
use crate::params::{join, Parameters};
use crate::tensor::{gelu_backward, linear_backward, linear_forward, softmax_backward_into, softmax_in_place, LinearParams, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EmimParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub rel_bias: RelPosBias,
    /// `None` removes the motion path entirely.
    pub motion: Option<MotionMlpParams>,
}

impl EmimParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, cfg: &EmimConfig, rng: &mut R) -> Self {
        Self {
            q: LinearParams::init(channels, channels, rng),
            k: LinearParams::init(channels, channels, rng),
            v: LinearParams::init(channels, channels, rng),
            o: LinearParams::init(channels, channels, rng),
            rel_bias: RelPosBias::zeros(cfg.heads, cfg.radius),
            motion: Some(MotionMlpParams::init(cfg.window_len(), cfg.head_dim(channels), rng)),
        }
    }

    /// Identity projections, zero bias table, zero motion MLP.
    pub fn identity(channels: usize, cfg: &EmimConfig) -> Self {
        Self {
            q: LinearParams::identity(channels),
            k: LinearParams::identity(channels),
            v: LinearParams::identity(channels),
            o: LinearParams::identity(channels),
            rel_bias: RelPosBias::zeros(cfg.heads, cfg.radius),
            motion: Some(MotionMlpParams::zeros(cfg.window_len(), cfg.head_dim(channels))),
        }
    }

    pub fn without_motion(mut self) -> Self {
        self.motion = None;
        self
    }

    pub fn check(&self, channels: usize, cfg: &EmimConfig) -> Result<()> {
        for (name, p) in [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)] {
            if p.in_dim() != channels || p.out_dim() != channels {
                return Err(Error::config(format!(
                    "projection {name} is {:?}, expected [{channels}, {channels}]",
                    p.weight.shape()
                )));
            }
        }
        self.rel_bias.check(cfg)?;
        if let Some(m) = &self.motion {
            m.check(cfg.window_len())?;
            if m.head_dim() * cfg.heads != channels {
                return Err(Error::config(format!(
                    "motion MLP emits {} channels per head, expected {}",
                    m.head_dim(),
                    channels / cfg.heads
                )));
            }
        }
        Ok(())
    }
}

impl Parameters for EmimParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
        f(&join(prefix, "rel_bias"), &self.rel_bias.table);
        if let Some(m) = &self.motion {
            m.fc1.visit(&join(prefix, "motion.fc1"), f);
            m.fc2.visit(&join(prefix, "motion.fc2"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
        f(&join(prefix, "rel_bias"), &mut self.rel_bias.table);
        if let Some(m) = &mut self.motion {
            m.fc1.visit_mut(&join(prefix, "motion.fc1"), f);
            m.fc2.visit_mut(&join(prefix, "motion.fc2"), f);
        }
    }
}

struct Saved {
    x: TokenVolume,
    q: TokenVolume,
    k: TokenVolume,
    v: TokenVolume,
    raw: AffinityField,
    norm: AffinityField,
    motion: Option<MotionParts>,
    combined: TokenVolume,
    table: WindowTable,
}

/// Activations recorded by [`emim_forward_saved`] and consumed by
/// [`emim_backward`]. The default value holds nothing.
#[derive(Default)]
pub struct EmimTape(Option<Box<Saved>>);

impl EmimTape {
    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }

    /// Raw affinity of the recorded forward pass.
    pub fn raw_affinity(&self) -> Option<&AffinityField> {
        self.0.as_ref().map(|s| &s.raw)
    }

    pub fn normalized_affinity(&self) -> Option<&AffinityField> {
        self.0.as_ref().map(|s| &s.norm)
    }
}

fn project(x: &TokenVolume, p: &LinearParams) -> Result<TokenVolume> {
    TokenVolume::from_tensor(linear_forward(x.tensor(), p)?)
}

fn forward_impl(x: &TokenVolume, params: &EmimParams, cfg: &EmimConfig, with_motion: bool) -> Result<(TokenVolume, Saved)> {
    cfg.validate(x.dims())?;
    params.check(x.channels(), cfg)?;
    let q = project(x, &params.q).context(|| "query projection".into())?;
    let k = project(x, &params.k).context(|| "key projection".into())?;
    let v = project(x, &params.v).context(|| "value projection".into())?;
    let table = WindowTable::build(x.dims(), cfg);
    let raw = affinity_with_table(&q, &k, &params.rel_bias, cfg, &table);
    let mut norm_values = raw.values().clone();
    for row in norm_values.data_mut().chunks_exact_mut(cfg.window_len()) {
        softmax_in_place(row);
    }
    let norm = AffinityField::from_parts(norm_values, true, raw.dims(), *cfg);
    let appearance = aggregate_with_table(&norm, &v, cfg, &table);
    let (combined, motion) = match (&params.motion, with_motion) {
        (Some(mlp), true) => {
            let parts = motion_forward_parts(&raw, mlp).context(|| "motion path".into())?;
            let combined = super::combine_features(&appearance, &parts.output)?;
            (combined, Some(parts))
        }
        _ => (appearance, None),
    };
    let out = project(&combined, &params.o).context(|| "output projection".into())?;
    let saved = Saved {
        x: x.clone(),
        q,
        k,
        v,
        raw,
        norm,
        motion,
        combined,
        table,
    };
    Ok((out, saved))
}

/// Forward pass of the layer.
pub fn emim_forward(x: &TokenVolume, params: &EmimParams, cfg: &EmimConfig) -> Result<TokenVolume> {
    Ok(forward_impl(x, params, cfg, true)?.0)
}

/// Forward pass that also records what [`emim_backward`] needs.
pub fn emim_forward_saved(x: &TokenVolume, params: &EmimParams, cfg: &EmimConfig) -> Result<(TokenVolume, EmimTape)> {
    let (out, saved) = forward_impl(x, params, cfg, true)?;
    Ok((out, EmimTape(Some(Box::new(saved)))))
}

/// The same pipeline with the motion path skipped: projections, affinity,
/// softmax, aggregation, output projection.
pub fn appearance_forward(x: &TokenVolume, params: &EmimParams, cfg: &EmimConfig) -> Result<TokenVolume> {
    Ok(forward_impl(x, params, cfg, false)?.0)
}

/// Windowed attention where every query shares the centre-anchored window.
pub fn nonsliding_forward(x: &TokenVolume, params: &EmimParams, cfg: &EmimConfig) -> Result<TokenVolume> {
    if cfg.sampling != Sampling::NonSliding {
        return Err(Error::config("nonsliding_forward requires sampling = non_sliding"));
    }
    emim_forward(x, params, cfg)
}

/// Returns `(dx, parameter gradients)`. Gradients share the parameter layout;
/// an absent motion path has no gradient entries.
pub fn emim_backward(
    upstream: &TokenVolume,
    tape: &EmimTape,
    params: &EmimParams,
    cfg: &EmimConfig,
) -> Result<(TokenVolume, EmimParams)> {
    let s = tape
        .0
        .as_deref()
        .ok_or_else(|| Error::State("emim_backward called without saved activations".into()))?;
    let dims = s.x.dims();
    upstream.same_shape(&s.x, "emim_backward")?;
    let n = dims.tokens();
    let c = dims.channels;
    let heads = cfg.heads;
    let dh = cfg.head_dim(c);
    let wl = cfg.window_len();
    let scale = 1.0 / (dh as f64).sqrt();

    let (d_combined, grad_o) = linear_backward(s.combined.tensor(), &params.o, upstream.tensor())?;

    // dA accumulates the motion-path and softmax-path contributions.
    let mut d_raw = vec![0.0; heads * n * wl];
    let mut motion_grad = None;
    if let (Some(parts), Some(mlp)) = (&s.motion, &params.motion) {
        let mut d_rows = Tensor::zeros(&[heads * n, dh]);
        {
            let dr = d_rows.data_mut();
            let dc = d_combined.data();
            for h in 0..heads {
                for qi in 0..n {
                    dr[(h * n + qi) * dh..(h * n + qi + 1) * dh]
                        .copy_from_slice(&dc[qi * c + h * dh..qi * c + (h + 1) * dh]);
                }
            }
        }
        let (d_act, g2) = linear_backward(&parts.activated, &mlp.fc2, &d_rows)?;
        let d_hidden = gelu_backward(&parts.hidden, &d_act)?;
        let rows = s.raw.values().clone().reshape(&[heads * n, wl])?;
        let (d_a, g1) = linear_backward(&rows, &mlp.fc1, &d_hidden)?;
        d_raw.copy_from_slice(d_a.data());
        motion_grad = Some(MotionMlpParams { fc1: g1, fc2: g2 });
    }

    let mut dv = vec![0.0; n * c];
    let mut d_norm_row = vec![0.0; wl];
    let mut d_soft_row = vec![0.0; wl];
    let pad = vec![cfg.pad_value; dh];
    let (vd, dc) = (s.v.data(), d_combined.data());
    for h in 0..heads {
        let off = h * dh;
        for qi in 0..n {
            let dfq = &dc[qi * c + off..qi * c + off + dh];
            let a_row = s.norm.row(h, qi);
            for (w, &src) in s.table.query(qi).iter().enumerate() {
                let vv = if src == PAD { &pad[..] } else { &vd[src * c + off..src * c + off + dh] };
                d_norm_row[w] = dfq.iter().zip(vv).map(|(a, b)| a * b).sum();
                if src != PAD {
                    for (d, &g) in dv[src * c + off..src * c + off + dh].iter_mut().zip(dfq) {
                        *d += a_row[w] * g;
                    }
                }
            }
            softmax_backward_into(a_row, &d_norm_row, &mut d_soft_row);
            let r = (h * n + qi) * wl;
            for (d, &g) in d_raw[r..r + wl].iter_mut().zip(&d_soft_row) {
                *d += g;
            }
        }
    }

    let mut d_bias = RelPosBias::zeros(heads, cfg.radius);
    if cfg.bias_enabled {
        let bd = d_bias.table.data_mut();
        for h in 0..heads {
            for qi in 0..n {
                let r = (h * n + qi) * wl;
                for (b, &g) in bd[h * wl..(h + 1) * wl].iter_mut().zip(&d_raw[r..r + wl]) {
                    *b += g;
                }
            }
        }
    }

    let mut dq = vec![0.0; n * c];
    let mut dk = vec![0.0; n * c];
    let (qd, kd) = (s.q.data(), s.k.data());
    for h in 0..heads {
        let off = h * dh;
        for qi in 0..n {
            let r = (h * n + qi) * wl;
            let qv = &qd[qi * c + off..qi * c + off + dh];
            for (w, &src) in s.table.query(qi).iter().enumerate() {
                let g = d_raw[r + w] * scale;
                if src == PAD {
                    for d in &mut dq[qi * c + off..qi * c + off + dh] {
                        *d += g * cfg.pad_value;
                    }
                } else {
                    let kv = &kd[src * c + off..src * c + off + dh];
                    for (d, &kx) in dq[qi * c + off..qi * c + off + dh].iter_mut().zip(kv) {
                        *d += g * kx;
                    }
                    for (d, &qx) in dk[src * c + off..src * c + off + dh].iter_mut().zip(qv) {
                        *d += g * qx;
                    }
                }
            }
        }
    }

    let shape = dims.shape();
    let dq = Tensor::new(shape.to_vec(), dq)?;
    let dk = Tensor::new(shape.to_vec(), dk)?;
    let dv = Tensor::new(shape.to_vec(), dv)?;
    let (mut dx, grad_q) = linear_backward(s.x.tensor(), &params.q, &dq)?;
    let (dx_k, grad_k) = linear_backward(s.x.tensor(), &params.k, &dk)?;
    let (dx_v, grad_v) = linear_backward(s.x.tensor(), &params.v, &dv)?;
    dx.add_assign(&dx_k)?;
    dx.add_assign(&dx_v)?;

    let grads = EmimParams {
        q: grad_q,
        k: grad_k,
        v: grad_v,
        o: grad_o,
        rel_bias: d_bias,
        motion: match (&params.motion, motion_grad) {
            (Some(_), Some(g)) => Some(g),
            (Some(m), None) => Some(MotionMlpParams::zeros(m.fc1.in_dim(), m.head_dim())),
            (None, _) => None,
        },
    };
    Ok((TokenVolume::from_tensor(dx)?, grads))
}
