//! Windowed affinity, contextual aggregation and the motion MLP.

use rand::Rng;

use super::window::{WindowTable, PAD};
use super::{EmimConfig, TokenVolume, VolumeDims};
use crate::error::{Error, Result};
use crate::tensor::{gelu_tensor, linear_forward, LinearParams, Tensor};

/// Learnable additive score per window offset, one table per head.
#[derive(Debug, Clone, PartialEq)]
pub struct RelPosBias {
    radius: usize,
    /// `[heads, 2P+1, 2P+1]`, indexed by `(Δx+P, Δy+P)`.
    pub table: Tensor,
}

impl RelPosBias {
    pub fn zeros(heads: usize, radius: usize) -> Self {
        let side = 2 * radius + 1;
        Self {
            radius,
            table: Tensor::zeros(&[heads, side, side]),
        }
    }

    pub fn from_table(table: Tensor) -> Result<Self> {
        match *table.shape() {
            [_, a, b] if a == b && a % 2 == 1 => Ok(Self {
                radius: a / 2,
                table,
            }),
            _ => Err(Error::dimension("RelPosBias", table.shape(), &[0, 0, 0])),
        }
    }

    pub fn heads(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn window_len(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side
    }

    /// Bias row of head `h`, in window-slot order.
    pub fn head(&self, h: usize) -> &[f64] {
        let n = self.window_len();
        &self.table.data()[h * n..(h + 1) * n]
    }

    pub(crate) fn check(&self, cfg: &EmimConfig) -> Result<()> {
        if self.radius != cfg.radius || self.heads() != cfg.heads {
            return Err(Error::config(format!(
                "bias table {:?} does not match radius {} / heads {}",
                self.table.shape(),
                cfg.radius,
                cfg.heads
            )));
        }
        Ok(())
    }
}

/// Per-query window scores, `[heads, T, H, W, (2P+1)²]`. `normalized`
/// distinguishes the softmaxed field from the raw one.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    values: Tensor,
    normalized: bool,
    dims: VolumeDims,
    cfg: EmimConfig,
}

impl AffinityField {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn config(&self) -> &EmimConfig {
        &self.cfg
    }

    /// Spatial layout of the queries (channel extent is that of `q`).
    pub fn dims(&self) -> VolumeDims {
        self.dims
    }

    pub fn heads(&self) -> usize {
        self.cfg.heads
    }

    pub fn window_len(&self) -> usize {
        self.cfg.window_len()
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let s = self.window_len();
        let r = head * self.dims.tokens() + query;
        &self.values.data()[r * s..(r + 1) * s]
    }

    pub fn num_rows(&self) -> usize {
        self.heads() * self.dims.tokens()
    }

    /// Lowest slot index among the row maxima.
    pub fn argmax_slot(&self, head: usize, query: usize) -> usize {
        argmax(self.row(head, query))
    }

    fn same_geometry(&self, cfg: &EmimConfig) -> bool {
        let a = &self.cfg;
        a.radius == cfg.radius
            && a.interval == cfg.interval
            && a.heads == cfg.heads
            && a.sampling == cfg.sampling
            && a.boundary == cfg.boundary
            && a.last_frame == cfg.last_frame
            && a.pad_value.to_bits() == cfg.pad_value.to_bits()
    }

    pub(crate) fn from_parts(values: Tensor, normalized: bool, dims: VolumeDims, cfg: EmimConfig) -> Self {
        Self { values, normalized, dims, cfg }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Two-layer motion MLP applied to each raw affinity row, weights shared by
/// all heads: `(2P+1)² → 4(2P+1)² → d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MotionMlpParams {
    pub fn new(fc1: LinearParams, fc2: LinearParams) -> Result<Self> {
        if fc1.out_dim() != fc2.in_dim() || fc1.out_dim() != 4 * fc1.in_dim() {
            return Err(Error::config(format!(
                "motion MLP extents inconsistent: fc1 {:?}, fc2 {:?}",
                fc1.weight.shape(),
                fc2.weight.shape()
            )));
        }
        Ok(Self { fc1, fc2 })
    }

    pub fn zeros(window_len: usize, head_dim: usize) -> Self {
        Self {
            fc1: LinearParams::zeros(window_len, 4 * window_len),
            fc2: LinearParams::zeros(4 * window_len, head_dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(window_len: usize, head_dim: usize, rng: &mut R) -> Self {
        Self {
            fc1: LinearParams::init(window_len, 4 * window_len, rng),
            fc2: LinearParams::init(4 * window_len, head_dim, rng),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    pub(crate) fn check(&self, window_len: usize) -> Result<()> {
        let hidden = 4 * window_len;
        let ok = self.fc1.in_dim() == window_len
            && self.fc1.out_dim() == hidden
            && self.fc2.in_dim() == hidden;
        if !ok {
            return Err(Error::config(format!(
                "motion MLP fc1 {:?} / fc2 {:?} do not fit a {window_len}-slot window",
                self.fc1.weight.shape(),
                self.fc2.weight.shape()
            )));
        }
        Ok(())
    }
}

/// Raw windowed affinity: scaled per-head inner products plus the offset bias.
pub fn build_affinity(q: &TokenVolume, k: &TokenVolume, bias: &RelPosBias, cfg: &EmimConfig) -> Result<AffinityField> {
    q.same_shape(k, "build_affinity")?;
    cfg.validate(q.dims())?;
    if cfg.bias_enabled {
        bias.check(cfg)?;
    }
    let table = WindowTable::build(q.dims(), cfg);
    Ok(affinity_with_table(q, k, bias, cfg, &table))
}

pub(crate) fn affinity_with_table(
    q: &TokenVolume,
    k: &TokenVolume,
    bias: &RelPosBias,
    cfg: &EmimConfig,
    table: &WindowTable,
) -> AffinityField {
    let dims = q.dims();
    let n = dims.tokens();
    let c = dims.channels;
    let dh = cfg.head_dim(c);
    let s = cfg.window_len();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut values = vec![0.0; cfg.heads * n * s];
    let (qd, kd) = (q.data(), k.data());
    for h in 0..cfg.heads {
        let hb = cfg.bias_enabled.then(|| bias.head(h));
        let off = h * dh;
        for qi in 0..n {
            let qv = &qd[qi * c + off..qi * c + off + dh];
            let pad_dot = qv.iter().sum::<f64>() * cfg.pad_value;
            let row = &mut values[(h * n + qi) * s..(h * n + qi + 1) * s];
            for (w, (out, &src)) in row.iter_mut().zip(table.query(qi)).enumerate() {
                let dot = if src == PAD {
                    pad_dot
                } else {
                    let kv = &kd[src * c + off..src * c + off + dh];
                    qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f64>()
                };
                *out = dot * scale + hb.map_or(0.0, |b| b[w]);
            }
        }
    }
    let values = Tensor::new(vec![cfg.heads, dims.frames, dims.height, dims.width, s], values)
        .expect("affinity extents are positive");
    AffinityField::from_parts(values, false, dims, *cfg)
}

/// Row-wise softmax over the window axis.
pub fn normalize_affinity(a: &AffinityField) -> Result<AffinityField> {
    if a.normalized {
        return Err(Error::State("affinity field is already normalized".into()));
    }
    let mut values = a.values.clone();
    for row in values.data_mut().chunks_exact_mut(a.window_len()) {
        crate::tensor::softmax_in_place(row);
    }
    Ok(AffinityField::from_parts(values, true, a.dims, a.cfg))
}

/// Affinity-weighted sum of each query's value window, heads re-concatenated.
pub fn aggregate_context(a_norm: &AffinityField, v: &TokenVolume, cfg: &EmimConfig) -> Result<TokenVolume> {
    if !a_norm.normalized {
        return Err(Error::State("contextual aggregation needs a normalized affinity field".into()));
    }
    if !a_norm.same_geometry(cfg) {
        return Err(Error::config("affinity field was built with a different window configuration"));
    }
    let vd = v.dims();
    let ad = a_norm.dims;
    if (vd.frames, vd.height, vd.width) != (ad.frames, ad.height, ad.width) {
        return Err(Error::dimension("aggregate_context", &ad.shape(), &vd.shape()));
    }
    cfg.validate(vd)?;
    let table = WindowTable::build(vd, cfg);
    Ok(aggregate_with_table(a_norm, v, cfg, &table))
}

pub(crate) fn aggregate_with_table(a_norm: &AffinityField, v: &TokenVolume, cfg: &EmimConfig, table: &WindowTable) -> TokenVolume {
    let dims = v.dims();
    let n = dims.tokens();
    let c = dims.channels;
    let dh = cfg.head_dim(c);
    let mut out = TokenVolume::zeros(dims);
    let pad = vec![cfg.pad_value; dh];
    let vd = v.data();
    let od = out.data_mut();
    for h in 0..cfg.heads {
        let off = h * dh;
        for qi in 0..n {
            let acc = &mut od[qi * c + off..qi * c + off + dh];
            for (&wgt, &src) in a_norm.row(h, qi).iter().zip(table.query(qi)) {
                let vv = if src == PAD { &pad[..] } else { &vd[src * c + off..src * c + off + dh] };
                for (o, &x) in acc.iter_mut().zip(vv) {
                    *o += wgt * x;
                }
            }
        }
    }
    out
}

/// Motion feature of every query: the MLP applied per head to the raw
/// affinity row, heads concatenated.
pub fn motion_transform(a_raw: &AffinityField, p: &MotionMlpParams) -> Result<TokenVolume> {
    if a_raw.normalized {
        return Err(Error::State("motion features are computed from the raw affinity field".into()));
    }
    p.check(a_raw.window_len())?;
    Ok(motion_forward_parts(a_raw, p)?.output)
}

pub(crate) struct MotionParts {
    /// fc1 output, `[heads·N, 4S²]`.
    pub hidden: Tensor,
    /// gelu(hidden).
    pub activated: Tensor,
    pub output: TokenVolume,
}

pub(crate) fn motion_forward_parts(a_raw: &AffinityField, p: &MotionMlpParams) -> Result<MotionParts> {
    let heads = a_raw.heads();
    let n = a_raw.dims.tokens();
    let rows = a_raw.values.clone().reshape(&[heads * n, a_raw.window_len()])?;
    let hidden = linear_forward(&rows, &p.fc1)?;
    let activated = gelu_tensor(&hidden);
    let per_head = linear_forward(&activated, &p.fc2)?;
    let dh = p.head_dim();
    let dims = a_raw.dims.with_channels(heads * dh);
    let mut output = TokenVolume::zeros(dims);
    let od = output.data_mut();
    for h in 0..heads {
        for qi in 0..n {
            let src = per_head.row(h * n + qi);
            od[qi * heads * dh + h * dh..qi * heads * dh + (h + 1) * dh].copy_from_slice(src);
        }
    }
    Ok(MotionParts { hidden, activated, output })
}

/// Elementwise sum of appearance and motion features.
pub fn combine_features(f: &TokenVolume, m: &TokenVolume) -> Result<TokenVolume> {
    f.same_shape(m, "combine_features")?;
    TokenVolume::from_tensor(f.tensor().add(m.tensor())?)
}
